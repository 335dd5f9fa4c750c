//! Constant-velocity Kalman filter over `(cx, cy, w, h)` and their rates.
//!
//! Noise standard deviations scale with the current box width/height, as in
//! the SORT family of trackers.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoundingBox, Velocity};

pub type StateVec = SVector<f64, 8>;
pub type StateCov = SMatrix<f64, 8, 8>;
type Obs = SVector<f64, 4>;
type ObsMat = SMatrix<f64, 4, 8>;

/// Box sizes below this many pixels are treated as this size when scaling noise.
const MIN_NOISE_SCALE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KalmanConfig {
    /// Position std as a fraction of box size.
    pub std_weight_position: f64,
    /// Velocity std as a fraction of box size.
    pub std_weight_velocity: f64,
}

impl Default for KalmanConfig {
    fn default() -> Self {
        Self {
            std_weight_position: 1.0 / 20.0,
            std_weight_velocity: 1.0 / 160.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KalmanState {
    pub mean: StateVec,
    pub covariance: StateCov,
}

impl KalmanState {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox::new(self.mean[0], self.mean[1], self.mean[2], self.mean[3]).clamped()
    }

    pub fn velocity(&self) -> Velocity {
        Velocity::new(self.mean[4], self.mean[5], self.mean[6], self.mean[7])
    }
}

fn scales(mean: &StateVec) -> [f64; 4] {
    let w = mean[2].abs().max(MIN_NOISE_SCALE);
    let h = mean[3].abs().max(MIN_NOISE_SCALE);
    [w, h, w, h]
}

fn observation_matrix() -> ObsMat {
    ObsMat::from_fn(|r, c| if r == c { 1.0 } else { 0.0 })
}

fn transition() -> StateCov {
    let mut f = StateCov::identity();
    for i in 0..4 {
        f[(i, i + 4)] = 1.0;
    }
    f
}

fn symmetrize(p: &mut StateCov) {
    *p = (*p + p.transpose()) * 0.5;
}

impl KalmanConfig {
    /// Mean `(box, 0)`; diagonal covariance with inflated velocity terms.
    pub fn init(&self, b: &BoundingBox) -> KalmanState {
        let mut mean = StateVec::zeros();
        mean.fixed_rows_mut::<4>(0).copy_from_slice(&b.to_array());
        let s = scales(&mean);
        let mut cov = StateCov::zeros();
        for i in 0..4 {
            cov[(i, i)] = (2.0 * self.std_weight_position * s[i]).powi(2);
            cov[(i + 4, i + 4)] = (10.0 * self.std_weight_velocity * s[i]).powi(2);
        }
        KalmanState { mean, covariance: cov }
    }

    pub fn process_noise(&self, mean: &StateVec) -> StateCov {
        let s = scales(mean);
        let mut q = StateCov::zeros();
        for i in 0..4 {
            q[(i, i)] = (self.std_weight_position * s[i]).powi(2);
            q[(i + 4, i + 4)] = (self.std_weight_velocity * s[i]).powi(2);
        }
        q
    }

    /// `x ← F x`, `P ← F P Fᵀ + Q`.
    pub fn predict(&self, s: &KalmanState) -> KalmanState {
        let f = transition();
        let mean = f * s.mean;
        let mut covariance = f * s.covariance * f.transpose() + self.process_noise(&s.mean);
        symmetrize(&mut covariance);
        KalmanState { mean, covariance }
    }

    /// Gain-weighted correction towards measurement `z` (Joseph form).
    pub fn update(&self, s: &KalmanState, z: &BoundingBox) -> Result<KalmanState> {
        let h = observation_matrix();
        let sc = scales(&s.mean);
        let r = SMatrix::<f64, 4, 4>::from_diagonal(&Obs::from_fn(|i, _| (self.std_weight_position * sc[i]).powi(2)));
        let innovation_cov = h * s.covariance * h.transpose() + r;
        let chol = innovation_cov.cholesky().ok_or(Error::InnovationNotPositiveDefinite)?;
        // K = P Hᵀ S⁻¹, solved as S Kᵀ = H P
        let gain = chol.solve(&(h * s.covariance)).transpose();
        let z = Obs::from_row_slice(&z.to_array());
        let mean = s.mean + gain * (z - h * s.mean);
        let ikh = StateCov::identity() - gain * h;
        let mut covariance = ikh * s.covariance * ikh.transpose() + gain * r * gain.transpose();
        symmetrize(&mut covariance);
        if !mean.iter().chain(covariance.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("kalman update"));
        }
        Ok(KalmanState { mean, covariance })
    }

    /// Runs the filter over a box history and returns the state after the
    /// last update.
    pub fn filter(&self, history: &[BoundingBox]) -> Result<KalmanState> {
        let (first, rest) = history.split_first().ok_or(Error::EmptyHistory)?;
        let mut s = self.init(first);
        for z in rest {
            s = self.update(&self.predict(&s), z)?;
        }
        Ok(s)
    }
}

pub fn kf_init(b: &BoundingBox) -> KalmanState {
    KalmanConfig::default().init(b)
}

pub fn kf_predict(s: &KalmanState) -> KalmanState {
    KalmanConfig::default().predict(s)
}

pub fn kf_update(s: &KalmanState, z: &BoundingBox) -> Result<KalmanState> {
    KalmanConfig::default().update(s, z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b() -> BoundingBox {
        BoundingBox::new(100.0, 200.0, 40.0, 80.0)
    }

    fn is_symmetric(p: &StateCov, tol: f64) -> bool {
        (p - p.transpose()).abs().max() <= tol
    }

    #[test]
    fn init_state() {
        let s = kf_init(&b());
        assert_eq!(s.bbox(), b());
        assert_eq!(s.velocity(), Velocity::ZERO);
        assert!(is_symmetric(&s.covariance, 0.0));
        assert!(s.covariance.symmetric_eigen().eigenvalues.iter().all(|&e| e >= 0.0));
    }

    #[test]
    fn predict_with_zero_velocity_keeps_position() {
        let s = kf_init(&b());
        let p = kf_predict(&s);
        assert_eq!(p.bbox(), b());
        assert!(p.covariance.trace() >= s.covariance.trace());
    }

    #[test]
    fn predict_advances_by_velocity() {
        let mut s = kf_init(&b());
        s.mean[4] = 1.0;
        let p1 = kf_predict(&s);
        let p2 = kf_predict(&p1);
        assert_eq!(p1.mean[0], 101.0);
        assert_eq!(p2.mean[0], 102.0);
        assert_eq!(p2.mean[1], 200.0);
    }

    #[test]
    fn update_at_prediction_keeps_mean() {
        let s = kf_predict(&kf_init(&b()));
        let u = kf_update(&s, &b()).unwrap();
        assert_eq!(u.bbox(), b());
        assert!(u.covariance.trace() < s.covariance.trace());
    }

    #[test]
    fn repeated_cycles_converge_to_constant_measurement() {
        let z = BoundingBox::new(105.0, 197.0, 41.0, 79.0);
        let mut s = kf_init(&b());
        for _ in 0..50 {
            s = kf_update(&kf_predict(&s), &z).unwrap();
        }
        let m = s.bbox().to_array();
        for (a, e) in m.iter().zip(z.to_array()) {
            assert!((a - e).abs() < 1e-3, "{a} vs {e}");
        }
    }

    #[test]
    fn repeated_updates_approach_measurement_monotonically() {
        let z = BoundingBox::new(110.0, 195.0, 42.0, 78.0);
        let mut s = kf_init(&b());
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let before = s.covariance.trace();
            s = kf_update(&s, &z).unwrap();
            assert!(s.covariance.trace() < before);
            let err = (s.mean[0] - z.cx).abs();
            assert!(err < prev);
            prev = err;
        }
    }

    /// Frames after which the one-step centre error on an exact linear track
    /// stays below 1e-2 px.
    fn burn_in(cfg: &KalmanConfig) -> usize {
        let truth = |t: usize| BoundingBox::new(50.0 + 3.0 * t as f64, 80.0 - 1.5 * t as f64, 30.0, 60.0);
        let mut s = cfg.init(&truth(0));
        let mut last_bad = 0;
        for t in 1..80 {
            let pred = cfg.predict(&s);
            let (e, g) = (pred.bbox().center(), truth(t).center());
            if (e.x - g.x).hypot(e.y - g.y) >= 1e-2 {
                last_bad = t;
            }
            s = cfg.update(&pred, &truth(t)).unwrap();
        }
        last_bad
    }

    #[test]
    fn linear_track_burn_in() {
        // the SORT-family velocity weight converges slowly but surely
        assert!(burn_in(&KalmanConfig::default()) <= 40);
        let responsive = KalmanConfig {
            std_weight_velocity: 1.0 / 40.0,
            ..KalmanConfig::default()
        };
        assert!(burn_in(&responsive) <= 10);
    }

    #[test]
    fn symmetry_over_many_cycles() {
        let mut s = kf_init(&b());
        for t in 0..1000 {
            let z = BoundingBox::new(
                100.0 + (t as f64 * 0.1).sin() * 20.0,
                200.0 + t as f64 * 0.3,
                40.0,
                80.0,
            );
            s = kf_update(&kf_predict(&s), &z).unwrap();
            assert!(is_symmetric(&s.covariance, 1e-9));
            assert!(s.covariance.diagonal().iter().all(|&d| d >= 0.0));
        }
    }

    #[test]
    fn filter_over_history() {
        let hist: Vec<_> = (0..5).map(|t| b().translated(t as f64, 0.0)).collect();
        let s = KalmanConfig::default().filter(&hist).unwrap();
        assert!(s.velocity().dx > 0.0);
        assert!(KalmanConfig::default().filter(&[]).is_err());
    }

    #[test]
    fn degenerate_noise_fails_cleanly() {
        let cfg = KalmanConfig {
            std_weight_position: 0.0,
            std_weight_velocity: 0.0,
        };
        let s = cfg.init(&b());
        assert!(matches!(
            cfg.update(&s, &b()),
            Err(Error::InnovationNotPositiveDefinite)
        ));
    }

    proptest! {
        #[test]
        fn predict_never_shrinks_trace(cx in -500.0f64..500.0, w in 1.0f64..200.0, vx in -20.0f64..20.0) {
            let mut s = kf_init(&BoundingBox::new(cx, 0.0, w, 2.0 * w));
            s.mean[4] = vx;
            let p = kf_predict(&s);
            prop_assert!(p.covariance.trace() >= s.covariance.trace());
            prop_assert!((p.mean[0] - (cx + vx)).abs() < 1e-12);
        }
    }
}
