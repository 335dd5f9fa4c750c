//! Side-by-side evaluation of motion models: one-step prediction error on
//! ground-truth tracks and tracking metrics on full sequences.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{angular_diff, direction_of, BoundingBox};
use crate::kalman::KalmanConfig;
use crate::metrics::{clear_metrics, identity_counts, ClearCounts, IdentityCounts, MATCH_IOU};
use crate::predictor::{build_window, ImageSize, PredictorModel};
use crate::scenario::Scenario;
use crate::tracker::{run_sequence, MotionModelKind, TrackerConfig};

/// One-step Kalman predictions for frames `1..n` of `track`, each made from
/// the filter state updated on all earlier boxes.
pub fn kalman_one_step(track: &[BoundingBox], cfg: &KalmanConfig) -> Result<Vec<BoundingBox>> {
    let Some((first, rest)) = track.split_first() else {
        return Ok(Vec::new());
    };
    let mut s = cfg.init(first);
    let mut out = Vec::with_capacity(rest.len());
    for z in rest {
        let pred = cfg.predict(&s);
        out.push(pred.bbox());
        s = cfg.update(&pred, z)?;
    }
    Ok(out)
}

/// One-step learned predictions for frames `1..n` of `track`.
pub fn learned_one_step(
    track: &[BoundingBox],
    model: &PredictorModel,
    image_size: ImageSize,
) -> Result<Vec<BoundingBox>> {
    let p = model.config.window;
    let windows = (1..track.len())
        .map(|s| build_window(&track[..s], p, image_size))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = windows.iter().collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    model.predict_boxes(&refs)
}

/// Accumulated one-step errors.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepErrors {
    pub count: usize,
    /// Sum of centre L2 errors, px.
    pub sum_displacement: f64,
    /// Sum of angular differences between predicted and true centre motion.
    pub sum_direction: f64,
}

impl StepErrors {
    /// Adds the errors of `predicted[i]` against `track[i + 1]`.
    pub fn add_track(&mut self, track: &[BoundingBox], predicted: &[BoundingBox]) {
        self.add_errors(track, track, predicted);
    }

    /// Like [`StepErrors::add_track`], but directions start from the box the
    /// model observed and errors are measured against `truth`.
    pub fn add_errors(&mut self, observed: &[BoundingBox], truth: &[BoundingBox], predicted: &[BoundingBox]) {
        for ((prev, target), pred) in observed.iter().zip(&truth[1..]).zip(predicted) {
            let (prev, target, pc) = (prev.center(), target.center(), pred.center());
            self.count += 1;
            self.sum_displacement += (pc.x - target.x).hypot(pc.y - target.y);
            let dp = direction_of(pc.x - prev.x, pc.y - prev.y);
            let dt = direction_of(target.x - prev.x, target.y - prev.y);
            self.sum_direction += angular_diff(dp, dt);
        }
    }

    /// Average displacement error; 0 without samples.
    pub fn ade(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_displacement / self.count as f64
        }
    }

    pub fn mean_direction_error(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum_direction / self.count as f64
        }
    }
}

fn ground_truth(s: &Scenario) -> Result<&[Vec<crate::scenario::Labeled>]> {
    s.ground_truth
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("scenario '{}' has no ground truth", s.name)))
}

/// Gaussian jitter applied to ground-truth centres before they are shown to a
/// motion model; targets stay clean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationNoise {
    /// Centre std, px.
    pub center_std: f64,
    pub seed: u64,
}

impl Default for ObservationNoise {
    fn default() -> Self {
        Self {
            center_std: 1.0,
            seed: 0,
        }
    }
}

impl ObservationNoise {
    pub const NONE: ObservationNoise = ObservationNoise {
        center_std: 0.0,
        seed: 0,
    };

    /// Noisy copy of `track`; deterministic in `(seed, stream)`.
    pub fn apply(&self, track: &[BoundingBox], stream: u64) -> Result<Vec<BoundingBox>> {
        if self.center_std == 0.0 {
            return Ok(track.to_vec());
        }
        let dist = Normal::new(0.0, self.center_std)
            .map_err(|_| Error::InvalidArgument(format!("observation noise std {} is invalid", self.center_std)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        Ok(track
            .iter()
            .map(|b| b.translated(dist.sample(&mut rng), dist.sample(&mut rng)))
            .collect())
    }
}

/// One-step errors of `kind` over every ground-truth track of `scenarios`.
/// Models see noisy histories and are scored against the clean boxes.
pub fn one_step_errors(
    scenarios: &[Scenario],
    kind: MotionModelKind,
    kalman: &KalmanConfig,
    model: Option<&PredictorModel>,
    noise: &ObservationNoise,
) -> Result<StepErrors> {
    let mut acc = StepErrors::default();
    let mut stream = 0;
    for s in scenarios {
        ground_truth(s)?;
        for (_, track) in s.gt_tracks() {
            stream += 1;
            let observed = noise.apply(&track, stream)?;
            let pred = match (kind, model) {
                (MotionModelKind::Kalman, _) => kalman_one_step(&observed, kalman)?,
                (MotionModelKind::Learned, Some(m)) => learned_one_step(&observed, m, s.image_size)?,
                (MotionModelKind::Learned, None) => {
                    return Err(Error::InvalidArgument(
                        "motion model 'learned' requires a trained checkpoint".into(),
                    ))
                }
            };
            acc.add_errors(&observed, &track, &pred);
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub model: MotionModelKind,
    pub samples: usize,
    pub ade: f64,
    pub direction_error: f64,
    pub mota: f64,
    pub idf1: f64,
    pub idsw: usize,
}

/// Evaluates the Kalman baseline and, when `model` is given, the learned
/// predictor on `scenarios`.
pub fn compare_models(
    scenarios: &[Scenario],
    tracker: &TrackerConfig,
    model: Option<&PredictorModel>,
    noise: &ObservationNoise,
) -> Result<Vec<ComparisonRow>> {
    let kinds: &[MotionModelKind] = if model.is_some() {
        &MotionModelKind::ALL
    } else {
        &[MotionModelKind::Kalman]
    };
    let mut rows = Vec::new();
    for &kind in kinds {
        let steps = one_step_errors(scenarios, kind, &tracker.kalman, model, noise)?;
        let cfg = TrackerConfig {
            motion_model: kind,
            ..tracker.clone()
        };
        let mut clear = ClearCounts::default();
        let mut ident = IdentityCounts::default();
        for s in scenarios {
            let gt = ground_truth(s)?;
            let hyp = run_sequence(s, &cfg, model)?;
            clear += clear_metrics(gt, &hyp, MATCH_IOU)?;
            ident += identity_counts(gt, &hyp, MATCH_IOU)?;
        }
        rows.push(ComparisonRow {
            model: kind,
            samples: steps.count,
            ade: steps.ade(),
            direction_error: steps.mean_direction_error(),
            mota: clear.mota(),
            idf1: ident.idf1(),
            idsw: clear.idsw,
        });
    }
    Ok(rows)
}

pub const COMPARISON_CSV_HEADER: &str = "model,samples,ADE,dir_err,MOTA,IDF1,IDs";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut s = format!("{COMPARISON_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{:.6},{}",
            r.model, r.samples, r.ade, r.direction_error, r.mota, r.idf1, r.idsw
        );
    }
    s
}

pub fn comparison_pretty(rows: &[ComparisonRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<8} {:>8} {:>9} {:>8} {:>8} {:>8} {:>5}",
        "model", "samples", "ADE(px)", "dir_err", "MOTA", "IDF1", "IDs"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:>8} {:>9.3} {:>8.4} {:>7.2}% {:>7.2}% {:>5}",
            r.model.name(),
            r.samples,
            r.ade,
            r.direction_error,
            100.0 * r.mota,
            100.0 * r.idf1,
            r.idsw
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::PredictorConfig;
    use crate::synth::{generate_scenario, ScenarioKind, ScenarioParams};

    fn linear(n: usize) -> Vec<BoundingBox> {
        (0..n)
            .map(|t| BoundingBox::new(100.0 + 4.0 * t as f64, 50.0 + 2.0 * t as f64, 20.0, 40.0))
            .collect()
    }

    #[test]
    fn kalman_one_step_lengths_and_convergence() {
        let track = linear(60);
        let pred = kalman_one_step(&track, &KalmanConfig::default()).unwrap();
        assert_eq!(pred.len(), 59);
        let last = pred.last().unwrap().center();
        let truth = track.last().unwrap().center();
        assert!((last.x - truth.x).abs() < 1e-2 && (last.y - truth.y).abs() < 1e-2);
        assert!(kalman_one_step(&[], &KalmanConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn step_errors_oracle() {
        let track = [
            BoundingBox::new(0.0, 0.0, 1.0, 1.0),
            BoundingBox::new(3.0, 0.0, 1.0, 1.0),
        ];
        // predicted straight up by 4: distance 5, direction off by π/2
        let pred = [BoundingBox::new(0.0, 4.0, 1.0, 1.0)];
        let mut e = StepErrors::default();
        e.add_track(&track, &pred);
        assert_eq!(e.count, 1);
        assert_eq!(e.ade(), 5.0);
        assert!((e.mean_direction_error() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert_eq!(StepErrors::default().ade(), 0.0);
    }

    #[test]
    fn learned_one_step_zero_head_predicts_last_box() {
        let model = PredictorModel::new(PredictorConfig::default()).unwrap();
        let track = linear(5);
        let pred = learned_one_step(&track, &model, ImageSize::new(640.0, 480.0)).unwrap();
        assert_eq!(pred, track[..4].to_vec());
    }

    #[test]
    fn comparison_rows_and_determinism() {
        let params = ScenarioParams {
            num_frames: 20,
            ..ScenarioParams::with_kind(ScenarioKind::Sinusoidal)
        };
        let suite: Vec<_> = (0..2).map(|s| generate_scenario(&params, s).unwrap()).collect();
        let model = PredictorModel::new(PredictorConfig::default()).unwrap();
        let rows = compare_models(
            &suite,
            &TrackerConfig::default(),
            Some(&model),
            &ObservationNoise::default(),
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].model, MotionModelKind::Kalman);
        assert_eq!(rows[1].model, MotionModelKind::Learned);
        assert_eq!(rows[0].samples, 2 * 3 * 19);
        let again = compare_models(
            &suite,
            &TrackerConfig::default(),
            Some(&model),
            &ObservationNoise::default(),
        )
        .unwrap();
        assert_eq!(comparison_csv(&rows), comparison_csv(&again));
        assert_eq!(
            compare_models(&suite, &TrackerConfig::default(), None, &ObservationNoise::default())
                .unwrap()
                .len(),
            1
        );
        assert!(comparison_pretty(&rows).lines().count() == 3);
    }
}
