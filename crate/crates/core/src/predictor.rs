//! The learned motion predictor: TCN → temporal encoder → last token →
//! linear head, mapping a window of past states to the next velocity.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoundingBox, StateVector, Velocity};
use crate::layers::Linear;
use crate::nd::{self, Mode, ParamStore, Tape, Tensor, Var};
use crate::tcn::{Tcn, TcnConfig};
use crate::transformer::{Encoder, EncoderConfig};

pub const DEFAULT_WINDOW: usize = 10;
pub const STATE_DIM: usize = 8;

/// Image dimensions in pixels, used to normalize boxes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: f64,
    pub height: f64,
}

impl ImageSize {
    pub const fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    /// Per-component divisors for `(x, y, w, h)`.
    pub fn scales(&self) -> [f64; 4] {
        [self.width, self.height, self.width, self.height]
    }
}

impl Default for ImageSize {
    fn default() -> Self {
        Self::new(1920.0, 1080.0)
    }
}

/// The last `p` states of a track, normalized by image size.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow {
    /// Normalized states, oldest first; always exactly `p` entries.
    pub states: Vec<StateVector>,
    pub image_size: ImageSize,
    /// Most recent box in pixels.
    pub last_box: BoundingBox,
    /// Number of entries that are real observations rather than padding.
    pub observed: usize,
}

impl ObservationWindow {
    /// States converted back to pixels.
    pub fn pixel_states(&self) -> Vec<StateVector> {
        let s = self.image_size.scales();
        self.states
            .iter()
            .map(|st| {
                let b = st.bbox.to_array();
                let v = st.vel.to_array();
                StateVector {
                    bbox: BoundingBox::from_array(std::array::from_fn(|i| b[i] * s[i])),
                    vel: Velocity::from_array(std::array::from_fn(|i| v[i] * s[i])),
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Builds a window from a chronological box history.
///
/// Keeps the latest `min(len, p)` boxes. Each velocity is the change from
/// the preceding box in `history` (zero for the very first box). Short
/// histories are left-padded by repeating the earliest kept box with zero
/// velocity.
pub fn build_window(history: &[BoundingBox], p: usize, image_size: ImageSize) -> Result<ObservationWindow> {
    let Some(&last_box) = history.last() else {
        return Err(Error::EmptyHistory);
    };
    if p == 0 {
        return Err(Error::InvalidArgument("window length must be positive".into()));
    }
    let start = history.len().saturating_sub(p);
    let s = image_size.scales();
    let normalize = |b: &BoundingBox, v: &Velocity| {
        let (b, v) = (b.to_array(), v.to_array());
        StateVector {
            bbox: BoundingBox::from_array(std::array::from_fn(|i| b[i] / s[i])),
            vel: Velocity::from_array(std::array::from_fn(|i| v[i] / s[i])),
        }
    };
    let observed = history.len() - start;
    let mut states = Vec::with_capacity(p);
    let pad = normalize(&history[start], &Velocity::ZERO);
    states.extend(std::iter::repeat_n(pad, p - observed));
    for j in start..history.len() {
        let vel = if j == 0 {
            Velocity::ZERO
        } else {
            history[j].velocity_from(&history[j - 1])
        };
        states.push(normalize(&history[j], &vel));
    }
    Ok(ObservationWindow {
        states,
        image_size,
        last_box,
        observed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub window: usize,
    pub tcn: TcnConfig,
    pub encoder: EncoderConfig,
    /// Fixed gain applied to normalized velocity features on input and
    /// divided out of the head output. Normalized per-frame offsets are
    /// O(1e-3); this brings them to the same range as positions.
    pub velocity_scale: f64,
    pub init_seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            tcn: TcnConfig::default(),
            encoder: EncoderConfig::default(),
            velocity_scale: 1000.0,
            init_seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::InvalidArgument("window length must be positive".into()));
        }
        if self.tcn.input_dim != STATE_DIM {
            return Err(Error::InvalidArgument(format!("tcn input dim must be {STATE_DIM}")));
        }
        if self.tcn.channels != self.encoder.model_dim {
            return Err(Error::InvalidArgument(format!(
                "tcn channels {} != encoder model dim {}",
                self.tcn.channels, self.encoder.model_dim
            )));
        }
        if !(self.velocity_scale.is_finite() && self.velocity_scale > 0.0) {
            return Err(Error::InvalidArgument("velocity scale must be positive".into()));
        }
        self.tcn.validate(self.window)?;
        self.encoder.validate()
    }
}

#[derive(Debug, Clone)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub params: ParamStore,
    tcn: Tcn,
    encoder: Encoder,
    head: Linear,
}

impl PredictorModel {
    /// Fresh model; weights drawn from `config.init_seed`, head zeroed.
    pub fn new(config: PredictorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let tcn = Tcn::new(config.tcn.clone(), &mut params, "tcn", &mut rng)?;
        let encoder = Encoder::new(config.encoder.clone(), &mut params, "encoder", &mut rng)?;
        let head = Linear::zeros(&mut params, "head", config.encoder.model_dim, 4)?;
        Ok(Self {
            config,
            params,
            tcn,
            encoder,
            head,
        })
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    fn features(&self, windows: &[&ObservationWindow]) -> Result<Tensor> {
        let p = self.config.window;
        let vs = self.config.velocity_scale;
        let mut data = Vec::with_capacity(windows.len() * p * STATE_DIM);
        for w in windows {
            if w.states.len() != p {
                return Err(Error::InvalidArgument(format!(
                    "window has {} states, model expects {p}",
                    w.states.len()
                )));
            }
            for s in &w.states {
                let a = s.to_array();
                data.extend_from_slice(&a[..4]);
                data.extend(a[4..].iter().map(|v| v * vs));
            }
        }
        Tensor::matrix(windows.len() * p, STATE_DIM, data)
    }

    /// Normalized velocities `[batch × 4]` for a batch of windows.
    pub fn forward<R: Rng>(
        &self,
        tape: &mut Tape,
        windows: &[&ObservationWindow],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let p = self.config.window;
        let x = tape.constant(self.features(windows)?);
        let h = self.tcn.forward(tape, &self.params, x, p, mode, rng)?;
        let h = self.encoder.forward(tape, &self.params, h, p, mode, rng)?;
        let last: Vec<usize> = (0..windows.len()).map(|b| b * p + p - 1).collect();
        let h = tape.select_rows(h, &last)?;
        let out = self.head.forward(tape, &self.params, h)?;
        tape.scale(out, 1.0 / self.config.velocity_scale)
    }

    /// Pixel velocities for many windows in one eval-mode pass.
    pub fn predict_velocities(&self, windows: &[&ObservationWindow]) -> Result<Vec<Velocity>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        // eval mode never draws from the generator
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.forward(&mut tape, windows, Mode::Eval, &mut rng)?;
        let out = tape.value(v);
        Ok(windows
            .iter()
            .enumerate()
            .map(|(b, w)| {
                let s = w.image_size.scales();
                Velocity::from_array(std::array::from_fn(|i| out.get(b, i) * s[i]))
            })
            .collect())
    }

    pub fn predict_velocity(&self, window: &ObservationWindow) -> Result<Velocity> {
        Ok(self.predict_velocities(&[window])?[0])
    }

    /// Last observed box plus predicted velocity, with `w, h ≥ 0`.
    pub fn predict_box(&self, window: &ObservationWindow) -> Result<BoundingBox> {
        let v = self.predict_velocity(window)?;
        Ok(window.last_box.shifted(&v).clamped())
    }

    pub fn predict_boxes(&self, windows: &[&ObservationWindow]) -> Result<Vec<BoundingBox>> {
        let vs = self.predict_velocities(windows)?;
        Ok(windows
            .iter()
            .zip(vs)
            .map(|(w, v)| w.last_box.shifted(&v).clamped())
            .collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        nd::write_checkpoint(&mut buf, &self.meta()?, &self.params)?;
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, store) = nd::read_checkpoint(bytes)?;
        Self::from_parts(&meta, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nd::save_checkpoint(path, &self.meta()?, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (meta, store) = nd::load_checkpoint(path)?;
        Self::from_parts(&meta, store)
    }

    fn meta(&self) -> Result<String> {
        serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn from_parts(meta: &str, store: ParamStore) -> Result<Self> {
        let config: PredictorConfig =
            serde_json::from_str(meta).map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
        let mut model = Self::new(config)?;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                store.len(),
                model.params.len()
            )));
        }
        for p in store.iter() {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", p.name)))?;
            if model.params.value(id).shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {}", p.name)));
            }
            *model.params.value_mut(id) = p.value.clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMG: ImageSize = ImageSize::new(100.0, 50.0);

    fn tiny_config() -> PredictorConfig {
        PredictorConfig {
            window: 4,
            tcn: TcnConfig {
                channels: 8,
                num_blocks: 2,
                dilations: vec![1, 2],
                kernel_size: 2,
                ..TcnConfig::default()
            },
            encoder: EncoderConfig {
                num_layers: 1,
                num_heads: 2,
                model_dim: 8,
                ffn_dim: 16,
                dropout_rate: 0.1,
            },
            velocity_scale: 10.0,
            init_seed: 3,
        }
    }

    #[test]
    fn single_box_window_is_padded() {
        let b = BoundingBox::new(10.0, 20.0, 4.0, 6.0);
        let w = build_window(&[b], 10, IMG).unwrap();
        assert_eq!(w.len(), 10);
        assert_eq!(w.observed, 1);
        let first = w.states[0];
        assert!(w.states.iter().all(|s| *s == first));
        assert_eq!(first.vel, Velocity::ZERO);
        assert_eq!(first.bbox, BoundingBox::new(0.1, 0.4, 0.04, 0.12));
    }

    #[test]
    fn long_history_keeps_latest_boxes() {
        let history: Vec<_> = (0..=10).map(|i| BoundingBox::new(i as f64, 5.0, 2.0, 2.0)).collect();
        let w = build_window(&history, 10, IMG).unwrap();
        let px = w.pixel_states();
        for (k, s) in px.iter().enumerate() {
            assert!((s.bbox.cx - (k + 1) as f64).abs() < 1e-12);
            assert!((s.vel.dx - 1.0).abs() < 1e-12);
            assert_eq!(s.vel.dy, 0.0);
        }
        assert_eq!(w.last_box, history[10]);
    }

    #[test]
    fn normalization_by_image_size() {
        let w = build_window(&[BoundingBox::new(100.0, 50.0, 10.0, 5.0)], 3, IMG).unwrap();
        assert_eq!(w.states[2].bbox.cx, 1.0);
        assert_eq!(w.states[2].bbox.cy, 1.0);
        assert!(build_window(&[], 3, IMG).is_err());
    }

    #[test]
    fn window_length_is_always_p() {
        for n in 1..25 {
            let h: Vec<_> = (0..n).map(|i| BoundingBox::new(i as f64, 0.0, 1.0, 1.0)).collect();
            let w = build_window(&h, 10, IMG).unwrap();
            assert_eq!(w.len(), 10);
            assert_eq!(w.observed, n.min(10));
        }
    }

    #[test]
    fn zero_head_predicts_no_motion() {
        let model = PredictorModel::new(PredictorConfig::default()).unwrap();
        let h: Vec<_> = (0..6)
            .map(|i| BoundingBox::new(10.0 + 3.0 * i as f64, 10.0, 4.0, 4.0))
            .collect();
        let w = build_window(&h, 10, IMG).unwrap();
        assert_eq!(model.predict_velocity(&w).unwrap(), Velocity::ZERO);
        assert_eq!(model.predict_box(&w).unwrap(), *h.last().unwrap());
    }

    #[test]
    fn predict_box_adds_velocity_and_clamps() {
        let mut model = PredictorModel::new(tiny_config()).unwrap();
        // head bias alone sets the output: normalized (0.01, 0.04, 0, -1) / velocity_scale
        let bias = model.head().bias;
        *model.params.value_mut(bias) = Tensor::vector(vec![0.1, 0.4, 0.0, -10.0]);
        let last = BoundingBox::new(10.0, 10.0, 4.0, 4.0);
        let w = build_window(&[last], 4, IMG).unwrap();
        let v = model.predict_velocity(&w).unwrap();
        assert!((v.dx - 1.0).abs() < 1e-12 && (v.dy - 2.0).abs() < 1e-12);
        let b = model.predict_box(&w).unwrap();
        assert_eq!(b.cx, last.cx + v.dx);
        assert_eq!(b.cy, last.cy + v.dy);
        assert_eq!(b.w, last.w + v.dw);
        assert_eq!(b.h, 0.0);
    }

    #[test]
    fn eval_prediction_is_deterministic() {
        let mut model = PredictorModel::new(tiny_config()).unwrap();
        let head = model.head().weight;
        for (i, v) in model.params.value_mut(head).data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        let h: Vec<_> = (0..7)
            .map(|i| BoundingBox::new(20.0 + i as f64, 30.0 - i as f64, 5.0, 8.0))
            .collect();
        let w = build_window(&h, 4, IMG).unwrap();
        let a = model.predict_velocity(&w).unwrap();
        let b = model.predict_velocity(&w).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Velocity::ZERO);
        // batched and single predictions agree
        let w2 = build_window(&h[..3], 4, IMG).unwrap();
        let both = model.predict_velocities(&[&w2, &w]).unwrap();
        assert_eq!(both[1], a);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = PredictorModel::new(tiny_config()).unwrap();
        let head = model.head().weight;
        model.params.value_mut(head).data_mut()[3] = 0.123456789;
        let bytes = model.to_bytes().unwrap();
        let back = PredictorModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back.params, model.params);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn config_validation() {
        let mut c = PredictorConfig::default();
        c.encoder.model_dim = 16;
        c.encoder.num_heads = 4;
        assert!(PredictorModel::new(c).is_err());
        assert!(PredictorModel::new(PredictorConfig {
            window: 0,
            ..PredictorConfig::default()
        })
        .is_err());
    }
}
