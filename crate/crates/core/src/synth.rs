//! Synthetic scenarios: parametric trajectories plus noisy detections.
//!
//! Time `t = frame - 1`, so frame 1 sits at the start of every trajectory.
//! Detections add Gaussian jitter to the centre and log-normal jitter to
//! the size; scores are Gaussian around `score_mean`, clamped to [0, 1].

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{BoundingBox, Point};
use crate::predictor::ImageSize;
use crate::scenario::{Detection, Labeled, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioKind {
    Linear,
    Sinusoidal,
    Circular,
    Crossing,
    Occlusion,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::Linear,
        ScenarioKind::Sinusoidal,
        ScenarioKind::Circular,
        ScenarioKind::Crossing,
        ScenarioKind::Occlusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Linear => "linear",
            ScenarioKind::Sinusoidal => "sinusoidal",
            ScenarioKind::Circular => "circular",
            ScenarioKind::Crossing => "crossing",
            ScenarioKind::Occlusion => "occlusion",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScenarioKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown scenario kind '{s}' (expected linear|sinusoidal|circular|crossing|occlusion)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioParams {
    pub kind: ScenarioKind,
    pub num_frames: usize,
    /// Ignored for `crossing`, which always has two objects.
    pub num_objects: usize,
    pub image_size: ImageSize,
    /// Upper bound on translation speed, px/frame.
    pub speed: f64,
    /// Upper bound on sinusoidal amplitude, px.
    pub amplitude: f64,
    /// Nominal sinusoidal / circular period, frames.
    pub period: f64,
    /// Upper bound on circle radius, px.
    pub radius: f64,
    /// Vertical offset between crossing objects as a fraction of box height.
    pub crossing_offset: f64,
    /// Detection centre jitter std, px.
    pub center_jitter: f64,
    /// Detection log-size jitter std.
    pub size_jitter: f64,
    pub score_mean: f64,
    pub score_std: f64,
    pub miss_prob: f64,
    /// First and last frame (inclusive) without detections, `occlusion` only.
    pub occlusion_start: usize,
    pub occlusion_end: usize,
    /// Gaussian std, px, added to ground-truth centres.
    pub annotation_noise: f64,
}

impl Default for ScenarioParams {
    fn default() -> Self {
        Self {
            kind: ScenarioKind::Linear,
            num_frames: 60,
            num_objects: 3,
            image_size: ImageSize::new(1280.0, 720.0),
            speed: 6.0,
            amplitude: 60.0,
            period: 32.0,
            radius: 80.0,
            crossing_offset: 0.35,
            center_jitter: 1.0,
            size_jitter: 0.02,
            score_mean: 0.9,
            score_std: 0.05,
            miss_prob: 0.0,
            occlusion_start: 20,
            occlusion_end: 30,
            annotation_noise: 0.0,
        }
    }
}

impl ScenarioParams {
    pub fn with_kind(kind: ScenarioKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Detections equal to ground truth with score 1.
    pub fn noiseless(mut self) -> Self {
        self.center_jitter = 0.0;
        self.size_jitter = 0.0;
        self.score_mean = 1.0;
        self.score_std = 0.0;
        self.miss_prob = 0.0;
        self.annotation_noise = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.num_frames == 0 {
            return bad("num_frames must be positive");
        }
        if self.num_objects == 0 {
            return bad("num_objects must be positive");
        }
        if !(self.image_size.width > 0.0 && self.image_size.height > 0.0) {
            return bad("image size must be positive");
        }
        let nonneg = [
            self.speed,
            self.amplitude,
            self.radius,
            self.crossing_offset,
            self.center_jitter,
            self.size_jitter,
            self.score_std,
            self.annotation_noise,
        ];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("speeds, amplitudes, radii and noise levels must be finite and non-negative");
        }
        if !(self.period.is_finite() && self.period > 0.0) {
            return bad("period must be positive");
        }
        if !(0.0..=1.0).contains(&self.score_mean) || !(0.0..=1.0).contains(&self.miss_prob) {
            return bad("score_mean and miss_prob must lie in [0, 1]");
        }
        if self.kind == ScenarioKind::Occlusion
            && (self.occlusion_start == 0 || self.occlusion_start > self.occlusion_end)
        {
            return bad("occlusion window must satisfy 1 <= start <= end");
        }
        Ok(())
    }
}

/// Centre trajectory of one object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    Linear {
        start: Point,
        velocity: Point,
    },
    /// Drift along `velocity` plus `amplitude · sin(ωt + φ)` along its left normal.
    Sinusoidal {
        start: Point,
        velocity: Point,
        amplitude: f64,
        omega: f64,
        phase: f64,
    },
    /// `center + radius · (cos(ωt + φ), sin(ωt + φ))`.
    Circular {
        center: Point,
        radius: f64,
        omega: f64,
        phase: f64,
    },
}

impl Motion {
    pub fn position(&self, t: f64) -> Point {
        match *self {
            Motion::Linear { start, velocity } => Point {
                x: start.x + velocity.x * t,
                y: start.y + velocity.y * t,
            },
            Motion::Sinusoidal {
                start,
                velocity,
                amplitude,
                omega,
                phase,
            } => {
                let speed = velocity.x.hypot(velocity.y);
                let (nx, ny) = if speed > 0.0 {
                    (-velocity.y / speed, velocity.x / speed)
                } else {
                    (0.0, 1.0)
                };
                let s = amplitude * (omega * t + phase).sin();
                Point {
                    x: start.x + velocity.x * t + s * nx,
                    y: start.y + velocity.y * t + s * ny,
                }
            }
            Motion::Circular {
                center,
                radius,
                omega,
                phase,
            } => Point {
                x: center.x + radius * (omega * t + phase).cos(),
                y: center.y + radius * (omega * t + phase).sin(),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: u64,
    pub motion: Motion,
    pub width: f64,
    pub height: f64,
}

impl ObjectSpec {
    /// Clean box at a 1-based frame.
    pub fn box_at(&self, frame: usize) -> BoundingBox {
        let p = self.motion.position((frame - 1) as f64);
        BoundingBox::new(p.x, p.y, self.width, self.height)
    }
}

fn random_velocity<R: Rng>(rng: &mut R, max_speed: f64) -> Point {
    let speed = rng.random_range(0.3..=1.0) * max_speed;
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    Point {
        x: speed * angle.cos(),
        y: speed * angle.sin(),
    }
}

/// Trajectory parameters for every object, drawn from `seed`.
pub fn generate_objects(params: &ScenarioParams, seed: u64) -> Result<Vec<ObjectSpec>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ImageSize { width: iw, height: ih } = params.image_size;
    let tmax = (params.num_frames - 1) as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let omega = |rng: &mut ChaCha8Rng| {
        let w = two_pi / (params.period * rng.random_range(0.75..=1.25));
        if rng.random_bool(0.5) {
            w
        } else {
            -w
        }
    };

    if params.kind == ScenarioKind::Crossing {
        let w = rng.random_range(30.0..=50.0);
        let h = 2.0 * w;
        let speed = params.speed.max(0.5);
        let half = speed * tmax / 2.0;
        let (cx, cy) = (iw / 2.0, ih / 2.0);
        let mk = |id, x0: f64, vx: f64, y: f64| ObjectSpec {
            id,
            motion: Motion::Linear {
                start: Point { x: x0, y },
                velocity: Point { x: vx, y: 0.0 },
            },
            width: w,
            height: h,
        };
        return Ok(vec![
            mk(1, cx - half, speed, cy),
            mk(2, cx + half, -speed, cy + params.crossing_offset * h),
        ]);
    }

    let mut objects = Vec::with_capacity(params.num_objects);
    for i in 0..params.num_objects {
        let width = rng.random_range(25.0..=60.0);
        let height = width * rng.random_range(1.5..=2.5);
        let margin_x = (0.2 * iw).min(200.0);
        let margin_y = (0.2 * ih).min(200.0);
        let mut start = || Point {
            x: rng.random_range(margin_x..=iw - margin_x),
            y: rng.random_range(margin_y..=ih - margin_y),
        };
        let start = start();
        let motion = match params.kind {
            ScenarioKind::Linear | ScenarioKind::Occlusion | ScenarioKind::Crossing => Motion::Linear {
                start,
                velocity: random_velocity(&mut rng, params.speed),
            },
            ScenarioKind::Sinusoidal => Motion::Sinusoidal {
                start,
                velocity: random_velocity(&mut rng, params.speed),
                amplitude: params.amplitude * rng.random_range(0.5..=1.0),
                omega: omega(&mut rng),
                phase: rng.random_range(0.0..two_pi),
            },
            ScenarioKind::Circular => Motion::Circular {
                center: start,
                radius: params.radius * rng.random_range(0.5..=1.0),
                omega: omega(&mut rng),
                phase: rng.random_range(0.0..two_pi),
            },
        };
        objects.push(ObjectSpec {
            id: i as u64 + 1,
            motion,
            width,
            height,
        });
    }
    Ok(objects)
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated non-negative std")
}

/// Deterministic scenario for `(params, seed)`.
pub fn generate_scenario(params: &ScenarioParams, seed: u64) -> Result<Scenario> {
    let objects = generate_objects(params, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let center = normal(params.center_jitter);
    let size = normal(params.size_jitter);
    let score = normal(params.score_std);
    let annot = normal(params.annotation_noise);

    let occluded = |f: usize| {
        params.kind == ScenarioKind::Occlusion && (params.occlusion_start..=params.occlusion_end).contains(&f)
    };
    let mut frames = Vec::with_capacity(params.num_frames);
    let mut gt = Vec::with_capacity(params.num_frames);
    for f in 1..=params.num_frames {
        let mut dets = Vec::new();
        let mut labels = Vec::new();
        for obj in &objects {
            let clean = obj.box_at(f);
            let noisy_gt = if params.annotation_noise > 0.0 {
                clean.translated(annot.sample(&mut rng), annot.sample(&mut rng))
            } else {
                clean
            };
            labels.push(Labeled::new(obj.id, noisy_gt));
            let missed = params.miss_prob > 0.0 && rng.random_bool(params.miss_prob);
            if occluded(f) || missed {
                continue;
            }
            let b = BoundingBox::new(
                clean.cx + center.sample(&mut rng),
                clean.cy + center.sample(&mut rng),
                clean.w * size.sample(&mut rng).exp(),
                clean.h * size.sample(&mut rng).exp(),
            );
            let s = (params.score_mean + score.sample(&mut rng)).clamp(0.0, 1.0);
            dets.push(Detection { bbox: b, score: s });
        }
        dets.shuffle(&mut rng);
        frames.push(dets);
        gt.push(labels);
    }
    Ok(Scenario {
        name: format!("{}-{seed}", params.kind),
        image_size: params.image_size,
        frames,
        ground_truth: Some(gt),
    })
}

/// Seed of the `index`-th scenario in a suite derived from `seed`.
pub fn suite_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64 + 1)
}

/// `count` scenarios per kind, seeds derived from `seed`.
pub fn generate_suite(base: &ScenarioParams, kinds: &[ScenarioKind], count: usize, seed: u64) -> Result<Vec<Scenario>> {
    let mut out = Vec::with_capacity(kinds.len() * count);
    let mut index = 0;
    for &kind in kinds {
        let params = ScenarioParams { kind, ..base.clone() };
        for _ in 0..count {
            out.push(generate_scenario(&params, suite_seed(seed, index))?);
            index += 1;
        }
    }
    Ok(out)
}
