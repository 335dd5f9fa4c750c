//! Online tracker: two-stage (high/low score) IoU association of detections
//! with motion-predicted track boxes, plus track lifecycle.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geom::{iou, BoundingBox};
use crate::kalman::{KalmanConfig, KalmanState};
use crate::predictor::{build_window, ImageSize, PredictorModel};
use crate::scenario::{Detection, FrameLabels, Labeled, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionModelKind {
    Kalman,
    Learned,
}

impl MotionModelKind {
    pub const ALL: [MotionModelKind; 2] = [MotionModelKind::Kalman, MotionModelKind::Learned];

    pub fn name(self) -> &'static str {
        match self {
            MotionModelKind::Kalman => "kalman",
            MotionModelKind::Learned => "learned",
        }
    }
}

impl fmt::Display for MotionModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown motion model '{s}' (expected kalman|learned)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Detections at or above this score enter the first stage.
    pub tau_high: f64,
    /// Detections below this score are discarded.
    pub tau_low: f64,
    pub iou_gate_first: f64,
    pub iou_gate_second: f64,
    /// Frames a track may stay unmatched before it is removed.
    pub max_age: u32,
    pub min_score_new_track: f64,
    pub motion_model: MotionModelKind,
    pub kalman: KalmanConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            tau_high: 0.6,
            tau_low: 0.1,
            iou_gate_first: 0.2,
            iou_gate_second: 0.3,
            max_age: 30,
            min_score_new_track: 0.6,
            motion_model: MotionModelKind::Kalman,
            kalman: KalmanConfig::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(self.tau_low) && unit(self.tau_high) && self.tau_low < self.tau_high) {
            return Err(Error::InvalidArgument(
                "thresholds must satisfy 0 <= tau_low < tau_high <= 1".into(),
            ));
        }
        if !(unit(self.iou_gate_first) && unit(self.iou_gate_second)) {
            return Err(Error::InvalidArgument("iou gates must lie in [0, 1]".into()));
        }
        if !unit(self.min_score_new_track) {
            return Err(Error::InvalidArgument("min_score_new_track must lie in [0, 1]".into()));
        }
        let k = &self.kalman;
        if !(k.std_weight_position > 0.0 && k.std_weight_velocity > 0.0) {
            return Err(Error::InvalidArgument("kalman noise weights must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    /// Consecutive frames without a match.
    Inactive(u32),
    Removed,
}

#[derive(Debug, Clone)]
pub struct Track {
    pub id: u64,
    /// Recent boxes, real and pseudo, oldest first.
    pub history: VecDeque<BoundingBox>,
    pub status: TrackStatus,
    pub last_prediction: BoundingBox,
    kalman: Option<KalmanState>,
}

impl Track {
    pub fn is_live(&self) -> bool {
        self.status != TrackStatus::Removed
    }

    pub fn last_box(&self) -> BoundingBox {
        *self.history.back().expect("tracks are created with one box")
    }

    fn push(&mut self, b: BoundingBox, keep: usize) {
        self.history.push_back(b);
        while self.history.len() > keep {
            self.history.pop_front();
        }
    }
}

/// Result of one association stage, in indices of the inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_tracks: Vec<usize>,
    pub unmatched_detections: Vec<usize>,
}

/// Hungarian matching on `1 − IoU`; optimal pairs below `iou_gate` are
/// split back into unmatched.
pub fn match_stage(predicted: &[BoundingBox], detections: &[BoundingBox], iou_gate: f64) -> Result<Assignment> {
    let cost: Vec<Vec<f64>> = predicted
        .iter()
        .map(|p| detections.iter().map(|d| 1.0 - iou(p, d)).collect())
        .collect();
    let pairs = if predicted.is_empty() || detections.is_empty() {
        Vec::new()
    } else {
        hungarian(&cost)?
    };
    let mut track_used = vec![false; predicted.len()];
    let mut det_used = vec![false; detections.len()];
    let mut matches = Vec::new();
    for (t, d) in pairs {
        if 1.0 - cost[t][d] >= iou_gate {
            track_used[t] = true;
            det_used[d] = true;
            matches.push((t, d));
        }
    }
    let unused = |used: &[bool]| used.iter().enumerate().filter(|(_, &u)| !u).map(|(i, _)| i).collect();
    Ok(Assignment {
        matches,
        unmatched_tracks: unused(&track_used),
        unmatched_detections: unused(&det_used),
    })
}

/// What happened to one input detection in a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionFate {
    /// Associated with the track of this id.
    Matched(u64),
    /// Started the track of this id.
    Seeded(u64),
    /// Score below `tau_low`.
    Discarded,
    /// Survived the score floor but matched nothing and seeded nothing.
    Unmatched,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Tracks associated or started in this frame, sorted by id.
    pub tracks: Vec<Labeled>,
    /// One entry per input detection, in input order.
    pub fates: Vec<DetectionFate>,
}

/// Motion model used to roll tracks forward one frame.
#[derive(Debug, Clone, Copy)]
pub enum MotionModel<'a> {
    Kalman(KalmanConfig),
    Learned(&'a PredictorModel),
}

impl<'a> MotionModel<'a> {
    /// The model named by `config`; `learned` needs a checkpoint.
    pub fn from_config(config: &TrackerConfig, model: Option<&'a PredictorModel>) -> Result<Self> {
        match config.motion_model {
            MotionModelKind::Kalman => Ok(MotionModel::Kalman(config.kalman)),
            MotionModelKind::Learned => model
                .map(MotionModel::Learned)
                .ok_or_else(|| Error::InvalidArgument("motion model 'learned' requires a trained checkpoint".into())),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tracker<'a> {
    config: TrackerConfig,
    motion: MotionModel<'a>,
    image_size: ImageSize,
    tracks: Vec<Track>,
    next_id: u64,
    history_len: usize,
}

impl<'a> Tracker<'a> {
    pub fn new(config: TrackerConfig, motion: MotionModel<'a>, image_size: ImageSize) -> Result<Self> {
        config.validate()?;
        // one box beyond the window so the oldest kept state has a velocity
        let history_len = match motion {
            MotionModel::Kalman(_) => 2,
            MotionModel::Learned(m) => m.config.window + 1,
        };
        Ok(Self {
            config,
            motion,
            image_size,
            tracks: Vec::new(),
            next_id: 1,
            history_len,
        })
    }

    /// Tracks not yet removed.
    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    fn predict_all(&mut self) -> Result<()> {
        match self.motion {
            MotionModel::Kalman(cfg) => {
                for t in &mut self.tracks {
                    let s = cfg.predict(t.kalman.as_ref().expect("kalman tracks carry a state"));
                    t.last_prediction = s.bbox();
                    t.kalman = Some(s);
                }
            }
            MotionModel::Learned(model) => {
                if self.tracks.is_empty() {
                    return Ok(());
                }
                let (p, img) = (model.config.window, self.image_size);
                let windows = self
                    .tracks
                    .iter_mut()
                    .map(|t| build_window(t.history.make_contiguous(), p, img))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<_> = windows.iter().collect();
                let boxes = model.predict_boxes(&refs)?;
                for (t, b) in self.tracks.iter_mut().zip(boxes) {
                    t.last_prediction = b;
                }
            }
        }
        Ok(())
    }

    fn spawn(&mut self, b: BoundingBox) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        let kalman = match self.motion {
            MotionModel::Kalman(cfg) => Some(cfg.init(&b)),
            MotionModel::Learned(_) => None,
        };
        let mut history = VecDeque::with_capacity(self.history_len + 1);
        history.push_back(b);
        self.tracks.push(Track {
            id,
            history,
            status: TrackStatus::Active,
            last_prediction: b,
            kalman,
        });
        id
    }

    fn associate(&mut self, track_idx: usize, b: BoundingBox) -> Result<()> {
        let keep = self.history_len;
        let motion = self.motion;
        let t = &mut self.tracks[track_idx];
        if let (MotionModel::Kalman(cfg), Some(s)) = (motion, t.kalman.as_ref()) {
            t.kalman = Some(cfg.update(s, &b)?);
        }
        t.push(b, keep);
        t.status = TrackStatus::Active;
        Ok(())
    }

    /// Processes one frame of detections.
    pub fn step(&mut self, detections: &[Detection]) -> Result<StepOutput> {
        let cfg = self.config.clone();
        let mut fates = vec![DetectionFate::Unmatched; detections.len()];
        let mut high = Vec::new();
        let mut low = Vec::new();
        for (i, d) in detections.iter().enumerate() {
            if d.score >= cfg.tau_high {
                high.push(i);
            } else if d.score >= cfg.tau_low {
                low.push(i);
            } else {
                fates[i] = DetectionFate::Discarded;
            }
        }

        self.predict_all()?;
        let predicted: Vec<_> = self.tracks.iter().map(|t| t.last_prediction).collect();
        let boxes = |idx: &[usize]| idx.iter().map(|&i| detections[i].bbox).collect::<Vec<_>>();

        let first = match_stage(&predicted, &boxes(&high), cfg.iou_gate_first)?;
        let remaining: Vec<usize> = first.unmatched_tracks.clone();
        let remaining_pred: Vec<_> = remaining.iter().map(|&t| predicted[t]).collect();
        let second = match_stage(&remaining_pred, &boxes(&low), cfg.iou_gate_second)?;

        let mut matched = vec![false; self.tracks.len()];
        let mut out = Vec::new();
        let pairs = first
            .matches
            .iter()
            .map(|&(t, d)| (t, high[d]))
            .chain(second.matches.iter().map(|&(t, d)| (remaining[t], low[d])));
        for (t, d) in pairs.collect::<Vec<_>>() {
            let b = detections[d].bbox;
            self.associate(t, b)?;
            matched[t] = true;
            let id = self.tracks[t].id;
            fates[d] = DetectionFate::Matched(id);
            out.push(Labeled::new(id, b));
        }

        let keep = self.history_len;
        for (t, track) in self.tracks.iter_mut().enumerate() {
            if matched[t] {
                continue;
            }
            let n = match track.status {
                TrackStatus::Inactive(n) => n + 1,
                _ => 1,
            };
            if n > cfg.max_age {
                track.status = TrackStatus::Removed;
            } else {
                track.status = TrackStatus::Inactive(n);
                let pseudo = track.last_prediction;
                track.push(pseudo, keep);
            }
        }
        self.tracks.retain(Track::is_live);

        for &d in &first.unmatched_detections {
            let i = high[d];
            if detections[i].score >= cfg.min_score_new_track {
                let id = self.spawn(detections[i].bbox);
                fates[i] = DetectionFate::Seeded(id);
                out.push(Labeled::new(id, detections[i].bbox));
            }
        }
        out.sort_by_key(|l| l.id);
        Ok(StepOutput { tracks: out, fates })
    }
}

/// Runs the tracker over every frame of `scenario`.
pub fn run_sequence(
    scenario: &Scenario,
    config: &TrackerConfig,
    model: Option<&PredictorModel>,
) -> Result<FrameLabels> {
    let motion = MotionModel::from_config(config, model)?;
    let mut tracker = Tracker::new(config.clone(), motion, scenario.image_size)?;
    scenario
        .frames
        .iter()
        .map(|dets| tracker.step(dets).map(|o| o.tracks))
        .collect()
}
