//! Per-frame detections, labelled boxes and the scenario container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::predictor::ImageSize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidArgument(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(Self { bbox, score })
    }
}

/// A box with an identity: a ground-truth object or a tracker output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Labeled {
    pub id: u64,
    pub bbox: BoundingBox,
}

impl Labeled {
    pub const fn new(id: u64, bbox: BoundingBox) -> Self {
        Self { id, bbox }
    }
}

/// Labelled boxes for each frame; index 0 is frame 1.
pub type FrameLabels = Vec<Vec<Labeled>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub image_size: ImageSize,
    /// Detections for each frame; index 0 is frame 1.
    pub frames: Vec<Vec<Detection>>,
    pub ground_truth: Option<FrameLabels>,
}

impl Scenario {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// Ground-truth tracks as contiguous box runs, ordered by id then time.
    /// A track absent for some frames is split at the gap.
    pub fn gt_tracks(&self) -> Vec<(u64, Vec<BoundingBox>)> {
        self.ground_truth.as_deref().map(contiguous_tracks).unwrap_or_default()
    }

    /// Distinct ground-truth ids in ascending order.
    pub fn gt_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.ground_truth.iter().flatten().flatten().map(|l| l.id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Splits per-frame labels into contiguous runs per id.
pub fn contiguous_tracks(frames: &[Vec<Labeled>]) -> Vec<(u64, Vec<BoundingBox>)> {
    let mut by_id: std::collections::BTreeMap<u64, Vec<(usize, BoundingBox)>> = Default::default();
    for (t, frame) in frames.iter().enumerate() {
        for l in frame {
            by_id.entry(l.id).or_default().push((t, l.bbox));
        }
    }
    let mut out = Vec::new();
    for (id, obs) in by_id {
        let mut run: Vec<BoundingBox> = Vec::new();
        let mut last_t = None;
        for (t, b) in obs {
            if last_t.is_some_and(|lt| t != lt + 1) && !run.is_empty() {
                out.push((id, std::mem::take(&mut run)));
            }
            run.push(b);
            last_t = Some(t);
        }
        if !run.is_empty() {
            out.push((id, run));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> BoundingBox {
        BoundingBox::new(x, 0.0, 1.0, 1.0)
    }

    #[test]
    fn tracks_split_at_gaps() {
        let frames = vec![
            vec![Labeled::new(2, b(0.0)), Labeled::new(1, b(10.0))],
            vec![Labeled::new(2, b(1.0))],
            vec![Labeled::new(1, b(12.0))],
            vec![Labeled::new(1, b(13.0)), Labeled::new(2, b(3.0))],
        ];
        let tracks = contiguous_tracks(&frames);
        assert_eq!(
            tracks,
            vec![
                (1, vec![b(10.0)]),
                (1, vec![b(12.0), b(13.0)]),
                (2, vec![b(0.0), b(1.0)]),
                (2, vec![b(3.0)]),
            ]
        );
    }

    #[test]
    fn detection_score_range() {
        assert!(Detection::new(b(0.0), 1.2).is_err());
        assert!(Detection::new(b(0.0), -0.1).is_err());
        assert!(Detection::new(b(0.0), 0.0).is_ok());
    }
}
