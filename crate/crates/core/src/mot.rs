//! MOTChallenge text format: `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`.
//!
//! Rows with id −1 are detections; all other rows are labelled boxes
//! (ground truth or tracker output). Writers use two decimals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::BoundingBox;
use crate::predictor::ImageSize;
use crate::scenario::{Detection, FrameLabels, Labeled, Scenario};

pub const DETECTIONS_FILE: &str = "det.txt";
pub const GROUND_TRUTH_FILE: &str = "gt.txt";
pub const INFO_FILE: &str = "scenario.txt";

/// Contents of one MOT text file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MotData {
    pub detections: Vec<Vec<Detection>>,
    pub labels: FrameLabels,
}

impl MotData {
    pub fn num_frames(&self) -> usize {
        self.detections.len()
    }

    fn ensure_frames(&mut self, n: usize) {
        if self.detections.len() < n {
            self.detections.resize_with(n, Vec::new);
            self.labels.resize_with(n, Vec::new);
        }
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(|f| !f.is_empty())
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Parses MOT text. Frames run from 1 to the largest frame index seen.
pub fn parse_mot(text: &str) -> Result<MotData> {
    let mut data = MotData::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if fields.len() < 7 {
            return Err(parse_err(
                line,
                format!("expected at least 7 fields, got {}", fields.len()),
            ));
        }
        let num = |k: usize, what: &str| -> Result<f64> {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| parse_err(line, format!("bad {what} '{}'", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(line, format!("non-finite {what}")))
            }
        };
        let frame = num(0, "frame")?;
        if frame < 1.0 || frame.fract() != 0.0 {
            return Err(parse_err(
                line,
                format!("frame must be a positive integer, got {}", fields[0]),
            ));
        }
        let id = num(1, "id")?;
        if id.fract() != 0.0 || (id < 1.0 && id != -1.0) {
            return Err(parse_err(
                line,
                format!("id must be -1 or a positive integer, got {}", fields[1]),
            ));
        }
        let (w, h) = (num(4, "width")?, num(5, "height")?);
        if w < 0.0 || h < 0.0 {
            return Err(parse_err(line, "negative box size"));
        }
        let bbox = BoundingBox::from_tlwh([num(2, "left")?, num(3, "top")?, w, h]);
        let conf = num(6, "conf")?;
        let t = frame as usize;
        data.ensure_frames(t);
        if id == -1.0 {
            let det = Detection::new(bbox, conf).map_err(|e| parse_err(line, e.to_string()))?;
            data.detections[t - 1].push(det);
        } else {
            data.labels[t - 1].push(Labeled::new(id as u64, bbox));
        }
    }
    Ok(data)
}

fn fmt2(out: &mut String, x: f64) {
    let s = format!("{x:.2}");
    // avoid "-0.00"
    if s.trim_start_matches('-').chars().all(|c| c == '0' || c == '.') {
        out.push_str("0.00");
    } else {
        out.push_str(&s);
    }
}

fn write_row(out: &mut String, frame: usize, id: i64, b: &BoundingBox, conf: f64) {
    let _ = write!(out, "{frame},{id}");
    for v in b.to_tlwh().into_iter().chain([conf]) {
        out.push(',');
        fmt2(out, v);
    }
    out.push_str(",-1,-1,-1\n");
}

/// Detection rows (id −1), one line per detection.
pub fn write_detections(frames: &[Vec<Detection>]) -> String {
    let mut out = String::new();
    for (t, dets) in frames.iter().enumerate() {
        for d in dets {
            write_row(&mut out, t + 1, -1, &d.bbox, d.score);
        }
    }
    out
}

/// Labelled rows with confidence 1, ordered by frame then id.
pub fn write_labels(frames: &[Vec<Labeled>]) -> String {
    let mut out = String::new();
    for (t, labels) in frames.iter().enumerate() {
        let mut sorted = labels.clone();
        sorted.sort_by_key(|l| l.id);
        for l in &sorted {
            write_row(&mut out, t + 1, l.id as i64, &l.bbox, 1.0);
        }
    }
    out
}

/// Reads labelled boxes from a MOT file, padded to `num_frames`.
///
/// Fails if the file has rows beyond `num_frames` or contains detections.
pub fn read_labels(path: impl AsRef<Path>, num_frames: usize) -> Result<FrameLabels> {
    let path = path.as_ref();
    let mut data = parse_mot(&fs::read_to_string(path)?)?;
    if data.num_frames() > num_frames {
        return Err(Error::InvalidArgument(format!(
            "{} covers frames 1..={} but the sequence has {num_frames} frames",
            path.display(),
            data.num_frames()
        )));
    }
    if data.detections.iter().any(|d| !d.is_empty()) {
        return Err(Error::InvalidArgument(format!(
            "{} contains unlabelled rows",
            path.display()
        )));
    }
    data.ensure_frames(num_frames);
    Ok(data.labels)
}

fn write_info(s: &Scenario) -> String {
    format!(
        "name = {}\nwidth = {}\nheight = {}\nframes = {}\n",
        s.name,
        s.image_size.width,
        s.image_size.height,
        s.num_frames()
    )
}

fn parse_info(text: &str) -> Result<(String, ImageSize, usize)> {
    let mut name = None;
    let (mut width, mut height, mut frames) = (None, None, None);
    for (i, raw) in text.lines().enumerate() {
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let (k, v) = raw
            .split_once('=')
            .ok_or_else(|| parse_err(i + 1, "expected key = value"))?;
        let v = v.trim();
        let num = || {
            v.parse::<f64>()
                .map_err(|_| parse_err(i + 1, format!("bad number '{v}'")))
        };
        match k.trim() {
            "name" => name = Some(v.to_string()),
            "width" => width = Some(num()?),
            "height" => height = Some(num()?),
            "frames" => frames = Some(v.parse::<usize>().map_err(|_| parse_err(i + 1, "bad frame count"))?),
            other => return Err(parse_err(i + 1, format!("unknown key '{other}'"))),
        }
    }
    let missing = |k: &str| Error::InvalidArgument(format!("scenario info lacks '{k}'"));
    Ok((
        name.unwrap_or_default(),
        ImageSize::new(
            width.ok_or_else(|| missing("width"))?,
            height.ok_or_else(|| missing("height"))?,
        ),
        frames.ok_or_else(|| missing("frames"))?,
    ))
}

/// Writes `det.txt`, `gt.txt` (when present) and `scenario.txt` into `dir`.
pub fn write_scenario_dir(dir: impl AsRef<Path>, s: &Scenario) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(DETECTIONS_FILE), write_detections(&s.frames))?;
    if let Some(gt) = &s.ground_truth {
        fs::write(dir.join(GROUND_TRUTH_FILE), write_labels(gt))?;
    }
    fs::write(dir.join(INFO_FILE), write_info(s))?;
    Ok(())
}

/// Inverse of [`write_scenario_dir`].
pub fn read_scenario_dir(dir: impl AsRef<Path>) -> Result<Scenario> {
    let dir = dir.as_ref();
    let (name, image_size, num_frames) = parse_info(&fs::read_to_string(dir.join(INFO_FILE))?)?;
    let mut det = parse_mot(&fs::read_to_string(dir.join(DETECTIONS_FILE))?)?;
    if det.num_frames() > num_frames {
        return Err(Error::InvalidArgument(format!(
            "detections extend past frame {num_frames}"
        )));
    }
    det.ensure_frames(num_frames);
    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.exists() {
        Some(read_labels(gt_path, num_frames)?)
    } else {
        None
    };
    Ok(Scenario {
        name,
        image_size,
        frames: det.detections,
        ground_truth,
    })
}
