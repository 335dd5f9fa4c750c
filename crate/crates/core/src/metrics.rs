//! CLEAR MOT counts (FP, FN, IDSW, Frag, MOTA) and IDF1.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::assignment::hungarian;
use crate::error::{Error, Result};
use crate::geom::iou;
use crate::scenario::Labeled;

/// Matching threshold for both CLEAR and IDF1.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ClearCounts {
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub gt_count: usize,
    pub matches: usize,
}

impl ClearCounts {
    pub fn mota(&self) -> f64 {
        mota(self.fp, self.fn_, self.idsw, self.gt_count)
    }
}

/// `1 − (FP + FN + IDSW) / GT`. With no ground truth the denominator is
/// taken as 1, so any false positive drives the score negative.
pub fn mota(fp: usize, fn_: usize, idsw: usize, gt_count: usize) -> f64 {
    1.0 - (fp + fn_ + idsw) as f64 / gt_count.max(1) as f64
}

impl std::ops::AddAssign for ClearCounts {
    fn add_assign(&mut self, o: Self) {
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.idsw += o.idsw;
        self.frag += o.frag;
        self.gt_count += o.gt_count;
        self.matches += o.matches;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct IdentityCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl IdentityCounts {
    /// `2·IDTP / (2·IDTP + IDFP + IDFN)`; 1 when both sides are empty.
    pub fn idf1(&self) -> f64 {
        let denom = 2 * self.idtp + self.idfp + self.idfn;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.idtp as f64 / denom as f64
        }
    }
}

impl std::ops::AddAssign for IdentityCounts {
    fn add_assign(&mut self, o: Self) {
        self.idtp += o.idtp;
        self.idfp += o.idfp;
        self.idfn += o.idfn;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub mota: f64,
    pub idf1: f64,
    pub fp: usize,
    pub fn_: usize,
    pub idsw: usize,
    pub frag: usize,
    pub gt_count: usize,
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "MOTA,IDF1,FP,FN,IDs,Frag,GT,IDTP,IDFP,IDFN";

    pub fn from_counts(c: ClearCounts, id: IdentityCounts) -> Self {
        Self {
            mota: c.mota(),
            idf1: id.idf1(),
            fp: c.fp,
            fn_: c.fn_,
            idsw: c.idsw,
            frag: c.frag,
            gt_count: c.gt_count,
            idtp: id.idtp,
            idfp: id.idfp,
            idfn: id.idfn,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{:.6},{:.6},{},{},{},{},{},{},{},{}",
            self.mota,
            self.idf1,
            self.fp,
            self.fn_,
            self.idsw,
            self.frag,
            self.gt_count,
            self.idtp,
            self.idfp,
            self.idfn
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    pub fn to_pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>6} {:>6} {:>5} {:>5} {:>6}",
            "MOTA", "IDF1", "FP", "FN", "IDs", "Frag", "GT"
        );
        let _ = writeln!(
            s,
            "{:>7.2}% {:>7.2}% {:>6} {:>6} {:>5} {:>5} {:>6}",
            100.0 * self.mota,
            100.0 * self.idf1,
            self.fp,
            self.fn_,
            self.idsw,
            self.frag,
            self.gt_count
        );
        s
    }
}

fn check_inputs(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>]) -> Result<()> {
    if hyp.len() > gt.len() {
        return Err(Error::InvalidArgument(format!(
            "hypothesis covers {} frames but ground truth only {}",
            hyp.len(),
            gt.len()
        )));
    }
    for (t, frame) in gt.iter().chain(hyp).enumerate() {
        let mut seen = HashSet::new();
        if let Some(l) = frame.iter().find(|l| !seen.insert(l.id)) {
            return Err(Error::InvalidArgument(format!(
                "id {} appears twice in one frame (row {t})",
                l.id
            )));
        }
    }
    Ok(())
}

// Frames past the end of `hyp` count as empty.
fn hyp_frame(hyp: &[Vec<Labeled>], t: usize) -> &[Labeled] {
    hyp.get(t).map_or(&[], Vec::as_slice)
}

/// Per-frame matching at IoU ≥ `threshold`. A pair matched in an earlier
/// frame is kept while its IoU stays above threshold; the rest are
/// assigned by Hungarian on `1 − IoU`.
pub fn clear_metrics(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Result<ClearCounts> {
    check_inputs(gt, hyp)?;
    let mut counts = ClearCounts::default();
    let mut last_match: HashMap<u64, u64> = HashMap::new();
    // whether each gt id was matched at its most recent appearance
    let mut tracked: HashMap<u64, bool> = HashMap::new();
    for (t, gframe) in gt.iter().enumerate() {
        let hframe = hyp_frame(hyp, t);
        counts.gt_count += gframe.len();
        let mut g_used = vec![false; gframe.len()];
        let mut h_used = vec![false; hframe.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();

        for (gi, g) in gframe.iter().enumerate() {
            let Some(&hid) = last_match.get(&g.id) else { continue };
            if let Some(hj) = hframe.iter().position(|h| h.id == hid) {
                if !h_used[hj] && iou(&g.bbox, &hframe[hj].bbox) >= threshold {
                    g_used[gi] = true;
                    h_used[hj] = true;
                    pairs.push((gi, hj));
                }
            }
        }

        let gs: Vec<usize> = (0..gframe.len()).filter(|&i| !g_used[i]).collect();
        let hs: Vec<usize> = (0..hframe.len()).filter(|&j| !h_used[j]).collect();
        if !gs.is_empty() && !hs.is_empty() {
            let ious: Vec<Vec<f64>> = gs
                .iter()
                .map(|&i| hs.iter().map(|&j| iou(&gframe[i].bbox, &hframe[j].bbox)).collect())
                .collect();
            // forbidden pairs get a cost no valid set of matches can offset
            let forbidden = 1.0 + gs.len().max(hs.len()) as f64;
            let cost: Vec<Vec<f64>> = ious
                .iter()
                .map(|r| {
                    r.iter()
                        .map(|&v| if v >= threshold { 1.0 - v } else { forbidden })
                        .collect()
                })
                .collect();
            for (a, b) in hungarian(&cost)? {
                if ious[a][b] >= threshold {
                    pairs.push((gs[a], hs[b]));
                }
            }
        }

        let mut matched_now = vec![false; gframe.len()];
        for &(gi, hj) in &pairs {
            let (gid, hid) = (gframe[gi].id, hframe[hj].id);
            matched_now[gi] = true;
            if let Some(prev) = last_match.insert(gid, hid) {
                if prev != hid {
                    counts.idsw += 1;
                }
                if tracked.get(&gid) == Some(&false) {
                    counts.frag += 1;
                }
            }
        }
        for (gi, g) in gframe.iter().enumerate() {
            tracked.insert(g.id, matched_now[gi]);
        }
        counts.matches += pairs.len();
        counts.fn_ += gframe.len() - pairs.len();
        counts.fp += hframe.len() - pairs.len();
    }
    Ok(counts)
}

/// Pair overlap counts, distinct gt and hyp ids, and gt / hyp box totals.
type Overlaps = (BTreeMap<(u64, u64), usize>, Vec<u64>, Vec<u64>, usize, usize);

/// `(gt id, hyp id) → number of frames with IoU ≥ threshold`, and box totals.
fn overlap_counts(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Overlaps {
    let mut pairs = BTreeMap::new();
    let (mut gids, mut hids) = (Vec::new(), Vec::new());
    let (mut n_gt, mut n_hyp) = (0, 0);
    for (t, gframe) in gt.iter().enumerate() {
        let hframe = hyp_frame(hyp, t);
        n_gt += gframe.len();
        n_hyp += hframe.len();
        gids.extend(gframe.iter().map(|l| l.id));
        hids.extend(hframe.iter().map(|l| l.id));
        for g in gframe {
            for h in hframe {
                if iou(&g.bbox, &h.bbox) >= threshold {
                    *pairs.entry((g.id, h.id)).or_insert(0) += 1;
                }
            }
        }
    }
    for v in [&mut gids, &mut hids] {
        v.sort_unstable();
        v.dedup();
    }
    (pairs, gids, hids, n_gt, n_hyp)
}

/// Identity counts under the one-to-one id matching that maximises IDTP.
pub fn identity_counts(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Result<IdentityCounts> {
    check_inputs(gt, hyp)?;
    let (pairs, gids, hids, n_gt, n_hyp) = overlap_counts(gt, hyp, threshold);
    let cost: Vec<Vec<f64>> = gids
        .iter()
        .map(|g| {
            hids.iter()
                .map(|h| -(pairs.get(&(*g, *h)).copied().unwrap_or(0) as f64))
                .collect()
        })
        .collect();
    let idtp: usize = hungarian(&cost)?
        .into_iter()
        .map(|(a, b)| pairs.get(&(gids[a], hids[b])).copied().unwrap_or(0))
        .sum();
    Ok(IdentityCounts {
        idtp,
        idfp: n_hyp - idtp,
        idfn: n_gt - idtp,
    })
}

pub fn idf1(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Result<f64> {
    Ok(identity_counts(gt, hyp, threshold)?.idf1())
}

/// IDF1 by enumerating every partial id bijection. Exponential; meant as an
/// oracle for a handful of identities.
pub fn idf1_brute_force(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>], threshold: f64) -> Result<f64> {
    check_inputs(gt, hyp)?;
    let (pairs, gids, hids, n_gt, n_hyp) = overlap_counts(gt, hyp, threshold);
    fn rec(
        i: usize,
        gids: &[u64],
        hids: &[u64],
        used: &mut [bool],
        pairs: &BTreeMap<(u64, u64), usize>,
        acc: usize,
        best: &mut usize,
    ) {
        if i == gids.len() {
            *best = (*best).max(acc);
            return;
        }
        rec(i + 1, gids, hids, used, pairs, acc, best);
        for j in 0..hids.len() {
            if !used[j] {
                used[j] = true;
                let c = pairs.get(&(gids[i], hids[j])).copied().unwrap_or(0);
                rec(i + 1, gids, hids, used, pairs, acc + c, best);
                used[j] = false;
            }
        }
    }
    let mut idtp = 0;
    rec(0, &gids, &hids, &mut vec![false; hids.len()], &pairs, 0, &mut idtp);
    Ok(IdentityCounts {
        idtp,
        idfp: n_hyp - idtp,
        idfn: n_gt - idtp,
    }
    .idf1())
}

/// CLEAR and identity metrics at [`MATCH_IOU`].
pub fn evaluate(gt: &[Vec<Labeled>], hyp: &[Vec<Labeled>]) -> Result<MetricReport> {
    Ok(MetricReport::from_counts(
        clear_metrics(gt, hyp, MATCH_IOU)?,
        identity_counts(gt, hyp, MATCH_IOU)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::BoundingBox;
    use crate::synth::{generate_scenario, ScenarioKind, ScenarioParams};

    fn bx(x: f64) -> BoundingBox {
        BoundingBox::new(x, 50.0, 10.0, 20.0)
    }

    fn l(id: u64, x: f64) -> Labeled {
        Labeled::new(id, bx(x))
    }

    #[test]
    fn perfect_tracking() {
        let gt = vec![vec![l(1, 0.0), l(2, 100.0)], vec![l(1, 2.0), l(2, 98.0)]];
        let r = evaluate(&gt, &gt).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.idf1, 1.0);
        assert_eq!((r.fp, r.fn_, r.idsw, r.frag), (0, 0, 0, 0));
    }

    #[test]
    fn mota_arithmetic() {
        assert_eq!(mota(1, 2, 1, 10), 0.6);
        assert!(mota(30, 0, 0, 10) < 0.0);
    }

    #[test]
    fn mota_from_constructed_sequence() {
        // 10 gt boxes over 5 frames; one spurious box, two misses, one id switch
        let gt: Vec<Vec<Labeled>> = (0..5).map(|t| vec![l(1, t as f64), l(2, 200.0 + t as f64)]).collect();
        let mut hyp = gt.clone();
        hyp[0].push(l(9, 500.0));
        hyp[1].retain(|x| x.id != 2);
        hyp[2].retain(|x| x.id != 1);
        for f in &mut hyp[3..] {
            for x in f.iter_mut().filter(|x| x.id == 2) {
                x.id = 7;
            }
        }
        let c = clear_metrics(&gt, &hyp, MATCH_IOU).unwrap();
        assert_eq!((c.gt_count, c.fp, c.fn_, c.idsw), (10, 1, 2, 1));
        assert_eq!(c.mota(), 0.6);
        // both ids resumed after one missed frame
        assert_eq!(c.frag, 2);
    }

    #[test]
    fn id_switch_half_way() {
        let gt: Vec<_> = (0..4).map(|t| vec![l(1, t as f64)]).collect();
        let hyp: Vec<_> = (0..4).map(|t| vec![l(if t < 2 { 10 } else { 11 }, t as f64)]).collect();
        let c = clear_metrics(&gt, &hyp, MATCH_IOU).unwrap();
        assert_eq!(c.idsw, 1);
        assert_eq!((c.fp, c.fn_, c.frag), (0, 0, 0));
    }

    #[test]
    fn carry_over_keeps_previous_match() {
        // hyp 20 overlaps gt 1 slightly better in frame 2, but 10 is kept
        let gt = vec![vec![l(1, 0.0)], vec![l(1, 0.0)]];
        let hyp = vec![vec![l(10, 1.0)], vec![l(10, 2.0), l(20, 1.0)]];
        let c = clear_metrics(&gt, &hyp, MATCH_IOU).unwrap();
        assert_eq!((c.idsw, c.fp), (0, 1));
    }

    #[test]
    fn idf1_split_case() {
        let gt: Vec<_> = (0..10).map(|t| vec![l(1, t as f64)]).collect();
        let hyp: Vec<_> = (0..10).map(|t| vec![l(if t < 5 { 1 } else { 2 }, t as f64)]).collect();
        assert_eq!(idf1(&gt, &hyp, MATCH_IOU).unwrap(), 0.5);
        assert_eq!(idf1_brute_force(&gt, &hyp, MATCH_IOU).unwrap(), 0.5);
    }

    #[test]
    fn empty_hypothesis() {
        let gt: Vec<_> = (0..3).map(|t| vec![l(1, t as f64)]).collect();
        assert_eq!(idf1(&gt, &[], MATCH_IOU).unwrap(), 0.0);
        let c = clear_metrics(&gt, &[], MATCH_IOU).unwrap();
        assert_eq!((c.fn_, c.fp), (3, 0));
        assert_eq!(c.mota(), 0.0);
    }

    #[test]
    fn frame_range_mismatch_is_an_error() {
        let gt = vec![vec![l(1, 0.0)]];
        let hyp = vec![vec![l(1, 0.0)], vec![l(1, 0.0)]];
        assert!(evaluate(&gt, &hyp).is_err());
        assert!(evaluate(&[vec![l(1, 0.0), l(1, 5.0)]], &[]).is_err());
    }

    #[test]
    fn generated_scenarios_score_perfectly_against_themselves() {
        for (i, kind) in ScenarioKind::ALL.into_iter().enumerate() {
            let s = generate_scenario(&ScenarioParams::with_kind(kind), i as u64).unwrap();
            let gt = s.ground_truth.unwrap();
            let r = evaluate(&gt, &gt).unwrap();
            assert_eq!((r.mota, r.idf1, r.idsw, r.fp, r.fn_), (1.0, 1.0, 0, 0, 0), "{kind}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        // up to 4 gt ids and 4 hyp ids on a coarse grid so overlaps are common
        fn frames(max_id: u64) -> impl Strategy<Value = Vec<Vec<Labeled>>> {
            prop::collection::vec(
                prop::collection::btree_map(1..=max_id, 0u8..4, 0..=max_id as usize)
                    .prop_map(|m| m.into_iter().map(|(id, x)| l(id, 5.0 * x as f64)).collect::<Vec<_>>()),
                1..8,
            )
        }

        proptest! {
            #[test]
            fn idf1_matches_brute_force(gt in frames(4), hyp in frames(4)) {
                let hyp: Vec<_> = hyp.into_iter().take(gt.len()).collect();
                let a = idf1(&gt, &hyp, MATCH_IOU).unwrap();
                let b = idf1_brute_force(&gt, &hyp, MATCH_IOU).unwrap();
                prop_assert_eq!(a, b);
                prop_assert!((0.0..=1.0).contains(&a));
            }

            #[test]
            fn clear_invariants(gt in frames(4), hyp in frames(4)) {
                let hyp: Vec<_> = hyp.into_iter().take(gt.len()).collect();
                let c = clear_metrics(&gt, &hyp, MATCH_IOU).unwrap();
                let n_hyp: usize = hyp.iter().map(Vec::len).sum();
                prop_assert_eq!(c.matches + c.fn_, c.gt_count);
                prop_assert_eq!(c.matches + c.fp, n_hyp);
                prop_assert!(c.mota() <= 1.0);
                prop_assert!(c.idsw <= c.matches);
            }
        }
    }
}
