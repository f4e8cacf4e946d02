//! Cell Tracking Challenge style SEG and DET, and their mean OP_CSB.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use num_traits::Num;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{list_images, load_mask, InstanceMask};

/// Outcome of majority-overlap matching between GT and predicted objects.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    /// `(gt label, pred label)`, ascending by GT label.
    pub pairs: Vec<(u32, u32)>,
    pub unmatched_gt: Vec<u32>,
    pub unmatched_pred: Vec<u32>,
    /// For every predicted region matched by `k > 1` GT objects, `k - 1`.
    pub split_events: usize,
}

struct Overlaps {
    gt_area: BTreeMap<u32, usize>,
    pred_area: BTreeMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

fn overlaps(gt: &InstanceMask, pred: &InstanceMask) -> Result<Overlaps> {
    if gt.dims() != pred.dims() {
        return Err(Error::ShapeMismatch(format!(
            "GT mask {:?} vs prediction {:?}",
            gt.dims(),
            pred.dims()
        )));
    }
    let mut o = Overlaps {
        gt_area: BTreeMap::new(),
        pred_area: BTreeMap::new(),
        inter: HashMap::new(),
    };
    for (&g, &p) in gt.labels().iter().zip(pred.labels().iter()) {
        if g > 0 {
            *o.gt_area.entry(g).or_default() += 1;
        }
        if p > 0 {
            *o.pred_area.entry(p).or_default() += 1;
        }
        if g > 0 && p > 0 {
            *o.inter.entry((g, p)).or_default() += 1;
        }
    }
    Ok(o)
}

fn majority_matches(o: &Overlaps) -> BTreeMap<u32, (u32, usize)> {
    let mut best: BTreeMap<u32, (u32, usize)> = BTreeMap::new();
    for (&(g, p), &n) in &o.inter {
        if 2 * n > o.gt_area[&g] {
            let prev = best.insert(g, (p, n));
            assert!(prev.is_none(), "two regions each cover more than half of GT object {g}");
        }
    }
    best
}

/// GT object `R` matches predicted object `S` iff `|R ∩ S| > |R| / 2`.
pub fn match_objects(gt: &InstanceMask, pred: &InstanceMask) -> Result<Matching> {
    let o = overlaps(gt, pred)?;
    let m = majority_matches(&o);
    let mut hits: BTreeMap<u32, usize> = BTreeMap::new();
    for &(p, _) in m.values() {
        *hits.entry(p).or_default() += 1;
    }
    Ok(Matching {
        pairs: m.iter().map(|(&g, &(p, _))| (g, p)).collect(),
        unmatched_gt: o.gt_area.keys().filter(|g| !m.contains_key(g)).copied().collect(),
        unmatched_pred: o.pred_area.keys().filter(|p| !hits.contains_key(p)).copied().collect(),
        split_events: hits.values().map(|&k| k - 1).sum(),
    })
}

fn no_gt(gt: &InstanceMask) -> Result<()> {
    if gt.instance_count() == 0 {
        return Err(Error::NoGroundTruth(format!("mask {:?} has no instances", gt.dims())));
    }
    Ok(())
}

/// Mean Jaccard index of every GT object with its match; unmatched objects
/// count as zero. False positives do not lower SEG.
pub fn seg_score(gt: &InstanceMask, pred: &InstanceMask) -> Result<f64> {
    no_gt(gt)?;
    let o = overlaps(gt, pred)?;
    let m = majority_matches(&o);
    let total: f64 = o
        .gt_area
        .iter()
        .map(|(g, &area)| match m.get(g) {
            Some(&(p, inter)) => inter as f64 / (area + o.pred_area[&p] - inter) as f64,
            None => 0.0,
        })
        .sum();
    Ok(total / o.gt_area.len() as f64)
}

/// Penalty weights of the detection graph edit cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetWeights {
    pub w_split: f64,
    pub w_fn: f64,
    pub w_fp: f64,
}

impl Default for DetWeights {
    fn default() -> Self {
        Self {
            w_split: 5.0,
            w_fn: 10.0,
            w_fp: 1.0,
        }
    }
}

impl DetWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_split, self.w_fn, self.w_fp].iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.w_fn == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "penalty weights must be non-negative with w_fn > 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(AOGM_D, AOGM_D0)` for one frame.
pub fn aogm(matching: &Matching, n_gt: usize, weights: DetWeights) -> (f64, f64) {
    let d = weights.w_fn * matching.unmatched_gt.len() as f64
        + weights.w_fp * matching.unmatched_pred.len() as f64
        + weights.w_split * matching.split_events as f64;
    (d, weights.w_fn * n_gt as f64)
}

/// `1 - min(AOGM_D, AOGM_D0) / AOGM_D0`.
pub fn det_score(gt: &InstanceMask, pred: &InstanceMask, weights: DetWeights) -> Result<f64> {
    no_gt(gt)?;
    weights.validate()?;
    let m = match_objects(gt, pred)?;
    let (d, d0) = aogm(&m, gt.instance_count(), weights);
    Ok(1.0 - d.min(d0) / d0)
}

/// `(seg + det) / 2`, for any numeric type including exact rationals.
pub fn op_csb<N: Num + PartialOrd + Copy + std::fmt::Debug>(seg: N, det: N) -> Result<N> {
    let in_range = |v: N| v >= N::zero() && v <= N::one();
    if !in_range(seg) || !in_range(det) {
        return Err(Error::InvalidArgument(format!(
            "scores must lie in [0, 1], got SEG={seg:?} DET={det:?}"
        )));
    }
    Ok((seg + det) / (N::one() + N::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: String,
    pub seg: f64,
    pub det: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seg: f64,
    pub det: f64,
    pub op_csb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedFrame {
    pub frame: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameScore>,
    pub aggregate: Aggregate,
    pub weights: DetWeights,
    pub excluded: Vec<ExcludedFrame>,
}

impl MetricReport {
    /// Scores frames that have both a GT and a predicted mask.
    pub fn from_frames(frames: &[(String, InstanceMask, InstanceMask)], weights: DetWeights) -> Result<Self> {
        weights.validate()?;
        let mut per_frame = Vec::new();
        let mut excluded = Vec::new();
        for (name, gt, pred) in frames {
            if gt.instance_count() == 0 {
                excluded.push(ExcludedFrame {
                    frame: name.clone(),
                    reason: "no ground-truth instances".into(),
                });
                continue;
            }
            per_frame.push(FrameScore {
                frame: name.clone(),
                seg: seg_score(gt, pred)?,
                det: det_score(gt, pred, weights)?,
            });
        }
        if per_frame.is_empty() {
            return Err(Error::EmptyDataset("no frame could be scored".into()));
        }
        let n = per_frame.len() as f64;
        let seg = per_frame.iter().map(|f| f.seg).sum::<f64>() / n;
        let det = per_frame.iter().map(|f| f.det).sum::<f64>() / n;
        Ok(Self {
            aggregate: Aggregate {
                seg,
                det,
                op_csb: op_csb(seg, det)?,
            },
            per_frame,
            weights,
            excluded,
        })
    }

    pub fn summary_line(&self) -> String {
        format!(
            "SEG={:.3} DET={:.3} OP={:.3}",
            self.aggregate.seg, self.aggregate.det, self.aggregate.op_csb
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per frame plus an aggregate row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,SEG,DET,OP_CSB\n");
        for f in &self.per_frame {
            let op = 0.5 * (f.seg + f.det);
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", f.frame, f.seg, f.det, op);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "aggregate,{:.6},{:.6},{:.6}", a.seg, a.det, a.op_csb);
        s
    }
}

fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir)?
        .into_iter()
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p.clone())))
        .collect())
}

/// Pairs masks by file stem and scores every complete pair.
pub fn evaluate_dataset(gt_dir: impl AsRef<Path>, pred_dir: impl AsRef<Path>, weights: DetWeights) -> Result<MetricReport> {
    let gt = mask_files(gt_dir.as_ref())?;
    let pred = mask_files(pred_dir.as_ref())?;
    let mut frames = Vec::new();
    let mut missing = Vec::new();
    for (stem, gpath) in &gt {
        match pred.get(stem) {
            Some(ppath) => frames.push((stem.clone(), load_mask(gpath)?, load_mask(ppath)?)),
            None => missing.push(ExcludedFrame {
                frame: stem.clone(),
                reason: "no prediction".into(),
            }),
        }
    }
    for stem in pred.keys().filter(|s| !gt.contains_key(*s)) {
        missing.push(ExcludedFrame {
            frame: stem.clone(),
            reason: "no ground truth file".into(),
        });
    }
    if !missing.is_empty() {
        log::warn!("{} frames lack a counterpart and were excluded", missing.len());
    }
    let mut report = MetricReport::from_frames(&frames, weights)?;
    report.excluded.extend(missing);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};
    use num_rational::Ratio;

    fn mask(size: usize, rects: &[(u32, usize, usize, usize, usize)]) -> InstanceMask {
        let mut l = Array2::zeros((size, size));
        for &(id, y, x, h, w) in rects {
            l.slice_mut(s![y..y + h, x..x + w]).fill(id);
        }
        InstanceMask::new(l).unwrap()
    }

    #[test]
    fn identical_masks() {
        let gt = mask(16, &[(1, 0, 0, 4, 4), (2, 8, 8, 5, 3)]);
        let m = match_objects(&gt, &gt).unwrap();
        assert_eq!(m.pairs, vec![(1, 1), (2, 2)]);
        assert_eq!(m.split_events, 0);
        assert_eq!(seg_score(&gt, &gt).unwrap(), 1.0);
        assert_eq!(det_score(&gt, &gt, DetWeights::default()).unwrap(), 1.0);
    }

    #[test]
    fn half_overlap_is_not_a_match() {
        let gt = mask(8, &[(1, 0, 0, 4, 4)]);
        let pred = mask(8, &[(5, 0, 0, 2, 4)]);
        let m = match_objects(&gt, &pred).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_gt, vec![1]);
        assert_eq!(m.unmatched_pred, vec![5]);
    }

    #[test]
    fn nine_of_sixteen() {
        let gt = mask(8, &[(1, 0, 0, 4, 4)]);
        let pred = mask(8, &[(3, 0, 0, 3, 3)]);
        assert_eq!(seg_score(&gt, &pred).unwrap(), 9.0 / 16.0);
        assert_eq!(seg_score(&gt, &InstanceMask::empty(8, 8).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn merged_prediction_counts_a_split() {
        let gt = mask(12, &[(1, 0, 0, 3, 3), (2, 0, 4, 3, 3)]);
        let pred = mask(12, &[(7, 0, 0, 3, 7)]);
        let m = match_objects(&gt, &pred).unwrap();
        assert_eq!(m.pairs, vec![(1, 7), (2, 7)]);
        assert_eq!(m.split_events, 1);
        assert_eq!(det_score(&gt, &pred, DetWeights::default()).unwrap(), 1.0 - 5.0 / 20.0);
    }

    #[test]
    fn det_cases() {
        let w = DetWeights::default();
        let gt1 = mask(8, &[(1, 0, 0, 3, 3)]);
        assert_eq!(det_score(&gt1, &InstanceMask::empty(8, 8).unwrap(), w).unwrap(), 0.0);
        let gt2 = mask(16, &[(1, 0, 0, 3, 3), (2, 5, 5, 3, 3)]);
        let pred = mask(16, &[(1, 0, 0, 3, 3), (2, 5, 5, 3, 3), (3, 12, 12, 2, 2)]);
        assert_eq!(det_score(&gt2, &pred, w).unwrap(), 0.95);
        assert!(matches!(
            det_score(&InstanceMask::empty(4, 4).unwrap(), &gt1, w),
            Err(Error::NoGroundTruth(_)) | Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn det_is_clamped_at_zero() {
        let gt = mask(16, &[(1, 0, 0, 2, 2)]);
        let rects: Vec<_> = (0..12).map(|i| (i as u32 + 1, 4 + (i / 4) * 3, (i % 4) * 3, 2, 2)).collect();
        assert_eq!(det_score(&gt, &mask(16, &rects), DetWeights::default()).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let a = mask(8, &[(1, 0, 0, 2, 2)]);
        let b = mask(9, &[(1, 0, 0, 2, 2)]);
        assert!(matches!(match_objects(&a, &b), Err(Error::ShapeMismatch(_))));
        assert!(matches!(seg_score(&InstanceMask::empty(8, 8).unwrap(), &a), Err(Error::NoGroundTruth(_))));
        assert!(op_csb(1.2, 0.5).is_err());
        assert!(op_csb(0.5, -0.1).is_err());
    }

    #[test]
    fn op_csb_values() {
        let r = |n: i64| Ratio::new(n, 100);
        assert_eq!(op_csb(r(79), r(93)).unwrap(), r(86));
        assert_eq!(op_csb(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(op_csb(1.0, 1.0).unwrap(), 1.0);
        assert_eq!(format!("{:.2}", op_csb(0.79, 0.93).unwrap()), "0.86");
    }

    #[test]
    fn report_aggregates() {
        let gt = mask(8, &[(1, 0, 0, 4, 4)]);
        let half = mask(8, &[(1, 0, 0, 4, 4), (2, 6, 6, 2, 2)]);
        let partial = InstanceMask::new({
            let mut l = gt.labels().clone();
            l.slice_mut(s![0..4, 2..4]).fill(0);
            l.slice_mut(s![0..1, 0..2]).fill(0);
            l
        })
        .unwrap();
        let frames = vec![
            ("a".to_string(), gt.clone(), gt.clone()),
            ("b".to_string(), gt.clone(), partial.clone()),
            ("c".to_string(), InstanceMask::empty(8, 8).unwrap(), half),
        ];
        let rep = MetricReport::from_frames(&frames, DetWeights::default()).unwrap();
        assert_eq!(rep.per_frame.len(), 2);
        assert_eq!(rep.excluded.len(), 1);
        // Frame b: 6 of 16 pixels remain, below the majority, so SEG 0.
        assert_eq!(rep.per_frame[1].seg, 0.0);
        assert_eq!(rep.aggregate.seg, 0.5);
        assert!((rep.aggregate.op_csb - 0.5 * (rep.aggregate.seg + rep.aggregate.det)).abs() < 1e-12);
        assert!(rep.to_csv().starts_with("frame,SEG,DET,OP_CSB\na,1.000000"));
        let back: MetricReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
