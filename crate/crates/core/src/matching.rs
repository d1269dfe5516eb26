//! Greedy threshold matching between two point sets and the conformity score
//! built on it.
//!
//! A pair of points may match only if their Euclidean distance is at most a
//! threshold theta. All candidate pairs are scanned in ascending distance
//! order and assigned greedily, one-to-one on both sides. Per class,
//! TP/FP/FN counts accumulate over patches, the per-class F1 is
//! 2TP/(2TP+FP+FN), and the conformity of an annotator is the mean F1 over
//! the classes that appear on either side.
//!
//! The greedy scan is intentionally not a maximum-cardinality matcher; an
//! optimal assignment exists in the test suite only, as an oracle.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CellAnnotation, Dataset, PatchMeta, Split, TaskClass};

/// Matching configuration. The threshold is physical (micrometers) and is
/// converted to pixels per patch through that patch's mpp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub theta_um: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        MatchConfig { theta_um: 10.0 }
    }
}

impl MatchConfig {
    pub fn new(theta_um: f64) -> Result<MatchConfig> {
        if !(theta_um > 0.0) || !theta_um.is_finite() {
            return Err(Error::Config(format!(
                "theta_um must be a positive real, got {theta_um}"
            )));
        }
        Ok(MatchConfig { theta_um })
    }

    /// Pixel threshold for a given patch resolution.
    pub fn theta_px(&self, patch: &PatchMeta) -> Result<f64> {
        if !(patch.mpp > 0.0) || !patch.mpp.is_finite() {
            return Err(Error::Config(format!(
                "patch {:?} has invalid mpp {}; cannot convert theta to pixels",
                patch.patch_id, patch.mpp
            )));
        }
        Ok(self.theta_um / patch.mpp)
    }
}

/// One assigned pair: indices into the two input lists plus their distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a_index: usize,
    pub c_index: usize,
    pub distance_px: f64,
}

/// Outcome of matching one annotator list against one anchor list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchedPair>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MatchResult {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Greedy ascending-distance one-to-one matching under a pixel threshold.
///
/// Candidate pairs (p, q) with distance <= theta_px are sorted by
/// (distance, p, q) — the index tie-break keeps equal-distance outcomes
/// deterministic across platforms — and assigned iff neither side is taken.
pub fn match_points(a_points: &[(f64, f64)], c_points: &[(f64, f64)], theta_px: f64) -> MatchResult {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (p, &(ax, ay)) in a_points.iter().enumerate() {
        for (q, &(cx, cy)) in c_points.iter().enumerate() {
            let d = (ax - cx).hypot(ay - cy);
            if d <= theta_px {
                candidates.push((d, p, q));
            }
        }
    }
    candidates.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.cmp(&r.1)).then(l.2.cmp(&r.2)));

    let mut a_taken = vec![false; a_points.len()];
    let mut c_taken = vec![false; c_points.len()];
    let mut pairs = Vec::new();
    for (d, p, q) in candidates {
        if a_taken[p] || c_taken[q] {
            continue;
        }
        a_taken[p] = true;
        c_taken[q] = true;
        pairs.push(MatchedPair {
            a_index: p,
            c_index: q,
            distance_px: d,
        });
    }

    let tp = pairs.len() as u64;
    MatchResult {
        tp,
        fp: a_points.len() as u64 - tp,
        fn_: c_points.len() as u64 - tp,
        pairs,
    }
}

/// Sorted point list for one task class. Sorting by position makes the
/// outcome independent of annotation row order.
fn class_points(anns: &[&CellAnnotation], class: TaskClass) -> Vec<(f64, f64)> {
    let mut pts: Vec<(f64, f64)> = anns
        .iter()
        .filter(|a| a.task_class() == class)
        .map(|a| (a.x, a.y))
        .collect();
    pts.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.total_cmp(&r.1)));
    pts
}

/// Matches annotator vs anchor annotations of a single patch, independently
/// per task class. Classes absent from both sides produce no entry.
pub fn score_patch(
    a_anns: &[&CellAnnotation],
    c_anns: &[&CellAnnotation],
    patch: &PatchMeta,
    cfg: &MatchConfig,
) -> Result<BTreeMap<TaskClass, MatchResult>> {
    for ann in a_anns.iter().chain(c_anns.iter()) {
        if ann.patch_id != patch.patch_id {
            return Err(Error::Config(format!(
                "annotation on patch {:?} passed to score_patch for patch {:?}",
                ann.patch_id, patch.patch_id
            )));
        }
    }
    let theta_px = cfg.theta_px(patch)?;
    let mut out = BTreeMap::new();
    for class in TaskClass::ALL {
        let a_pts = class_points(a_anns, class);
        let c_pts = class_points(c_anns, class);
        if a_pts.is_empty() && c_pts.is_empty() {
            continue;
        }
        out.insert(class, match_points(&a_pts, &c_pts, theta_px));
    }
    Ok(out)
}

/// Per-class F1 plus the counts behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub f1: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

/// An annotator's conformity against the anchor over shared control patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformityReport {
    pub annotator_id: String,
    /// Mean per-class F1 over the included classes.
    pub conformity: f64,
    pub per_class: BTreeMap<TaskClass, ClassScore>,
    pub control_patches_used: u64,
}

/// Accumulates per-class TP/FP/FN over patches (micro-averaging), then
/// reduces to a conformity report.
///
/// A class is included in the mean iff it carries at least one annotation
/// from either side across the accumulated patches; classes absent from both
/// sides never enter the mean, so agreement-on-absence is not rewarded.
#[derive(Debug, Default, Clone)]
pub struct ConformityAccumulator {
    totals: BTreeMap<TaskClass, (u64, u64, u64)>,
    patches: u64,
}

impl ConformityAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_patch(
        &mut self,
        a_anns: &[&CellAnnotation],
        c_anns: &[&CellAnnotation],
        patch: &PatchMeta,
        cfg: &MatchConfig,
    ) -> Result<()> {
        let per_class = score_patch(a_anns, c_anns, patch, cfg)?;
        for (class, result) in per_class {
            let entry = self.totals.entry(class).or_insert((0, 0, 0));
            entry.0 += result.tp;
            entry.1 += result.fp;
            entry.2 += result.fn_;
        }
        self.patches += 1;
        Ok(())
    }

    pub fn patches_used(&self) -> u64 {
        self.patches
    }

    pub fn finish(self, annotator_id: &str) -> Result<ConformityReport> {
        if self.patches == 0 {
            return Err(Error::NoEvidence {
                annotator_id: annotator_id.to_string(),
            });
        }
        let mut per_class = BTreeMap::new();
        let mut sum = 0.0;
        for (class, (tp, fp, fn_)) in &self.totals {
            let denom = 2 * tp + fp + fn_;
            debug_assert!(denom > 0, "included class must have evidence");
            let f1 = 2.0 * *tp as f64 / denom as f64;
            sum += f1;
            per_class.insert(
                *class,
                ClassScore {
                    f1,
                    tp: *tp,
                    fp: *fp,
                    fn_: *fn_,
                },
            );
        }
        let conformity = if per_class.is_empty() {
            // Shared patches existed but carried no annotations at all.
            0.0
        } else {
            sum / per_class.len() as f64
        };
        Ok(ConformityReport {
            annotator_id: annotator_id.to_string(),
            conformity,
            per_class,
            control_patches_used: self.patches,
        })
    }
}

/// Conformity of one annotator against the anchor over the control patches
/// both of them annotated.
pub fn conformity(
    annotator_id: &str,
    dataset: &Dataset,
    anchor_id: &str,
    cfg: &MatchConfig,
) -> Result<ConformityReport> {
    let a_by_patch = dataset.control_annotations_by_patch(annotator_id);
    let c_by_patch = dataset.control_annotations_by_patch(anchor_id);
    let mut acc = ConformityAccumulator::new();
    for (patch_id, a_anns) in &a_by_patch {
        let Some(c_anns) = c_by_patch.get(patch_id) else {
            continue;
        };
        let patch = dataset
            .patch(patch_id)
            .ok_or_else(|| Error::UnknownPatch(patch_id.to_string()))?;
        debug_assert_eq!(patch.split, Split::Control);
        acc.add_patch(a_anns, c_anns, patch, cfg)?;
    }
    acc.finish(annotator_id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{RawClass, Split};

    fn patch(mpp: f64) -> PatchMeta {
        PatchMeta {
            patch_id: "p".into(),
            width_px: 1000,
            height_px: 1000,
            mpp,
            split: Split::Control,
            origin: None,
        }
    }

    fn ann(annotator: &str, class: RawClass, x: f64, y: f64) -> CellAnnotation {
        CellAnnotation {
            patch_id: "p".into(),
            annotator_id: annotator.into(),
            class,
            x,
            y,
        }
    }

    #[test]
    fn identical_points_match() {
        let r = match_points(&[(0.0, 0.0)], &[(0.0, 0.0)], 10.0);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 0, 0));
    }

    #[test]
    fn extra_annotator_point_is_fp() {
        // dist((5,0),(0,1)) = sqrt(26) > 3, so only the near pair matches.
        let r = match_points(&[(0.0, 0.0), (5.0, 0.0)], &[(0.0, 1.0)], 3.0);
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        assert_eq!(r.pairs.len(), 1);
        assert_eq!((r.pairs[0].a_index, r.pairs[0].c_index), (0, 0));
        assert!((r.pairs[0].distance_px - 1.0).abs() < 1e-12);
    }

    #[test]
    fn beyond_threshold_is_fp_and_fn() {
        let r = match_points(&[(0.0, 0.0)], &[(0.0, 20.0)], 10.0);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
    }

    #[test]
    fn greedy_is_not_maximum_cardinality() {
        // Distances: (0,0)-(0.6,0)=0.6, (1.2,0)-(0.6,0)=0.6, (0,0)-(-1,0)=1.0,
        // (1.2,0)-(-1,0)=2.2. Tie at 0.6 resolves to (p=0,q=0), which blocks
        // the two-pair optimum.
        let a = [(0.0, 0.0), (1.2, 0.0)];
        let c = [(0.6, 0.0), (-1.0, 0.0)];
        let r = match_points(&a, &c, 1.1);
        assert_eq!(r.tp, 1);
        assert_eq!((r.pairs[0].a_index, r.pairs[0].c_index), (0, 0));
    }

    #[test]
    fn empty_sides_are_valid() {
        let r = match_points(&[], &[], 5.0);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 0));
        let r = match_points(&[], &[(1.0, 1.0), (2.0, 2.0), (3.0, 3.0)], 5.0);
        assert_eq!((r.tp, r.fp, r.fn_), (0, 0, 3));
    }

    #[test]
    fn score_patch_is_per_class() {
        let p = patch(1.0);
        let a = vec![
            ann("a", RawClass::TumorCell, 10.0, 10.0),
            ann("a", RawClass::Lymphoplasma, 50.0, 50.0),
        ];
        let c = vec![ann("anchor", RawClass::TumorCell, 10.0, 10.0)];
        let a_refs: Vec<&CellAnnotation> = a.iter().collect();
        let c_refs: Vec<&CellAnnotation> = c.iter().collect();
        let by_class = score_patch(&a_refs, &c_refs, &p, &MatchConfig::default()).unwrap();
        let t = &by_class[&TaskClass::Tumor];
        assert_eq!((t.tp, t.fp, t.fn_), (1, 0, 0));
        let l = &by_class[&TaskClass::Lymphocyte];
        assert_eq!((l.tp, l.fp, l.fn_), (0, 1, 0));
        assert!(!by_class.contains_key(&TaskClass::Other));
    }

    #[test]
    fn theta_converts_through_mpp() {
        // mpp 0.5 and theta 10 um give a 20 px threshold.
        let p = patch(0.5);
        let cfg = MatchConfig::default();
        assert!((cfg.theta_px(&p).unwrap() - 20.0).abs() < 1e-12);

        let near = vec![ann("a", RawClass::TumorCell, 119.0, 100.0)];
        let far = vec![ann("a", RawClass::TumorCell, 121.0, 100.0)];
        let c = vec![ann("anchor", RawClass::TumorCell, 100.0, 100.0)];
        let c_refs: Vec<&CellAnnotation> = c.iter().collect();

        let near_refs: Vec<&CellAnnotation> = near.iter().collect();
        let r = score_patch(&near_refs, &c_refs, &p, &cfg).unwrap();
        assert_eq!(r[&TaskClass::Tumor].tp, 1);

        let far_refs: Vec<&CellAnnotation> = far.iter().collect();
        let r = score_patch(&far_refs, &c_refs, &p, &cfg).unwrap();
        assert_eq!(r[&TaskClass::Tumor].tp, 0);
    }

    #[test]
    fn invalid_mpp_is_a_config_error() {
        let p = patch(0.0);
        let cfg = MatchConfig::default();
        assert!(matches!(cfg.theta_px(&p), Err(Error::Config(_))));
    }

    #[test]
    fn worked_f1_example() {
        // Totals TP=1, FP=1, FN=0 give s = 2/3.
        let mut acc = ConformityAccumulator::new();
        let p = patch(1.0);
        let a = vec![
            ann("a", RawClass::TumorCell, 0.0, 0.0),
            ann("a", RawClass::TumorCell, 5.0, 0.0),
        ];
        let c = vec![ann("anchor", RawClass::TumorCell, 0.0, 1.0)];
        let a_refs: Vec<&CellAnnotation> = a.iter().collect();
        let c_refs: Vec<&CellAnnotation> = c.iter().collect();
        acc.add_patch(&a_refs, &c_refs, &p, &MatchConfig::new(3.0).unwrap())
            .unwrap();
        let report = acc.finish("a").unwrap();
        assert!((report.conformity - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn conformity_averages_over_included_classes() {
        // Tumor perfect (s=1), lymphocyte fully missed (s=0) -> 0.5.
        let p = patch(1.0);
        let a = vec![ann("a", RawClass::TumorCell, 10.0, 10.0)];
        let c = vec![
            ann("anchor", RawClass::TumorCell, 10.0, 10.0),
            ann("anchor", RawClass::Lymphoplasma, 40.0, 40.0),
            ann("anchor", RawClass::Lymphoplasma, 60.0, 60.0),
        ];
        let mut acc = ConformityAccumulator::new();
        let a_refs: Vec<&CellAnnotation> = a.iter().collect();
        let c_refs: Vec<&CellAnnotation> = c.iter().collect();
        acc.add_patch(&a_refs, &c_refs, &p, &MatchConfig::default()).unwrap();
        let report = acc.finish("a").unwrap();
        assert!((report.conformity - 0.5).abs() < 1e-12);
        assert_eq!(report.per_class.len(), 2);
    }

    #[test]
    fn no_shared_patches_is_no_evidence() {
        let acc = ConformityAccumulator::new();
        match acc.finish("lonely") {
            Err(Error::NoEvidence { annotator_id }) => assert_eq!(annotator_id, "lonely"),
            other => panic!("expected NoEvidence, got {other:?}"),
        }
    }

    #[test]
    fn self_conformity_is_one() {
        let p = patch(0.5);
        let anns = vec![
            ann("x", RawClass::TumorCell, 10.0, 10.0),
            ann("x", RawClass::Lymphoplasma, 20.0, 20.0),
            ann("x", RawClass::Macrophage, 30.0, 30.0),
        ];
        let refs: Vec<&CellAnnotation> = anns.iter().collect();
        let mut acc = ConformityAccumulator::new();
        acc.add_patch(&refs, &refs, &p, &MatchConfig::default()).unwrap();
        let report = acc.finish("x").unwrap();
        assert_eq!(report.conformity, 1.0);
    }
}
