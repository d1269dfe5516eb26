//! Campaign orchestration: anchor selection, crowd scoring, percentile
//! partitioning, and blind control-task assignment.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{conformity, ConformityReport, MatchConfig};
use crate::model::Dataset;
use crate::rng::SplitMix64;

/// The chosen anchor annotator and how much of the control set it covers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSelection {
    pub anchor_id: String,
    pub control_patch_count: usize,
    /// Fraction of control patches the anchor annotated.
    pub coverage: f64,
}

/// Picks the annotator covering the most distinct control patches.
///
/// Ties break by total control annotation count, then by annotator id, so
/// the selection never depends on input order.
pub fn select_anchor(dataset: &Dataset) -> Result<AnchorSelection> {
    let mut patches_by_annotator: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for ann in &dataset.annotations {
        let Some(p) = dataset.patch(&ann.patch_id) else {
            continue;
        };
        if p.split != crate::model::Split::Control {
            continue;
        }
        patches_by_annotator
            .entry(ann.annotator_id.as_str())
            .or_default()
            .insert(ann.patch_id.as_str());
        *counts.entry(ann.annotator_id.as_str()).or_default() += 1;
    }
    let total_control = dataset.control_patches().count();
    let best = patches_by_annotator
        .iter()
        .max_by(|(a_id, a_patches), (b_id, b_patches)| {
            a_patches
                .len()
                .cmp(&b_patches.len())
                .then(counts[*a_id].cmp(&counts[*b_id]))
                .then(b_id.cmp(a_id)) // reversed: prefer the smaller id
        });
    match best {
        None => Err(Error::Degenerate(
            "no annotator has control-split annotations".into(),
        )),
        Some((id, patches)) => Ok(AnchorSelection {
            anchor_id: id.to_string(),
            control_patch_count: patches.len(),
            coverage: if total_control == 0 {
                0.0
            } else {
                patches.len() as f64 / total_control as f64
            },
        }),
    }
}

/// Scoring outcome for one annotator: a conformity report, or the evidence
/// shortfall that prevented one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorScore {
    pub annotator_id: String,
    pub shared_control_patches: usize,
    /// Present iff the annotator shares at least `min_shared_patches`
    /// control patches with the anchor.
    pub report: Option<ConformityReport>,
}

/// Scores every non-anchor annotator against the anchor.
///
/// Annotators sharing fewer than `min_shared_patches` control patches with
/// the anchor are listed with `report: None` instead of being scored from
/// thin evidence. Scoring runs in parallel over annotators; output order is
/// sorted by annotator id either way.
pub fn score_all_annotators(
    dataset: &Dataset,
    anchor_id: &str,
    cfg: &MatchConfig,
    min_shared_patches: usize,
) -> Result<Vec<AnnotatorScore>> {
    if min_shared_patches == 0 {
        return Err(Error::Config("min_shared_patches must be positive".into()));
    }
    let anchor_patches: BTreeSet<&str> = dataset
        .control_annotations_by_patch(anchor_id)
        .into_keys()
        .collect();
    if anchor_patches.is_empty() {
        return Err(Error::Degenerate(format!(
            "anchor {anchor_id:?} has no control-split annotations"
        )));
    }
    let annotators: Vec<&str> = dataset
        .annotators()
        .into_iter()
        .filter(|a| *a != anchor_id)
        .collect();
    annotators
        .par_iter()
        .map(|annotator| {
            let shared = dataset
                .control_annotations_by_patch(annotator)
                .keys()
                .filter(|p| anchor_patches.contains(*p))
                .count();
            let report = if shared >= min_shared_patches {
                Some(conformity(annotator, dataset, anchor_id, cfg)?)
            } else {
                None
            };
            Ok(AnnotatorScore {
                annotator_id: annotator.to_string(),
                shared_control_patches: shared,
                report,
            })
        })
        .collect()
}

/// A percentile interval (lo, hi], 0 <= lo < hi <= 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileRange {
    pub lo: f64,
    pub hi: f64,
}

impl PercentileRange {
    pub fn new(lo: f64, hi: f64) -> Result<PercentileRange> {
        if !(0.0..100.0).contains(&lo) || !(lo < hi && hi <= 100.0) {
            return Err(Error::Config(format!(
                "percentile range must satisfy 0 <= lo < hi <= 100, got {lo}-{hi}"
            )));
        }
        Ok(PercentileRange { lo, hi })
    }

    pub fn contains(&self, midpoint: f64) -> bool {
        midpoint > self.lo && midpoint <= self.hi
    }

    /// Short label like `p0-25`.
    pub fn label(&self) -> String {
        format!("p{}-{}", fmt_pct(self.lo), fmt_pct(self.hi))
    }

    /// Parses `"lo-hi"`.
    pub fn parse(s: &str) -> Result<PercentileRange> {
        let (lo, hi) = s
            .trim()
            .trim_start_matches('p')
            .split_once('-')
            .ok_or_else(|| Error::Config(format!("range {s:?} must look like \"0-25\"")))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad percentile in {s:?}")))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad percentile in {s:?}")))?;
        PercentileRange::new(lo, hi)
    }
}

fn fmt_pct(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// How annotators are weighted along the cumulative percentile axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    ByPatchCount,
    ByAnnotatorCount,
}

impl Weighting {
    pub fn parse_token(s: &str) -> Option<Weighting> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "by_patch_count" | "patch" => Some(Weighting::ByPatchCount),
            "by_annotator_count" | "annotator" => Some(Weighting::ByAnnotatorCount),
            _ => None,
        }
    }
}

/// A partition of annotators (and through them, patches) by conformity
/// percentile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub ranges: Vec<PercentileRange>,
    pub weighting: Weighting,
    /// Cumulative-weight interval midpoint of every scored annotator, in
    /// percent, ordered by ascending conformity.
    pub midpoints: BTreeMap<String, f64>,
    /// Annotator id -> index into `ranges`.
    pub annotator_groups: BTreeMap<String, usize>,
    /// Patch id -> index into `ranges`, derived from annotator groups.
    pub patch_groups: BTreeMap<String, usize>,
    /// Scored annotators whose midpoint falls in none of the ranges.
    pub unassigned_annotators: Vec<String>,
    /// Patches whose grouped annotators span more than one range.
    pub ambiguous_patches: Vec<String>,
    /// Patches touched by an unscored or unassigned annotator; never grouped.
    pub excluded_patches: Vec<String>,
}

/// Partitions scored annotators into percentile ranges.
///
/// Annotators are sorted by ascending conformity (ties by id) and laid out
/// along a cumulative weight axis; each annotator belongs to the range
/// containing the midpoint of its interval, so a whole annotator's patches
/// always land in a single group. A patch inherits the group shared by all
/// of its grouped annotators.
pub fn percentile_partition(
    reports: &[ConformityReport],
    patches_per_annotator: &BTreeMap<String, BTreeSet<String>>,
    ranges: &[PercentileRange],
    weighting: Weighting,
) -> Result<PartitionSpec> {
    if reports.is_empty() {
        return Err(Error::Config("cannot partition zero scored annotators".into()));
    }
    if ranges.is_empty() {
        return Err(Error::Config("at least one percentile range is required".into()));
    }
    let mut sorted_ranges = ranges.to_vec();
    sorted_ranges.sort_by(|a, b| a.lo.total_cmp(&b.lo).then(a.hi.total_cmp(&b.hi)));
    for pair in sorted_ranges.windows(2) {
        if pair[1].lo < pair[0].hi {
            return Err(Error::Config(format!(
                "ranges {} and {} overlap; groups must be disjoint",
                pair[0].label(),
                pair[1].label()
            )));
        }
    }

    let mut order: Vec<&ConformityReport> = reports.iter().collect();
    order.sort_by(|a, b| {
        a.conformity
            .total_cmp(&b.conformity)
            .then(a.annotator_id.cmp(&b.annotator_id))
    });

    let weight_of = |id: &str| -> f64 {
        match weighting {
            Weighting::ByAnnotatorCount => 1.0,
            Weighting::ByPatchCount => patches_per_annotator
                .get(id)
                .map(|s| s.len() as f64)
                .unwrap_or(0.0),
        }
    };
    let total: f64 = order.iter().map(|r| weight_of(&r.annotator_id)).sum();
    if total <= 0.0 {
        return Err(Error::Config(
            "total partition weight is zero; check patches_per_annotator".into(),
        ));
    }

    let mut midpoints = BTreeMap::new();
    let mut annotator_groups = BTreeMap::new();
    let mut unassigned = Vec::new();
    let mut cum = 0.0;
    for report in &order {
        let w = weight_of(&report.annotator_id);
        let mid = (cum + w / 2.0) / total * 100.0;
        cum += w;
        midpoints.insert(report.annotator_id.clone(), mid);
        match ranges.iter().position(|r| r.contains(mid)) {
            Some(idx) => {
                annotator_groups.insert(report.annotator_id.clone(), idx);
            }
            None => unassigned.push(report.annotator_id.clone()),
        }
    }
    unassigned.sort();

    let scored: BTreeSet<&str> = reports.iter().map(|r| r.annotator_id.as_str()).collect();
    let mut owners: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for (annotator, patches) in patches_per_annotator {
        for patch in patches {
            owners.entry(patch.as_str()).or_default().insert(annotator.as_str());
        }
    }
    let mut patch_groups = BTreeMap::new();
    let mut ambiguous = Vec::new();
    let mut excluded = Vec::new();
    for (patch, who) in owners {
        let mut groups = BTreeSet::new();
        let mut blocked = false;
        for annotator in who {
            if !scored.contains(annotator) {
                blocked = true;
                break;
            }
            match annotator_groups.get(annotator) {
                Some(g) => {
                    groups.insert(*g);
                }
                None => {
                    blocked = true;
                    break;
                }
            }
        }
        if blocked {
            excluded.push(patch.to_string());
        } else if groups.len() == 1 {
            patch_groups.insert(patch.to_string(), *groups.iter().next().unwrap());
        } else {
            ambiguous.push(patch.to_string());
        }
    }

    Ok(PartitionSpec {
        ranges: ranges.to_vec(),
        weighting,
        midpoints,
        annotator_groups,
        patch_groups,
        unassigned_annotators: unassigned,
        ambiguous_patches: ambiguous,
        excluded_patches: excluded,
    })
}

/// One task handed to an annotator. `is_control` lives only in the
/// server-side ledger; the annotator-facing view never carries it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub annotator_id: String,
    pub patch_id: String,
    pub is_control: bool,
    pub sequence_no: usize,
    pub seed: u64,
}

/// What the annotator is allowed to see.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FacingTask<'a> {
    pub annotator_id: &'a str,
    pub patch_id: &'a str,
    pub sequence_no: usize,
}

impl TaskAssignment {
    pub fn facing(&self) -> FacingTask<'_> {
        FacingTask {
            annotator_id: &self.annotator_id,
            patch_id: &self.patch_id,
            sequence_no: self.sequence_no,
        }
    }
}

/// Assignment stream plus any non-fatal warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentBatch {
    pub assignments: Vec<TaskAssignment>,
    pub warnings: Vec<String>,
}

/// Draws a blind task sequence for one annotator.
///
/// Per task, one SplitMix64 uniform decides control-vs-training (control iff
/// u < p_control while the control pool lasts), and one bounded draw picks
/// the patch, removed from its pool so no patch repeats. The stream is a
/// pure function of the seed: identical seeds reproduce identical sequences
/// byte for byte.
pub fn assign_tasks(
    annotator_id: &str,
    n_tasks: usize,
    control_pool: &[String],
    training_pool: &[String],
    p_control: f64,
    seed: u64,
) -> Result<AssignmentBatch> {
    if !(0.0..=1.0).contains(&p_control) {
        return Err(Error::Config(format!(
            "p_control must lie in [0, 1], got {p_control}"
        )));
    }
    let mut warnings = Vec::new();
    if p_control > 0.0 && control_pool.is_empty() {
        warnings.push(format!(
            "p_control = {p_control} but the control pool is empty; emitting training-only tasks"
        ));
    }
    let mut rng = SplitMix64::new(seed);
    let mut control: Vec<&String> = control_pool.iter().collect();
    let mut training: Vec<&String> = training_pool.iter().collect();
    let mut assignments = Vec::with_capacity(n_tasks);
    for sequence_no in 0..n_tasks {
        let u = rng.next_f64();
        let take_control = u < p_control && !control.is_empty();
        let pool = if take_control { &mut control } else { &mut training };
        if pool.is_empty() {
            return Err(Error::PoolExhausted {
                assigned: sequence_no,
                requested: n_tasks,
            });
        }
        let idx = rng.next_index(pool.len());
        let patch_id = pool.swap_remove(idx).clone();
        assignments.push(TaskAssignment {
            annotator_id: annotator_id.to_string(),
            patch_id,
            is_control: take_control,
            sequence_no,
            seed,
        });
    }
    Ok(AssignmentBatch {
        assignments,
        warnings,
    })
}
