//! Synthetic ground truth and annotator crowds.
//!
//! The simulator exists to exercise the whole pipeline end to end at desk
//! scale: generate cells, corrupt them per annotator with a parameterized
//! noise profile, score the crowd against a zero-noise anchor, partition by
//! conformity percentile, and measure how the label quality of each
//! partition compares against ground truth.
//!
//! Every stochastic step is a pure function of (inputs, seed); per-task
//! seeds are derived from the master seed with a counter scheme, so parallel
//! and serial runs agree byte for byte.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::campaign::{percentile_partition, PartitionSpec, PercentileRange, Weighting};
use crate::detection::evaluate_detections;
use crate::error::{Error, Result};
use crate::matching::{ConformityAccumulator, ConformityReport, MatchConfig};
use crate::model::{CellAnnotation, Dataset, PatchMeta, Split, TaskClass};
use crate::rng::{derive_seed, SplitMix64};
use crate::stats::{
    distribution_summary, spearman_rho, wilcoxon_signed_rank, Alternative, DistributionStats,
    PairedTestResult, SkippedPatch,
};

/// How one simulated annotator corrupts the truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    /// Probability of dropping each true cell.
    pub miss_rate: f64,
    /// Expected spurious points per patch (Poisson).
    pub spurious_rate: f64,
    /// Isotropic Gaussian positional noise, in micrometers.
    pub jitter_sigma_um: f64,
    /// Row-stochastic relabeling matrix over task classes
    /// (Tumor, Lymphocyte, Other).
    pub confusion: [[f64; 3]; 3],
}

impl NoiseProfile {
    pub fn clean() -> NoiseProfile {
        NoiseProfile {
            miss_rate: 0.0,
            spurious_rate: 0.0,
            jitter_sigma_um: 0.0,
            confusion: identity_confusion(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::Config(format!(
                "miss_rate must lie in [0, 1], got {}",
                self.miss_rate
            )));
        }
        if self.spurious_rate < 0.0 || !self.spurious_rate.is_finite() {
            return Err(Error::Config(format!(
                "spurious_rate must be non-negative, got {}",
                self.spurious_rate
            )));
        }
        if self.jitter_sigma_um < 0.0 || !self.jitter_sigma_um.is_finite() {
            return Err(Error::Config(format!(
                "jitter_sigma_um must be non-negative, got {}",
                self.jitter_sigma_um
            )));
        }
        for (i, row) in self.confusion.iter().enumerate() {
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::Config(format!("confusion row {i} has a negative entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!(
                    "confusion row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }

    pub fn is_clean(&self) -> bool {
        self.miss_rate == 0.0
            && self.spurious_rate == 0.0
            && self.jitter_sigma_um == 0.0
            && self.confusion == identity_confusion()
    }
}

pub fn identity_confusion() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn diagonal_confusion(diag: f64) -> [[f64; 3]; 3] {
    let off = (1.0 - diag) / 2.0;
    let mut m = [[off; 3]; 3];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = diag;
    }
    m
}

const MIN_SEPARATION_PX: f64 = 4.0;
const MAX_PLACEMENT_TRIES: usize = 1000;

/// Places Poisson(mean_cells) cells uniformly with a 4 px minimum
/// separation (rejection sampling); classes are i.i.d. from `class_mix`
/// over (Tumor, Lymphocyte, Other).
pub fn generate_ground_truth(
    patch: &PatchMeta,
    mean_cells: f64,
    class_mix: [f64; 3],
    annotator_id: &str,
    seed: u64,
) -> Result<Vec<CellAnnotation>> {
    if mean_cells < 0.0 || !mean_cells.is_finite() {
        return Err(Error::Config(format!(
            "mean_cells must be non-negative, got {mean_cells}"
        )));
    }
    let mix_sum: f64 = class_mix.iter().sum();
    if class_mix.iter().any(|&v| v < 0.0) || (mix_sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "class_mix must be a probability vector, got {class_mix:?}"
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let count = rng.next_poisson(mean_cells) as usize;
    let w = patch.width_px as f64;
    let h = patch.height_px as f64;
    let mut placed: Vec<(f64, f64)> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tries = 0;
        loop {
            let x = rng.next_f64() * w;
            let y = rng.next_f64() * h;
            let ok = placed
                .iter()
                .all(|&(px, py)| (px - x).hypot(py - y) >= MIN_SEPARATION_PX);
            if ok {
                placed.push((x, y));
                break;
            }
            tries += 1;
            if tries >= MAX_PLACEMENT_TRIES {
                return Err(Error::SeparationInfeasible {
                    requested: count,
                    min_separation_px: MIN_SEPARATION_PX,
                    width: patch.width_px,
                    height: patch.height_px,
                });
            }
        }
    }
    let anns = placed
        .into_iter()
        .map(|(x, y)| {
            let class = sample_class(&mut rng, &class_mix);
            CellAnnotation {
                patch_id: patch.patch_id.clone(),
                annotator_id: annotator_id.to_string(),
                class: class.canonical_raw(),
                x,
                y,
            }
        })
        .collect();
    Ok(anns)
}

fn sample_class(rng: &mut SplitMix64, mix: &[f64; 3]) -> TaskClass {
    let u = rng.next_f64();
    let mut cum = 0.0;
    for (i, &p) in mix.iter().enumerate() {
        cum += p;
        if u < cum {
            return TaskClass::from_index(i).unwrap();
        }
    }
    TaskClass::Other
}

fn clamp_coord(v: f64, limit: f64) -> f64 {
    v.clamp(0.0, limit - 1e-6)
}

/// Corrupts ground truth into one annotator's view of the patch.
///
/// Each true cell is independently dropped with `miss_rate`; survivors are
/// jittered by an isotropic Gaussian of `jitter_sigma_um / mpp` pixels and
/// relabeled through the confusion row of their class. Poisson-many spurious
/// points are placed uniformly, with classes drawn from the truth's
/// empirical class mix (uniform if the truth is empty). Everything is
/// clamped to patch bounds.
pub fn simulate_annotator(
    truth: &[CellAnnotation],
    profile: &NoiseProfile,
    patch: &PatchMeta,
    annotator_id: &str,
    seed: u64,
) -> Result<Vec<CellAnnotation>> {
    profile.validate()?;
    if !(patch.mpp > 0.0) || !patch.mpp.is_finite() {
        return Err(Error::Config(format!(
            "patch {:?} has invalid mpp {}",
            patch.patch_id, patch.mpp
        )));
    }
    let mut rng = SplitMix64::new(seed);
    let jitter_px = profile.jitter_sigma_um / patch.mpp;
    let w = patch.width_px as f64;
    let h = patch.height_px as f64;

    let mut out = Vec::with_capacity(truth.len());
    for cell in truth {
        if rng.next_f64() < profile.miss_rate {
            continue;
        }
        let (mut x, mut y) = (cell.x, cell.y);
        if jitter_px > 0.0 {
            let (dx, dy) = rng.next_normal_pair();
            x += dx * jitter_px;
            y += dy * jitter_px;
        }
        let row = &profile.confusion[cell.task_class().index()];
        let u = rng.next_f64();
        let mut cum = 0.0;
        let mut class = cell.task_class();
        for (i, &p) in row.iter().enumerate() {
            cum += p;
            if u < cum {
                class = TaskClass::from_index(i).unwrap();
                break;
            }
        }
        out.push(CellAnnotation {
            patch_id: patch.patch_id.clone(),
            annotator_id: annotator_id.to_string(),
            class: class.canonical_raw(),
            x: clamp_coord(x, w),
            y: clamp_coord(y, h),
        });
    }

    let mut mix = [1.0 / 3.0; 3];
    if !truth.is_empty() {
        let mut counts = [0usize; 3];
        for cell in truth {
            counts[cell.task_class().index()] += 1;
        }
        for i in 0..3 {
            mix[i] = counts[i] as f64 / truth.len() as f64;
        }
    }
    let spurious = rng.next_poisson(profile.spurious_rate);
    for _ in 0..spurious {
        let x = rng.next_f64() * w;
        let y = rng.next_f64() * h;
        let class = sample_class(&mut rng, &mix);
        out.push(CellAnnotation {
            patch_id: patch.patch_id.clone(),
            annotator_id: annotator_id.to_string(),
            class: class.canonical_raw(),
            x: clamp_coord(x, w),
            y: clamp_coord(y, h),
        });
    }
    Ok(out)
}

/// Configuration of a full synthetic study. Defaults mirror the scale of a
/// real campaign: 150 control patches averaging ~218 cells, 120 annotators,
/// 16 strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticStudyConfig {
    pub n_annotators: usize,
    pub n_control_patches: usize,
    pub cells_per_patch: f64,
    pub n_strata: usize,
    pub heldout_patches_per_stratum: usize,
    pub patch_width: u32,
    pub patch_height: u32,
    pub mpp: f64,
    pub theta_um: f64,
    pub min_shared_patches: usize,
    pub class_mix: [f64; 3],
    /// Profile i is assigned to annotators with index ≡ i (mod ladder len);
    /// index 0 is the anchor's profile and is conventionally zero-noise.
    pub noise_ladder: Vec<NoiseProfile>,
    pub seed: u64,
}

impl Default for SyntheticStudyConfig {
    fn default() -> Self {
        SyntheticStudyConfig {
            n_annotators: 120,
            n_control_patches: 150,
            cells_per_patch: 218.0,
            n_strata: 16,
            heldout_patches_per_stratum: 4,
            patch_width: 1024,
            patch_height: 1024,
            mpp: 0.5,
            theta_um: 10.0,
            min_shared_patches: 5,
            class_mix: [0.5, 0.3, 0.2],
            noise_ladder: default_noise_ladder(),
            seed: 0,
        }
    }
}

/// An eight-step ladder from a clean annotator to a heavily degraded one.
pub fn default_noise_ladder() -> Vec<NoiseProfile> {
    let steps = [
        (0.00, 0.0, 0.0, 1.00),
        (0.02, 2.0, 1.0, 0.98),
        (0.05, 5.0, 2.0, 0.96),
        (0.08, 10.0, 3.0, 0.94),
        (0.12, 16.0, 4.5, 0.92),
        (0.16, 24.0, 6.0, 0.90),
        (0.22, 34.0, 8.0, 0.87),
        (0.30, 46.0, 10.0, 0.84),
    ];
    steps
        .iter()
        .map(|&(miss, spurious, jitter, diag)| NoiseProfile {
            miss_rate: miss,
            spurious_rate: spurious,
            jitter_sigma_um: jitter,
            confusion: if diag == 1.0 {
                identity_confusion()
            } else {
                diagonal_confusion(diag)
            },
        })
        .collect()
}

/// Label quality of one percentile range across strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeQuality {
    pub label: String,
    pub n_annotators: usize,
    pub mean_mf1: f64,
    pub per_stratum: BTreeMap<String, f64>,
}

/// A paired comparison of two ranges across strata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyComparison {
    pub label: String,
    pub wins: usize,
    pub n_strata: usize,
    pub mean_diff: f64,
    /// Absent when the differences are degenerate (all zero).
    pub wilcoxon: Option<PairedTestResult>,
}

/// Everything the synthetic study measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: SyntheticStudyConfig,
    pub anchor_id: String,
    pub conformity_by_annotator: BTreeMap<String, f64>,
    pub noise_rank_by_annotator: BTreeMap<String, usize>,
    pub conformity_distribution: DistributionStats,
    pub kappa_mean: f64,
    pub kappa_min: f64,
    pub kappa_max: f64,
    pub kappa_n_patches: usize,
    pub kappa_per_patch: BTreeMap<String, f64>,
    pub kappa_skipped: Vec<SkippedPatch>,
    /// Spearman correlation between conformity and inverted noise rank
    /// (positive means cleaner annotators score higher).
    pub spearman_conformity_vs_cleanliness: f64,
    pub partition_degenerate: bool,
    pub quartile_partition: PartitionSpec,
    pub label_quality: Vec<RangeQuality>,
    pub comparisons: Vec<StudyComparison>,
}

fn control_patch(cfg: &SyntheticStudyConfig, idx: usize) -> PatchMeta {
    PatchMeta {
        patch_id: format!("C{idx:04}"),
        width_px: cfg.patch_width,
        height_px: cfg.patch_height,
        mpp: cfg.mpp,
        split: Split::Control,
        origin: None,
    }
}

fn heldout_patch(cfg: &SyntheticStudyConfig, stratum: usize, idx: usize) -> PatchMeta {
    PatchMeta {
        patch_id: format!("H{stratum:02}_{idx:03}"),
        width_px: cfg.patch_width,
        height_px: cfg.patch_height,
        mpp: cfg.mpp,
        split: Split::Training,
        origin: Some(stratum_name(stratum)),
    }
}

pub fn stratum_name(stratum: usize) -> String {
    format!("stratum-{:02}", stratum + 1)
}

fn annotator_name(idx: usize) -> String {
    format!("A{idx:03}")
}

// Seed stream tags.
const STREAM_CONTROL_TRUTH: u64 = 1;
const STREAM_ANNOTATION: u64 = 2;
const STREAM_HELDOUT_TRUTH: u64 = 3;

/// The six percentile ranges of interest: disjoint quartile extremes plus
/// the nested halves and the 75% / 100% supersets.
pub fn study_ranges() -> Vec<PercentileRange> {
    [
        (0.0, 25.0),
        (75.0, 100.0),
        (0.0, 50.0),
        (50.0, 100.0),
        (25.0, 100.0),
        (0.0, 100.0),
    ]
    .iter()
    .map(|&(lo, hi)| PercentileRange { lo, hi })
    .collect()
}

/// Runs the full synthetic study.
pub fn run_synthetic_study(cfg: &SyntheticStudyConfig) -> Result<StudyReport> {
    if cfg.n_annotators < 2 {
        return Err(Error::Config("need at least 2 annotators".into()));
    }
    if cfg.noise_ladder.is_empty() {
        return Err(Error::Config("noise ladder must not be empty".into()));
    }
    for p in &cfg.noise_ladder {
        p.validate()?;
    }
    if cfg.n_control_patches == 0 || cfg.n_strata == 0 || cfg.heldout_patches_per_stratum == 0 {
        return Err(Error::Config(
            "control patches, strata, and held-out patches must all be positive".into(),
        ));
    }
    let match_cfg = MatchConfig::new(cfg.theta_um)?;
    let anchor_id = annotator_name(0);
    let profile_of = |annotator_idx: usize| &cfg.noise_ladder[annotator_idx % cfg.noise_ladder.len()];

    // Control set: truth plus the anchor's (usually clean) annotations.
    let control_patches: Vec<PatchMeta> =
        (0..cfg.n_control_patches).map(|i| control_patch(cfg, i)).collect();
    let control_truth: Vec<Vec<CellAnnotation>> = control_patches
        .par_iter()
        .enumerate()
        .map(|(i, patch)| {
            generate_ground_truth(
                patch,
                cfg.cells_per_patch,
                cfg.class_mix,
                "truth",
                derive_seed(cfg.seed, &[STREAM_CONTROL_TRUTH, i as u64]),
            )
        })
        .collect::<Result<_>>()?;

    let annotate = |annotator_idx: usize, patch_idx: usize| -> Result<Vec<CellAnnotation>> {
        simulate_annotator(
            &control_truth[patch_idx],
            profile_of(annotator_idx),
            &control_patches[patch_idx],
            &annotator_name(annotator_idx),
            derive_seed(
                cfg.seed,
                &[STREAM_ANNOTATION, annotator_idx as u64, patch_idx as u64],
            ),
        )
    };

    let anchor_annotations: Vec<Vec<CellAnnotation>> = (0..cfg.n_control_patches)
        .into_par_iter()
        .map(|p| annotate(0, p))
        .collect::<Result<_>>()?;

    // Conformity of every non-anchor annotator against the anchor.
    let reports: Vec<ConformityReport> = (1..cfg.n_annotators)
        .into_par_iter()
        .map(|a| {
            let mut acc = ConformityAccumulator::new();
            for p in 0..cfg.n_control_patches {
                let mine = annotate(a, p)?;
                let mine_refs: Vec<&CellAnnotation> = mine.iter().collect();
                let anchor_refs: Vec<&CellAnnotation> = anchor_annotations[p].iter().collect();
                acc.add_patch(&mine_refs, &anchor_refs, &control_patches[p], &match_cfg)?;
            }
            acc.finish(&annotator_name(a))
        })
        .collect::<Result<_>>()?;

    let conformity_by_annotator: BTreeMap<String, f64> = reports
        .iter()
        .map(|r| (r.annotator_id.clone(), r.conformity))
        .collect();
    let noise_rank_by_annotator: BTreeMap<String, usize> = (1..cfg.n_annotators)
        .map(|a| (annotator_name(a), a % cfg.noise_ladder.len()))
        .collect();

    let conf_values: Vec<f64> = reports.iter().map(|r| r.conformity).collect();
    let conformity_distribution = distribution_summary(&conf_values, 20)?;

    // Spearman between conformity and inverted noise rank.
    let ranks: Vec<f64> = reports
        .iter()
        .map(|r| -(noise_rank_by_annotator[&r.annotator_id] as f64))
        .collect();
    let spearman = match spearman_rho(&conf_values, &ranks) {
        Ok(rho) => rho,
        Err(Error::Degenerate(_)) => 0.0,
        Err(e) => return Err(e),
    };

    // Fleiss' kappa per control patch; raters are the non-anchor annotators.
    let kappa_rows: Vec<(String, std::result::Result<f64, String>)> = (0..cfg.n_control_patches)
        .into_par_iter()
        .map(|p| -> Result<(String, std::result::Result<f64, String>)> {
            let patch = &control_patches[p];
            let mut rater_anns: Vec<(String, Vec<CellAnnotation>)> = Vec::new();
            for a in 1..cfg.n_annotators {
                rater_anns.push((annotator_name(a), annotate(a, p)?));
            }
            let rater_sets: BTreeMap<&str, Vec<&CellAnnotation>> = rater_anns
                .iter()
                .map(|(id, anns)| (id.as_str(), anns.iter().collect()))
                .collect();
            let anchor_refs: Vec<&CellAnnotation> = anchor_annotations[p].iter().collect();
            let outcome =
                crate::stats::build_rating_matrix(patch, &anchor_refs, &rater_sets, &match_cfg)
                    .and_then(|m| crate::stats::fleiss_kappa(&m));
            match outcome {
                Ok(k) => Ok((patch.patch_id.clone(), Ok(k))),
                Err(Error::Degenerate(reason)) => Ok((patch.patch_id.clone(), Err(reason))),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let mut kappa_per_patch = BTreeMap::new();
    let mut kappa_skipped = Vec::new();
    for (patch_id, outcome) in kappa_rows {
        match outcome {
            Ok(k) => {
                kappa_per_patch.insert(patch_id, k);
            }
            Err(reason) => kappa_skipped.push(SkippedPatch { patch_id, reason }),
        }
    }
    let (kappa_mean, kappa_min, kappa_max) = if kappa_per_patch.is_empty() {
        (f64::NAN, f64::NAN, f64::NAN)
    } else {
        let vals: Vec<f64> = kappa_per_patch.values().copied().collect();
        (
            vals.iter().sum::<f64>() / vals.len() as f64,
            vals.iter().copied().fold(f64::INFINITY, f64::min),
            vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };

    // Quartile partition, weighted by control patch coverage.
    let spread = conf_values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - conf_values.iter().copied().fold(f64::INFINITY, f64::min);
    let partition_degenerate = !(spread > 0.0);
    let patches_per_annotator: BTreeMap<String, BTreeSet<String>> = reports
        .iter()
        .map(|r| {
            (
                r.annotator_id.clone(),
                control_patches.iter().map(|p| p.patch_id.clone()).collect(),
            )
        })
        .collect();
    let quartiles: Vec<PercentileRange> = [(0.0, 25.0), (25.0, 50.0), (50.0, 75.0), (75.0, 100.0)]
        .iter()
        .map(|&(lo, hi)| PercentileRange { lo, hi })
        .collect();
    let quartile_partition = percentile_partition(
        &reports,
        &patches_per_annotator,
        &quartiles,
        Weighting::ByPatchCount,
    )?;

    // Held-out label quality per percentile range and stratum.
    let heldout: Vec<(PatchMeta, Vec<CellAnnotation>)> = (0..cfg.n_strata)
        .flat_map(|s| (0..cfg.heldout_patches_per_stratum).map(move |j| (s, j)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(s, j)| {
            let patch = heldout_patch(cfg, s, j);
            let global = (s * cfg.heldout_patches_per_stratum + j) as u64;
            let truth = generate_ground_truth(
                &patch,
                cfg.cells_per_patch,
                cfg.class_mix,
                "truth",
                derive_seed(cfg.seed, &[STREAM_HELDOUT_TRUTH, global]),
            )?;
            Ok((patch, truth))
        })
        .collect::<Result<_>>()?;

    let sorted_annotators: Vec<(String, usize)> = {
        let mut v: Vec<(String, usize)> = (1..cfg.n_annotators).map(|a| (annotator_name(a), a)).collect();
        v.sort();
        v
    };
    let mut label_quality = Vec::new();
    for range in study_ranges() {
        let members: Vec<(String, usize)> = sorted_annotators
            .iter()
            .filter(|(id, _)| {
                quartile_partition
                    .midpoints
                    .get(id)
                    .is_some_and(|mid| range.contains(*mid))
            })
            .cloned()
            .collect();
        if members.is_empty() {
            label_quality.push(RangeQuality {
                label: range.label(),
                n_annotators: 0,
                mean_mf1: f64::NAN,
                per_stratum: BTreeMap::new(),
            });
            continue;
        }
        let per_stratum: BTreeMap<String, f64> = (0..cfg.n_strata)
            .into_par_iter()
            .map(|s| -> Result<(String, f64)> {
                let mut preds: Vec<CellAnnotation> = Vec::new();
                let mut truths: Vec<CellAnnotation> = Vec::new();
                let mut metas: Vec<PatchMeta> = Vec::new();
                for j in 0..cfg.heldout_patches_per_stratum {
                    let global = s * cfg.heldout_patches_per_stratum + j;
                    let (patch, truth) = &heldout[global];
                    // Round-robin over the range's members; the per-task
                    // seed depends only on (annotator, patch) so overlapping
                    // ranges reuse identical annotations.
                    let (member_id, member_idx) = &members[global % members.len()];
                    let anns = simulate_annotator(
                        truth,
                        profile_of(*member_idx),
                        patch,
                        member_id,
                        derive_seed(
                            cfg.seed,
                            &[
                                STREAM_ANNOTATION,
                                *member_idx as u64,
                                (cfg.n_control_patches + global) as u64,
                            ],
                        ),
                    )?;
                    preds.extend(anns);
                    truths.extend(truth.iter().cloned());
                    metas.push(patch.clone());
                }
                let eval = evaluate_detections(&preds, &truths, &metas, &match_cfg)?;
                Ok((stratum_name(s), eval.mf1))
            })
            .collect::<Result<_>>()?;
        let mean_mf1 = per_stratum.values().sum::<f64>() / per_stratum.len() as f64;
        label_quality.push(RangeQuality {
            label: range.label(),
            n_annotators: members.len(),
            mean_mf1,
            per_stratum,
        });
    }

    let quality_of = |label: &str| -> &RangeQuality {
        label_quality.iter().find(|q| q.label == label).unwrap()
    };
    let mut comparisons = Vec::new();
    for (hi, lo) in [("p75-100", "p0-25"), ("p50-100", "p0-50"), ("p25-100", "p0-100")] {
        let a = quality_of(hi);
        let b = quality_of(lo);
        let strata: Vec<&String> = a.per_stratum.keys().collect();
        let xs: Vec<f64> = strata.iter().map(|s| a.per_stratum[*s]).collect();
        let ys: Vec<f64> = strata.iter().map(|s| b.per_stratum[*s]).collect();
        let wins = xs.iter().zip(&ys).filter(|(x, y)| x > y).count();
        let mean_diff =
            xs.iter().zip(&ys).map(|(x, y)| x - y).sum::<f64>() / xs.len().max(1) as f64;
        let wilcoxon = match wilcoxon_signed_rank(&xs, &ys, Alternative::TwoSided) {
            Ok(r) => Some(r),
            Err(Error::Degenerate(_)) => None,
            Err(e) => return Err(e),
        };
        comparisons.push(StudyComparison {
            label: format!("{hi} vs {lo}"),
            wins,
            n_strata: xs.len(),
            mean_diff,
            wilcoxon,
        });
    }

    Ok(StudyReport {
        config: cfg.clone(),
        anchor_id,
        conformity_by_annotator,
        noise_rank_by_annotator,
        conformity_distribution,
        kappa_mean,
        kappa_min,
        kappa_max,
        kappa_n_patches: kappa_per_patch.len(),
        kappa_per_patch,
        kappa_skipped,
        spearman_conformity_vs_cleanliness: spearman,
        partition_degenerate,
        quartile_partition,
        label_quality,
        comparisons,
    })
}

/// Materializes the study's control set as a dataset: truth is the anchor's
/// view, every other annotator's simulated annotations ride along. The
/// result flows through the same downstream commands as real data.
pub fn study_control_dataset(cfg: &SyntheticStudyConfig) -> Result<Dataset> {
    let control_patches: Vec<PatchMeta> =
        (0..cfg.n_control_patches).map(|i| control_patch(cfg, i)).collect();
    let mut annotations = Vec::new();
    for (i, patch) in control_patches.iter().enumerate() {
        let truth = generate_ground_truth(
            patch,
            cfg.cells_per_patch,
            cfg.class_mix,
            "truth",
            derive_seed(cfg.seed, &[STREAM_CONTROL_TRUTH, i as u64]),
        )?;
        for a in 0..cfg.n_annotators {
            let anns = simulate_annotator(
                &truth,
                &cfg.noise_ladder[a % cfg.noise_ladder.len()],
                patch,
                &annotator_name(a),
                derive_seed(cfg.seed, &[STREAM_ANNOTATION, a as u64, i as u64]),
            )?;
            annotations.extend(anns);
        }
    }
    Ok(Dataset::new(control_patches, annotations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::conformity;

    fn patch(id: &str, w: u32, h: u32, mpp: f64) -> PatchMeta {
        PatchMeta {
            patch_id: id.into(),
            width_px: w,
            height_px: h,
            mpp,
            split: Split::Control,
            origin: None,
        }
    }

    #[test]
    fn zero_mean_yields_no_cells() {
        let p = patch("c", 256, 256, 0.5);
        let t = generate_ground_truth(&p, 0.0, [0.5, 0.3, 0.2], "truth", 1).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn pure_mix_yields_one_class() {
        let p = patch("c", 512, 512, 0.5);
        let t = generate_ground_truth(&p, 50.0, [1.0, 0.0, 0.0], "truth", 2).unwrap();
        assert!(!t.is_empty());
        assert!(t.iter().all(|a| a.task_class() == TaskClass::Tumor));
    }

    #[test]
    fn ground_truth_respects_separation_and_bounds() {
        let p = patch("c", 256, 256, 0.5);
        let t = generate_ground_truth(&p, 100.0, [0.5, 0.3, 0.2], "truth", 3).unwrap();
        for a in &t {
            assert!(a.x >= 0.0 && a.x < 256.0);
            assert!(a.y >= 0.0 && a.y < 256.0);
        }
        for i in 0..t.len() {
            for j in 0..i {
                let d = (t[i].x - t[j].x).hypot(t[i].y - t[j].y);
                assert!(d >= MIN_SEPARATION_PX, "separation {d}");
            }
        }
    }

    #[test]
    fn infeasible_density_errors() {
        let p = patch("c", 16, 16, 0.5);
        // 16x16 px cannot host hundreds of points 4 px apart.
        let r = generate_ground_truth(&p, 500.0, [1.0, 0.0, 0.0], "truth", 4);
        assert!(matches!(r, Err(Error::SeparationInfeasible { .. })));
    }

    #[test]
    fn poisson_count_matches_mean() {
        let p = patch("c", 1024, 1024, 0.5);
        let n = 400;
        let mut total = 0usize;
        for seed in 0..n {
            total += generate_ground_truth(&p, 218.0, [0.5, 0.3, 0.2], "truth", seed)
                .unwrap()
                .len();
        }
        let mean = total as f64 / n as f64;
        let se = (218.0 / n as f64).sqrt();
        assert!((mean - 218.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn clean_profile_reproduces_truth_exactly() {
        let p = patch("c", 512, 512, 0.5);
        let truth = generate_ground_truth(&p, 80.0, [0.5, 0.3, 0.2], "A0", 5).unwrap();
        let sim = simulate_annotator(&truth, &NoiseProfile::clean(), &p, "A0", 99).unwrap();
        assert_eq!(truth, sim);

        let d = Dataset::new(vec![p.clone()], truth.iter().chain(&sim).cloned().collect());
        // Same points under two ids: conformity must be exactly 1.
        let sim2 = simulate_annotator(&truth, &NoiseProfile::clean(), &p, "B0", 99).unwrap();
        let d = Dataset::new(
            d.patches,
            truth.iter().cloned().chain(sim2).collect(),
        );
        let r = conformity("B0", &d, "A0", &MatchConfig::default()).unwrap();
        assert_eq!(r.conformity, 1.0);
    }

    #[test]
    fn full_miss_rate_drops_everything() {
        let p = patch("c", 512, 512, 0.5);
        let truth = generate_ground_truth(&p, 60.0, [0.5, 0.3, 0.2], "t", 6).unwrap();
        let profile = NoiseProfile {
            miss_rate: 1.0,
            ..NoiseProfile::clean()
        };
        let sim = simulate_annotator(&truth, &profile, &p, "a", 7).unwrap();
        assert!(sim.is_empty());
    }

    #[test]
    fn simulation_is_a_pure_function_of_seed() {
        let p = patch("c", 512, 512, 0.5);
        let truth = generate_ground_truth(&p, 60.0, [0.5, 0.3, 0.2], "t", 8).unwrap();
        let profile = NoiseProfile {
            miss_rate: 0.2,
            spurious_rate: 5.0,
            jitter_sigma_um: 2.0,
            confusion: diagonal_confusion(0.9),
        };
        let a = simulate_annotator(&truth, &profile, &p, "a", 11).unwrap();
        let b = simulate_annotator(&truth, &profile, &p, "a", 11).unwrap();
        let c = simulate_annotator(&truth, &profile, &p, "a", 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn output_size_tracks_expectation() {
        let p = patch("c", 1024, 1024, 0.5);
        let truth = generate_ground_truth(&p, 200.0, [0.5, 0.3, 0.2], "t", 13).unwrap();
        let profile = NoiseProfile {
            miss_rate: 0.25,
            spurious_rate: 12.0,
            jitter_sigma_um: 1.0,
            confusion: identity_confusion(),
        };
        let n = 300;
        let mut total = 0usize;
        for seed in 0..n {
            total += simulate_annotator(&truth, &profile, &p, "a", seed).unwrap().len();
        }
        let mean = total as f64 / n as f64;
        let expected = truth.len() as f64 * 0.75 + 12.0;
        // Var = |T| p(1-p) + lambda
        let var = truth.len() as f64 * 0.25 * 0.75 + 12.0;
        let se = (var / n as f64).sqrt();
        assert!((mean - expected).abs() < 3.0 * se, "mean {mean} expected {expected}");
    }

    #[test]
    fn conformity_degrades_monotonically_per_noise_axis() {
        let p = patch("c", 768, 768, 0.5);
        let cfg = MatchConfig::default();
        let axes: [Box<dyn Fn(f64) -> NoiseProfile>; 4] = [
            Box::new(|v| NoiseProfile { miss_rate: v * 0.6, ..NoiseProfile::clean() }),
            Box::new(|v| NoiseProfile { spurious_rate: v * 60.0, ..NoiseProfile::clean() }),
            Box::new(|v| NoiseProfile { jitter_sigma_um: v * 12.0, ..NoiseProfile::clean() }),
            Box::new(|v| NoiseProfile {
                confusion: diagonal_confusion(1.0 - v * 0.45),
                ..NoiseProfile::clean()
            }),
        ];
        for (axis, make) in axes.iter().enumerate() {
            let mut means = Vec::new();
            for step in 0..5 {
                let profile = make(step as f64 / 4.0);
                let mut sum = 0.0;
                for seed in 0..20u64 {
                    let truth =
                        generate_ground_truth(&p, 120.0, [0.5, 0.3, 0.2], "t", 1000 + seed).unwrap();
                    let sim =
                        simulate_annotator(&truth, &profile, &p, "a", 2000 + seed).unwrap();
                    let d = Dataset::new(
                        vec![p.clone()],
                        truth.into_iter().chain(sim).collect(),
                    );
                    sum += conformity("a", &d, "t", &cfg).unwrap().conformity;
                }
                means.push(sum / 20.0);
            }
            for w in means.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9,
                    "axis {axis} not monotone: {means:?}"
                );
            }
        }
    }

    #[test]
    fn tiny_study_runs_end_to_end() {
        let cfg = SyntheticStudyConfig {
            n_annotators: 16,
            n_control_patches: 8,
            cells_per_patch: 40.0,
            n_strata: 4,
            heldout_patches_per_stratum: 2,
            patch_width: 512,
            patch_height: 512,
            seed: 42,
            ..SyntheticStudyConfig::default()
        };
        let report = run_synthetic_study(&cfg).unwrap();
        assert_eq!(report.anchor_id, "A000");
        assert_eq!(report.conformity_by_annotator.len(), 15);
        assert!(!report.partition_degenerate);
        assert!(report.spearman_conformity_vs_cleanliness > 0.5);
        let full = report.label_quality.iter().find(|q| q.label == "p0-100").unwrap();
        assert_eq!(full.n_annotators, 15);
        assert_eq!(full.per_stratum.len(), 4);
    }

    #[test]
    fn all_clean_crowd_is_degenerate() {
        let cfg = SyntheticStudyConfig {
            n_annotators: 6,
            n_control_patches: 5,
            cells_per_patch: 30.0,
            n_strata: 2,
            heldout_patches_per_stratum: 1,
            patch_width: 512,
            patch_height: 512,
            noise_ladder: vec![NoiseProfile::clean()],
            seed: 7,
            ..SyntheticStudyConfig::default()
        };
        let report = run_synthetic_study(&cfg).unwrap();
        assert!(report.partition_degenerate);
        assert!(report
            .conformity_by_annotator
            .values()
            .all(|&c| c == 1.0));
    }

    #[test]
    fn study_is_deterministic() {
        let cfg = SyntheticStudyConfig {
            n_annotators: 8,
            n_control_patches: 4,
            cells_per_patch: 25.0,
            n_strata: 2,
            heldout_patches_per_stratum: 1,
            patch_width: 384,
            patch_height: 384,
            seed: 5,
            ..SyntheticStudyConfig::default()
        };
        let a = run_synthetic_study(&cfg).unwrap();
        let b = run_synthetic_study(&cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
