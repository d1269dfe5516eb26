//! Agreement and distributional statistics.
//!
//! Everything in this module is deterministic; there is no RNG anywhere.

mod shapiro;
mod wilcoxon;

pub use shapiro::shapiro_wilk;
pub use wilcoxon::{wilcoxon_signed_rank, Alternative, PairedTestResult};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{match_points, MatchConfig};
use crate::model::{CellAnnotation, Dataset, PatchMeta, Split, TaskClass};

/// Rating categories: an anchor cell is rated by each annotator as its own
/// class when the hit criterion is satisfied, otherwise as unmatched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RatingCategory {
    Tumor,
    Lymphocyte,
    Unmatched,
}

impl RatingCategory {
    pub const ALL: [RatingCategory; 3] = [
        RatingCategory::Tumor,
        RatingCategory::Lymphocyte,
        RatingCategory::Unmatched,
    ];

    pub fn index(self) -> usize {
        match self {
            RatingCategory::Tumor => 0,
            RatingCategory::Lymphocyte => 1,
            RatingCategory::Unmatched => 2,
        }
    }
}

/// Per-item category counts with a constant number of raters per item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingMatrix {
    rows: Vec<[u64; 3]>,
    raters_per_item: u64,
}

impl RatingMatrix {
    pub fn new(rows: Vec<[u64; 3]>, raters_per_item: u64) -> Result<RatingMatrix> {
        if rows.len() < 2 {
            return Err(Error::Degenerate(format!(
                "rating matrix needs at least 2 items, got {}",
                rows.len()
            )));
        }
        if raters_per_item < 2 {
            return Err(Error::Degenerate(format!(
                "rating matrix needs at least 2 raters, got {raters_per_item}"
            )));
        }
        for (i, row) in rows.iter().enumerate() {
            let sum: u64 = row.iter().sum();
            if sum != raters_per_item {
                return Err(Error::Config(format!(
                    "rating row {i} sums to {sum}, expected {raters_per_item}"
                )));
            }
        }
        Ok(RatingMatrix {
            rows,
            raters_per_item,
        })
    }

    pub fn rows(&self) -> &[[u64; 3]] {
        &self.rows
    }

    pub fn raters_per_item(&self) -> u64 {
        self.raters_per_item
    }

    pub fn n_items(&self) -> usize {
        self.rows.len()
    }
}

/// Builds the rating matrix for one patch.
///
/// Items are the anchor's tumor and lymphocyte cells. For each rater, the
/// rater's annotations are greedily matched to the anchor cells of the same
/// class under the hit criterion; a matched item is rated as its class, an
/// unmatched item as `Unmatched`. One-to-one matching means a rater with two
/// annotations near one item contributes a single rating for it.
pub fn build_rating_matrix(
    patch: &PatchMeta,
    anchor_cells: &[&CellAnnotation],
    rater_sets: &BTreeMap<&str, Vec<&CellAnnotation>>,
    cfg: &MatchConfig,
) -> Result<RatingMatrix> {
    let theta_px = cfg.theta_px(patch)?;

    // Items sorted by (class, x, y) so the matrix is row-order independent.
    let mut items: Vec<(TaskClass, f64, f64)> = anchor_cells
        .iter()
        .filter(|a| matches!(a.task_class(), TaskClass::Tumor | TaskClass::Lymphocyte))
        .map(|a| (a.task_class(), a.x, a.y))
        .collect();
    items.sort_by(|l, r| {
        l.0.index()
            .cmp(&r.0.index())
            .then(l.1.total_cmp(&r.1))
            .then(l.2.total_cmp(&r.2))
    });

    if items.len() < 2 {
        return Err(Error::Degenerate(format!(
            "patch {:?} has {} anchor items; at least 2 needed for agreement",
            patch.patch_id,
            items.len()
        )));
    }
    if rater_sets.len() < 2 {
        return Err(Error::Degenerate(format!(
            "patch {:?} has {} raters; at least 2 needed for agreement",
            patch.patch_id,
            rater_sets.len()
        )));
    }

    let mut rows = vec![[0u64; 3]; items.len()];
    for anns in rater_sets.values() {
        for class in [TaskClass::Tumor, TaskClass::Lymphocyte] {
            let item_idx: Vec<usize> = items
                .iter()
                .enumerate()
                .filter(|(_, it)| it.0 == class)
                .map(|(i, _)| i)
                .collect();
            let item_pts: Vec<(f64, f64)> = item_idx.iter().map(|&i| (items[i].1, items[i].2)).collect();

            let mut rater_pts: Vec<(f64, f64)> = anns
                .iter()
                .filter(|a| a.task_class() == class)
                .map(|a| (a.x, a.y))
                .collect();
            rater_pts.sort_by(|l, r| l.0.total_cmp(&r.0).then(l.1.total_cmp(&r.1)));

            let result = match_points(&rater_pts, &item_pts, theta_px);
            let mut matched = vec![false; item_pts.len()];
            for pair in &result.pairs {
                matched[pair.c_index] = true;
            }
            for (local, &global) in item_idx.iter().enumerate() {
                let cat = if matched[local] {
                    match class {
                        TaskClass::Tumor => RatingCategory::Tumor,
                        TaskClass::Lymphocyte => RatingCategory::Lymphocyte,
                        TaskClass::Other => unreachable!(),
                    }
                } else {
                    RatingCategory::Unmatched
                };
                rows[global][cat.index()] += 1;
            }
        }
    }

    RatingMatrix::new(rows, rater_sets.len() as u64)
}

/// Fleiss' kappa: chance-corrected agreement for categorical ratings with a
/// constant rater count per item. Returns a value in [-1, 1].
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64> {
    let n = m.raters_per_item();
    let n_items = m.n_items() as u64;

    // All ratings in a single category leave no room for chance correction.
    for j in 0..3 {
        let col: u64 = m.rows().iter().map(|r| r[j]).sum();
        if col == n_items * n {
            return Err(Error::Degenerate(
                "all ratings fall in one category; kappa undefined".into(),
            ));
        }
    }

    let nf = n as f64;
    let mut p_bar = 0.0;
    let mut totals = [0u64; 3];
    for row in m.rows() {
        let sum_sq: u64 = row.iter().map(|&c| c * c).sum();
        p_bar += (sum_sq as f64 - nf) / (nf * (nf - 1.0));
        for j in 0..3 {
            totals[j] += row[j];
        }
    }
    p_bar /= n_items as f64;

    let total_ratings = (n_items * n) as f64;
    let pe: f64 = totals
        .iter()
        .map(|&t| {
            let pj = t as f64 / total_ratings;
            pj * pj
        })
        .sum();

    Ok((p_bar - pe) / (1.0 - pe))
}

/// Per-patch kappa values and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub kappa_per_patch: BTreeMap<String, f64>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AgreementStats {
    fn from_map(kappa_per_patch: BTreeMap<String, f64>) -> Result<AgreementStats> {
        if kappa_per_patch.is_empty() {
            return Err(Error::Degenerate(
                "no control patch yields a computable rating matrix".into(),
            ));
        }
        let values: Vec<f64> = kappa_per_patch.values().copied().collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(AgreementStats {
            kappa_per_patch,
            mean,
            min,
            max,
        })
    }
}

/// A patch that produced no kappa value, and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPatch {
    pub patch_id: String,
    pub reason: String,
}

/// Computes Fleiss' kappa per control patch.
///
/// Raters are the non-anchor annotators with at least one annotation on the
/// patch; the rater count therefore varies across patches while staying
/// constant within one.
pub fn kappa_by_patch(
    dataset: &Dataset,
    anchor_id: &str,
    cfg: &MatchConfig,
) -> Result<(AgreementStats, Vec<SkippedPatch>)> {
    let mut kappas = BTreeMap::new();
    let mut skipped = Vec::new();
    for patch in dataset.patches.iter().filter(|p| p.split == Split::Control) {
        let mut by_annotator = dataset.annotations_on_patch(&patch.patch_id);
        let Some(anchor_cells) = by_annotator.remove(anchor_id) else {
            skipped.push(SkippedPatch {
                patch_id: patch.patch_id.clone(),
                reason: "anchor has no annotations on this patch".into(),
            });
            continue;
        };
        let outcome = build_rating_matrix(patch, &anchor_cells, &by_annotator, cfg)
            .and_then(|m| fleiss_kappa(&m));
        match outcome {
            Ok(k) => {
                kappas.insert(patch.patch_id.clone(), k);
            }
            Err(Error::Degenerate(reason)) => skipped.push(SkippedPatch {
                patch_id: patch.patch_id.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok((AgreementStats::from_map(kappas)?, skipped))
}

/// Moment coefficient of skewness g1 = m3 / m2^(3/2) with 1/n central
/// moments.
pub fn sample_skewness(sample: &[f64]) -> Result<f64> {
    let n = sample.len();
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "skewness needs at least 3 values, got {n}"
        )));
    }
    let nf = n as f64;
    let mean = sample.iter().sum::<f64>() / nf;
    let m2 = sample.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m3 = sample.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return Err(Error::Degenerate("skewness undefined for a constant sample".into()));
    }
    Ok(m3 / m2.powf(1.5))
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i+1 ..= j, average = (i + j + 1) / 2
        let avg = (i + j + 1) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Config(format!(
            "spearman needs two equally sized samples of length >= 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Degenerate("spearman undefined when a sample is constant".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// One histogram bin; right-open except the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub bin_right: f64,
    pub count: u64,
}

/// Summary statistics of a sample, with degenerate fields set to null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    /// Sample standard deviation (n-1 denominator); null for n < 2.
    pub std: Option<f64>,
    /// Moment coefficient g1; null for n < 3 or a constant sample.
    pub skewness: Option<f64>,
    /// Shapiro-Wilk, null outside 3 <= n <= 5000 or for a constant sample.
    pub shapiro_w: Option<f64>,
    pub shapiro_p: Option<f64>,
    pub histogram: Vec<HistogramBin>,
}

/// Summarizes a sample into moments, normality diagnostics, and an
/// equal-width histogram over [min, max].
pub fn distribution_summary(sample: &[f64], bins: usize) -> Result<DistributionStats> {
    if sample.is_empty() {
        return Err(Error::Degenerate("empty sample".into()));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let n = sample.len();
    let nf = n as f64;
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let min = sorted[0];
    let max = sorted[n - 1];
    let mean = sorted.iter().sum::<f64>() / nf;
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let std = if n >= 2 {
        let ss = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        Some((ss / (nf - 1.0)).sqrt())
    } else {
        None
    };
    let skewness = sample_skewness(&sorted).ok();
    let (shapiro_w, shapiro_p) = match shapiro_wilk(&sorted) {
        Ok((w, p)) => (Some(w), Some(p)),
        Err(_) => (None, None),
    };

    let histogram = if max > min {
        let width = (max - min) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &v in &sorted {
            let idx = (((v - min) / width) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        counts
            .iter()
            .enumerate()
            .map(|(i, &c)| HistogramBin {
                bin_left: min + i as f64 * width,
                bin_right: if i + 1 == bins { max } else { min + (i + 1) as f64 * width },
                count: c,
            })
            .collect()
    } else {
        vec![HistogramBin {
            bin_left: min,
            bin_right: max,
            count: n as u64,
        }]
    };

    Ok(DistributionStats {
        n,
        mean,
        median,
        min,
        max,
        std,
        skewness,
        shapiro_w,
        shapiro_p,
        histogram,
    })
}
