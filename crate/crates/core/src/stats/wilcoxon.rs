//! Paired Wilcoxon signed-rank test.
//!
//! Zero differences are dropped, tied absolute differences get average
//! ranks, and the statistic is W+, the sum of ranks of positive differences.
//! The p-value is exact (full sign-vector distribution) for up to 25
//! effective pairs and a tie-corrected normal approximation beyond that.

use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{Error, Result};
use crate::stats::average_ranks;

const EXACT_LIMIT: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    Greater,
    Less,
}

impl Default for Alternative {
    fn default() -> Self {
        Alternative::TwoSided
    }
}

impl Alternative {
    pub fn parse_token(s: &str) -> Option<Alternative> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "two-sided" | "twosided" => Some(Alternative::TwoSided),
            "greater" => Some(Alternative::Greater),
            "less" => Some(Alternative::Less),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    NormalApproximation,
}

/// Result of a paired signed-rank test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    /// W+: the sum of ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    pub method: PValueMethod,
}

/// Paired Wilcoxon signed-rank test of `x` against `y`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<PairedTestResult> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Config(format!(
            "wilcoxon requires two non-empty samples of equal length, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y)
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let n = diffs.len();
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let (p, method) = if n <= EXACT_LIMIT {
        (exact_p(&ranks, w_plus, alternative), PValueMethod::Exact)
    } else {
        (
            normal_p(&ranks, w_plus, alternative),
            PValueMethod::NormalApproximation,
        )
    };

    Ok(PairedTestResult {
        statistic: w_plus,
        p_value: p.clamp(0.0, 1.0),
        n_effective: n,
        method,
    })
}

/// Exact tail probabilities of W+ over all 2^n sign assignments.
///
/// Average ranks are always multiples of 1/2, so doubling them gives exact
/// integers; the distribution is then a subset-sum count, equivalent to full
/// enumeration but polynomial in n.
fn exact_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let doubled: Vec<u64> = ranks.iter().map(|r| (2.0 * r).round() as u64).collect();
    let max_sum: u64 = doubled.iter().sum();
    let mut counts = vec![0.0f64; max_sum as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0u64;
    for &t in &doubled {
        reach += t;
        for s in (t..=reach).rev() {
            counts[s as usize] += counts[(s - t) as usize];
        }
    }
    let total = 2.0f64.powi(ranks.len() as i32);
    let observed = (2.0 * w_plus).round() as u64;
    let p_ge: f64 = counts[observed as usize..].iter().sum::<f64>() / total;
    let p_le: f64 = counts[..=observed as usize].iter().sum::<f64>() / total;
    match alternative {
        Alternative::Greater => p_ge,
        Alternative::Less => p_le,
        Alternative::TwoSided => (2.0 * p_ge.min(p_le)).min(1.0),
    }
}

/// Normal approximation with tie correction, no continuity correction.
fn normal_p(ranks: &[f64], w_plus: f64, alternative: Alternative) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie groups deflate the variance by sum(t^3 - t) / 48.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        var -= (t * t * t - t) / 48.0;
        i = j;
    }
    let z = (w_plus - mu) / var.sqrt();
    let sf = |v: f64| 0.5 * erf::erfc(v / std::f64::consts::SQRT_2);
    match alternative {
        Alternative::Greater => sf(z),
        Alternative::Less => 1.0 - sf(z),
        Alternative::TwoSided => 2.0 * sf(z.abs()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positive_differences_worked_example() {
        // Differences {1,2,3}: W+ = 6, exact two-sided p = 2/8 = 0.25.
        let r = wilcoxon_signed_rank(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 6.0);
        assert_eq!(r.p_value, 0.25);
        assert_eq!(r.n_effective, 3);
        assert_eq!(r.method, PValueMethod::Exact);
    }

    #[test]
    fn mixed_signs_worked_example() {
        // Differences {5,-1}: W+ = 2; the four sign vectors give W+ in
        // {0,1,2,3}, so the two-sided p is 1.
        let r = wilcoxon_signed_rank(&[5.0, -1.0], &[0.0, 0.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.statistic, 2.0);
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn identical_samples_are_degenerate() {
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&x, &x, Alternative::TwoSided),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zero_differences_are_dropped() {
        let r = wilcoxon_signed_rank(&[1.0, 5.0, 7.0], &[1.0, 2.0, 3.0], Alternative::TwoSided).unwrap();
        assert_eq!(r.n_effective, 2);
    }

    #[test]
    fn one_sided_alternatives_are_complementary_tails() {
        let x = [3.0, 5.0, 9.0, 11.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let g = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        let l = wilcoxon_signed_rank(&x, &y, Alternative::Less).unwrap();
        // W+ = 10 (all positive): P(W >= 10) = 1/16, P(W <= 10) = 1.
        assert_eq!(g.p_value, 1.0 / 16.0);
        assert_eq!(l.p_value, 1.0);
    }

    #[test]
    fn large_samples_use_normal_approximation() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 + ((i * 13) % 7) as f64 * 0.3).collect();
        let y: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let r = wilcoxon_signed_rank(&x, &y, Alternative::Greater).unwrap();
        assert_eq!(r.method, PValueMethod::NormalApproximation);
        assert!(r.p_value < 0.01, "p {}", r.p_value);
    }
}
