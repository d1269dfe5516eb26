//! Shapiro-Wilk normality test.
//!
//! W statistic and p-value per Royston's AS R94 algorithm (Applied
//! Statistics 44, 1995), the same approximation used by the mainstream
//! statistical packages. Valid for sample sizes 3 through 5000.

use statrs::function::erf;

use crate::error::{Error, Result};

// Polynomial coefficients from AS R94, ascending order.
const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];

fn poly(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Standard normal quantile function.
fn norm_ppf(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf::erf_inv(2.0 * p - 1.0)
}

/// Upper tail of the standard normal distribution.
fn norm_sf(z: f64) -> f64 {
    0.5 * erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Computes the Shapiro-Wilk statistic W and its approximate p-value.
///
/// Requires 3 <= n <= 5000 and a non-constant sample; anything else is a
/// degenerate signal, not a number.
pub fn shapiro_wilk(sample: &[f64]) -> Result<(f64, f64)> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(Error::Degenerate(format!(
            "Shapiro-Wilk requires 3 <= n <= 5000, got {n}"
        )));
    }
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    if x[0] == x[n - 1] {
        return Err(Error::Degenerate("Shapiro-Wilk undefined for a constant sample".into()));
    }

    let nf = n as f64;

    // Expected normal order statistics (Blom scores) and the weight vector.
    let mut weights = vec![0.0; n];
    if n == 3 {
        weights[0] = -std::f64::consts::FRAC_1_SQRT_2;
        weights[2] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let an25 = nf + 0.25;
        let half = n / 2;
        let mut m = vec![0.0; n];
        let mut summ2 = 0.0;
        for i in 0..half {
            m[i] = norm_ppf((i as f64 + 1.0 - 0.375) / an25);
            summ2 += 2.0 * m[i] * m[i];
        }
        for i in 0..half {
            m[n - 1 - i] = -m[i];
        }
        let ssumm2 = summ2.sqrt();
        let rsn = 1.0 / nf.sqrt();

        // Polynomial-corrected extreme weights; the remainder of the vector
        // is the rescaled Blom score.
        let a_top = poly(&C1, rsn) - m[0] / ssumm2;
        let (start, fac) = if n > 5 {
            let a_second = poly(&C2, rsn) - m[1] / ssumm2;
            let fac = ((summ2 - 2.0 * m[0] * m[0] - 2.0 * m[1] * m[1])
                / (1.0 - 2.0 * a_top * a_top - 2.0 * a_second * a_second))
                .sqrt();
            weights[n - 2] = a_second;
            weights[1] = -a_second;
            (2, fac)
        } else {
            let fac = ((summ2 - 2.0 * m[0] * m[0]) / (1.0 - 2.0 * a_top * a_top)).sqrt();
            (1, fac)
        };
        weights[n - 1] = a_top;
        weights[0] = -a_top;
        for i in start..half {
            weights[i] = m[i] / fac;
            weights[n - 1 - i] = -m[i] / fac;
        }
    }

    let mean = x.iter().sum::<f64>() / nf;
    let ssq: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let sax: f64 = weights.iter().zip(&x).map(|(a, v)| a * v).sum();
    let w = (sax * sax / ssq).min(1.0);

    // p-value approximations; exact for n = 3.
    let p = if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = (0.75f64).sqrt().asin();
        (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0)
    } else {
        let y = (1.0 - w).ln();
        if n <= 11 {
            let gamma = poly(&G, nf);
            if y >= gamma {
                return Ok((w, f64::MIN_POSITIVE));
            }
            let yy = -(gamma - y).ln();
            let mu = poly(&C3, nf);
            let sigma = poly(&C4, nf).exp();
            norm_sf((yy - mu) / sigma)
        } else {
            let ln_n = nf.ln();
            let mu = poly(&C5, ln_n);
            let sigma = poly(&C6, ln_n).exp();
            norm_sf((y - mu) / sigma)
        }
    };

    Ok((w, p.clamp(0.0, 1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_matches_reference() {
        // scipy.stats.shapiro(1..=20): W=0.9603749, p=0.5513718
        let xs: Vec<f64> = (1..=20).map(|i| i as f64).collect();
        let (w, p) = shapiro_wilk(&xs).unwrap();
        assert!((w - 0.96037492).abs() < 1e-3, "W {w}");
        assert!((p - 0.55137175).abs() < 1e-3, "p {p}");
    }

    #[test]
    fn normal_sample_is_not_rejected() {
        // Deterministic near-normal sample via the probit of a uniform grid.
        let xs: Vec<f64> = (1..=80)
            .map(|i| super::norm_ppf(i as f64 / 81.0))
            .collect();
        let (w, p) = shapiro_wilk(&xs).unwrap();
        assert!(w > 0.98, "W {w}");
        assert!(p > 0.05, "p {p}");
    }

    #[test]
    fn left_skewed_sample_is_rejected() {
        // -exp(z) over a probit grid: strongly left-skewed.
        let xs: Vec<f64> = (1..=50)
            .map(|i| -(super::norm_ppf(i as f64 / 51.0)).exp())
            .collect();
        let (_, p) = shapiro_wilk(&xs).unwrap();
        assert!(p < 0.05, "p {p}");
    }

    #[test]
    fn w_is_shift_and_scale_invariant() {
        let xs: Vec<f64> = (0..37).map(|i| ((i * 7919) % 101) as f64 / 101.0).collect();
        let transformed: Vec<f64> = xs.iter().map(|v| 3.25 * v - 11.0).collect();
        let (w1, _) = shapiro_wilk(&xs).unwrap();
        let (w2, _) = shapiro_wilk(&transformed).unwrap();
        assert!((w1 - w2).abs() < 1e-12, "{w1} vs {w2}");
    }

    #[test]
    fn degenerate_inputs_are_signaled() {
        assert!(matches!(shapiro_wilk(&[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(matches!(
            shapiro_wilk(&[5.0, 5.0, 5.0, 5.0]),
            Err(Error::Degenerate(_))
        ));
        let too_big = vec![0.0; 5001];
        assert!(matches!(shapiro_wilk(&too_big), Err(Error::Degenerate(_))));
    }
}
