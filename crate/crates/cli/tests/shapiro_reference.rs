//! Shapiro-Wilk against frozen reference values.
//!
//! The fixtures in `tests/fixtures/shapiro_reference.json` hold W and p
//! computed by an established reference implementation on frozen samples
//! spanning n in {10, 20, 50, 120, 500} and several distribution shapes.

use conforma_core::stats::shapiro_wilk;
use serde::Deserialize;

#[derive(Deserialize)]
struct Fixture {
    name: String,
    n: usize,
    sample: Vec<f64>,
    w: f64,
    p: f64,
}

fn fixtures() -> Vec<Fixture> {
    let path = concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/shapiro_reference.json"
    );
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn w_and_p_match_reference_within_1e_3() {
    let fixtures = fixtures();
    assert!(fixtures.len() >= 10);
    let mut worst_w = 0.0f64;
    let mut worst_p = 0.0f64;
    for fx in &fixtures {
        assert_eq!(fx.sample.len(), fx.n);
        let (w, p) = shapiro_wilk(&fx.sample).unwrap();
        let dw = (w - fx.w).abs();
        let dp = (p - fx.p).abs();
        assert!(dw < 1e-3, "{}: W {w} vs {} (|d| = {dw:e})", fx.name, fx.w);
        assert!(dp < 1e-3, "{}: p {p} vs {} (|d| = {dp:e})", fx.name, fx.p);
        worst_w = worst_w.max(dw);
        worst_p = worst_p.max(dp);
    }
    println!("worst |dW| = {worst_w:e}, worst |dp| = {worst_p:e} over {} fixtures", fixtures.len());
}

#[test]
fn covers_all_required_sample_sizes() {
    let sizes: std::collections::BTreeSet<usize> = fixtures().iter().map(|f| f.n).collect();
    for n in [10, 50, 120, 500] {
        assert!(sizes.contains(&n), "missing fixtures for n = {n}");
    }
}
