mod common;

use agc_core::measures::{
    clopper_pearson, coupling_deficiency, std_normal_cdf, std_normal_quantile, AxisBox, GaussianMeasure, NormMode,
    SeedStream, TruncatedGaussian,
};
use common::{normal_mass_quadrature, overlap_deficiency};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn cdf_matches_quadrature() {
    for k in 0..=60 {
        let x = -6.0 + 0.2 * k as f64;
        let q = normal_mass_quadrature(0.0, 1.0, f64::NEG_INFINITY, x);
        assert!((std_normal_cdf(x) - q).abs() < 1e-10, "x = {x}");
    }
}

#[test]
fn quantile_inverts_the_cdf() {
    for k in 1..200 {
        let p = k as f64 / 200.0;
        assert!((std_normal_cdf(std_normal_quantile(p)) - p).abs() < 1e-13);
    }
    for p in [1e-12, 1e-8, 1e-4] {
        let x = std_normal_quantile(p);
        assert!((std_normal_cdf(x) / p - 1.0).abs() < 1e-9);
    }
}

#[test]
fn truncated_cell_mass_matches_quadrature() {
    let base = GaussianMeasure::new(vec![0.3, -1.0], vec![0.2, 0.05]).unwrap();
    let support = AxisBox::new(vec![-0.5, -1.3], vec![1.0, -0.8]).unwrap();
    let t = TruncatedGaussian::new(base, support).unwrap();
    let z0 = normal_mass_quadrature(0.3, 0.2f64.sqrt(), -0.5, 1.0);
    let z1 = normal_mass_quadrature(-1.0, 0.05f64.sqrt(), -1.3, -0.8);
    let cell = AxisBox::new(vec![0.0, -1.5], vec![0.6, -1.1]).unwrap();
    let q0 = normal_mass_quadrature(0.3, 0.2f64.sqrt(), 0.0, 0.6) / z0;
    let q1 = normal_mass_quadrature(-1.0, 0.05f64.sqrt(), -1.3, -1.1) / z1;
    assert!((t.cell_mass(&cell).unwrap() - q0 * q1).abs() < 1e-10);
}

#[test]
fn deficiency_matches_the_overlap_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let dim = rng.random_range(1..=4);
        let shift: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let var: Vec<f64> = (0..dim).map(|_| rng.random_range(0.05..2.0)).collect();
        // Whitened shift length; the overlap of two unit Gaussians at that
        // distance is one-dimensional.
        let c: f64 = shift.iter().zip(&var).map(|(s, v)| s * s / v).sum::<f64>().sqrt();
        let oracle = overlap_deficiency(c, 1.0);
        let got = coupling_deficiency(&shift, &var, NormMode::Weighted).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{shift:?} {var:?}: {got} vs {oracle}");
    }
}

fn ln_binom_pmf(n: u64, k: u64, p: f64) -> f64 {
    let lgamma = |x: f64| statrs::function::gamma::ln_gamma(x);
    lgamma(n as f64 + 1.0) - lgamma(k as f64 + 1.0) - lgamma((n - k) as f64 + 1.0)
        + k as f64 * p.ln()
        + (n - k) as f64 * (1.0 - p).ln()
}

fn binom_tail_ge(n: u64, k: u64, p: f64) -> f64 {
    (k..=n).map(|j| ln_binom_pmf(n, j, p).exp()).sum()
}

#[test]
fn clopper_pearson_bounds_hit_their_tail_levels() {
    for (k, n) in [(1u64, 10u64), (5, 20), (37, 40), (500, 1000), (3, 1000)] {
        let (lo, hi) = clopper_pearson(k, n, 0.95);
        let p_hat = k as f64 / n as f64;
        assert!(lo <= p_hat && p_hat <= hi);
        assert!((binom_tail_ge(n, k, lo) - 0.025).abs() < 1e-8, "lower ({k}, {n})");
        assert!((1.0 - binom_tail_ge(n, k + 1, hi) - 0.025).abs() < 1e-8, "upper ({k}, {n})");
    }
    assert_eq!(clopper_pearson(0, 50, 0.95).0, 0.0);
    assert_eq!(clopper_pearson(50, 50, 0.95).1, 1.0);
}

#[test]
fn seed_streams_are_deterministic_and_distinct() {
    let s = SeedStream::new(2024);
    let draw = |mut r: ChaCha8Rng| (0..8).map(|_| r.random::<u64>()).collect::<Vec<_>>();
    assert_eq!(draw(s.rng(3)), draw(SeedStream::new(2024).rng(3)));
    assert_ne!(draw(s.rng(3)), draw(s.rng(4)));
    assert_ne!(s.child(1).derive(0), s.child(2).derive(0));
    assert_eq!(s.child(1).child(2).derive(5), SeedStream::new(2024).child(1).child(2).derive(5));
}

proptest! {
    #[test]
    fn cdf_is_symmetric_and_monotone(x in -30.0f64..30.0, dx in 0.0f64..3.0) {
        prop_assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-15);
        prop_assert!(std_normal_cdf(x + dx) >= std_normal_cdf(x));
    }

    #[test]
    fn cell_masses_add_up(
        mean in -1.0f64..1.0,
        var in 0.01f64..2.0,
        lo in -3.0f64..0.0,
        w1 in 0.0f64..2.0,
        w2 in 0.0f64..2.0,
    ) {
        let g = GaussianMeasure::new(vec![mean], vec![var]).unwrap();
        let whole = g.cell_mass(&AxisBox::new(vec![lo], vec![lo + w1 + w2]).unwrap()).unwrap();
        let a = g.cell_mass(&AxisBox::new(vec![lo], vec![lo + w1]).unwrap()).unwrap();
        let b = g.cell_mass(&AxisBox::new(vec![lo + w1], vec![lo + w1 + w2]).unwrap()).unwrap();
        prop_assert!((whole - a - b).abs() < 1e-14);
    }

    #[test]
    fn deficiency_grows_with_the_shift(s in 0.0f64..5.0, ds in 0.0f64..1.0, var in 0.05f64..3.0) {
        for mode in [NormMode::Weighted, NormMode::Unweighted] {
            let a = coupling_deficiency(&[s], &[var], mode).unwrap();
            let b = coupling_deficiency(&[s + ds], &[var], mode).unwrap();
            prop_assert!(b >= a && (0.0..=1.0).contains(&a));
        }
    }
}
