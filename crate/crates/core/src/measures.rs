//! Gaussian and truncated-Gaussian measure arithmetic.
//!
//! Covariances are diagonal throughout, so every rectangular event has a
//! product-form mass and every truncated measure factorizes per coordinate.
//! [`coupling_deficiency`] is the overlap defect of two equal-covariance
//! Gaussians whose means differ by a shift; all δ bounds in the crate are
//! built from it.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::{erf, erfc};
use statrs::distribution::{Beta, ContinuousCDF};
use statrs::function::erf::erfc_inv;
use std::f64::consts::SQRT_2;

use crate::error::{check_dim, Error, Result};
use crate::interval::Interval;

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Standard normal survival function 1 − Φ(x), accurate in the upper tail.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

/// Φ⁻¹(p) for p in (0, 1), polished by one Newton step against [`std_normal_cdf`].
pub fn std_normal_quantile(p: f64) -> f64 {
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    newton_polish(x, std_normal_cdf(x) - p)
}

/// Inverse of the survival function for q in (0, 1).
pub fn std_normal_isf(q: f64) -> f64 {
    let x = SQRT_2 * erfc_inv(2.0 * q);
    newton_polish(x, q - std_normal_sf(x))
}

fn newton_polish(x: f64, residual: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if pdf > 0.0 {
        x - residual / pdf
    } else {
        x
    }
}

/// Mass of the standard normal on `[lo, hi]`, evaluated on whichever tail
/// avoids cancellation.
pub fn std_normal_interval(lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        return 0.0;
    }
    let m = if lo > 0.0 {
        std_normal_sf(lo) - std_normal_sf(hi)
    } else if hi < 0.0 {
        std_normal_cdf(hi) - std_normal_cdf(lo)
    } else {
        1.0 - std_normal_cdf(lo) - std_normal_sf(hi)
    };
    m.clamp(0.0, 1.0)
}

/// Mass of `N(mean, sd²)` on `[lo, hi]`.
pub fn normal_interval_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    std_normal_interval((lo - mean) / sd, (hi - mean) / sd)
}

/// Axis-aligned box; bounds may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("box bounds", lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if l.is_nan() || u.is_nan() || l > u {
                return Err(Error::invalid(format!(
                    "box coordinate {i} has bounds [{l}, {u}]"
                )));
            }
        }
        Ok(AxisBox { lower, upper })
    }

    pub fn from_intervals(ivs: &[Interval]) -> Self {
        AxisBox {
            lower: ivs.iter().map(|i| i.lo).collect(),
            upper: ivs.iter().map(|i| i.hi).collect(),
        }
    }

    pub fn unbounded(dim: usize) -> Self {
        AxisBox {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn point(x: &[f64]) -> Self {
        AxisBox {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn empty_dim() -> Self {
        AxisBox {
            lower: Vec::new(),
            upper: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn interval(&self, i: usize) -> Interval {
        Interval::new(self.lower[i], self.upper[i])
    }

    pub fn intervals(&self) -> Vec<Interval> {
        (0..self.dim()).map(|i| self.interval(i)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Box containment with an absolute slack per coordinate.
    pub fn contains_with_slack(&self, x: &[f64], slack: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l - slack <= *v && *v <= *u + slack)
    }

    pub fn contains_box(&self, other: &AxisBox) -> bool {
        other.dim() == self.dim()
            && (0..self.dim())
                .all(|i| self.lower[i] <= other.lower[i] && other.upper[i] <= self.upper[i])
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|v| v.is_finite())
    }

    /// Splits along `axis` at `at`, returning the lower and upper halves.
    pub fn split(&self, axis: usize, at: f64) -> (AxisBox, AxisBox) {
        let mut lo = self.clone();
        let mut hi = self.clone();
        lo.upper[axis] = at;
        hi.lower[axis] = at;
        (lo, hi)
    }

    /// All 2ⁿ corner points.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.upper[i]
                        } else {
                            self.lower[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Squared L2 distance from `x` to the box, per-coordinate weighted.
    pub fn weighted_dist2(&self, x: &[f64], weights: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                let d = if *v < self.lower[i] {
                    self.lower[i] - v
                } else if *v > self.upper[i] {
                    v - self.upper[i]
                } else {
                    0.0
                };
                weights[i] * d * d
            })
            .sum()
    }
}

/// Gaussian measure with diagonal covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMeasure {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianMeasure {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        check_dim("gaussian mean/variance", mean.len(), variance.len())?;
        validate_variance(&variance)?;
        Ok(GaussianMeasure { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sd(&self, i: usize) -> f64 {
        self.variance[i].sqrt()
    }

    /// Mass of coordinate `i` on `[lo, hi]`.
    pub fn marginal_mass(&self, i: usize, lo: f64, hi: f64) -> f64 {
        normal_interval_mass(self.mean[i], self.sd(i), lo, hi)
    }

    pub fn cell_mass(&self, cell: &AxisBox) -> Result<f64> {
        check_dim("cell mass", self.dim(), cell.dim())?;
        Ok((0..self.dim())
            .map(|i| self.marginal_mass(i, cell.lower[i], cell.upper[i]))
            .product())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                self.mean[i] + self.sd(i) * z
            })
            .collect()
    }
}

fn validate_variance(variance: &[f64]) -> Result<()> {
    for (i, v) in variance.iter().enumerate() {
        if !(*v > 0.0) || !v.is_finite() {
            return Err(Error::invalid(format!(
                "variance {i} must be strictly positive and finite, got {v}"
            )));
        }
    }
    Ok(())
}

/// Gaussian restricted to an axis-aligned support box and renormalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub base: GaussianMeasure,
    pub support: AxisBox,
    support_mass: Vec<f64>,
}

/// Acceptance rate under which rejection sampling gives way to
/// per-coordinate inverse-CDF sampling.
const REJECTION_FLOOR: f64 = 0.1;

impl TruncatedGaussian {
    pub fn new(base: GaussianMeasure, support: AxisBox) -> Result<Self> {
        check_dim("truncation support", base.dim(), support.dim())?;
        let mut support_mass = Vec::with_capacity(base.dim());
        for i in 0..base.dim() {
            if !(support.lower[i] < support.upper[i]) {
                return Err(Error::invalid(format!(
                    "support coordinate {i} is degenerate: [{}, {}]",
                    support.lower[i], support.upper[i]
                )));
            }
            let m = base.marginal_mass(i, support.lower[i], support.upper[i]);
            if !(m > 0.0) {
                return Err(Error::invalid(format!(
                    "support coordinate {i} carries no base mass"
                )));
            }
            support_mass.push(m);
        }
        Ok(TruncatedGaussian {
            base,
            support,
            support_mass,
        })
    }

    /// Untruncated measure viewed as a truncation to the whole space.
    pub fn untruncated(base: GaussianMeasure) -> Self {
        let n = base.dim();
        TruncatedGaussian {
            base,
            support: AxisBox::unbounded(n),
            support_mass: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn support_mass(&self) -> f64 {
        self.support_mass.iter().product()
    }

    /// Truncated-marginal mass of coordinate `i` on `[lo, hi]`.
    pub fn marginal_mass(&self, i: usize, lo: f64, hi: f64) -> f64 {
        let lo = lo.max(self.support.lower[i]);
        let hi = hi.min(self.support.upper[i]);
        if lo >= hi {
            return 0.0;
        }
        (self.base.marginal_mass(i, lo, hi) / self.support_mass[i]).min(1.0)
    }

    pub fn cell_mass(&self, cell: &AxisBox) -> Result<f64> {
        check_dim("cell mass", self.dim(), cell.dim())?;
        Ok((0..self.dim())
            .map(|i| self.marginal_mass(i, cell.lower[i], cell.upper[i]))
            .product())
    }

    /// Draws one sample; deterministic in the generator state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        if self.support_mass() >= REJECTION_FLOOR {
            loop {
                let x = self.base.sample(rng);
                if self.support.contains(&x) {
                    return x;
                }
            }
        }
        (0..self.dim())
            .map(|i| self.sample_coordinate(i, rng))
            .collect()
    }

    fn sample_coordinate<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> f64 {
        let mu = self.base.mean[i];
        let sd = self.base.sd(i);
        let a = (self.support.lower[i] - mu) / sd;
        let b = (self.support.upper[i] - mu) / sd;
        let u: f64 = rng.random();
        let z = if a > 0.0 {
            // Upper tail: invert the survival function.
            let (sa, sb) = (std_normal_sf(a), std_normal_sf(b));
            std_normal_isf(sb + u * (sa - sb))
        } else {
            let (fa, fb) = (std_normal_cdf(a), std_normal_cdf(b));
            std_normal_quantile(fa + u * (fb - fa))
        };
        (mu + sd * z).clamp(self.support.lower[i], self.support.upper[i])
    }
}

/// How a mean shift is measured when turned into a coupling deficiency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Shift whitened by the covariance, ‖Σ^{-1/2}Δ‖₂. This is the exact
    /// total-variation defect of two shifted Gaussians.
    #[default]
    Weighted,
    /// Plain ‖Δ‖₂, ignoring the covariance.
    Unweighted,
}

impl std::fmt::Display for NormMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NormMode::Weighted => write!(f, "weighted"),
            NormMode::Unweighted => write!(f, "unweighted"),
        }
    }
}

/// Norm of `shift` under the chosen mode.
pub fn shift_norm(shift: &[f64], variance: &[f64], mode: NormMode) -> Result<f64> {
    check_dim("coupling shift", variance.len(), shift.len())?;
    validate_variance(variance)?;
    let s: f64 = match mode {
        NormMode::Weighted => shift
            .iter()
            .zip(variance)
            .map(|(d, v)| d * d / v)
            .sum(),
        NormMode::Unweighted => shift.iter().map(|d| d * d).sum(),
    };
    Ok(s.sqrt())
}

/// 1 − 2Φ(−c/2) for a shift norm `c`; equals erf(c / 2√2).
pub fn deficiency_from_norm(c: f64) -> f64 {
    if c.is_infinite() {
        return 1.0;
    }
    erf(0.5 * c / SQRT_2).clamp(0.0, 1.0)
}

/// Deficiency of the maximal coupling of `N(μ, Σ)` and `N(μ + shift, Σ)`.
pub fn coupling_deficiency(shift: &[f64], variance: &[f64], mode: NormMode) -> Result<f64> {
    Ok(deficiency_from_norm(shift_norm(shift, variance, mode)?))
}

/// One-sided Clopper–Pearson lower bound on a binomial success rate at
/// level `1 − alpha`.
pub fn clopper_pearson_lower(successes: u64, trials: u64, alpha: f64) -> f64 {
    if trials == 0 || successes == 0 {
        return 0.0;
    }
    let k = successes as f64;
    let n = trials as f64;
    Beta::new(k, n - k + 1.0)
        .map(|b| b.inverse_cdf(alpha))
        .unwrap_or(0.0)
}

/// One-sided Clopper–Pearson upper bound at level `1 − alpha`.
pub fn clopper_pearson_upper(successes: u64, trials: u64, alpha: f64) -> f64 {
    if trials == 0 || successes >= trials {
        return 1.0;
    }
    let k = successes as f64;
    let n = trials as f64;
    Beta::new(k + 1.0, n - k)
        .map(|b| b.inverse_cdf(1.0 - alpha))
        .unwrap_or(1.0)
}

/// Two-sided Clopper–Pearson interval at confidence `level`.
pub fn clopper_pearson(successes: u64, trials: u64, level: f64) -> (f64, f64) {
    let alpha = 0.5 * (1.0 - level);
    (
        clopper_pearson_lower(successes, trials, alpha),
        clopper_pearson_upper(successes, trials, alpha),
    )
}

/// Deterministic seed derivation so parallel workers draw independent,
/// schedule-free streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub base: u64,
}

impl SeedStream {
    pub fn new(base: u64) -> Self {
        SeedStream { base }
    }

    pub fn derive(&self, index: u64) -> u64 {
        splitmix64(self.base ^ splitmix64(index.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    }

    pub fn child(&self, index: u64) -> SeedStream {
        SeedStream::new(self.derive(index))
    }

    pub fn rng(&self, index: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.derive(index))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Composite Simpson rule on [a, b] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + k as f64 * h);
        }
        s * h / 3.0
    }

    fn density(x: f64, mean: f64, sd: f64) -> f64 {
        let z = (x - mean) / sd;
        (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
    }

    #[test]
    fn cdf_reference_values() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        let quad = simpson(|x| density(x, 0.0, 1.0), -12.0, -1.0, 20_000);
        assert!((std_normal_cdf(-1.0) - quad).abs() < 1e-12);
        assert!((std_normal_cdf(-1.0) - 0.158655).abs() < 1e-6);
        let tail = (-32.0f64).exp() / (8.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!(std_normal_sf(8.0) <= tail);
        assert!(std_normal_cdf(8.0) >= 1.0 - 1e-14);
    }

    #[test]
    fn cell_mass_examples() {
        let g = GaussianMeasure::new(vec![0.0], vec![1.0]).unwrap();
        let cell = AxisBox::new(vec![-0.5], vec![0.5]).unwrap();
        let expected = std_normal_cdf(0.5) - std_normal_cdf(-0.5);
        assert!((g.cell_mass(&cell).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.382925).abs() < 1e-6);

        assert_eq!(g.cell_mass(&AxisBox::unbounded(1)).unwrap(), 1.0);
        let half = AxisBox::new(vec![0.0], vec![f64::INFINITY]).unwrap();
        let t = TruncatedGaussian::new(g.clone(), half.clone()).unwrap();
        assert!((t.cell_mass(&half).unwrap() - 1.0).abs() < 1e-15);

        assert!(matches!(
            g.cell_mass(&AxisBox::unbounded(2)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_variance() {
        assert!(GaussianMeasure::new(vec![0.0], vec![0.0]).is_err());
        assert!(coupling_deficiency(&[1.0], &[-1.0], NormMode::Weighted).is_err());
    }

    #[test]
    fn coupling_deficiency_examples() {
        assert_eq!(coupling_deficiency(&[0.0, 0.0], &[2.0, 0.3], NormMode::Weighted).unwrap(), 0.0);
        let d = coupling_deficiency(&[1.0], &[1.0], NormMode::Weighted).unwrap();
        assert!((d - 0.382925).abs() < 1e-6);
        let d = coupling_deficiency(&[1.0], &[0.25], NormMode::Weighted).unwrap();
        assert!((d - 0.682689).abs() < 1e-6);
        assert!((d - (1.0 - 2.0 * std_normal_cdf(-1.0))).abs() < 1e-14);
        // The unweighted reading ignores the variance.
        let d = coupling_deficiency(&[1.0], &[0.25], NormMode::Unweighted).unwrap();
        assert!((d - 0.382925).abs() < 1e-6);
    }

    /// Brute-force overlap oracle: 1 − ∫ min(p, q) for two 1D Gaussians.
    fn overlap_defect(shift: f64, sd: f64) -> f64 {
        let lo = shift.min(0.0) - 12.0 * sd;
        let hi = shift.max(0.0) + 12.0 * sd;
        1.0 - simpson(
            |x| density(x, 0.0, sd).min(density(x, shift, sd)),
            lo,
            hi,
            200_000,
        )
    }

    #[test]
    fn deficiency_matches_overlap_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let shift: f64 = rng.random_range(-3.0..3.0);
            let sd: f64 = rng.random_range(0.1..2.0);
            let d = coupling_deficiency(&[shift], &[sd * sd], NormMode::Weighted).unwrap();
            assert!((d - overlap_defect(shift, sd)).abs() < 1e-6, "shift {shift} sd {sd}");
        }
    }

    #[test]
    fn sampling_is_deterministic_and_in_support() {
        let base = GaussianMeasure::new(vec![0.0, 1.0], vec![1.0, 4.0]).unwrap();
        let support = AxisBox::new(vec![-0.5, 0.0], vec![0.5, 2.0]).unwrap();
        let t = TruncatedGaussian::new(base, support.clone()).unwrap();
        let s = SeedStream::new(11);
        let a: Vec<_> = {
            let mut r = s.rng(3);
            (0..100).map(|_| t.sample(&mut r)).collect()
        };
        let b: Vec<_> = {
            let mut r = s.rng(3);
            (0..100).map(|_| t.sample(&mut r)).collect()
        };
        assert_eq!(a, b);
        assert!(a.iter().all(|x| support.contains(x)));
        assert_ne!(s.derive(0), s.derive(1));
    }

    #[test]
    fn truncated_sampling_statistics() {
        let n = 100_000;
        let base = GaussianMeasure::new(vec![0.0], vec![1.0]).unwrap();
        let support = AxisBox::new(vec![-0.5], vec![0.5]).unwrap();
        let t = TruncatedGaussian::new(base, support).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let xs: Vec<f64> = (0..n).map(|_| t.sample(&mut rng)[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        // sd of the truncated law is below 0.5 / sqrt(3).
        assert!(mean.abs() < 3.0 * 0.3 / (n as f64).sqrt());
        let upper = AxisBox::new(vec![0.0], vec![0.5]).unwrap();
        let p = t.cell_mass(&upper).unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        let frac = xs.iter().filter(|x| **x >= 0.0).count() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((frac - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn inverse_cdf_path_handles_far_tail_supports() {
        // Support mass ≈ 3e-5, so the inverse-CDF branch is taken.
        let base = GaussianMeasure::new(vec![0.0], vec![1.0]).unwrap();
        let support = AxisBox::new(vec![4.0], vec![5.0]).unwrap();
        let t = TruncatedGaussian::new(base, support.clone()).unwrap();
        assert!(t.support_mass() < REJECTION_FLOOR);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..20_000).map(|_| t.sample(&mut rng)[0]).collect();
        assert!(xs.iter().all(|x| support.contains(&[*x])));
        let cut = 4.1;
        let p = t.marginal_mass(0, 4.0, cut);
        let frac = xs.iter().filter(|x| **x <= cut).count() as f64 / xs.len() as f64;
        let sigma = (p * (1.0 - p) / xs.len() as f64).sqrt();
        assert!((frac - p).abs() < 4.0 * sigma, "frac {frac} p {p}");
    }

    #[test]
    fn clopper_pearson_reference_values() {
        // Exact binomial tails at the bounds equal alpha.
        let (lo, hi) = clopper_pearson(7, 20, 0.95);
        let tail_hi: f64 = (0..=7u64).map(|k| binom(20, k, hi)).sum();
        let tail_lo: f64 = (7..=20u64).map(|k| binom(20, k, lo)).sum();
        assert!((tail_hi - 0.025).abs() < 1e-9);
        assert!((tail_lo - 0.025).abs() < 1e-9);
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
    }

    fn binom(n: u64, k: u64, p: f64) -> f64 {
        let lc: f64 = (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum();
        (lc + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()).exp()
    }

    proptest! {
        #[test]
        fn cdf_symmetry_and_monotonicity(x in -9.0f64..9.0, dx in 0.0f64..1.0) {
            prop_assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-12);
            prop_assert!(std_normal_cdf(x) <= std_normal_cdf(x + dx));
        }

        #[test]
        fn cell_mass_is_additive(
            m0 in -2.0f64..2.0, m1 in -2.0f64..2.0,
            v0 in 0.05f64..3.0, v1 in 0.05f64..3.0,
            lo in -3.0f64..0.0, w in 0.1f64..4.0, frac in 0.0f64..1.0,
            axis in 0usize..2,
        ) {
            let g = GaussianMeasure::new(vec![m0, m1], vec![v0, v1]).unwrap();
            let cell = AxisBox::new(vec![lo, lo - 0.5], vec![lo + w, lo + w + 0.5]).unwrap();
            let at = cell.lower[axis] + frac * (cell.upper[axis] - cell.lower[axis]);
            let (a, b) = cell.split(axis, at);
            let whole = g.cell_mass(&cell).unwrap();
            prop_assert!((g.cell_mass(&a).unwrap() + g.cell_mass(&b).unwrap() - whole).abs() < 1e-12);
        }

        #[test]
        fn deficiency_monotone_in_norm(c in 0.0f64..10.0, dc in 0.0f64..2.0) {
            prop_assert!(deficiency_from_norm(c) <= deficiency_from_norm(c + dc));
            prop_assert!((0.0..=1.0).contains(&deficiency_from_norm(c)));
        }
    }
}
