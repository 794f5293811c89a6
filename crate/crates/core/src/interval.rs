//! Closed real intervals with the handful of operations the sup-analyses need.
//!
//! All operations are outward-exact in real arithmetic: the result contains
//! every value the operation can take on its arguments. Rounding is not
//! directed; the hulls computed here feed Gaussian overlap bounds where a
//! last-ulp error is far below the grid-induced slack.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi, "interval bounds out of order: [{lo}, {hi}]");
        Interval { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Interval { lo: x, hi: x }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    /// Largest absolute value attained on the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    pub fn scale(&self, k: f64) -> Interval {
        if k >= 0.0 {
            Interval::new(k * self.lo, k * self.hi)
        } else {
            Interval::new(k * self.hi, k * self.lo)
        }
    }

    /// Exact range of `cos` over the interval.
    pub fn cos(&self) -> Interval {
        if self.width() >= TAU {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (self.lo.cos(), self.hi.cos());
        let mut lo = a.min(b);
        let mut hi = a.max(b);
        // cos peaks at 2kπ and bottoms out at (2k+1)π.
        if contains_lattice_point(self.lo, self.hi, 0.0) {
            hi = 1.0;
        }
        if contains_lattice_point(self.lo, self.hi, PI) {
            lo = -1.0;
        }
        Interval::new(lo, hi)
    }

    /// Exact range of `sin` over the interval.
    pub fn sin(&self) -> Interval {
        (*self - Interval::point(0.5 * PI)).cos()
    }
}

fn contains_lattice_point(lo: f64, hi: f64, phase: f64) -> bool {
    let k = ((lo - phase) / TAU).ceil();
    phase + k * TAU <= hi
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval::new(self.lo + rhs.lo, self.hi + rhs.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval::new(self.lo - rhs.hi, self.hi - rhs.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let c = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval::new(lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cos_range_handles_extrema() {
        let r = Interval::new(-0.1, 0.1).cos();
        assert_eq!(r.hi, 1.0);
        assert!((r.lo - 0.1f64.cos()).abs() < 1e-15);

        let r = Interval::new(3.0, 3.5).cos();
        assert_eq!(r.lo, -1.0);

        let r = Interval::new(0.2, 0.4).cos();
        assert!((r.lo - 0.4f64.cos()).abs() < 1e-15);
        assert!((r.hi - 0.2f64.cos()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn mul_and_cos_enclose_samples(
            a in -5.0f64..5.0, wa in 0.0f64..3.0,
            b in -5.0f64..5.0, wb in 0.0f64..3.0,
            s in 0.0f64..1.0, t in 0.0f64..1.0,
        ) {
            let x = Interval::new(a, a + wa);
            let y = Interval::new(b, b + wb);
            let px = a + s * wa;
            let py = b + t * wb;
            let prod = x * y;
            prop_assert!(prod.lo <= px * py + 1e-12 && px * py <= prod.hi + 1e-12);
            let c = x.cos();
            prop_assert!(c.lo - 1e-12 <= px.cos() && px.cos() <= c.hi + 1e-12);
            let sn = x.sin();
            prop_assert!(sn.lo - 1e-12 <= px.sin() && px.sin() <= sn.hi + 1e-12);
        }
    }
}
