//! Truncated univariate power series with real coefficients.

use std::ops::{Add, Mul, Sub};

use crate::error::{Error, Result};

/// `c_0 + c_1 s + ... + c_N s^N`, with every operation exact through order `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedSeries {
    coeffs: Vec<f64>,
}

impl TruncatedSeries {
    pub fn new(coeffs: Vec<f64>) -> Self {
        assert!(!coeffs.is_empty(), "a series needs at least the constant term");
        Self { coeffs }
    }

    pub fn zero(order: usize) -> Self {
        Self::constant(0.0, order)
    }

    pub fn constant(c: f64, order: usize) -> Self {
        let mut coeffs = vec![0.0; order + 1];
        coeffs[0] = c;
        Self { coeffs }
    }

    /// The identity series `s`.
    pub fn variable(order: usize) -> Self {
        let mut out = Self::zero(order);
        if order >= 1 {
            out.coeffs[1] = 1.0;
        }
        out
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, n: usize) -> f64 {
        self.coeffs.get(n).copied().unwrap_or(0.0)
    }

    pub fn set_coeff(&mut self, n: usize, value: f64) {
        self.coeffs[n] = value;
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(self.coeffs.iter().map(|x| x * c).collect())
    }

    pub fn powu(&self, mut e: u32) -> Self {
        let mut base = self.clone();
        let mut acc = Self::constant(1.0, self.order());
        while e > 0 {
            if e & 1 == 1 {
                acc = &acc * &base;
            }
            e >>= 1;
            if e > 0 {
                base = &base * &base;
            }
        }
        acc
    }

    /// `g(self(s))` for an analytic `g`, given `g^(m)(c_0)` for `m = 0..=N`.
    pub fn compose_analytic(&self, derivatives: &[f64]) -> Self {
        let n = self.order();
        let mut h = self.clone();
        h.coeffs[0] = 0.0;
        let mut out = Self::constant(derivatives[0], n);
        let mut power = Self::constant(1.0, n);
        let mut factorial = 1.0;
        for (m, d) in derivatives.iter().enumerate().skip(1).take(n) {
            power = &power * &h;
            factorial *= m as f64;
            out = &out + &power.scale(d / factorial);
        }
        out
    }

    pub fn exp(&self) -> Self {
        let e = self.coeffs[0].exp();
        self.compose_analytic(&vec![e; self.order() + 1])
    }

    /// `ln(1 + self)`; requires `c_0 > -1`.
    pub fn ln_1p(&self) -> Self {
        let x = 1.0 + self.coeffs[0];
        let mut derivs = Vec::with_capacity(self.order() + 1);
        derivs.push(x.ln());
        let mut d = 1.0 / x;
        for m in 1..=self.order() {
            derivs.push(d);
            d *= -(m as f64) / x;
        }
        self.compose_analytic(&derivs)
    }

    pub fn check_order(&self, expected: usize) -> Result<()> {
        if self.order() != expected {
            return Err(Error::OrderMismatch {
                expected,
                found: self.order(),
            });
        }
        Ok(())
    }
}

impl Add for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn add(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        let n = self.order().min(rhs.order());
        TruncatedSeries::new((0..=n).map(|i| self.coeffs[i] + rhs.coeffs[i]).collect())
    }
}

impl Sub for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn sub(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        let n = self.order().min(rhs.order());
        TruncatedSeries::new((0..=n).map(|i| self.coeffs[i] - rhs.coeffs[i]).collect())
    }
}

impl Mul for &TruncatedSeries {
    type Output = TruncatedSeries;
    fn mul(self, rhs: &TruncatedSeries) -> TruncatedSeries {
        let n = self.order().min(rhs.order());
        let mut out = vec![0.0; n + 1];
        for (i, a) in self.coeffs.iter().enumerate().take(n + 1) {
            if *a == 0.0 {
                continue;
            }
            for (j, b) in rhs.coeffs.iter().enumerate().take(n + 1 - i) {
                out[i + j] += a * b;
            }
        }
        TruncatedSeries::new(out)
    }
}
