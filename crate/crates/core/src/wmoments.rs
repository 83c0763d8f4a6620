//! Moments of the martingale limit `W` from the functional equation
//! `phi_j(lambda s) = f^j(phi(s))`, solved order by order on truncated series.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, OffspringLaw, SpectralData, UnivariateLaw};
use crate::series::TruncatedSeries;

pub const DEFAULT_MAX_ORDER: usize = 4;
pub const MAX_SUPPORTED_ORDER: usize = 8;

/// `moments[i][n] = E((W^(i))^n)` for `n = 0..=max_order`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WMomentTable {
    pub moments: Vec<Vec<f64>>,
    pub max_order: usize,
}

impl WMomentTable {
    pub fn d(&self) -> usize {
        self.moments.len()
    }

    pub fn get(&self, type_index: usize, n: usize) -> f64 {
        self.moments[type_index][n]
    }

    /// Largest sample size `k` with `2k <= max_order`.
    pub fn k(&self) -> usize {
        self.max_order / 2
    }

    pub fn variance_of_power(&self, type_index: usize, j: usize) -> f64 {
        let row = &self.moments[type_index];
        row[2 * j] - row[j] * row[j]
    }
}

fn falling(x: f64, m: usize) -> f64 {
    (0..m).map(|i| x - i as f64).product()
}

/// `g(x), g'(x), ..., g^(order)(x)` in closed form.
pub fn univariate_pgf_derivatives(law: &UnivariateLaw, x: f64, order: usize) -> Vec<f64> {
    (0..=order)
        .map(|m| match *law {
            UnivariateLaw::Poisson(rate) => rate.powi(m as i32) * (rate * (x - 1.0)).exp(),
            UnivariateLaw::Binomial { trials, success } => {
                if m as u32 > trials {
                    0.0
                } else {
                    falling(trials as f64, m)
                        * success.powi(m as i32)
                        * (1.0 - success + success * x).powi((trials - m as u32) as i32)
                }
            }
            UnivariateLaw::Geometric(p) => {
                let fail = 1.0 - p;
                let m_fact: f64 = (1..=m).map(|i| i as f64).product();
                p * m_fact * fail.powi(m as i32) / (1.0 - fail * x).powi(m as i32 + 1)
            }
            UnivariateLaw::Constant(c) => {
                if m as u32 > c {
                    0.0
                } else {
                    falling(c as f64, m) * x.powi((c - m as u32) as i32)
                }
            }
        })
        .collect()
}

/// Series of `f^parent(phi_1(s), ..., phi_d(s))` through the common order of `phi`.
pub fn compose_offspring_series(
    model: &ModelSpec,
    parent: usize,
    phi: &[TruncatedSeries],
) -> Result<TruncatedSeries> {
    if phi.len() != model.d() {
        return Err(Error::InvalidArgument(format!(
            "expected {} series, got {}",
            model.d(),
            phi.len()
        )));
    }
    let order = phi[0].order();
    for p in phi {
        p.check_order(order)?;
    }
    let out = match model.law(parent) {
        OffspringLaw::Product(cells) => {
            let mut acc = TruncatedSeries::constant(1.0, order);
            for (cell, p) in cells.iter().zip(phi) {
                let derivs = univariate_pgf_derivatives(cell, p.coeff(0), order);
                acc = &acc * &p.compose_analytic(&derivs);
            }
            acc
        }
        OffspringLaw::Table(rows) => {
            let mut acc = TruncatedSeries::zero(order);
            for row in rows {
                let mut term = TruncatedSeries::constant(row.p, order);
                for (&v, p) in row.v.iter().zip(phi) {
                    if v > 0 {
                        term = &term * &p.powu(v);
                    }
                }
                acc = &acc + &term;
            }
            acc
        }
    };
    Ok(out)
}

/// Solves for `E((W^(i))^n)`, `n <= max_order`, seeded with `E W^(i) = u_i`.
pub fn w_moments(model: &ModelSpec, spec: &SpectralData, max_order: usize) -> Result<WMomentTable> {
    if max_order > MAX_SUPPORTED_ORDER {
        return Err(Error::InvalidArgument(format!(
            "moment order {max_order} exceeds the supported maximum {MAX_SUPPORTED_ORDER}"
        )));
    }
    let d = model.d();
    if spec.u.len() != d {
        return Err(Error::InvalidArgument("spectral data does not match the model".into()));
    }
    let lambda = spec.lambda;
    // a_{j,n} = (-1)^n E(W_j^n) / n!
    let mut phi: Vec<TruncatedSeries> = (0..d)
        .map(|j| {
            let mut s = TruncatedSeries::constant(1.0, max_order);
            if max_order >= 1 {
                s.set_coeff(1, -spec.u[j]);
            }
            s
        })
        .collect();

    for n in 2..=max_order {
        let top = |phi: &[TruncatedSeries]| -> Result<Vec<f64>> {
            (0..d)
                .map(|j| compose_offspring_series(model, j, phi).map(|s| s.coeff(n)))
                .collect()
        };
        let r = top(&phi)?;
        let mut a = DMatrix::zeros(d, d);
        for i in 0..d {
            phi[i].set_coeff(n, 1.0);
            let probe = top(&phi)?;
            phi[i].set_coeff(n, 0.0);
            for j in 0..d {
                a[(j, i)] = probe[j] - r[j];
            }
        }
        let ln = lambda.powi(n as i32);
        let system = DMatrix::identity(d, d) * ln - a;
        if (ln - lambda).abs() < 1e-12 * lambda {
            return Err(Error::SingularSystem { order: n });
        }
        let sol = system
            .lu()
            .solve(&DVector::from_vec(r))
            .ok_or(Error::SingularSystem { order: n })?;
        for j in 0..d {
            phi[j].set_coeff(n, sol[j]);
        }
    }

    let mut moments = vec![vec![0.0; max_order + 1]; d];
    for (j, row) in moments.iter_mut().enumerate() {
        let mut factorial = 1.0;
        for (n, m) in row.iter_mut().enumerate() {
            if n > 0 {
                factorial *= n as f64;
            }
            let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
            let value = sign * factorial * phi[j].coeff(n);
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::NegativeMoment {
                    type_index: j,
                    order: n,
                    value,
                });
            }
            *m = value;
        }
    }
    Ok(WMomentTable { moments, max_order })
}
