//! Coalescence time of `k` individuals sampled from a large population:
//! the limit-formula Monte Carlo estimator, harmonic moments of `|Z_t|`, and
//! the bounds built from them.

use rayon::prelude::*;
use serde::Serialize;

use crate::cf_density::{DensityGrid, WSampler};
use crate::error::{Error, Result};
use crate::hs_transform::{BoundConstants, BoundRow};
use crate::model::ModelSpec;
use crate::quadrature::integrate;
use crate::rng::{Purpose, SeedKey};
use crate::simulate::{PopulationState, Simulator};
use crate::stats::mean_se;

pub const MAX_K: usize = 4;
/// Attempts allowed per accepted replicate before giving up.
pub const MAX_ATTEMPT_RATIO: usize = 1000;

/// `(f_t^i(s))_i`, with `f_0(s) = s`.
pub fn iterate_pgf(model: &ModelSpec, t: u32, s: &[f64]) -> Vec<f64> {
    let mut x = s.to_vec();
    for _ in 0..t {
        x = model.pgf_vector(&x);
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    AtT,
    AtInfinity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicMoment {
    pub t: u32,
    pub r: u32,
    pub value: f64,
    pub conditioning: Conditioning,
}

/// `E(|Z_t|^-r | |Z_t| > 0)` from the root type, by the Gamma-integral
/// representation `(1/Gamma(r)) int_0^inf u^(r-1) (f_t(e^-u) - f_t(0)) / (1 - f_t(0)) du`.
pub fn harmonic_moment_gamma(model: &ModelSpec, t: u32, r: u32) -> Result<HarmonicMoment> {
    if r < 1 || t < 1 {
        return Err(Error::InvalidArgument(format!("harmonic moment needs r >= 1 and t >= 1, got r = {r}, t = {t}")));
    }
    let root = model.root();
    let d = model.d();
    let f0 = iterate_pgf(model, t, &vec![0.0; d])[root];
    if f0 >= 1.0 {
        return Err(Error::Quadrature(format!("generation {t} is empty with probability 1")));
    }
    let gamma_r: f64 = (1..r).map(|i| i as f64).product();
    let integrand = |u: f64| {
        let s = vec![(-u).exp(); d];
        let ft = iterate_pgf(model, t, &s)[root];
        u.powi(r as i32 - 1) * (ft - f0) / (1.0 - f0) / gamma_r
    };
    // f_t(e^-u) - f_t(0) <= e^-u (1 - f_t(0)), so the tail beyond U is at most
    // the upper incomplete Gamma(r, U) / Gamma(r).
    let tail = |upper: f64| {
        let mut term = 1.0;
        let mut sum = 1.0;
        for m in 1..r {
            term *= upper / m as f64;
            sum += term;
        }
        (-upper).exp() * sum
    };
    let mut upper = 8.0;
    while tail(upper) > 1e-14 {
        upper *= 1.5;
    }
    let head = integrate(integrand, 0.0, 1.0, 1e-13, 1e-11)?;
    let body = integrate(integrand, 1.0, upper, 1e-13, 1e-11)?;
    Ok(HarmonicMoment {
        t,
        r,
        value: head + body,
        conditioning: Conditioning::AtT,
    })
}

/// Harmonic-moment bounds at one `t`, converting conditioning on survival to
/// generation `t` into conditioning on eventual survival in whichever
/// direction keeps each side valid.
pub fn harmonic_bounds(h1: &HarmonicMoment, h_km1: &HarmonicMoment, h_k: &HarmonicMoment, c: &BoundConstants) -> BoundRow {
    let gap = 1.0 - c.sup_q;
    let lower = 1.0 - (c.c1 + c.c3) * h1.value / gap;
    let upper = 1.0 - c.c2 * (gap * h_km1.value - c.c3 * h_k.value / gap);
    BoundRow::new(h1.t, lower, upper)
}

/// Harmonic bounds for each `t`, quadratures run in parallel over `t`.
pub fn harmonic_bounds_for(model: &ModelSpec, c: &BoundConstants, ts: &[u32]) -> Result<Vec<BoundRow>> {
    let k = c.k as u32;
    ts.par_iter()
        .map(|&t| {
            let h1 = harmonic_moment_gamma(model, t, 1)?;
            let h_km1 = harmonic_moment_gamma(model, t, k - 1)?;
            let h_k = harmonic_moment_gamma(model, t, k)?;
            Ok(harmonic_bounds(&h1, &h_km1, &h_k, c))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoalescenceEstimate {
    pub t: u32,
    pub k: usize,
    pub p_hat: f64,
    pub std_err: f64,
    pub n_used: usize,
    pub n_discarded: usize,
}

/// `a = sum W^k / (sum W)^k` over one family at generation `t`, or `None`
/// when the attempt is discarded.
fn attempt(
    sim: &Simulator,
    samplers: &[WSampler],
    t: u32,
    k: usize,
    key: SeedKey,
    index: u64,
) -> Result<Option<f64>> {
    let mut rng = key.stream(Purpose::Estimator, t as u64, index);
    let mut counts = PopulationState::founder(sim.d(), sim.model().root()).counts;
    let mut next = vec![0u64; sim.d()];
    for generation in 0..t {
        if counts.iter().all(|&n| n == 0) {
            return Ok(None);
        }
        sim.step_into(&counts, generation, &mut next, &mut rng)?;
        std::mem::swap(&mut counts, &mut next);
    }
    if counts.iter().all(|&n| n == 0) {
        return Ok(None);
    }
    let mut sum = 0.0;
    let mut sum_k = 0.0;
    for (i, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            let w = samplers[i].sample(&mut rng);
            sum += w;
            sum_k += match k {
                2 => w * w,
                _ => w.powi(k as i32),
            };
        }
    }
    if sum == 0.0 {
        return Ok(None);
    }
    Ok(Some(sum_k / sum.powi(k as i32)))
}

/// Simulator and `W` samplers shared by every `t` of an estimation run.
#[derive(Debug, Clone)]
pub struct TheoremEstimator {
    sim: Simulator,
    samplers: Vec<WSampler>,
}

impl TheoremEstimator {
    pub fn new(model: &ModelSpec, densities: &[DensityGrid]) -> Result<Self> {
        if densities.len() != model.d() {
            return Err(Error::InvalidArgument(format!(
                "{} densities supplied for {} types",
                densities.len(),
                model.d()
            )));
        }
        Ok(Self {
            sim: Simulator::new(model)?,
            samplers: densities.iter().map(WSampler::new).collect::<Result<_>>()?,
        })
    }

    /// Estimates the limit of `P(X_{T,k} < t | |Z_T| >= k)` from `n` accepted
    /// families. Attempts are numbered and accepted in index order, so the
    /// result does not depend on the thread count.
    pub fn estimate(&self, t: u32, k: usize, n: usize, key: SeedKey) -> Result<CoalescenceEstimate> {
        if !(2..=MAX_K).contains(&k) {
            return Err(Error::InvalidArgument(format!("k = {k} must lie in [2, {MAX_K}]")));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("at least one replicate is needed".into()));
        }
        let max_attempts = MAX_ATTEMPT_RATIO * n;
        let mut values = Vec::with_capacity(n);
        let mut next = 0usize;
        while values.len() < n {
            if next >= max_attempts {
                return Err(Error::DiscardRate {
                    discarded: next - values.len(),
                    attempts: next,
                });
            }
            // Size the batch from the acceptance rate seen so far.
            let remaining = n - values.len();
            let rate = if next == 0 { 1.0 } else { (values.len().max(1) as f64 / next as f64).min(1.0) };
            let batch = ((remaining as f64 / rate * 1.05).ceil() as usize + 8).min(max_attempts - next);
            let results: Vec<Result<Option<f64>>> = (next..next + batch)
                .into_par_iter()
                .map(|i| attempt(&self.sim, &self.samplers, t, k, key, i as u64))
                .collect();
            for result in results {
                next += 1;
                if let Some(a) = result? {
                    values.push(a);
                    if values.len() == n {
                        break;
                    }
                }
            }
        }
        let m = mean_se(&values);
        Ok(CoalescenceEstimate {
            t,
            k,
            p_hat: 1.0 - m.mean,
            std_err: m.std_err,
            n_used: n,
            n_discarded: next - n,
        })
    }
}

/// One-shot form of [`TheoremEstimator::estimate`].
pub fn theorem_estimate(
    model: &ModelSpec,
    densities: &[DensityGrid],
    t: u32,
    k: usize,
    n: usize,
    key: SeedKey,
) -> Result<CoalescenceEstimate> {
    TheoremEstimator::new(model, densities)?.estimate(t, k, n, key)
}
