//! Harris-Sevastyanov transform `F(s) = (f(s (1-q) + q) - q) / (1-q)`, the
//! process `Y` it generates, and the constants of the coalescence bounds.

use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ExtinctionVector, ModelSpec};
use crate::rng::{Purpose, SeedKey, Stream};
use crate::simulate::Simulator;
use crate::stats::mean_se;
use crate::wmoments::WMomentTable;

pub const DEGENERACY_TOL: f64 = 1e-12;
pub const MAX_REJECTIONS: usize = 1_000_000;
pub const MIN_SUP_REPLICATES: usize = 1000;

fn check_gap(q: &[f64], i: usize) -> Result<()> {
    let gap = 1.0 - q[i];
    if gap < DEGENERACY_TOL {
        return Err(Error::DegenerateTransform { type_index: i, gap });
    }
    Ok(())
}

/// `F^parent(s)` for `s` in `[0, 1]^d`.
pub fn hs_pgf_eval(model: &ModelSpec, q: &ExtinctionVector, parent: usize, s: &[f64]) -> Result<f64> {
    check_gap(&q.q, parent)?;
    if s.len() != model.d() {
        return Err(Error::InvalidArgument(format!("expected {} coordinates", model.d())));
    }
    if let Some((index, &x)) = s.iter().enumerate().find(|(_, x)| !(-1e-12..=1.0 + 1e-12).contains(*x)) {
        return Err(Error::Domain {
            index,
            modulus: x.abs(),
        });
    }
    let shifted: Vec<f64> = s.iter().zip(&q.q).map(|(x, qj)| x * (1.0 - qj) + qj).collect();
    Ok((model.pgf(parent, &shifted) - q.q[parent]) / (1.0 - q.q[parent]))
}

/// Draws offspring of `Y` by thinning offspring of `Z` (a type-`j` child
/// survives with probability `1 - q_j`) and rejecting empty outcomes.
#[derive(Debug, Clone)]
pub struct HsSampler {
    sim: Simulator,
    q: Vec<f64>,
}

impl HsSampler {
    pub fn new(model: &ModelSpec, q: &ExtinctionVector) -> Result<Self> {
        for i in 0..model.d() {
            check_gap(&q.q, i)?;
        }
        Ok(Self {
            sim: Simulator::new(model)?,
            q: q.q.clone(),
        })
    }

    /// Accepted vector and the number of attempts it took.
    pub fn sample_counted(&self, parent: usize, rng: &mut Stream) -> Result<(Vec<u64>, usize)> {
        for attempt in 1..=MAX_REJECTIONS {
            let children = self.sim.sample_offspring(parent, rng);
            let kept: Vec<u64> = children
                .iter()
                .zip(&self.q)
                .map(|(&n, qj)| {
                    if n == 0 || *qj == 0.0 {
                        n
                    } else {
                        Binomial::new(n, 1.0 - qj).expect("probability in [0, 1]").sample(rng)
                    }
                })
                .collect();
            if kept.iter().any(|&n| n > 0) {
                return Ok((kept, attempt));
            }
        }
        Err(Error::Rejection {
            attempts: MAX_REJECTIONS,
        })
    }

    pub fn sample(&self, parent: usize, rng: &mut Stream) -> Result<Vec<u64>> {
        self.sample_counted(parent, rng).map(|(v, _)| v)
    }

    /// `Y_2` from one type-`parent` founder.
    pub fn sample_two_generations(&self, parent: usize, rng: &mut Stream) -> Result<Vec<u64>> {
        let first = self.sample(parent, rng)?;
        let mut out = vec![0u64; first.len()];
        for (i, &n) in first.iter().enumerate() {
            for _ in 0..n {
                for (o, c) in out.iter_mut().zip(self.sample(i, rng)?) {
                    *o += c;
                }
            }
        }
        Ok(out)
    }
}

pub fn sample_y1(model: &ModelSpec, q: &ExtinctionVector, parent: usize, rng: &mut Stream) -> Result<Vec<u64>> {
    HsSampler::new(model, q)?.sample(parent, rng)
}

/// Monte Carlo inputs of the corollary bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HsBoundInputs {
    pub sup_q: f64,
    pub e_sup_y: f64,
    pub e_sup_y_se: f64,
    pub e_sup_inv_y: f64,
    pub e_sup_inv_y_se: f64,
    pub replicates: usize,
}

/// Estimates `E sup_i |Y_1^(i)|` and `E sup_i 1/|Y_1^(i)|` with one
/// independent `Y_1^(i)` per type in each replicate.
pub fn estimate_sup_moments(model: &ModelSpec, q: &ExtinctionVector, n: usize, key: SeedKey) -> Result<HsBoundInputs> {
    if n < MIN_SUP_REPLICATES {
        return Err(Error::InvalidArgument(format!(
            "at least {MIN_SUP_REPLICATES} replicates are needed, got {n}"
        )));
    }
    let sampler = HsSampler::new(model, q)?;
    let draws: Vec<(f64, f64)> = (0..n as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(Purpose::HsTransform, 0, r);
            let mut sup = 0.0f64;
            let mut sup_inv = 0.0f64;
            for i in 0..model.d() {
                let size: u64 = sampler.sample(i, &mut rng)?.iter().sum();
                sup = sup.max(size as f64);
                sup_inv = sup_inv.max(1.0 / size as f64);
            }
            Ok((sup, sup_inv))
        })
        .collect::<Result<_>>()?;
    let sup = mean_se(&draws.iter().map(|d| d.0).collect::<Vec<_>>());
    let inv = mean_se(&draws.iter().map(|d| d.1).collect::<Vec<_>>());
    Ok(HsBoundInputs {
        sup_q: q.sup(),
        e_sup_y: sup.mean,
        e_sup_y_se: sup.std_err,
        e_sup_inv_y: inv.mean,
        e_sup_inv_y_se: inv.std_err,
        replicates: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub c5: f64,
    pub c6: f64,
    pub epsilon: f64,
    pub k: usize,
    pub sup_q: f64,
}

/// Upper end of the admissible interval for epsilon: the smallest of
/// `E W^(i)` and `E (W^(i))^k` over all types.
pub fn epsilon_upper(table: &WMomentTable, k: usize) -> f64 {
    (0..table.d())
        .flat_map(|i| [table.get(i, 1), table.get(i, k)])
        .fold(f64::INFINITY, f64::min)
}

pub fn default_epsilon(table: &WMomentTable, k: usize) -> f64 {
    0.5 * epsilon_upper(table, k)
}

pub fn bound_constants(table: &WMomentTable, q: &ExtinctionVector, epsilon: f64, k: usize) -> Result<BoundConstants> {
    if k < 2 || table.max_order < 2 * k {
        return Err(Error::InvalidArgument(format!(
            "k = {k} needs moments up to order {}, table has {}",
            2 * k,
            table.max_order
        )));
    }
    let upper = epsilon_upper(table, k);
    if !(epsilon > 0.0 && epsilon < upper) {
        return Err(Error::EpsilonRange { epsilon, upper });
    }
    let d = table.d();
    let fold = |f: &dyn Fn(usize) -> f64, init: f64, op: fn(f64, f64) -> f64| (0..d).map(f).fold(init, op);
    let sup_wk = fold(&|i| table.get(i, k), f64::NEG_INFINITY, f64::max);
    let inf_wk = fold(&|i| table.get(i, k), f64::INFINITY, f64::min);
    let sup_w = fold(&|i| table.get(i, 1), f64::NEG_INFINITY, f64::max);
    let inf_w = fold(&|i| table.get(i, 1), f64::INFINITY, f64::min);
    let sup_q = q.sup();
    let var_sum: f64 = [1, k]
        .iter()
        .map(|&j| fold(&|i| table.variance_of_power(i, j).max(0.0), f64::NEG_INFINITY, f64::max))
        .sum();
    let c1 = (sup_wk + epsilon) / (inf_w - epsilon).powi(k as i32);
    let c2 = (inf_wk - epsilon) / (sup_w + epsilon).powi(k as i32);
    let c3 = var_sum / (epsilon * epsilon * (1.0 - sup_q));
    let gap = 1.0 - sup_q;
    Ok(BoundConstants {
        c1,
        c2,
        c3,
        c4: (c1 + c3) / (gap * gap),
        c5: c2 * gap.powi(k as i32),
        c6: c2 * c3 / (gap * gap),
        epsilon,
        k,
        sup_q,
    })
}

/// Bounds on the limiting `P(X_{T,k} < t | |Z_T| >= k)` at one `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundRow {
    pub t: u32,
    pub lower: f64,
    pub upper: f64,
    pub lower_raw: f64,
    pub upper_raw: f64,
}

impl BoundRow {
    pub fn new(t: u32, lower_raw: f64, upper_raw: f64) -> Self {
        Self {
            t,
            lower: lower_raw.clamp(0.0, 1.0),
            upper: upper_raw.clamp(0.0, 1.0),
            lower_raw,
            upper_raw,
        }
    }

    pub fn raw_gap(&self) -> f64 {
        self.upper_raw - self.lower_raw
    }
}

pub fn corollary_bounds(c: &BoundConstants, inputs: &HsBoundInputs, ts: &[u32]) -> Vec<BoundRow> {
    let k = c.k as f64;
    ts.iter()
        .map(|&t| {
            let t_f = t as f64;
            let lower = 1.0 - c.c4 * inputs.e_sup_inv_y.powf(t_f);
            let upper = 1.0 - c.c5 * inputs.e_sup_y.powf(-t_f * (k - 1.0)) + c.c6 * inputs.e_sup_inv_y.powf(t_f * k);
            BoundRow::new(t, lower, upper)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{extinction, mean_matrix, spectral};
    use crate::wmoments::w_moments;
    use approx::assert_abs_diff_eq;

    fn q_of(model: &ModelSpec) -> ExtinctionVector {
        extinction(model, 1e-14, 1_000_000).unwrap()
    }

    fn table(model: &ModelSpec) -> WMomentTable {
        w_moments(model, &spectral(&mean_matrix(model)).unwrap(), 4).unwrap()
    }

    fn key() -> SeedKey {
        SeedKey::new(3)
    }

    #[test]
    fn transform_closed_form() {
        let model = quarter_binary();
        let q = q_of(&model);
        for s in [0.0, 0.1, 0.37, 0.8, 1.0] {
            let f = hs_pgf_eval(&model, &q, 0, &[s]).unwrap();
            assert_abs_diff_eq!(f, (s + s * s) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_is_identity_without_extinction() {
        let model = constant(2);
        let q = q_of(&model);
        assert_eq!(hs_pgf_eval(&model, &q, 0, &[0.3]).unwrap(), model.pgf(0, &[0.3]));
    }

    #[test]
    fn transform_normalisation() {
        for model in [slightly_supercritical(), very_supercritical()] {
            let q = q_of(&model);
            for i in 0..2 {
                assert_abs_diff_eq!(hs_pgf_eval(&model, &q, i, &[1.0, 1.0]).unwrap(), 1.0, epsilon = 1e-12);
                assert_abs_diff_eq!(hs_pgf_eval(&model, &q, i, &[0.0, 0.0]).unwrap(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_transform_is_rejected() {
        let q = ExtinctionVector { q: vec![1.0], iterations: 1 };
        assert!(matches!(
            hs_pgf_eval(&constant(1), &q, 0, &[0.5]),
            Err(Error::DegenerateTransform { .. })
        ));
    }

    #[test]
    fn gradient_at_one_matches_scaled_means() {
        for model in [slightly_supercritical(), very_supercritical()] {
            let q = q_of(&model);
            let m = mean_matrix(&model);
            let h = 1e-5;
            for i in 0..2 {
                for j in 0..2 {
                    let at = |x: f64| {
                        let mut s = vec![1.0; 2];
                        s[j] = x;
                        hs_pgf_eval(&model, &q, i, &s).unwrap()
                    };
                    let fd = (3.0 * at(1.0) - 4.0 * at(1.0 - h) + at(1.0 - 2.0 * h)) / (2.0 * h);
                    let want = (1.0 - q.q[j]) / (1.0 - q.q[i]) * m.get(i, j);
                    assert!((fd - want).abs() <= 1e-6 * want, "({i},{j}) {fd} {want}");
                }
            }
        }
    }

    #[test]
    fn y1_law_for_quarter_binary() {
        let model = quarter_binary();
        let q = q_of(&model);
        let sampler = HsSampler::new(&model, &q).unwrap();
        let mut rng = key().stream(Purpose::HsTransform, 9, 0);
        let n = 100_000;
        let mut accepted_attempts = 0usize;
        let mut sizes = Vec::with_capacity(n);
        for _ in 0..n {
            let (v, a) = sampler.sample_counted(0, &mut rng).unwrap();
            accepted_attempts += a;
            sizes.push(v[0] as f64);
        }
        assert!(sizes.iter().all(|&s| s == 1.0 || s == 2.0));
        let m = mean_se(&sizes);
        assert!((m.mean - 1.5).abs() < 4.0 * m.std_err);
        let rate = n as f64 / accepted_attempts as f64;
        let se = (rate * (1.0 - rate) / accepted_attempts as f64).sqrt();
        assert!((rate - 2.0 / 3.0).abs() < 4.0 * se, "{rate}");
    }

    #[test]
    fn empirical_pgf_matches_transform() {
        let model = slightly_supercritical();
        let q = q_of(&model);
        let sampler = HsSampler::new(&model, &q).unwrap();
        let mut rng = key().stream(Purpose::HsTransform, 10, 0);
        let s = [0.5, 0.5];
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let y = sampler.sample(0, &mut rng).unwrap();
                0.5f64.powi(y.iter().sum::<u64>() as i32)
            })
            .collect();
        let m = mean_se(&xs);
        let want = hs_pgf_eval(&model, &q, 0, &s).unwrap();
        assert!((m.mean - want).abs() < 4.0 * m.std_err, "{m:?} {want}");
    }

    #[test]
    fn sup_moments_of_deterministic_models() {
        let model = constant(2);
        let inputs = estimate_sup_moments(&model, &q_of(&model), 1000, key()).unwrap();
        assert_eq!((inputs.e_sup_y, inputs.e_sup_inv_y), (2.0, 0.5));
        let c = UnivariateLaw::Constant;
        let two = ModelSpec::product(vec![vec![c(2), c(0)], vec![c(0), c(2)]], 0).unwrap();
        let inputs = estimate_sup_moments(&two, &q_of(&two), 1000, key()).unwrap();
        assert_eq!(inputs.e_sup_y, 2.0);
        assert!(estimate_sup_moments(&model, &q_of(&model), 999, key()).is_err());
    }

    use crate::model::UnivariateLaw;

    #[test]
    fn sup_moments_single_type() {
        let model = quarter_binary();
        let inputs = estimate_sup_moments(&model, &q_of(&model), 50_000, key()).unwrap();
        assert!((inputs.e_sup_inv_y - 0.75).abs() < 4.0 * inputs.e_sup_inv_y_se);
        assert!((inputs.e_sup_y - 1.5).abs() < 4.0 * inputs.e_sup_y_se);
    }

    #[test]
    fn constants_for_deterministic_growth() {
        let model = constant(2);
        let t = table(&model);
        let q = q_of(&model);
        for eps in [0.1, 0.5, 0.9] {
            let c = bound_constants(&t, &q, eps, 2).unwrap();
            assert_abs_diff_eq!(c.c3, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(c.c1, (1.0 + eps) / (1.0 - eps).powi(2), epsilon = 1e-9);
            assert_abs_diff_eq!(c.c2, (1.0 - eps) / (1.0 + eps).powi(2), epsilon = 1e-9);
        }
        let near = bound_constants(&t, &q, 1.0 - 1e-9, 2).unwrap();
        assert!(near.c2.is_finite() && near.c2 < 1e-8);
        assert!(matches!(bound_constants(&t, &q, 1.0, 2), Err(Error::EpsilonRange { .. })));
    }

    #[test]
    fn constants_for_poisson_two() {
        let model = poisson(2.0);
        let t = table(&model);
        let c = bound_constants(&t, &q_of(&model), 0.25, 2).unwrap();
        let var_w2 = t.get(0, 4) - 4.0;
        let q = q_of(&model).q[0];
        assert_abs_diff_eq!(c.c3, (1.0 + var_w2) / (0.0625 * (1.0 - q)), epsilon = 1e-9);
        assert_abs_diff_eq!(c.c4, (c.c1 + c.c3) / (1.0 - q).powi(2), epsilon = 1e-9);
        assert_abs_diff_eq!(c.c5, c.c2 * (1.0 - q).powi(2), epsilon = 1e-12);
        assert_abs_diff_eq!(c.c6, c.c2 * c.c3 / (1.0 - q).powi(2), epsilon = 1e-9);
    }

    #[test]
    fn corollary_bounds_sandwich_binary_tree() {
        let model = constant(2);
        let t = table(&model);
        let q = q_of(&model);
        let c = bound_constants(&t, &q, default_epsilon(&t, 2), 2).unwrap();
        let inputs = estimate_sup_moments(&model, &q, 1000, key()).unwrap();
        let ts: Vec<u32> = (1..=40).collect();
        for row in corollary_bounds(&c, &inputs, &ts) {
            let exact = 1.0 - 0.5f64.powi(row.t as i32);
            assert!(row.lower <= exact && exact <= row.upper, "{row:?}");
        }
        let far = corollary_bounds(&c, &inputs, &[200])[0];
        assert_abs_diff_eq!(far.lower, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(far.upper, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn corollary_lower_bound_is_monotone() {
        for model in [slightly_supercritical(), very_supercritical()] {
            let t = table(&model);
            let q = q_of(&model);
            let c = bound_constants(&t, &q, default_epsilon(&t, 2), 2).unwrap();
            let inputs = estimate_sup_moments(&model, &q, 2000, key()).unwrap();
            let ts: Vec<u32> = (1..=60).collect();
            let rows = corollary_bounds(&c, &inputs, &ts);
            assert!(rows.windows(2).all(|w| w[1].lower_raw >= w[0].lower_raw));
            assert!(rows[..20].windows(2).all(|w| w[1].upper >= w[0].upper));
            let first = rows.iter().position(|r| (0.0..=1.0).contains(&r.lower_raw) && (0.0..=1.0).contains(&r.upper_raw));
            if let Some(first) = first {
                assert!(rows[first..].iter().all(|r| r.lower <= r.upper));
            }
        }
    }
}
