//! Offspring laws, generating functions, the mean matrix and its Perron data,
//! and extinction probabilities.
//!
//! Types are indexed from zero throughout the library. Model files use the
//! 1-based `root_type` convention and are converted on load.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|s_j| <= 1` accepted by [`pgf_eval`].
pub const DOMAIN_TOL: f64 = 1e-12;
/// Tolerance on the total probability of a joint offspring table.
pub const TABLE_SUM_TOL: f64 = 1e-12;

pub const DEFAULT_EXTINCTION_TOL: f64 = 1e-12;
pub const DEFAULT_EXTINCTION_MAX_ITER: usize = 1_000_000;

const SPECTRAL_TOL: f64 = 1e-12;
const SPECTRAL_MAX_ITER: usize = 100_000;

/// Law of the number of children of one type born to one parent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnivariateLaw {
    Poisson(f64),
    Binomial { trials: u32, success: f64 },
    /// Number of failures before the first success, support {0, 1, 2, ...}.
    Geometric(f64),
    Constant(u32),
}

impl UnivariateLaw {
    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            UnivariateLaw::Poisson(rate) if !(rate.is_finite() && rate >= 0.0) => {
                Err(format!("poisson rate must be finite and >= 0, got {rate}"))
            }
            UnivariateLaw::Binomial { success, .. } if !(0.0..=1.0).contains(&success) => {
                Err(format!("binomial success must lie in [0, 1], got {success}"))
            }
            UnivariateLaw::Geometric(p) if !(p > 0.0 && p <= 1.0) => {
                Err(format!("geometric success must lie in (0, 1], got {p}"))
            }
            _ => Ok(()),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            UnivariateLaw::Poisson(rate) => rate,
            UnivariateLaw::Binomial { trials, success } => trials as f64 * success,
            UnivariateLaw::Geometric(p) => (1.0 - p) / p,
            UnivariateLaw::Constant(c) => c as f64,
        }
    }

    pub fn pgf(&self, s: f64) -> f64 {
        match *self {
            UnivariateLaw::Poisson(rate) => (rate * (s - 1.0)).exp(),
            UnivariateLaw::Binomial { trials, success } => {
                (1.0 - success + success * s).powi(trials as i32)
            }
            UnivariateLaw::Geometric(p) => p / (1.0 - (1.0 - p) * s),
            UnivariateLaw::Constant(c) => s.powi(c as i32),
        }
    }

    pub fn pgf_complex(&self, s: Complex64) -> Complex64 {
        match *self {
            UnivariateLaw::Poisson(rate) => ((s - 1.0) * rate).exp(),
            UnivariateLaw::Binomial { trials, success } => {
                (s * success + (1.0 - success)).powu(trials)
            }
            UnivariateLaw::Geometric(p) => Complex64::from(p) / (1.0 - s * (1.0 - p)),
            UnivariateLaw::Constant(c) => s.powu(c),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub v: Vec<u32>,
    pub p: f64,
}

/// Joint law of the offspring vector of one parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffspringLaw {
    /// Child counts per type are independent.
    Product(Vec<UnivariateLaw>),
    /// Finite list of offspring vectors with their probabilities.
    Table(Vec<TableRow>),
}

impl OffspringLaw {
    fn validate(&self, d: usize) -> std::result::Result<(), String> {
        match self {
            OffspringLaw::Product(cells) => {
                if cells.len() != d {
                    return Err(format!("product has {} cells, expected {d}", cells.len()));
                }
                for (j, cell) in cells.iter().enumerate() {
                    cell.validate().map_err(|e| format!("product[{j}]: {e}"))?;
                }
                Ok(())
            }
            OffspringLaw::Table(rows) => {
                if rows.is_empty() {
                    return Err("table has no rows".into());
                }
                let mut total = 0.0;
                for (r, row) in rows.iter().enumerate() {
                    if row.v.len() != d {
                        return Err(format!("table[{r}].v has length {}, expected {d}", row.v.len()));
                    }
                    if !(row.p.is_finite() && row.p >= 0.0) {
                        return Err(format!("table[{r}].p must be >= 0, got {}", row.p));
                    }
                    total += row.p;
                }
                if (total - 1.0).abs() > TABLE_SUM_TOL {
                    return Err(format!("table probabilities sum to {total}, not 1"));
                }
                Ok(())
            }
        }
    }

    /// Expected number of children of type `j`.
    pub fn mean(&self, j: usize) -> f64 {
        match self {
            OffspringLaw::Product(cells) => cells[j].mean(),
            OffspringLaw::Table(rows) => rows.iter().map(|r| r.p * r.v[j] as f64).sum(),
        }
    }

    pub fn pgf(&self, s: &[f64]) -> f64 {
        match self {
            OffspringLaw::Product(cells) => cells.iter().zip(s).map(|(c, &x)| c.pgf(x)).product(),
            OffspringLaw::Table(rows) => rows
                .iter()
                .map(|row| {
                    row.p
                        * row
                            .v
                            .iter()
                            .zip(s)
                            .map(|(&v, &x)| x.powi(v as i32))
                            .product::<f64>()
                })
                .sum(),
        }
    }

    pub fn pgf_complex(&self, s: &[Complex64]) -> Complex64 {
        match self {
            OffspringLaw::Product(cells) => cells
                .iter()
                .zip(s)
                .map(|(c, &x)| c.pgf_complex(x))
                .product(),
            OffspringLaw::Table(rows) => rows
                .iter()
                .map(|row| {
                    row.v
                        .iter()
                        .zip(s)
                        .map(|(&v, &x)| x.powu(v))
                        .product::<Complex64>()
                        * row.p
                })
                .sum(),
        }
    }

    /// Probability that a parent has no children at all.
    pub fn prob_no_offspring(&self, d: usize) -> f64 {
        self.pgf(&vec![0.0; d])
    }
}

/// A finite-type Galton-Watson process started from one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    laws: Vec<OffspringLaw>,
    root: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    d: usize,
    root_type: usize,
    laws: Vec<OffspringLaw>,
}

impl ModelSpec {
    pub fn new(laws: Vec<OffspringLaw>, root: usize) -> Result<Self> {
        let d = laws.len();
        if d == 0 {
            return Err(Error::InvalidModel("at least one type is required".into()));
        }
        if root >= d {
            return Err(Error::InvalidModel(format!("root type {root} out of range for d = {d}")));
        }
        for (i, law) in laws.iter().enumerate() {
            law.validate(d)
                .map_err(|e| Error::InvalidModel(format!("laws[{i}].{e}")))?;
        }
        Ok(Self { laws, root })
    }

    /// Single-type model with the given law.
    pub fn single(law: OffspringLaw) -> Result<Self> {
        Self::new(vec![law], 0)
    }

    /// Product-form model from a d x d table of cells, rows indexed by parent type.
    pub fn product(cells: Vec<Vec<UnivariateLaw>>, root: usize) -> Result<Self> {
        Self::new(cells.into_iter().map(OffspringLaw::Product).collect(), root)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.laws.len() != file.d {
            return Err(Error::InvalidModel(format!(
                "field `laws` has {} entries but `d` = {}",
                file.laws.len(),
                file.d
            )));
        }
        if file.root_type == 0 || file.root_type > file.d {
            return Err(Error::InvalidModel(format!(
                "field `root_type` = {} must lie in [1, {}]",
                file.root_type, file.d
            )));
        }
        Self::new(file.laws, file.root_type - 1)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            d: self.d(),
            root_type: self.root + 1,
            laws: self.laws.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn d(&self) -> usize {
        self.laws.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn with_root(&self, root: usize) -> Result<Self> {
        Self::new(self.laws.clone(), root)
    }

    pub fn law(&self, parent: usize) -> &OffspringLaw {
        &self.laws[parent]
    }

    pub fn laws(&self) -> &[OffspringLaw] {
        &self.laws
    }

    /// Real generating function of a parent, without domain checks.
    pub fn pgf(&self, parent: usize, s: &[f64]) -> f64 {
        self.laws[parent].pgf(s)
    }

    /// Applies the full vector map `f` to `s`.
    pub fn pgf_vector(&self, s: &[f64]) -> Vec<f64> {
        self.laws.iter().map(|law| law.pgf(s)).collect()
    }
}

/// Evaluates `f^parent(s)` at a complex point of the closed unit polydisc.
pub fn pgf_eval(model: &ModelSpec, parent: usize, s: &[Complex64]) -> Result<Complex64> {
    if s.len() != model.d() {
        return Err(Error::InvalidArgument(format!(
            "pgf argument has length {}, expected {}",
            s.len(),
            model.d()
        )));
    }
    if parent >= model.d() {
        return Err(Error::InvalidArgument(format!("parent type {parent} out of range")));
    }
    if let Some((index, x)) = s.iter().enumerate().find(|(_, x)| x.norm() > 1.0 + DOMAIN_TOL) {
        return Err(Error::Domain {
            index,
            modulus: x.norm(),
        });
    }
    Ok(model.law(parent).pgf_complex(s))
}

/// Mean offspring matrix `m_ij = E(children of type j | parent of type i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMatrix {
    m: DMatrix<f64>,
}

impl MeanMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidArgument("mean matrix must be square and non-empty".into()));
        }
        if rows.iter().flatten().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidArgument("mean matrix entries must be finite and >= 0".into()));
        }
        Ok(Self {
            m: DMatrix::from_fn(d, d, |i, j| rows[i][j]),
        })
    }

    pub fn d(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.d())
            .map(|i| (0..self.d()).map(|j| self.m[(i, j)]).collect())
            .collect()
    }

    /// Strong connectivity of the positivity pattern.
    #[allow(clippy::needless_range_loop)]
    pub fn is_irreducible(&self) -> bool {
        let d = self.d();
        let reach = |transpose: bool| {
            let mut seen = vec![false; d];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..d {
                    let w = if transpose { self.m[(j, i)] } else { self.m[(i, j)] };
                    if w > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        // d = 1 needs a positive self-loop.
        if d == 1 {
            return self.m[(0, 0)] > 0.0;
        }
        reach(false) && reach(true)
    }
}

pub fn mean_matrix(model: &ModelSpec) -> MeanMatrix {
    let d = model.d();
    MeanMatrix {
        m: DMatrix::from_fn(d, d, |i, j| model.law(i).mean(j)),
    }
}

/// Perron root with right eigenvector `u` and left eigenvector `nu`, scaled so
/// that `u . 1 = 1` and `u . nu = 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralData {
    pub lambda: f64,
    pub u: Vec<f64>,
    pub nu: Vec<f64>,
}

/// Dominant eigenpair of `M + I` by power iteration; the shift makes every
/// irreducible pattern primitive without moving the eigenvectors.
fn perron_vector(m: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let d = m.nrows();
    let shifted = m + DMatrix::identity(d, d);
    let mut x = DVector::from_element(d, 1.0 / d as f64);
    for _ in 0..SPECTRAL_MAX_ITER {
        let y = &shifted * &x;
        let norm = y.sum();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::NonConvergence {
                what: "power iteration",
                iterations: 0,
            });
        }
        let y = y / norm;
        let delta = (&y - &x).amax();
        x = y;
        if delta <= SPECTRAL_TOL * x.amax() {
            let lambda = (m * &x).sum() / x.sum();
            return Ok((lambda, x));
        }
    }
    Err(Error::NonConvergence {
        what: "power iteration",
        iterations: SPECTRAL_MAX_ITER,
    })
}

pub fn spectral(m: &MeanMatrix) -> Result<SpectralData> {
    if !m.is_irreducible() {
        return Err(Error::NotIrreducible);
    }
    let (lambda, right) = perron_vector(m.matrix())?;
    let (_, left) = perron_vector(&m.matrix().transpose())?;
    let u = &right / right.sum();
    let nu = &left / u.dot(&left);
    Ok(SpectralData {
        lambda,
        u: u.iter().copied().collect(),
        nu: nu.iter().copied().collect(),
    })
}

/// Spectral radius of a nonnegative matrix, reducible or not.
pub fn spectral_radius(m: &MeanMatrix) -> Result<f64> {
    perron_vector(m.matrix()).map(|(lambda, _)| lambda)
}

/// Extinction probabilities, the minimal fixed point of `q = f(q)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExtinctionVector {
    pub q: Vec<f64>,
    pub iterations: usize,
}

impl ExtinctionVector {
    pub fn sup(&self) -> f64 {
        self.q.iter().copied().fold(0.0, f64::max)
    }

    /// True when some `q_i` is numerically 1, i.e. the input was not supercritical.
    pub fn is_degenerate(&self) -> bool {
        self.q.iter().any(|&q| q >= 1.0 - 1e-9)
    }
}

pub fn extinction(model: &ModelSpec, tol: f64, max_iter: usize) -> Result<ExtinctionVector> {
    let mut q = vec![0.0; model.d()];
    for it in 1..=max_iter {
        let next = model.pgf_vector(&q);
        let delta = next
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if delta < tol {
            let out = ExtinctionVector { q, iterations: it };
            if out.is_degenerate() {
                log::warn!("extinction probability within 1e-9 of 1; the model is not supercritical");
            }
            return Ok(out);
        }
    }
    Err(Error::NonConvergence {
        what: "extinction fixed-point iteration",
        iterations: max_iter,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Classification {
    pub irreducible: bool,
    pub supercritical: bool,
    /// Every supported law family has finite moments of all orders.
    pub moment_order_ok: bool,
}

impl Classification {
    pub fn check(&self) -> Result<()> {
        if !self.irreducible {
            return Err(Error::Classification("M is not irreducible".into()));
        }
        if !self.supercritical {
            return Err(Error::Classification("the process is not supercritical".into()));
        }
        Ok(())
    }
}

pub fn classify(model: &ModelSpec) -> Classification {
    let m = mean_matrix(model);
    let supercritical = spectral_radius(&m).map(|l| l > 1.0 + 1e-12).unwrap_or(false);
    Classification {
        irreducible: m.is_irreducible(),
        supercritical,
        moment_order_ok: true,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn slightly_supercritical() -> ModelSpec {
        let p = UnivariateLaw::Poisson;
        ModelSpec::product(vec![vec![p(1.0), p(0.5)], vec![p(0.5), p(1.5)]], 0).unwrap()
    }

    pub fn very_supercritical() -> ModelSpec {
        let p = UnivariateLaw::Poisson;
        ModelSpec::product(vec![vec![p(4.0), p(2.0)], vec![p(1.0), p(3.0)]], 0).unwrap()
    }

    /// p(0) = 1/4, p(2) = 3/4.
    pub fn quarter_binary() -> ModelSpec {
        ModelSpec::single(OffspringLaw::Table(vec![
            TableRow { v: vec![0], p: 0.25 },
            TableRow { v: vec![2], p: 0.75 },
        ]))
        .unwrap()
    }

    pub fn constant(c: u32) -> ModelSpec {
        ModelSpec::single(OffspringLaw::Product(vec![UnivariateLaw::Constant(c)])).unwrap()
    }

    pub fn poisson(rate: f64) -> ModelSpec {
        ModelSpec::single(OffspringLaw::Product(vec![UnivariateLaw::Poisson(rate)])).unwrap()
    }
}
