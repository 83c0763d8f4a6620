#![allow(dead_code)]

use std::path::PathBuf;

use branchkit::cf_density::{density_set, DensityConfig, DensityGrid};
use branchkit::model::{
    extinction, mean_matrix, spectral, ExtinctionVector, ModelSpec, OffspringLaw, SpectralData, TableRow,
    UnivariateLaw,
};
use branchkit::wmoments::{w_moments, WMomentTable};

pub fn example_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

pub fn slightly() -> ModelSpec {
    ModelSpec::from_path(example_path("slightly_supercritical.json")).unwrap()
}

pub fn very() -> ModelSpec {
    ModelSpec::from_path(example_path("very_supercritical.json")).unwrap()
}

pub fn constant(c: u32) -> ModelSpec {
    ModelSpec::single(OffspringLaw::Product(vec![UnivariateLaw::Constant(c)])).unwrap()
}

pub fn poisson(rate: f64) -> ModelSpec {
    ModelSpec::single(OffspringLaw::Product(vec![UnivariateLaw::Poisson(rate)])).unwrap()
}

/// Single-type table law over offspring counts `0, 1, ...`.
pub fn single_table(p: &[f64]) -> ModelSpec {
    let rows = p
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(n, &p)| TableRow { v: vec![n as u32], p })
        .collect();
    ModelSpec::single(OffspringLaw::Table(rows)).unwrap()
}

/// p0 = 1/4, p2 = 3/4, extinction probability 1/3.
pub fn quarter_binary() -> ModelSpec {
    single_table(&[0.25, 0.0, 0.75])
}

pub struct Pipeline {
    pub model: ModelSpec,
    pub spec: SpectralData,
    pub table: WMomentTable,
    pub q: ExtinctionVector,
}

impl Pipeline {
    pub fn new(model: &ModelSpec, order: usize) -> Self {
        let spec = spectral(&mean_matrix(model)).unwrap();
        let table = w_moments(model, &spec, order).unwrap();
        let q = extinction(model, 1e-14, 1_000_000).unwrap();
        Self {
            model: model.clone(),
            spec,
            table,
            q,
        }
    }

    pub fn densities(&self) -> Vec<DensityGrid> {
        density_set(&self.model, &self.spec, &self.table, &self.q, &DensityConfig::default())
            .unwrap()
            .densities
    }
}

/// Standard error of a proportion estimated from `n` runs when the true value is `p`.
pub fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}
