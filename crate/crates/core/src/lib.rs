//! Supercritical multi-type Galton-Watson processes: extinction, Perron data,
//! moments and density of the martingale limit, the Harris-Sevastyanov
//! transform, and the coalescence time of sampled individuals.

pub mod cf_density;
pub mod cli;
pub mod coalescence;
pub mod error;
pub mod hs_transform;
pub mod model;
pub mod output;
pub mod quadrature;
pub mod rng;
pub mod series;
pub mod simulate;
pub mod stats;
pub mod wmoments;

pub use error::{Error, Result};
