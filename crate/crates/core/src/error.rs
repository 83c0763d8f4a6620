use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pgf argument outside the closed unit polydisc: |s[{index}]| = {modulus}")]
    Domain { index: usize, modulus: f64 },

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("mean matrix is not irreducible")]
    NotIrreducible,

    #[error("moment system of order {order} is singular (lambda^n too close to lambda; is the model supercritical?)")]
    SingularSystem { order: usize },

    #[error("moment E(W^{order}) of type {type_index} came out non-positive ({value})")]
    NegativeMoment {
        type_index: usize,
        order: usize,
        value: f64,
    },

    #[error("truncation orders differ: expected {expected}, found {found}")]
    OrderMismatch { expected: usize, found: usize },

    #[error("Taylor seed remainder bound {bound:e} exceeds 1e-8 at z = {z}; use a smaller z")]
    SeedAccuracy { bound: f64, z: f64 },

    #[error("characteristic function magnitude {modulus} exceeds 1 on ring {ring}")]
    Magnitude { ring: usize, modulus: f64 },

    #[error("characteristic function did not decay to within {tolerance} of the atom after {rings} rings")]
    SlowDecay { rings: usize, tolerance: f64 },

    #[error("imaginary residue ratio {ratio:e} too large; increase the grid range or size")]
    ImaginaryResidue { ratio: f64 },

    #[error("1 - q[{type_index}] = {gap:e} is too small for the Harris-Sevastyanov transform")]
    DegenerateTransform { type_index: usize, gap: f64 },

    #[error("{attempts} consecutive rejections while sampling Y1")]
    Rejection { attempts: usize },

    #[error("epsilon {epsilon} outside the admissible interval (0, {upper})")]
    EpsilonRange { epsilon: f64, upper: f64 },

    #[error("only {n_effective} runs reached the sample size; at least {required} are needed")]
    InsufficientData { n_effective: usize, required: usize },

    #[error("{discarded} of {attempts} attempts were discarded")]
    DiscardRate { discarded: usize, attempts: usize },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("population exceeded the cap at generation {generation}")]
    PopulationCap { generation: u32 },

    #[error("model violates an assumption (the process must be supercritical with an irreducible mean matrix): {0}")]
    Classification(String),

    #[error("refusing to write non-finite value in column {column}")]
    NonFinite { column: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}
