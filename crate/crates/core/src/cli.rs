//! Command-line front end.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::cf_density::{density_set, DensityConfig, DensitySet};
use crate::coalescence::{harmonic_bounds_for, TheoremEstimator, MAX_K};
use crate::error::{Error, Result};
use crate::hs_transform::{bound_constants, corollary_bounds, default_epsilon, estimate_sup_moments, BoundRow};
use crate::model::{
    classify, extinction, mean_matrix, spectral, ExtinctionVector, ModelSpec, SpectralData,
    DEFAULT_EXTINCTION_MAX_ITER, DEFAULT_EXTINCTION_TOL,
};
use crate::output::{emit, to_json, Cell, Table};
use crate::rng::{Purpose, SeedKey};
use crate::simulate::{mrca_direct_estimate, Simulator};
use crate::wmoments::{w_moments, WMomentTable, DEFAULT_MAX_ORDER};

pub const DEFAULT_SEED: u64 = 20_240_601;

#[derive(Debug, Clone, Parser)]
#[command(name = "branchkit", version, about = "Coalescence times in supercritical multi-type Galton-Watson processes")]
pub struct Cli {
    /// Model file (JSON with fields d, root_type, laws).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    /// Master seed for every random stream.
    #[arg(long, global = true, env = "BRANCHKIT_SEED", default_value_t = DEFAULT_SEED)]
    pub seed: u64,

    /// Primary output file [default: stdout].
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,

    /// File for secondary JSON (density header, bound constants) [default: stderr].
    #[arg(long, global = true)]
    pub meta: Option<PathBuf>,

    /// File for wall-clock timings in JSON.
    #[arg(long, global = true)]
    pub timing: Option<PathBuf>,

    /// Worker threads [default: all cores]. Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Skip the supercritical / irreducible check.
    #[arg(long, global = true)]
    pub allow_degenerate: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Perron root and normalized eigenvectors of the mean matrix.
    Spectral,
    /// Extinction probability of each type.
    Extinction,
    /// Moments E(W^n) of the martingale limit (CSV: type, n, moment).
    Wmoments {
        /// Highest moment order (at most 8).
        #[arg(long, default_value_t = DEFAULT_MAX_ORDER)]
        order: usize,
    },
    /// Density of W for one type (CSV: x, density).
    Density {
        /// Type, 1-based.
        #[arg(long = "type", default_value_t = 1)]
        type_index: usize,
        #[command(flatten)]
        grid: GridArgs,
        /// Moment order used for the Taylor seed.
        #[arg(long, default_value_t = DEFAULT_MAX_ORDER)]
        order: usize,
    },
    /// Corollary bounds on the coalescence probability (CSV: t, lower, upper).
    Bounds {
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Epsilon of the bound constants, or AUTO for half the admissible maximum.
        #[arg(long, default_value = "AUTO")]
        epsilon: Epsilon,
        #[arg(long, default_value_t = 20)]
        t_max: u32,
        /// Replicates for the E sup |Y1| estimates.
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
    },
    /// Population counts per generation (CSV: rep, generation, z1..zd, total).
    Simulate {
        #[arg(long, default_value_t = 10)]
        horizon: u32,
        #[arg(long, default_value_t = 1)]
        reps: usize,
    },
    /// Direct genealogy estimate of P(X_{T,k} < t | |Z_T| >= k) (JSON).
    Genealogy {
        /// Anchor generation t.
        #[arg(long)]
        t: u32,
        /// Final generation T.
        #[arg(long, default_value_t = 10)]
        horizon: u32,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
    },
    /// Limit-formula estimate of the coalescence probability over a t range.
    Coalesce {
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Inclusive range such as 1..10, or a single t.
        #[arg(long = "t", default_value = "1..10")]
        t_range: TRange,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        /// Add corollary and harmonic-moment bounds.
        #[arg(long)]
        with_bounds: bool,
        /// Add the direct genealogy estimate with T = t + HORIZON.
        #[arg(long, value_name = "HORIZON")]
        with_oracle: Option<u32>,
        #[arg(long, default_value = "AUTO")]
        epsilon: Epsilon,
        /// Replicates for the E sup |Y1| estimates.
        #[arg(long, default_value_t = 100_000)]
        bound_reps: usize,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Base abscissa of the Taylor seed.
    #[arg(long, default_value_t = 1e-2)]
    pub z: f64,
    /// Rings beyond the seed [default: grow until lambda^L z >= 100 and |phi - q| < 1e-3].
    #[arg(long)]
    pub rings: Option<usize>,
    /// FFT size (power of two).
    #[arg(long, default_value_t = 1 << 16)]
    pub grid_size: usize,
    /// Points per ring per sign.
    #[arg(long, default_value_t = 64)]
    pub points: usize,
}

impl GridArgs {
    fn config(&self) -> DensityConfig {
        DensityConfig {
            z: self.z,
            points: self.points,
            rings: self.rings,
            grid_size: self.grid_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Auto,
    Value(f64),
}

impl FromStr for Epsilon {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Epsilon::Auto);
        }
        s.parse().map(Epsilon::Value).map_err(|e| format!("epsilon: {e}"))
    }
}

/// Inclusive range of generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TRange {
    pub start: u32,
    pub end: u32,
}

impl TRange {
    pub fn values(&self) -> Vec<u32> {
        (self.start..=self.end).collect()
    }
}

impl FromStr for TRange {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<u32>().map_err(|e| format!("t range `{s}`: {e}"));
        match s.split_once("..") {
            Some((a, b)) => Ok(TRange {
                start: parse(a)?,
                end: parse(b.trim_start_matches('=')).map_err(|e| e.to_string())?,
            }),
            None => {
                let t = parse(s)?;
                Ok(TRange { start: t, end: t })
            }
        }
    }
}

/// What a run produced, for the one-line summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub line: String,
}

#[derive(Serialize)]
struct Timing<'a> {
    subcommand: &'a str,
    threads: usize,
    seconds: Vec<(&'a str, f64)>,
}

struct Context {
    model: ModelSpec,
    key: SeedKey,
}

impl Context {
    fn spectral(&self) -> Result<SpectralData> {
        spectral(&mean_matrix(&self.model))
    }

    fn extinction(&self) -> Result<ExtinctionVector> {
        extinction(&self.model, DEFAULT_EXTINCTION_TOL, DEFAULT_EXTINCTION_MAX_ITER)
    }

    fn moments(&self, order: usize) -> Result<(SpectralData, WMomentTable)> {
        let spec = self.spectral()?;
        let table = w_moments(&self.model, &spec, order)?;
        Ok((spec, table))
    }

    fn densities(&self, order: usize, config: &DensityConfig) -> Result<DensitySet> {
        let (spec, table) = self.moments(order)?;
        let q = self.extinction()?;
        density_set(&self.model, &spec, &table, &q, config)
    }
}

fn load_model(path: Option<&Path>) -> Result<ModelSpec> {
    let path = path.ok_or_else(|| Error::InvalidArgument("--model is required".into()))?;
    let text = std::fs::read_to_string(path)?;
    ModelSpec::from_json_str(&text).map_err(|e| match e {
        Error::Json(j) => Error::InvalidModel(format!(
            "{}: line {}, column {}: {j}",
            path.display(),
            j.line(),
            j.column()
        )),
        other => other,
    })
}

fn resolve_epsilon(eps: Epsilon, table: &WMomentTable, k: usize) -> f64 {
    match eps {
        Epsilon::Auto => default_epsilon(table, k),
        Epsilon::Value(v) => v,
    }
}

fn check_k(k: usize) -> Result<()> {
    if !(2..=MAX_K).contains(&k) {
        return Err(Error::InvalidArgument(format!("k = {k} must lie in [2, {MAX_K}]")));
    }
    Ok(())
}

fn write_meta<T: Serialize>(meta: Option<&Path>, payload: &T) -> Result<()> {
    let text = to_json(payload)?;
    match meta {
        Some(p) => std::fs::write(p, text)?,
        None => eprint!("{text}"),
    }
    Ok(())
}

/// Runs one subcommand, writing its artifacts.
pub fn run(cli: &Cli) -> Result<Summary> {
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            pool.install(|| dispatch(cli))
        }
        None => dispatch(cli),
    }
}

fn dispatch(cli: &Cli) -> Result<Summary> {
    let model = load_model(cli.model.as_deref())?;
    if !cli.allow_degenerate {
        classify(&model).check()?;
    }
    let ctx = Context {
        model,
        key: SeedKey::new(cli.seed),
    };
    let out = cli.output.as_deref();
    let meta = cli.meta.as_deref();
    let mut timings: Vec<(&str, f64)> = Vec::new();
    let started = Instant::now();

    let (name, line) = match &cli.command {
        Command::Spectral => {
            #[derive(Serialize)]
            struct Out {
                lambda: f64,
                u: Vec<f64>,
                nu: Vec<f64>,
                mean_matrix: Vec<Vec<f64>>,
            }
            let s = ctx.spectral()?;
            emit(
                &to_json(&Out {
                    lambda: s.lambda,
                    u: s.u.clone(),
                    nu: s.nu,
                    mean_matrix: mean_matrix(&ctx.model).rows(),
                })?,
                out,
            )?;
            ("spectral", format!("lambda = {:.12}", s.lambda))
        }
        Command::Extinction => {
            let q = ctx.extinction()?;
            emit(&to_json(&q)?, out)?;
            ("extinction", format!("q = {:?} after {} iterations", q.q, q.iterations))
        }
        Command::Wmoments { order } => {
            let (_, table) = ctx.moments(*order)?;
            let mut t = Table::new(&["type", "n", "moment"]);
            for (i, row) in table.moments.iter().enumerate() {
                for (n, m) in row.iter().enumerate() {
                    t.push(vec![(i + 1).into(), n.into(), (*m).into()]);
                }
            }
            emit(&t.to_csv()?, out)?;
            ("wmoments", format!("{} types, orders 0..={order}", table.d()))
        }
        Command::Density { type_index, grid, order } => {
            let d = ctx.model.d();
            if *type_index < 1 || *type_index > d {
                return Err(Error::InvalidArgument(format!("--type must lie in [1, {d}]")));
            }
            let t0 = Instant::now();
            let set = ctx.densities(*order, &grid.config())?;
            timings.push(("density", t0.elapsed().as_secs_f64()));
            let den = &set.densities[type_index - 1];
            let mut t = Table::new(&["x", "density"]);
            for (i, v) in den.values.iter().enumerate() {
                t.push(vec![den.x(i).into(), (*v).into()]);
            }
            emit(&t.to_csv()?, out)?;
            #[derive(Serialize)]
            struct Header {
                r#type: usize,
                atom: f64,
                mass: f64,
                mean: f64,
                clipped_mass: f64,
                dx: f64,
                rings: usize,
                extent: f64,
            }
            write_meta(
                meta,
                &Header {
                    r#type: *type_index,
                    atom: den.atom,
                    mass: den.mass(),
                    mean: den.mean(),
                    clipped_mass: den.clipped_mass,
                    dx: den.dx,
                    rings: set.grid.as_ref().map_or(0, |g| g.rings()),
                    extent: set.grid.as_ref().map_or(0.0, |g| g.extent()),
                },
            )?;
            ("density", format!("type {type_index}: mass {:.4}, mean {:.4}", den.mass(), den.mean()))
        }
        Command::Bounds { k, epsilon, t_max, reps } => {
            check_k(*k)?;
            let (_, table) = ctx.moments((2 * k).max(DEFAULT_MAX_ORDER))?;
            let q = ctx.extinction()?;
            let eps = resolve_epsilon(*epsilon, &table, *k);
            let constants = bound_constants(&table, &q, eps, *k)?;
            let inputs = estimate_sup_moments(&ctx.model, &q, *reps, ctx.key)?;
            let ts: Vec<u32> = (1..=*t_max).collect();
            let rows = corollary_bounds(&constants, &inputs, &ts);
            let mut t = Table::new(&["t", "lower", "upper", "lower_raw", "upper_raw"]);
            for r in &rows {
                t.push(vec![r.t.into(), r.lower.into(), r.upper.into(), r.lower_raw.into(), r.upper_raw.into()]);
            }
            emit(&t.to_csv()?, out)?;
            #[derive(Serialize)]
            struct Meta<'a> {
                constants: &'a crate::hs_transform::BoundConstants,
                inputs: &'a crate::hs_transform::HsBoundInputs,
            }
            write_meta(meta, &Meta { constants: &constants, inputs: &inputs })?;
            ("bounds", format!("{} rows, epsilon = {eps:.6}", rows.len()))
        }
        Command::Simulate { horizon, reps } => {
            let sim = Simulator::new(&ctx.model)?;
            let runs: Vec<_> = (0..*reps as u64)
                .into_par_iter()
                .map(|r| {
                    let mut rng = ctx.key.stream(Purpose::Population, u64::from(u32::MAX) + 1, r);
                    sim.run_population(*horizon, &mut rng)
                })
                .collect::<Result<_>>()?;
            let mut headers = vec!["rep".to_string(), "generation".to_string()];
            headers.extend((1..=ctx.model.d()).map(|j| format!("z{j}")));
            headers.push("total".into());
            let mut t = Table {
                headers,
                rows: Vec::new(),
            };
            for (r, states) in runs.iter().enumerate() {
                for s in states {
                    let mut row: Vec<Cell> = vec![r.into(), s.generation.into()];
                    row.extend(s.counts.iter().map(|&c| c.into()));
                    row.push(s.total().into());
                    t.push(row);
                }
            }
            emit(&t.to_csv()?, out)?;
            ("simulate", format!("{reps} runs to generation {horizon}"))
        }
        Command::Genealogy { t, horizon, k, reps } => {
            check_k(*k)?;
            let t0 = Instant::now();
            let est = mrca_direct_estimate(&ctx.model, *t, *horizon, *k, *reps, ctx.key)?;
            timings.push(("direct_simulation", t0.elapsed().as_secs_f64()));
            emit(&to_json(&est)?, out)?;
            ("genealogy", format!("p_hat = {:.6} +- {:.6} over {} runs", est.p_hat, est.std_err, est.n_effective))
        }
        Command::Coalesce {
            k,
            t_range,
            reps,
            with_bounds,
            with_oracle,
            epsilon,
            bound_reps,
            grid,
        } => {
            check_k(*k)?;
            let ts = t_range.values();
            let order = (2 * k).max(DEFAULT_MAX_ORDER);
            let t0 = Instant::now();
            let (spec, table) = ctx.moments(order)?;
            let q = ctx.extinction()?;
            let set = density_set(&ctx.model, &spec, &table, &q, &grid.config())?;
            timings.push(("density", t0.elapsed().as_secs_f64()));

            let t0 = Instant::now();
            let estimator = TheoremEstimator::new(&ctx.model, &set.densities)?;
            let estimates = ts
                .iter()
                .map(|&t| estimator.estimate(t, *k, *reps, ctx.key))
                .collect::<Result<Vec<_>>>()?;
            timings.push(("theorem_estimator", t0.elapsed().as_secs_f64()));

            let (corollary, harmonic): (Vec<Option<BoundRow>>, Vec<Option<BoundRow>>) = if *with_bounds {
                let t0 = Instant::now();
                let eps = resolve_epsilon(*epsilon, &table, *k);
                let constants = bound_constants(&table, &q, eps, *k)?;
                let inputs = estimate_sup_moments(&ctx.model, &q, *bound_reps, ctx.key)?;
                let cor = corollary_bounds(&constants, &inputs, &ts);
                let positive: Vec<u32> = ts.iter().copied().filter(|&t| t >= 1).collect();
                let mut harm = harmonic_bounds_for(&ctx.model, &constants, &positive)?.into_iter();
                let harm: Vec<Option<BoundRow>> = ts.iter().map(|&t| if t >= 1 { harm.next() } else { None }).collect();
                timings.push(("bounds", t0.elapsed().as_secs_f64()));
                #[derive(Serialize)]
                struct Meta<'a> {
                    constants: &'a crate::hs_transform::BoundConstants,
                    inputs: &'a crate::hs_transform::HsBoundInputs,
                }
                write_meta(meta, &Meta { constants: &constants, inputs: &inputs })?;
                (cor.into_iter().map(Some).collect(), harm)
            } else {
                (vec![None; ts.len()], vec![None; ts.len()])
            };

            let oracle: Vec<Option<(f64, f64)>> = match with_oracle {
                Some(h) => {
                    let t0 = Instant::now();
                    let v = ts
                        .iter()
                        .map(|&t| {
                            mrca_direct_estimate(&ctx.model, t, t + h, *k, *reps, ctx.key)
                                .map(|e| Some((e.p_hat, e.std_err)))
                        })
                        .collect::<Result<_>>()?;
                    timings.push(("direct_simulation", t0.elapsed().as_secs_f64()));
                    v
                }
                None => vec![None; ts.len()],
            };

            let mut t = Table::new(&[
                "t",
                "p_hat",
                "std_err",
                "lower_corollary",
                "upper_corollary",
                "lower_harmonic",
                "upper_harmonic",
                "oracle_p_hat",
                "oracle_se",
            ]);
            for (i, e) in estimates.iter().enumerate() {
                t.push(vec![
                    e.t.into(),
                    e.p_hat.into(),
                    e.std_err.into(),
                    corollary[i].map(|r| r.lower).into(),
                    corollary[i].map(|r| r.upper).into(),
                    harmonic[i].map(|r| r.lower).into(),
                    harmonic[i].map(|r| r.upper).into(),
                    oracle[i].map(|o| o.0).into(),
                    oracle[i].map(|o| o.1).into(),
                ]);
            }
            emit(&t.to_csv()?, out)?;
            ("coalesce", format!("{} values of t, {reps} replicates each", ts.len()))
        }
    };

    if let Some(path) = cli.timing.as_deref() {
        timings.push(("total", started.elapsed().as_secs_f64()));
        let text = to_json(&Timing {
            subcommand: name,
            threads: rayon::current_num_threads(),
            seconds: timings,
        })?;
        std::fs::write(path, text)?;
    }
    Ok(Summary {
        line: format!("{name}: {line}"),
    })
}
