//! Density of `W^(j)` on `(0, inf)` from its Laplace transform on the
//! imaginary axis, and composition sampling from the recovered law.
//!
//! `phi_j(iy) = E exp(-i y W^(j))` is seeded by its Taylor polynomial on
//! `[z, lambda z]`, pushed outwards ring by ring with
//! `phi(lambda s) = f(phi(s))`, then inverted with an FFT.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ExtinctionVector, ModelSpec, SpectralData};
use crate::rng::Stream;
use crate::wmoments::WMomentTable;

pub const SEED_TOL: f64 = 1e-8;
pub const MAGNITUDE_TOL: f64 = 1e-6;
pub const RESIDUE_RATIO: f64 = 1e-2;
pub const MAX_RINGS: usize = 400;
/// Markov tail level used to cut the support of the recovered density.
pub const TAIL_LEVEL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityConfig {
    pub z: f64,
    pub points: usize,
    /// Number of rings beyond the seed; `None` picks it from the decay rule.
    pub rings: Option<usize>,
    pub grid_size: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            z: 1e-2,
            points: 64,
            rings: None,
            grid_size: 1 << 16,
        }
    }
}

/// Values of `phi_j(iy)` for `y = +-abscissa`, ring by ring.
#[derive(Debug, Clone, PartialEq)]
pub struct CfGrid {
    pub z: f64,
    pub lambda: f64,
    pub points: usize,
    /// `abscissas[l][p]`, increasing, ring `l` spanning `[lambda^l z, lambda^(l+1) z]`.
    pub abscissas: Vec<Vec<f64>>,
    /// `pos[l][j][p] = phi_j(i y)`.
    pub pos: Vec<Vec<Vec<Complex64>>>,
    /// `neg[l][j][p] = phi_j(-i y)`.
    pub neg: Vec<Vec<Vec<Complex64>>>,
}

impl CfGrid {
    pub fn rings(&self) -> usize {
        self.abscissas.len()
    }

    pub fn d(&self) -> usize {
        self.pos[0].len()
    }

    /// Largest abscissa covered.
    pub fn extent(&self) -> f64 {
        *self.abscissas.last().and_then(|r| r.last()).expect("grid has a ring")
    }

    fn ring_abscissas(z: f64, lambda: f64, ring: usize, points: usize) -> Vec<f64> {
        let lo = z * lambda.powi(ring as i32);
        (0..points)
            .map(|p| lo * (1.0 + (lambda - 1.0) * p as f64 / (points - 1) as f64))
            .collect()
    }

    /// Largest `|phi_j - q_j|` over both signs on the outermost ring.
    pub fn outer_gap(&self, q: &[f64]) -> f64 {
        let l = self.rings() - 1;
        let mut gap = 0.0f64;
        for (j, &qj) in q.iter().enumerate() {
            for v in self.pos[l][j].iter().chain(&self.neg[l][j]) {
                gap = gap.max((v - qj).norm());
            }
        }
        gap
    }

    /// Piecewise-linear value of `phi_j(i xi)` for `|xi| <= extent`.
    fn interpolator(&self, j: usize) -> impl Fn(f64) -> Complex64 + '_ {
        let mut xs = vec![0.0];
        let mut pos = vec![Complex64::from(1.0)];
        let mut neg = vec![Complex64::from(1.0)];
        for l in 0..self.rings() {
            xs.extend(&self.abscissas[l]);
            pos.extend(&self.pos[l][j]);
            neg.extend(&self.neg[l][j]);
        }
        move |xi: f64| {
            let y = xi.abs();
            let values = if xi >= 0.0 { &pos } else { &neg };
            let hi = xs.partition_point(|&x| x < y).clamp(1, xs.len() - 1);
            let (x0, x1) = (xs[hi - 1], xs[hi]);
            let w = if x1 > x0 { ((y - x0) / (x1 - x0)).clamp(0.0, 1.0) } else { 1.0 };
            Complex64::new(
                values[hi - 1].re + w * (values[hi].re - values[hi - 1].re),
                values[hi - 1].im + w * (values[hi].im - values[hi - 1].im),
            )
        }
    }
}

/// Taylor values of `phi_j(iy)` on `[z, lambda z]` and `[-lambda z, -z]`.
pub fn taylor_seed(
    table: &WMomentTable,
    j: usize,
    z: f64,
    lambda: f64,
    points: usize,
) -> Result<(Vec<Complex64>, Vec<Complex64>)> {
    if points < 2 {
        return Err(Error::InvalidArgument("at least two points per ring are needed".into()));
    }
    let order = table.max_order;
    let factorial: f64 = (1..=order + 1).map(|i| i as f64).product();
    let bound = (z * lambda).powi(order as i32 + 1) * table.get(j, order) / factorial;
    if bound.is_nan() || bound >= SEED_TOL {
        return Err(Error::SeedAccuracy { bound, z });
    }
    let eval = |y: f64| -> Complex64 {
        let mut term = Complex64::from(1.0);
        let mut sum = term;
        let step = Complex64::new(0.0, -y);
        for n in 1..=order {
            term = term * step / n as f64;
            sum += term * table.get(j, n);
        }
        sum
    };
    let ys = CfGrid::ring_abscissas(z, lambda, 0, points);
    Ok((ys.iter().map(|&y| eval(y)).collect(), ys.iter().map(|&y| eval(-y)).collect()))
}

/// Ring 0 for every type.
pub fn seed_grid(table: &WMomentTable, lambda: f64, z: f64, points: usize) -> Result<CfGrid> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for j in 0..table.d() {
        let (p, n) = taylor_seed(table, j, z, lambda, points)?;
        pos.push(p);
        neg.push(n);
    }
    Ok(CfGrid {
        z,
        lambda,
        points,
        abscissas: vec![CfGrid::ring_abscissas(z, lambda, 0, points)],
        pos: vec![pos],
        neg: vec![neg],
    })
}

fn next_ring(model: &ModelSpec, ring: &[Vec<Complex64>], index: usize) -> Result<Vec<Vec<Complex64>>> {
    let d = model.d();
    let points = ring[0].len();
    for values in ring {
        if let Some(v) = values.iter().find(|v| v.norm() > 1.0 + MAGNITUDE_TOL) {
            return Err(Error::Magnitude {
                ring: index,
                modulus: v.norm(),
            });
        }
    }
    let by_point: Vec<Vec<Complex64>> = (0..points)
        .into_par_iter()
        .map(|p| {
            let s: Vec<Complex64> = (0..d).map(|j| ring[j][p]).collect();
            (0..d).map(|i| model.law(i).pgf_complex(&s)).collect()
        })
        .collect();
    let out: Vec<Vec<Complex64>> = (0..d).map(|i| by_point.iter().map(|v| v[i]).collect()).collect();
    for values in &out {
        if let Some(v) = values.iter().find(|v| v.norm() > 1.0 + MAGNITUDE_TOL) {
            return Err(Error::Magnitude {
                ring: index + 1,
                modulus: v.norm(),
            });
        }
    }
    Ok(out)
}

/// Appends `rings` rings to `grid` using `phi(lambda s) = f(phi(s))`.
pub fn propagate_cf(model: &ModelSpec, grid: &CfGrid, rings: usize) -> Result<CfGrid> {
    let mut out = grid.clone();
    for _ in 0..rings {
        let l = out.rings() - 1;
        let pos = next_ring(model, &out.pos[l], l)?;
        let neg = next_ring(model, &out.neg[l], l)?;
        out.abscissas
            .push(CfGrid::ring_abscissas(out.z, out.lambda, l + 1, out.points));
        out.pos.push(pos);
        out.neg.push(neg);
    }
    Ok(out)
}

/// Propagates until `lambda^L z >= 100` and the outer ring is within `1e-3`
/// of the atoms.
pub fn propagate_auto(model: &ModelSpec, grid: &CfGrid, q: &[f64]) -> Result<CfGrid> {
    let tolerance = 1e-3;
    let mut out = grid.clone();
    while out.extent() < 100.0 || out.outer_gap(q) >= tolerance {
        if out.rings() > MAX_RINGS {
            return Err(Error::SlowDecay {
                rings: out.rings(),
                tolerance,
            });
        }
        out = propagate_cf(model, &out, 1)?;
    }
    Ok(out)
}

/// Density of `W^(j)` restricted to `(0, inf)` on `x = x0 + i dx`, plus the atom at 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DensityGrid {
    pub type_index: usize,
    pub x0: f64,
    pub dx: f64,
    pub values: Vec<f64>,
    pub atom: f64,
    pub clipped_mass: f64,
}

impl DensityGrid {
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.dx
    }

    pub fn mass(&self) -> f64 {
        self.dx * self.values.iter().sum::<f64>()
    }

    /// `E(W 1{W > 0})`.
    pub fn mean(&self) -> f64 {
        self.dx * self.values.iter().enumerate().map(|(i, v)| self.x(i) * v).sum::<f64>()
    }
}

/// Inverts the grid for type `j` on `grid_size` frequencies spanning
/// `[-a, a)`, `a` the grid extent. `x_max` truncates the support when given.
pub fn invert_density(
    grid: &CfGrid,
    q: &ExtinctionVector,
    j: usize,
    grid_size: usize,
    x_max: Option<f64>,
) -> Result<DensityGrid> {
    if !grid_size.is_power_of_two() || grid_size < 4 {
        return Err(Error::InvalidArgument(format!(
            "grid size {grid_size} must be a power of two >= 4"
        )));
    }
    let a = grid.extent();
    let d_xi = 2.0 * a / grid_size as f64;
    let qj = q.q[j];
    let phi = grid.interpolator(j);
    let mut buffer: Vec<Complex64> = (0..grid_size)
        .map(|l| phi(-a + l as f64 * d_xi) - qj)
        .collect();
    FftPlanner::new().plan_fft_inverse(grid_size).process(&mut buffer);

    let dx = std::f64::consts::PI / a;
    let half = grid_size / 2;
    let keep = match x_max {
        Some(x) => ((x / dx).ceil() as usize + 1).min(half),
        None => half,
    };
    let scale = d_xi / (2.0 * std::f64::consts::PI);
    // exp(-i a x_m) = (-1)^m on this grid.
    let raw: Vec<Complex64> = buffer[..keep]
        .iter()
        .enumerate()
        .map(|(m, v)| if m % 2 == 0 { v * scale } else { -v * scale })
        .collect();
    let max_re = raw.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
    let max_im = raw.iter().map(|v| v.im.abs()).fold(0.0, f64::max);
    if max_im > RESIDUE_RATIO * max_re {
        return Err(Error::ImaginaryResidue {
            ratio: if max_re > 0.0 { max_im / max_re } else { f64::INFINITY },
        });
    }
    let mut clipped_mass = 0.0;
    let values = raw
        .iter()
        .map(|v| {
            if v.re < 0.0 {
                clipped_mass -= v.re * dx;
                0.0
            } else {
                v.re
            }
        })
        .collect();
    Ok(DensityGrid {
        type_index: j,
        x0: 0.0,
        dx,
        values,
        atom: qj,
        clipped_mass,
    })
}

/// Markov cut-off `x` with `P(W > x) <= TAIL_LEVEL`, from the top moment.
pub fn tail_cutoff(table: &WMomentTable, j: usize) -> f64 {
    let n = table.max_order.max(1);
    (table.get(j, n) / TAIL_LEVEL).powf(1.0 / n as f64)
}

/// CF grid plus one density per type. The grid is absent when every `W^(j)`
/// is degenerate, in which case each law is a point mass at `E W^(j)`.
#[derive(Debug, Clone)]
pub struct DensitySet {
    pub grid: Option<CfGrid>,
    pub densities: Vec<DensityGrid>,
}

pub fn build_cf_grid(
    model: &ModelSpec,
    spec: &SpectralData,
    table: &WMomentTable,
    q: &ExtinctionVector,
    config: &DensityConfig,
) -> Result<CfGrid> {
    let seed = seed_grid(table, spec.lambda, config.z, config.points)?;
    match config.rings {
        Some(rings) => propagate_cf(model, &seed, rings),
        None => propagate_auto(model, &seed, &q.q),
    }
}

fn is_degenerate(table: &WMomentTable) -> bool {
    (0..table.d()).all(|j| table.max_order >= 2 && table.variance_of_power(j, 1) <= 1e-12 * table.get(j, 1).powi(2))
}

pub fn point_mass(j: usize, at: f64, atom: f64) -> DensityGrid {
    DensityGrid {
        type_index: j,
        x0: at,
        dx: 1.0,
        values: vec![1.0 - atom],
        atom,
        clipped_mass: 0.0,
    }
}

pub fn density_set(
    model: &ModelSpec,
    spec: &SpectralData,
    table: &WMomentTable,
    q: &ExtinctionVector,
    config: &DensityConfig,
) -> Result<DensitySet> {
    if is_degenerate(table) {
        return Ok(DensitySet {
            grid: None,
            densities: (0..model.d()).map(|j| point_mass(j, table.get(j, 1), q.q[j])).collect(),
        });
    }
    let grid = build_cf_grid(model, spec, table, q, config)?;
    let densities = (0..model.d())
        .map(|j| invert_density(&grid, q, j, config.grid_size, Some(tail_cutoff(table, j))))
        .collect::<Result<_>>()?;
    Ok(DensitySet {
        grid: Some(grid),
        densities,
    })
}

/// Composition sampler: 0 with probability `atom`, otherwise a grid point
/// drawn proportionally to the density. Slot 0 of the cumulative table is
/// the atom; a guide table makes each draw one uniform and a short scan.
#[derive(Debug, Clone)]
pub struct WSampler {
    x0: f64,
    dx: f64,
    cdf: Vec<f64>,
    guide: Vec<u32>,
}

impl WSampler {
    pub fn new(density: &DensityGrid) -> Result<Self> {
        let mass = density.mass();
        if density.atom >= 1.0 || mass.is_nan() || mass <= 0.0 {
            return Ok(Self {
                x0: density.x0,
                dx: density.dx,
                cdf: vec![1.0],
                guide: vec![0],
            });
        }
        if !(0.0..1.0).contains(&density.atom) || density.values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument("density weights must be finite and nonnegative".into()));
        }
        let scale = (1.0 - density.atom) / mass * density.dx;
        let mut cdf = Vec::with_capacity(density.values.len() + 1);
        let mut acc = density.atom;
        cdf.push(acc);
        for v in &density.values {
            acc += v * scale;
            cdf.push(acc);
        }
        let last = density.values.iter().rposition(|&v| v > 0.0).map_or(0, |i| i + 1);
        cdf.truncate(last + 1);
        let total = cdf[last];
        for c in &mut cdf {
            *c /= total;
        }
        cdf[last] = 1.0;
        let m = cdf.len();
        let mut guide = Vec::with_capacity(m);
        let mut i = 0;
        for g in 0..m {
            let u = g as f64 / m as f64;
            while cdf[i] <= u {
                i += 1;
            }
            guide.push(i as u32);
        }
        Ok(Self {
            x0: density.x0,
            dx: density.dx,
            cdf,
            guide,
        })
    }

    pub fn sample(&self, rng: &mut Stream) -> f64 {
        let u: f64 = rng.random();
        let mut i = self.guide[(u * self.guide.len() as f64) as usize] as usize;
        while self.cdf[i] <= u {
            i += 1;
        }
        if i == 0 {
            0.0
        } else {
            self.x0 + (i - 1) as f64 * self.dx
        }
    }
}

pub fn sample_w(density: &DensityGrid, n: usize, rng: &mut Stream) -> Result<Vec<f64>> {
    let sampler = WSampler::new(density)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}
