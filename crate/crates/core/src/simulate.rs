//! Forward simulation of population counts and of generation-`t` ancestry.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution, Geometric, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, OffspringLaw, SpectralData, UnivariateLaw};
use crate::rng::{fork, Purpose, SeedKey, Stream};
use crate::stats::mean_se;

/// Per-type population cap; a replicate exceeding it is aborted.
pub const POPULATION_CAP: u64 = 1_000_000_000_000;
pub const MIN_EFFECTIVE_RUNS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PopulationState {
    pub counts: Vec<u64>,
    pub generation: u32,
}

impl PopulationState {
    pub fn founder(d: usize, root: usize) -> Self {
        let mut counts = vec![0; d];
        counts[root] = 1;
        Self { counts, generation: 0 }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_extinct(&self) -> bool {
        self.total() == 0
    }

    /// `lambda^-t (u . Z_t)`, the martingale whose limit has mean `u_root`.
    pub fn martingale(&self, spec: &SpectralData) -> f64 {
        let dot: f64 = self.counts.iter().zip(&spec.u).map(|(&c, u)| c as f64 * u).sum();
        dot / spec.lambda.powi(self.generation as i32)
    }
}

/// Living individuals at generation `generation`, each carrying the index
/// (1-based) of its ancestor at generation `t_anchor`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GenealogyFrame {
    pub types: Vec<u32>,
    pub ancestors: Vec<u32>,
    pub t_anchor: u32,
    pub generation: u32,
    pub anchor_population: u64,
}

impl GenealogyFrame {
    pub fn len(&self) -> usize {
        self.ancestors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ancestors.is_empty()
    }

    /// Number of living descendants of each generation-`t_anchor` individual.
    pub fn anchor_counts(&self) -> Vec<u64> {
        let mut counts = vec![0; self.anchor_population as usize];
        for &a in &self.ancestors {
            counts[a as usize - 1] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone)]
enum CellSampler {
    Poisson(Option<Poisson<f64>>, f64),
    Binomial(Binomial),
    Geometric(Geometric),
    Constant(u64),
}

#[derive(Debug, Clone)]
enum LawSampler {
    Product(Vec<CellSampler>),
    Table(WeightedAliasIndex<f64>, Vec<Vec<u64>>),
}

/// Offspring samplers for every parent type of a model.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ModelSpec,
    laws: Vec<LawSampler>,
}

fn cell_sampler(law: &UnivariateLaw) -> Result<CellSampler> {
    let bad = |e: String| Error::InvalidModel(e);
    Ok(match *law {
        UnivariateLaw::Poisson(rate) => CellSampler::Poisson(
            if rate > 0.0 {
                Some(Poisson::new(rate).map_err(|e| bad(e.to_string()))?)
            } else {
                None
            },
            rate,
        ),
        UnivariateLaw::Binomial { trials, success } => {
            CellSampler::Binomial(Binomial::new(trials as u64, success).map_err(|e| bad(e.to_string()))?)
        }
        UnivariateLaw::Geometric(p) => {
            CellSampler::Geometric(Geometric::new(p).map_err(|e| bad(e.to_string()))?)
        }
        UnivariateLaw::Constant(c) => CellSampler::Constant(c as u64),
    })
}

fn poisson_total(rate: f64, n: u64, rng: &mut Stream) -> Result<u64> {
    let mean = rate * n as f64;
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

impl Simulator {
    pub fn new(model: &ModelSpec) -> Result<Self> {
        let laws = model
            .laws()
            .iter()
            .map(|law| match law {
                OffspringLaw::Product(cells) => {
                    cells.iter().map(cell_sampler).collect::<Result<_>>().map(LawSampler::Product)
                }
                OffspringLaw::Table(rows) => {
                    let index = WeightedAliasIndex::new(rows.iter().map(|r| r.p).collect())
                        .map_err(|e| Error::InvalidModel(e.to_string()))?;
                    let vectors = rows.iter().map(|r| r.v.iter().map(|&x| x as u64).collect()).collect();
                    Ok(LawSampler::Table(index, vectors))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.clone(),
            laws,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn d(&self) -> usize {
        self.model.d()
    }

    /// Offspring vector of one type-`parent` individual.
    pub fn sample_offspring(&self, parent: usize, rng: &mut Stream) -> Vec<u64> {
        match &self.laws[parent] {
            LawSampler::Product(cells) => cells
                .iter()
                .map(|cell| match cell {
                    CellSampler::Poisson(Some(p), _) => p.sample(rng) as u64,
                    CellSampler::Poisson(None, _) => 0,
                    CellSampler::Binomial(b) => b.sample(rng),
                    CellSampler::Geometric(g) => g.sample(rng),
                    CellSampler::Constant(c) => *c,
                })
                .collect(),
            LawSampler::Table(index, vectors) => vectors[index.sample(rng)].clone(),
        }
    }

    /// One generation. Poisson cells draw the aggregate count of `n` parents
    /// in a single Poisson(n mu) draw; other cells draw per individual.
    pub fn step(&self, state: &PopulationState, rng: &mut Stream) -> Result<PopulationState> {
        let mut next = vec![0u64; self.d()];
        self.step_into(&state.counts, state.generation, &mut next, rng)?;
        Ok(PopulationState {
            counts: next,
            generation: state.generation + 1,
        })
    }

    /// [`Simulator::step`] on raw counts, writing into `next` (overwritten).
    pub fn step_into(&self, counts: &[u64], generation: u32, next: &mut [u64], rng: &mut Stream) -> Result<()> {
        next.fill(0);
        for (i, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            match &self.laws[i] {
                LawSampler::Product(cells) => {
                    for (j, cell) in cells.iter().enumerate() {
                        let children = match cell {
                            CellSampler::Poisson(_, rate) => {
                                if rate * n as f64 > POPULATION_CAP as f64 {
                                    return Err(Error::PopulationCap {
                                        generation: generation + 1,
                                    });
                                }
                                poisson_total(*rate, n, rng)?
                            }
                            CellSampler::Constant(c) => c.saturating_mul(n),
                            CellSampler::Binomial(b) => (0..n).map(|_| b.sample(rng)).sum(),
                            CellSampler::Geometric(g) => (0..n).map(|_| g.sample(rng)).sum(),
                        };
                        next[j] = next[j].saturating_add(children);
                    }
                }
                LawSampler::Table(index, vectors) => {
                    for _ in 0..n {
                        for (j, &v) in vectors[index.sample(rng)].iter().enumerate() {
                            next[j] = next[j].saturating_add(v);
                        }
                    }
                }
            }
        }
        if next.iter().any(|&c| c > POPULATION_CAP) {
            return Err(Error::PopulationCap {
                generation: generation + 1,
            });
        }
        Ok(())
    }

    /// States for generations `0..=horizon` started from the root type.
    pub fn run_population(&self, horizon: u32, rng: &mut Stream) -> Result<Vec<PopulationState>> {
        let mut states = vec![PopulationState::founder(self.d(), self.model.root())];
        for _ in 0..horizon {
            let last = states.last().expect("non-empty");
            let next = if last.is_extinct() {
                PopulationState {
                    counts: last.counts.clone(),
                    generation: last.generation + 1,
                }
            } else {
                self.step(last, rng)?
            };
            states.push(next);
        }
        Ok(states)
    }

    /// Population at generation `horizon` together with each individual's
    /// generation-`t` ancestor.
    ///
    /// Draws from `rng` exactly as [`Simulator::run_population`] does, so both
    /// see the same counts for the same stream. Poisson children are attached
    /// to uniformly chosen parents using streams forked off `rng`.
    pub fn run_genealogy(&self, t: u32, horizon: u32, rng: &mut Stream) -> Result<GenealogyFrame> {
        if t >= horizon {
            return Err(Error::InvalidArgument(format!(
                "anchor generation {t} must precede horizon {horizon}"
            )));
        }
        let d = self.d();
        let mut state = PopulationState::founder(d, self.model.root());
        for _ in 0..t {
            if state.is_extinct() {
                break;
            }
            state = self.step(&state, rng)?;
        }
        let anchor_population = state.total();
        let mut next_index = 1u32;
        let mut anchors: Vec<Vec<u32>> = state
            .counts
            .iter()
            .map(|&c| {
                let v: Vec<u32> = (next_index..next_index + c as u32).collect();
                next_index += c as u32;
                v
            })
            .collect();

        let mut next: Vec<Vec<u32>> = vec![Vec::new(); d];
        for generation in t..horizon {
            if anchors.iter().all(Vec::is_empty) {
                break;
            }
            next.iter_mut().for_each(Vec::clear);
            for (i, parents) in anchors.iter().enumerate() {
                if parents.is_empty() {
                    continue;
                }
                let n = parents.len() as u64;
                match &self.laws[i] {
                    LawSampler::Product(cells) => {
                        for (j, cell) in cells.iter().enumerate() {
                            match cell {
                                CellSampler::Poisson(_, rate) => {
                                    if rate * n as f64 > POPULATION_CAP as f64 {
                                        return Err(Error::PopulationCap {
                                            generation: generation + 1,
                                        });
                                    }
                                    let mut alloc = fork(rng, ((i * d + j) as u64) << 32 | generation as u64);
                                    let k = poisson_total(*rate, n, rng)?;
                                    next[j].extend(
                                        (0..k).map(|_| parents[alloc.random_range(0..parents.len())]),
                                    );
                                }
                                CellSampler::Constant(c) => {
                                    for &a in parents {
                                        next[j].extend(std::iter::repeat_n(a, *c as usize));
                                    }
                                }
                                CellSampler::Binomial(b) => {
                                    for &a in parents {
                                        next[j].extend(std::iter::repeat_n(a, b.sample(rng) as usize));
                                    }
                                }
                                CellSampler::Geometric(g) => {
                                    for &a in parents {
                                        next[j].extend(std::iter::repeat_n(a, g.sample(rng) as usize));
                                    }
                                }
                            }
                        }
                    }
                    LawSampler::Table(index, vectors) => {
                        for &a in parents {
                            for (j, &v) in vectors[index.sample(rng)].iter().enumerate() {
                                next[j].extend(std::iter::repeat_n(a, v as usize));
                            }
                        }
                    }
                }
            }
            if next.iter().any(|v| v.len() as u64 > POPULATION_CAP) {
                return Err(Error::PopulationCap {
                    generation: generation + 1,
                });
            }
            std::mem::swap(&mut anchors, &mut next);
        }

        let mut types = Vec::new();
        let mut ancestors = Vec::new();
        for (i, a) in anchors.into_iter().enumerate() {
            types.extend(std::iter::repeat_n(i as u32, a.len()));
            ancestors.extend(a);
        }
        Ok(GenealogyFrame {
            types,
            ancestors,
            t_anchor: t,
            generation: horizon,
            anchor_population,
        })
    }
}

/// Direct genealogy estimate of `P(X_{T,k} < t | |Z_T| >= k)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DirectEstimate {
    pub p_hat: f64,
    pub std_err: f64,
    pub n_effective: usize,
    pub n_capped: usize,
}

/// True when the `k` sampled individuals do not all share a generation-`t` ancestor.
pub fn sample_split(frame: &GenealogyFrame, k: usize, rng: &mut Stream) -> bool {
    let picks = sample_indices(rng, frame.len(), k);
    let mut it = picks.iter().map(|i| frame.ancestors[i]);
    let first = it.next().expect("k >= 1");
    it.any(|a| a != first)
}

pub fn mrca_direct_estimate(
    model: &ModelSpec,
    t: u32,
    horizon: u32,
    k: usize,
    n_runs: usize,
    key: SeedKey,
) -> Result<DirectEstimate> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("sample size k = {k} must be at least 2")));
    }
    let sim = Simulator::new(model)?;
    let sub = (t as u64) << 32 | horizon as u64;
    let outcomes: Vec<Result<Option<f64>>> = (0..n_runs as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(Purpose::Genealogy, sub, r);
            let frame = if t == 0 {
                // Everyone descends from the founder; only the size matters.
                let states = sim.run_population(horizon, &mut rng)?;
                let n = states.last().expect("non-empty").total();
                return Ok((n >= k as u64).then_some(0.0));
            } else {
                sim.run_genealogy(t, horizon, &mut rng)?
            };
            if frame.len() < k {
                return Ok(None);
            }
            let mut pick = key.stream(Purpose::Sampling, sub, r);
            Ok(Some(if sample_split(&frame, k, &mut pick) { 1.0 } else { 0.0 }))
        })
        .collect();

    let mut values = Vec::new();
    let mut n_capped = 0;
    for outcome in outcomes {
        match outcome {
            Ok(Some(v)) => values.push(v),
            Ok(None) => {}
            Err(Error::PopulationCap { .. }) => n_capped += 1,
            Err(e) => return Err(e),
        }
    }
    if values.len() < MIN_EFFECTIVE_RUNS {
        return Err(Error::InsufficientData {
            n_effective: values.len(),
            required: MIN_EFFECTIVE_RUNS,
        });
    }
    let m = mean_se(&values);
    Ok(DirectEstimate {
        p_hat: m.mean,
        std_err: m.std_err,
        n_effective: values.len(),
        n_capped,
    })
}

/// Independent `lambda^-T (u . Z_T)` draws, one stream per replicate.
pub fn simulate_martingale(
    model: &ModelSpec,
    spec: &SpectralData,
    horizon: u32,
    n: usize,
    key: SeedKey,
) -> Result<Vec<f64>> {
    let sim = Simulator::new(model)?;
    (0..n as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = key.stream(Purpose::Population, horizon as u64, r);
            let states = sim.run_population(horizon, &mut rng)?;
            Ok(states.last().expect("non-empty").martingale(spec))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::*;
    use crate::model::{mean_matrix, spectral};

    fn key() -> SeedKey {
        SeedKey::new(11)
    }

    #[test]
    fn extinction_is_absorbing() {
        let sim = Simulator::new(&slightly_supercritical()).unwrap();
        let state = PopulationState { counts: vec![0, 0], generation: 3 };
        let next = sim.step(&state, &mut key().stream(Purpose::Population, 0, 0)).unwrap();
        assert_eq!(next.counts, vec![0, 0]);
        assert_eq!(next.generation, 4);
    }

    #[test]
    fn deterministic_doubling() {
        let sim = Simulator::new(&constant(2)).unwrap();
        let states = sim.run_population(5, &mut key().stream(Purpose::Population, 0, 0)).unwrap();
        let sizes: Vec<u64> = states.iter().map(|s| s.total()).collect();
        assert_eq!(sizes, vec![1, 2, 4, 8, 16, 32]);
        let states = sim.run_population(0, &mut key().stream(Purpose::Population, 0, 0)).unwrap();
        assert_eq!(states, vec![PopulationState::founder(1, 0)]);
    }

    #[test]
    fn one_step_mean_matches_rates() {
        let sim = Simulator::new(&slightly_supercritical()).unwrap();
        let founder = PopulationState::founder(2, 0);
        let draws: Vec<Vec<u64>> = (0..100_000)
            .map(|r| sim.step(&founder, &mut key().stream(Purpose::Population, 1, r)).unwrap().counts)
            .collect();
        for (j, want) in [1.0, 0.5].into_iter().enumerate() {
            let xs: Vec<f64> = draws.iter().map(|c| c[j] as f64).collect();
            let m = mean_se(&xs);
            assert!((m.mean - want).abs() < 4.0 * m.std_err, "{j}: {m:?}");
        }
    }

    #[test]
    fn offspring_means_match_mean_matrix() {
        let p = UnivariateLaw::Poisson;
        let model = ModelSpec::new(
            vec![
                OffspringLaw::Product(vec![p(1.3), UnivariateLaw::Geometric(0.4)]),
                OffspringLaw::Product(vec![UnivariateLaw::Binomial { trials: 4, success: 0.3 }, UnivariateLaw::Constant(1)]),
            ],
            0,
        )
        .unwrap();
        let sim = Simulator::new(&model).unwrap();
        let m = mean_matrix(&model);
        let mut rng = key().stream(Purpose::Population, 2, 0);
        for i in 0..2 {
            let draws: Vec<Vec<u64>> = (0..1_000_000).map(|_| sim.sample_offspring(i, &mut rng)).collect();
            for j in 0..2 {
                let xs: Vec<f64> = draws.iter().map(|v| v[j] as f64).collect();
                let s = mean_se(&xs);
                let tol = (4.0 * s.std_err).max(1e-12);
                assert!((s.mean - m.get(i, j)).abs() <= tol, "({i},{j}) {s:?}");
            }
        }
    }

    #[test]
    fn table_law_simulation() {
        let sim = Simulator::new(&quarter_binary()).unwrap();
        let mut rng = key().stream(Purpose::Population, 3, 0);
        let n = 200_000;
        let zeros = (0..n).filter(|_| sim.sample_offspring(0, &mut rng)[0] == 0).count();
        let p = zeros as f64 / n as f64;
        let se = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((p - 0.25).abs() < 4.0 * se);
    }

    #[test]
    fn genealogy_anchor_examples() {
        let sim = Simulator::new(&constant(2)).unwrap();
        let frame = sim.run_genealogy(2, 4, &mut key().stream(Purpose::Genealogy, 0, 0)).unwrap();
        assert_eq!(frame.len(), 16);
        assert_eq!(frame.anchor_counts(), vec![4, 4, 4, 4]);
        let sim = Simulator::new(&slightly_supercritical()).unwrap();
        let frame = sim.run_genealogy(0, 6, &mut key().stream(Purpose::Genealogy, 0, 1)).unwrap();
        assert!(frame.ancestors.iter().all(|&a| a == 1));
    }

    #[test]
    fn genealogy_is_coupled_to_population_runs() {
        for model in [slightly_supercritical(), very_supercritical(), quarter_binary()] {
            let sim = Simulator::new(&model).unwrap();
            for r in 0..30 {
                let states = sim.run_population(8, &mut key().stream(Purpose::Genealogy, 5, r)).unwrap();
                let frame = sim.run_genealogy(3, 8, &mut key().stream(Purpose::Genealogy, 5, r)).unwrap();
                let last = states.last().unwrap();
                assert_eq!(frame.len() as u64, last.total());
                assert_eq!(frame.anchor_population, states[3].total());
                for j in 0..model.d() {
                    let n = frame.types.iter().filter(|&&x| x as usize == j).count() as u64;
                    assert_eq!(n, last.counts[j]);
                }
                assert_eq!(frame.anchor_counts().iter().sum::<u64>(), last.total());
                assert!(frame.ancestors.iter().all(|&a| a >= 1 && a as u64 <= frame.anchor_population));
            }
        }
    }

    #[test]
    fn sampling_is_uniform_without_replacement() {
        let frame = GenealogyFrame {
            types: vec![0; 10],
            ancestors: (1..=10).collect(),
            t_anchor: 1,
            generation: 2,
            anchor_population: 10,
        };
        let k = 3;
        let n = 50_000;
        let mut hits = [0u32; 10];
        let mut rng = key().stream(Purpose::Sampling, 0, 0);
        for _ in 0..n {
            let picks = sample_indices(&mut rng, frame.len(), k);
            let mut v: Vec<usize> = picks.iter().collect();
            v.sort();
            v.dedup();
            assert_eq!(v.len(), k);
            for i in v {
                hits[i] += 1;
            }
        }
        let p = k as f64 / 10.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for h in hits {
            assert!((h as f64 / n as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn direct_estimate_on_binary_tree() {
        let (t, horizon) = (3, 13);
        let est = mrca_direct_estimate(&constant(2), t, horizon, 2, 2000, key()).unwrap();
        let exact = 1.0 - (2f64.powi(10) - 1.0) / (2f64.powi(13) - 1.0);
        assert!((est.p_hat - exact).abs() < 4.0 * est.std_err, "{est:?} vs {exact}");
        let est = mrca_direct_estimate(&slightly_supercritical(), 0, 6, 2, 300, key()).unwrap();
        assert_eq!(est.p_hat, 0.0);
    }

    #[test]
    fn direct_estimate_needs_enough_runs() {
        assert!(matches!(
            mrca_direct_estimate(&constant(2), 1, 3, 2, 50, key()),
            Err(Error::InsufficientData { n_effective: 50, .. })
        ));
    }

    #[test]
    fn results_do_not_depend_on_thread_count() {
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| mrca_direct_estimate(&slightly_supercritical(), 2, 7, 2, 200, key()).unwrap())
        };
        assert_eq!(run(1), run(3));
    }

    #[test]
    fn martingale_mean_is_right_eigenvector() {
        let model = slightly_supercritical();
        let spec = spectral(&mean_matrix(&model)).unwrap();
        let w = simulate_martingale(&model, &spec, 15, 20_000, key()).unwrap();
        let m = mean_se(&w);
        assert!((m.mean - spec.u[0]).abs() < 4.0 * m.std_err, "{m:?}");
    }
}
