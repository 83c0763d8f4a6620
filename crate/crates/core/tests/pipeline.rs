mod common;

use branchkit::coalescence::{harmonic_bounds_for, iterate_pgf, TheoremEstimator};
use branchkit::hs_transform::{
    bound_constants, corollary_bounds, default_epsilon, estimate_sup_moments, hs_pgf_eval, HsSampler,
};
use branchkit::rng::{Purpose, SeedKey};
use branchkit::simulate::{simulate_martingale, Simulator};
use branchkit::stats::mean_se;
use common::*;

fn key() -> SeedKey {
    SeedKey::new(97)
}

#[test]
fn martingale_moments_at_generation_fifteen() {
    let p = Pipeline::new(&slightly(), 4);
    for root in 0..2 {
        let model = p.model.with_root(root).unwrap();
        let w = simulate_martingale(&model, &p.spec, 15, 100_000, key()).unwrap();
        let first = mean_se(&w);
        let second = mean_se(&w.iter().map(|x| x * x).collect::<Vec<_>>());
        let (m1, m2) = (p.table.get(root, 1), p.table.get(root, 2));
        assert!((first.mean - m1).abs() < 5.0 * first.std_err, "type {root}: {first:?} vs {m1}");
        assert!((second.mean - m2).abs() < 5.0 * second.std_err, "type {root}: {second:?} vs {m2}");
    }
}

#[test]
fn two_generations_of_the_transform() {
    for model in [slightly(), very()] {
        let p = Pipeline::new(&model, 4);
        let q = &p.q.q;
        let sampler = HsSampler::new(&model, &p.q).unwrap();
        let mut rng = key().stream(Purpose::Oracle, 2, 0);
        let draws: Vec<Vec<u64>> = (0..100_000)
            .map(|_| sampler.sample_two_generations(0, &mut rng).unwrap())
            .collect();
        let probes = [[0.1, 0.1], [0.5, 0.5], [0.9, 0.2], [0.3, 0.8], [0.95, 0.95]];
        for s in probes {
            let x: Vec<f64> = s.iter().zip(q).map(|(s, q)| s * (1.0 - q) + q).collect();
            let want = (iterate_pgf(&model, 2, &x)[0] - q[0]) / (1.0 - q[0]);
            let vals: Vec<f64> = draws
                .iter()
                .map(|y| s[0].powi(y[0] as i32) * s[1].powi(y[1] as i32))
                .collect();
            let m = mean_se(&vals);
            assert!((m.mean - want).abs() < 4.0 * m.std_err, "{s:?}: {m:?} vs {want}");
        }
        // One generation of the transform is the transformed pgf itself.
        let one = hs_pgf_eval(&model, &p.q, 0, &[0.5, 0.5]).unwrap();
        let x: Vec<f64> = q.iter().map(|q| 0.5 * (1.0 - q) + q).collect();
        assert!((one - (iterate_pgf(&model, 1, &x)[0] - q[0]) / (1.0 - q[0])).abs() < 1e-14);
    }
}

/// Weighted pool-adjacent-violators fit of a nondecreasing sequence.
fn isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for (&y, &w) in y.iter().zip(w) {
        blocks.push((y, w, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (y2, w2, n2) = blocks.pop().unwrap();
            let (y1, w1, n1) = blocks.pop().unwrap();
            blocks.push(((y1 * w1 + y2 * w2) / (w1 + w2), w1 + w2, n1 + n2));
        }
    }
    blocks.iter().flat_map(|&(y, _, n)| std::iter::repeat_n(y, n)).collect()
}

#[test]
fn estimate_is_monotone_in_t() {
    let p = Pipeline::new(&slightly(), 4);
    let estimator = TheoremEstimator::new(&p.model, &p.densities()).unwrap();
    let est: Vec<_> = (1..=6).map(|t| estimator.estimate(t, 2, 100_000, key()).unwrap()).collect();
    let y: Vec<f64> = est.iter().map(|e| e.p_hat).collect();
    let w: Vec<f64> = est.iter().map(|e| 1.0 / (e.std_err * e.std_err)).collect();
    let fit = isotonic(&y, &w);
    let pooled = (est.iter().map(|e| e.std_err * e.std_err).sum::<f64>() / est.len() as f64).sqrt();
    for (e, f) in est.iter().zip(&fit) {
        assert!((e.p_hat - f).abs() < 3.0 * pooled, "t = {}: {} vs fit {f}", e.t, e.p_hat);
    }
}

#[test]
fn bounds_bracket_estimates_on_test_models() {
    for model in [quarter_binary(), poisson(2.0)] {
        let p = Pipeline::new(&model, 4);
        let c = bound_constants(&p.table, &p.q, default_epsilon(&p.table, 2), 2).unwrap();
        let inputs = estimate_sup_moments(&model, &p.q, 20_000, key()).unwrap();
        let ts: Vec<u32> = (1..=8).collect();
        let corollary = corollary_bounds(&c, &inputs, &ts);
        let harmonic = harmonic_bounds_for(&model, &c, &ts).unwrap();
        let estimator = TheoremEstimator::new(&model, &p.densities()).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let e = estimator.estimate(t, 2, 2000, key()).unwrap();
            for row in [corollary[i], harmonic[i]] {
                assert!(row.lower <= e.p_hat + 3.0 * e.std_err, "{row:?} vs {e:?}");
                assert!(row.upper >= e.p_hat - 3.0 * e.std_err, "{row:?} vs {e:?}");
            }
        }
    }
}

#[test]
fn offspring_draws_average_to_the_mean_matrix() {
    let model = very();
    let sim = Simulator::new(&model).unwrap();
    let m = branchkit::model::mean_matrix(&model);
    let mut rng = key().stream(Purpose::Oracle, 5, 0);
    for i in 0..2 {
        let draws: Vec<Vec<u64>> = (0..1_000_000).map(|_| sim.sample_offspring(i, &mut rng)).collect();
        for j in 0..2 {
            let s = mean_se(&draws.iter().map(|v| v[j] as f64).collect::<Vec<_>>());
            assert!((s.mean - m.get(i, j)).abs() < 4.0 * s.std_err, "({i},{j}) {s:?}");
        }
    }
}
