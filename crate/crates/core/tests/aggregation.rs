use std::sync::Arc;

use aasc_core::aggregate::{build_weighting, Aggregator, MatrixWeighting, PolicyBatch, WeightingSpec};
use aasc_core::nn::{GaussianPolicyHead, Network, OutputHead};
use aasc_core::policy::Policy;
use aasc_core::simenv::{self, Action, EnvParams, State};
use aasc_core::trainer::{collect_batch, stream, Collector, SafeguardBuffer, TrainConfig};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn random_state(rng: &mut ChaCha8Rng) -> State {
    State::new(
        rng.random_range(-2.5..2.5),
        rng.random_range(-15.0..15.0),
        rng.random_range(-2.0..2.0),
        rng.random_range(-2.0..2.0),
    )
}

fn sources(n: usize, rng: &mut ChaCha8Rng) -> Vec<Arc<Policy>> {
    (0..n)
        .map(|_| Arc::new(Policy::new(GaussianPolicyHead::new(&[4, 64, 64, 2], rng).unwrap())))
        .collect()
}

#[test]
fn attention_columns_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let agg = Aggregator::new("aasc", sources(4, &mut rng), &[64, 64], &mut rng).unwrap();
    let rows = agg.weighting().rows();
    let cols = agg.weighting().cols();
    assert_eq!((rows, cols), (5, 2));
    for _ in 0..10_000 {
        let s = random_state(&mut rng);
        let w = agg.weighting().weights(&s.to_array()).unwrap();
        for c in 0..cols {
            let col: f64 = (0..rows).map(|r| w[r * cols + c]).sum();
            assert!((col - 1.0).abs() <= 1e-12);
            assert!((0..rows).all(|r| w[r * cols + c] >= 0.0));
        }
    }
}

#[test]
fn one_hot_attention_reproduces_the_selected_source() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let src = sources(3, &mut rng);
    let aux = Network::new(&[4, 64, 64, 2], OutputHead::GaussianMean, &mut rng).unwrap();
    for pick in 0..4 {
        let mut matrix = vec![0.0; 8];
        matrix[pick * 2] = 1.0;
        matrix[pick * 2 + 1] = 1.0;
        let w = MatrixWeighting::from_matrix(4, 2, matrix).unwrap();
        let agg = Aggregator::from_parts(src.clone(), aux.clone(), Box::new(w), vec![-1.0; 2]).unwrap();
        for _ in 0..200 {
            let s = random_state(&mut rng);
            let mean = agg.aggregate(&s).unwrap().distribution.mean;
            let expected = if pick < 3 {
                src[pick].mean_action(&s.to_array()).unwrap()
            } else {
                aux.forward(&s.to_array()).unwrap()
            };
            assert_eq!(mean, expected);
        }
    }

    // A saturated softmax underflows its other rows to exactly zero.
    let spec = WeightingSpec {
        rows: 4,
        cols: 2,
        state_dim: 4,
        hidden: vec![],
    };
    let mut w = build_weighting("aasc", &spec, &mut rng).unwrap();
    let p = w.params_mut();
    p.iter_mut().for_each(|v| *v = 0.0);
    let n = p.len();
    // Bias block follows the 8x4 weight block; row 1 of both columns wins.
    p[n - 8 + 2] = 2000.0;
    p[n - 8 + 3] = 2000.0;
    let agg = Aggregator::from_parts(src.clone(), aux.clone(), w, vec![-1.0; 2]).unwrap();
    for _ in 0..200 {
        let s = random_state(&mut rng);
        let mean = agg.aggregate(&s).unwrap().distribution.mean;
        assert_eq!(mean, src[1].mean_action(&s.to_array()).unwrap());
    }
}

#[test]
fn fixed_matrix_starts_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [1, 4, 10] {
        let agg = Aggregator::new("multipolar", sources(k, &mut rng), &[64, 64], &mut rng).unwrap();
        let w = agg.weighting().weights(&[0.0; 4]).unwrap();
        assert!(w.iter().all(|v| (*v - 1.0 / (k + 1) as f64).abs() < 1e-15));
    }
}

#[test]
fn none_mode_ignores_sources_and_has_unit_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let agg = Aggregator::new("none", sources(3, &mut rng), &[64, 64], &mut rng).unwrap();
    assert_eq!(agg.n_sources(), 0);
    assert!(agg.weighting().params().is_empty());
    for _ in 0..100 {
        let s = random_state(&mut rng);
        let mean = agg.aggregate(&s).unwrap().distribution.mean;
        assert_eq!(mean, agg.aux().forward(&s.to_array()).unwrap());
    }
}

/// A rollout of the aggregator in mode `none` matches, bit for bit, a
/// hand-written loop around a plain Gaussian policy.
#[test]
fn none_mode_rollout_is_the_plain_gaussian_baseline() {
    let mut init = ChaCha8Rng::seed_from_u64(9);
    let mut agg = Aggregator::new("none", Vec::new(), &[64, 64], &mut init).unwrap();
    agg.log_std_mut().copy_from_slice(&[-0.4, 0.1]);
    let head = agg.aux_policy();
    let env = EnvParams::target();
    let cfg = TrainConfig {
        batch_steps: 10_000,
        ..TrainConfig::default()
    };

    let mut rng = stream(42, 1);
    let mut collector = Collector::new(&env, &mut rng);
    let mut sg = SafeguardBuffer::new(100);
    let (buf, stats) = collect_batch(&cfg, &env, &agg, None, &mut collector, &mut sg, &mut rng).unwrap();

    let mut rng = stream(42, 1);
    let mut s = simenv::reset(&env, &mut rng);
    let mut t = 0;
    let mut episodes = 0;
    for e in &buf.entries {
        let mean = head.mean_action(&s.to_array()).unwrap();
        let a: Vec<f64> = mean
            .iter()
            .zip(&head.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + ls.exp() * z
            })
            .collect();
        let out = simenv::step(&env, &s, &Action::from_slice(&a)).unwrap();
        assert_eq!(e.state, s);
        assert_eq!(e.action.to_vec(), a);
        assert_eq!(e.next_state, out.next_state);
        assert_eq!(e.reward, out.reward);
        assert!((e.log_prob - head.log_prob(&s.to_array(), &a).unwrap()).abs() < 1e-12);
        t += 1;
        if out.done || t >= env.horizon {
            s = simenv::reset(&env, &mut rng);
            t = 0;
            episodes += 1;
        } else {
            s = out.next_state;
        }
    }
    assert_eq!(stats.returns.len(), episodes);
}

#[test]
fn none_mode_gradients_are_the_plain_gaussian_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut agg = Aggregator::new("none", Vec::new(), &[64, 64], &mut rng).unwrap();
    agg.log_std_mut().copy_from_slice(&[0.3, -0.6]);
    let head = agg.aux_policy();
    let n = 32;
    let states: Vec<State> = (0..n).map(|_| random_state(&mut rng)).collect();
    let actions: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]).collect();
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let batch = PolicyBatch {
        states: Array2::from_shape_fn((n, 4), |(k, j)| states[k].to_array()[j]),
        actions: Array2::from_shape_fn((n, 2), |(k, j)| actions[k][j]),
        source_actions: Array2::zeros((n, 0)),
    };
    let w = weights.clone();
    let (lps, grads) = agg.log_probs_and_grads(&batch, move |_| w).unwrap();
    let mut mean_g = vec![0.0; head.mean.param_count()];
    let mut ls_g = [0.0; 2];
    for k in 0..n {
        let g = head.log_prob_grad(&states[k].to_array(), &actions[k]).unwrap();
        assert!((g.log_prob - lps[k]).abs() < 1e-12);
        for (acc, v) in mean_g.iter_mut().zip(&g.mean_params) {
            *acc += weights[k] * v;
        }
        for d in 0..2 {
            ls_g[d] += weights[k] * g.log_std[d];
        }
    }
    assert!(grads.weighting.is_empty());
    for (a, b) in grads.aux.iter().zip(&mean_g) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
    for d in 0..2 {
        assert!((grads.log_std[d] - ls_g[d]).abs() <= 1e-12 * (1.0 + ls_g[d].abs()));
    }
}

#[test]
fn sources_are_never_updated() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let src = sources(2, &mut rng);
    let before: Vec<Policy> = src.iter().map(|p| (**p).clone()).collect();
    let mut agg = Aggregator::new("aasc", src.clone(), &[64, 64], &mut rng).unwrap();
    let mut flat = agg.flat_params();
    flat.iter_mut().for_each(|v| *v += 0.1);
    agg.set_flat_params(&flat).unwrap();
    for (p, b) in agg.sources().iter().zip(&before) {
        assert_eq!(**p, *b);
    }
    assert_eq!(agg.n_trainable(), flat.len());
}
