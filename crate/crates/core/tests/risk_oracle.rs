//! Tabular risk-critic updates against an independent value-iteration oracle
//! on a small gridded point-mass world.

use aasc_core::safeguard::{update_risk_critic, Bootstrap, RiskEstimator, RiskSample, TabularCritic};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const P: i32 = 4;
const V: i32 = 1;
const GAMMA: f64 = 0.8;
const ALPHA: f64 = 2.0;
const ETA: f64 = 0.08;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cell {
    px: i32,
    py: i32,
    vx: i32,
    vy: i32,
}

fn n_pos() -> usize {
    (2 * P + 1) as usize
}

fn n_vel() -> usize {
    (2 * V + 1) as usize
}

fn n_states() -> usize {
    n_pos() * n_pos() * n_vel() * n_vel()
}

fn index(c: Cell) -> usize {
    let p = |v: i32| (v + P) as usize;
    let v = |u: i32| (u + V) as usize;
    ((p(c.px) * n_pos() + p(c.py)) * n_vel() + v(c.vx)) * n_vel() + v(c.vy)
}

fn cell(mut i: usize) -> Cell {
    let vy = (i % n_vel()) as i32 - V;
    i /= n_vel();
    let vx = (i % n_vel()) as i32 - V;
    i /= n_vel();
    let py = (i % n_pos()) as i32 - P;
    i /= n_pos();
    Cell { px: i as i32 - P, py, vx, vy }
}

const ACTIONS: [(i32, i32); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn action_index(a: (i32, i32)) -> usize {
    ACTIONS.iter().position(|x| *x == a).unwrap()
}

fn unsafe_cell(c: Cell) -> bool {
    c.px.abs() >= P || c.py.abs() >= P
}

fn step(c: Cell, a: (i32, i32)) -> Cell {
    let vx = (c.vx + a.0).clamp(-V, V);
    let vy = (c.vy + a.1).clamp(-V, V);
    Cell {
        px: (c.px + vx).clamp(-P, P),
        py: (c.py + vy).clamp(-P, P),
        vx,
        vy,
    }
}

fn cost(c: Cell) -> f64 {
    let dist = (P - c.px.abs()).min(P - c.py.abs()) as f64;
    (1.0 - dist / ALPHA).max(0.0)
}

fn backup(c: Cell) -> (i32, i32) {
    (-c.vx.signum(), -c.vy.signum())
}

/// A fixed stochastic-looking but deterministic behaviour policy.
fn behaviour(seed: u64) -> Vec<(i32, i32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_states()).map(|_| ACTIONS[rng.random_range(0..ACTIONS.len())]).collect()
}

/// Plain policy evaluation (or the max backup) by fixed-point iteration.
fn oracle(boot: Bootstrap, pi: &[(i32, i32)]) -> Vec<f64> {
    let na = ACTIONS.len();
    let mut q = vec![0.0; n_states() * na];
    for _ in 0..2000 {
        let mut next = q.clone();
        let mut change: f64 = 0.0;
        for s in 0..n_states() {
            let c = cell(s);
            if unsafe_cell(c) {
                continue;
            }
            for (ai, a) in ACTIONS.iter().enumerate() {
                let c2 = step(c, *a);
                let s2 = index(c2);
                let future = if unsafe_cell(c2) {
                    0.0
                } else {
                    match boot {
                        Bootstrap::Executed => q[s2 * na + action_index(pi[s2])],
                        Bootstrap::Backup => q[s2 * na + action_index(backup(c2))],
                        Bootstrap::Max => (0..na).map(|k| q[s2 * na + k]).fold(0.0, f64::max),
                    }
                };
                let v = (cost(c2) + GAMMA * future).min(1.0);
                change = change.max((v - q[s * na + ai]).abs());
                next[s * na + ai] = v;
            }
        }
        q = next;
        if change < 1e-15 {
            break;
        }
    }
    q
}

fn samples(boot: Bootstrap, pi: &[(i32, i32)]) -> Vec<RiskSample<(usize, usize)>> {
    let mut out = Vec::new();
    for s in 0..n_states() {
        let c = cell(s);
        if unsafe_cell(c) {
            continue;
        }
        for (ai, a) in ACTIONS.iter().enumerate() {
            let c2 = step(c, *a);
            let s2 = index(c2);
            let next_inputs = match boot {
                Bootstrap::Executed => vec![(s2, action_index(pi[s2]))],
                Bootstrap::Backup => vec![(s2, action_index(backup(c2)))],
                Bootstrap::Max => (0..ACTIONS.len()).map(|k| (s2, k)).collect(),
            };
            out.push(RiskSample {
                input: (s, ai),
                cost: cost(c2),
                done: unsafe_cell(c2),
                next_inputs,
            });
        }
    }
    out
}

fn intervention_set(q: &[f64]) -> Vec<(usize, usize)> {
    let na = ACTIONS.len();
    let mut set = Vec::new();
    for s in 0..n_states() {
        let c = cell(s);
        if unsafe_cell(c) {
            continue;
        }
        let qb = q[s * na + action_index(backup(c))];
        for ai in 0..na {
            if q[s * na + ai] - qb >= ETA {
                set.push((s, ai));
            }
        }
    }
    set
}

#[test]
fn indexing_round_trips() {
    for s in 0..n_states() {
        assert_eq!(index(cell(s)), s);
    }
}

#[test]
fn tabular_updates_converge_to_the_oracle_for_every_bootstrap() {
    let pi = behaviour(17);
    for boot in [Bootstrap::Executed, Bootstrap::Backup, Bootstrap::Max] {
        let truth = oracle(boot, &pi);
        let batch = samples(boot, &pi);
        let mut critic = TabularCritic::new(n_states(), ACTIONS.len());
        for _ in 0..300 {
            update_risk_critic(&mut critic, &batch, GAMMA, 1.0).unwrap();
        }
        let mut worst: f64 = 0.0;
        for sample in &batch {
            let (s, a) = sample.input;
            worst = worst.max((critic.online(&(s, a)) - truth[s * ACTIONS.len() + a]).abs());
        }
        assert!(worst <= 1e-6, "{boot}: max error {worst}");

        let learned: Vec<f64> = (0..n_states() * ACTIONS.len())
            .map(|i| critic.online(&(i / ACTIONS.len(), i % ACTIONS.len())))
            .collect();
        let a = intervention_set(&truth);
        let b = intervention_set(&learned);
        assert!(!a.is_empty(), "{boot}: oracle never intervenes");
        assert_eq!(a, b, "{boot}: intervention sets differ");
    }
}

#[test]
fn oracle_values_are_probabilities_and_unsafe_moves_cost_one() {
    let pi = behaviour(3);
    let q = oracle(Bootstrap::Executed, &pi);
    assert!(q.iter().all(|v| (0.0..=1.0).contains(v)));
    let edge = Cell { px: 3, py: 0, vx: 1, vy: 0 };
    let s = index(edge);
    assert_eq!(q[s * ACTIONS.len() + action_index((1, 0))], 1.0);
    assert_eq!(q[s * ACTIONS.len() + action_index((0, 0))], 1.0);
    let q = oracle(Bootstrap::Backup, &pi);
    let inner = index(Cell { px: 2, py: 0, vx: 1, vy: 0 });
    assert_eq!(q[inner * ACTIONS.len() + action_index((-1, 0))], 0.0);
    assert_eq!(q[inner * ACTIONS.len() + action_index((0, 0))], 1.0);
}

#[test]
fn soft_target_updates_converge_more_slowly_but_to_the_same_point() {
    let pi = behaviour(5);
    let truth = oracle(Bootstrap::Backup, &pi);
    let batch = samples(Bootstrap::Backup, &pi);
    let mut critic = TabularCritic::new(n_states(), ACTIONS.len());
    let mut errs = Vec::new();
    for round in 0..3000 {
        update_risk_critic(&mut critic, &batch, GAMMA, 0.1).unwrap();
        if round % 500 == 499 {
            let e = batch
                .iter()
                .map(|x| (critic.online(&x.input) - truth[x.input.0 * ACTIONS.len() + x.input.1]).abs())
                .fold(0.0, f64::max);
            errs.push(e);
        }
    }
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    assert!(*errs.last().unwrap() <= 1e-6, "{errs:?}");
}
