use aasc_core::nn::{Network, OutputHead};
use aasc_core::safeguard::{BackupPolicy, NetworkCritic, SafeguardConfig, SafeguardRule};
use aasc_core::simenv::{self, cost_hinge, dist_to_unsafe, is_safe, Action, EnvParams, State};
use aasc_core::trainer::{gae, SafeguardBuffer, SafeguardEntry};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn state() -> impl Strategy<Value = State> {
    (-3.0..3.0f64, -16.0..16.0f64, -2.0..2.0f64, -2.0..2.0f64).prop_map(|(x, y, vx, vy)| State::new(x, y, vx, vy))
}

fn action() -> impl Strategy<Value = Action> {
    (-3.0..3.0f64, -3.0..3.0f64).prop_map(|(ax, ay)| Action::new(ax, ay))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn speed_stays_bounded_and_violations_end_episodes(s in state(), a in action()) {
        let env = EnvParams::target();
        let out = simenv::step(&env, &s, &a).unwrap();
        prop_assert!(out.next_state.vx.abs() <= env.v_max + 1e-12);
        prop_assert!(out.next_state.vy.abs() <= env.v_max + 1e-12);
        prop_assert_eq!(out.violated, !is_safe(&env, &out.next_state));
        prop_assert_eq!(out.done, out.violated);
        if out.violated {
            prop_assert_eq!(out.reward, 0.0);
        }
        prop_assert!((0.0..=1.0).contains(&out.cost));
    }

    #[test]
    fn hinge_cost_is_monotone_in_distance(s in state(), t in state(), alpha in 0.05..3.0f64) {
        let env = EnvParams::target();
        let (ds, dt) = (dist_to_unsafe(&env, &s), dist_to_unsafe(&env, &t));
        let (cs, ct) = (cost_hinge(&env, &s, alpha), cost_hinge(&env, &t, alpha));
        prop_assert!(ds >= 0.0);
        if ds <= dt {
            prop_assert!(cs >= ct);
        }
        if !is_safe(&env, &s) {
            prop_assert_eq!(cs, 1.0);
        }
        if ds >= alpha {
            prop_assert_eq!(cs, 0.0);
        }
    }

    #[test]
    fn backup_output_is_bounded_and_opposes_motion(s in state()) {
        let env = EnvParams::target();
        let a = BackupPolicy::new(&env).action(&s);
        prop_assert!(a.ax.abs() <= env.a_max && a.ay.abs() <= env.a_max);
        prop_assert!(a.ax * s.vx <= 0.0 && a.ay * s.vy <= 0.0);
    }

    #[test]
    fn risk_estimates_are_probabilities_and_self_advantage_vanishes(
        seed in 0u64..1000,
        s in state(),
        a in action(),
        scale in 0.1..30.0f64,
    ) {
        let env = EnvParams::target();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(&[6, 16, 1], OutputHead::Linear, &mut rng).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p *= scale);
        let rule = SafeguardRule::with_critic(
            &SafeguardConfig::default(),
            &env,
            NetworkCritic::from_network(net, 1e-3, 0.5),
        )
        .unwrap();
        let q = rule.q(&s, &a);
        prop_assert!((0.0..=1.0).contains(&q));
        prop_assert!(rule.advantage(&s, &a).abs() <= 1.0);
        prop_assert_eq!(rule.advantage(&s, &rule.backup.action(&s)), 0.0);
        let d = rule.evaluate(&s, &a);
        prop_assert_eq!(d.intervened, d.score >= 0.08);
    }

    #[test]
    fn shaped_reward_never_exceeds_raw_reward_when_penalty_is_nonpositive(
        b in -10.0..=0.0f64,
        r in 0.0..20.0f64,
        absorbing in any::<bool>(),
        intervened in any::<bool>(),
    ) {
        let cfg = SafeguardConfig { penalty_b: b, ..SafeguardConfig::default() };
        let rule = SafeguardRule::new(&cfg, &EnvParams::target(), &[4], 0.5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut d = aasc_core::safeguard::SafeguardDecision::pass(Action::default());
        d.intervened = intervened;
        let raw = if absorbing { 0.0 } else { r };
        prop_assert!(rule.shaped_reward(&d, raw, absorbing) <= raw);
    }

    #[test]
    fn softmax_columns_sum_to_one(seed in 0u64..1000, x in prop::collection::vec(-50.0..50.0f64, 4), scale in 0.1..20.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(&[4, 8, 6], OutputHead::Softmax { rows: 3, cols: 2 }, &mut rng).unwrap();
        net.params_mut().iter_mut().for_each(|p| *p *= scale);
        let w = net.forward(&x).unwrap();
        for c in 0..2 {
            let sum: f64 = (0..3).map(|r| w[r * 2 + c]).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn undiscounted_full_lambda_advantage_is_return_minus_value(
        rewards in prop::collection::vec(-5.0..5.0f64, 1..40),
        v in -3.0..3.0f64,
    ) {
        let n = rewards.len();
        let values = vec![v; n];
        let terminal: Vec<bool> = (0..n).map(|i| i == n - 1).collect();
        let (adv, ret) = gae(&rewards, &values, &vec![0.0; n], &terminal, &terminal, 1.0, 1.0);
        for t in 0..n {
            let tail: f64 = rewards[t..].iter().sum();
            prop_assert!((ret[t] - tail).abs() < 1e-9);
            prop_assert!((adv[t] - (tail - v)).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_buffer_keeps_the_most_recent_entries(cap in 1usize..50, pushes in 0usize..200) {
        let mut buf = SafeguardBuffer::new(cap);
        for i in 0..pushes {
            buf.push(SafeguardEntry {
                state: State::default(),
                action: Action::default(),
                next_state: State::default(),
                reward: i as f64,
                cost: 0.0,
                next_action: Action::default(),
                done: false,
            });
        }
        prop_assert_eq!(buf.len(), pushes.min(cap));
        let mut kept: Vec<usize> = buf.entries().iter().map(|e| e.reward as usize).collect();
        kept.sort_unstable();
        let expected: Vec<usize> = (pushes.saturating_sub(cap)..pushes).collect();
        prop_assert_eq!(kept, expected);
    }

    #[test]
    fn env_params_round_trip_through_text(m in 0.5..2.0f64, x in 1.0..5.0f64, y in 5.0..30.0f64, v in 0.5..4.0f64) {
        let params = EnvParams { m, x_max: x, y_max: y, v_max: v, ..EnvParams::target() };
        prop_assert_eq!(EnvParams::from_text(&params.to_text()).unwrap(), params);
    }
}
