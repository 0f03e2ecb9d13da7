use decs_lab::env::{EnvConfig, SynthEnv};
use decs_lab::par::stream_rng;
use decs_lab::policy::{softmax, Context, TabularPolicy, TokenAdvantageMap};
use decs_lab::vocab::TokenId;
use proptest::prelude::*;

fn row(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

/// Centers `raw` under `pi` so the row satisfies the exactness precondition.
fn center(raw: &[f64], pi: &[f64]) -> Vec<f64> {
    let m: f64 = raw.iter().zip(pi).map(|(a, p)| a * p).sum();
    raw.iter().map(|a| a - m).collect()
}

proptest! {
    #[test]
    fn rows_stay_stochastic_under_updates(
        n in 2usize..8,
        seed in any::<u64>(),
        steps in 1usize..6,
    ) {
        let mut rng = stream_rng(seed, &[0]);
        let mut p = TabularPolicy::new(n, 1, 0.7).unwrap();
        let ctx = Context::root(0);
        for _ in 0..steps {
            use rand::Rng;
            let pi = p.next_dist(&ctx);
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut adv = TokenAdvantageMap::new(n);
            adv.set_row(ctx.clone(), center(&raw, &pi)).unwrap();
            p = p.pg_update_exact(&adv).unwrap();
            let total: f64 = p.next_dist(&ctx).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_update_moves_logits_by_eta_pi_a(
        logits in row(5),
        raw in row(5),
        eta in 1e-3f64..2.0,
    ) {
        let mut p = TabularPolicy::new(5, 2, eta).unwrap();
        let ctx = Context::from_history(3, &[TokenId(1)], 2);
        p.set_row(ctx.clone(), logits).unwrap();
        let pi = p.next_dist(&ctx);
        let a = center(&raw, &pi);
        let mut adv = TokenAdvantageMap::new(5);
        adv.set_row(ctx.clone(), a.clone()).unwrap();
        let next = p.pg_update_exact(&adv).unwrap();
        for k in 0..5 {
            let t = TokenId(k as u16);
            let dz = next.logit(&ctx, t) - p.logit(&ctx, t);
            prop_assert!((dz - eta * pi[k] * a[k]).abs() <= 1e-10);
        }
    }

    #[test]
    fn softmax_is_translation_invariant(logits in row(6), shift in -50.0f64..50.0) {
        let a = softmax(&logits);
        let shifted: Vec<f64> = logits.iter().map(|z| z + shift).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn checkpoints_round_trip(rows in prop::collection::vec((0u16..4, row(4)), 1..6)) {
        let mut p = TabularPolicy::new(4, 2, 0.5).unwrap();
        for (i, (class, r)) in rows.into_iter().enumerate() {
            let ctx = Context::from_history(class, &[TokenId((i % 4) as u16)], 2);
            p.set_row(ctx, r).unwrap();
        }
        let text = p.to_checkpoint_string();
        let back = TabularPolicy::read_checkpoint(text.as_bytes(), 0.5).unwrap();
        prop_assert_eq!(back, p);
    }
}

#[test]
fn hand_softmax_matches_independent_oracle() {
    let logits = [3f64.ln(), 0.0, 0.0, 0.0];
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    let oracle: Vec<f64> = logits.iter().map(|x| x.exp() / z).collect();
    let got = softmax(&logits);
    let expected = [0.5, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0];
    for k in 0..4 {
        assert!((got[k] - oracle[k]).abs() < 1e-15);
        assert!((got[k] - expected[k]).abs() < 1e-15);
    }
}

#[test]
fn identical_seeds_give_identical_rollouts() {
    let env = SynthEnv::new(EnvConfig::default()).unwrap();
    let policy = env.initial_policy(1.0).unwrap();
    let draw = |seed| {
        let mut rng = stream_rng(seed, &[9]);
        (0..50)
            .map(|_| {
                let prompt = env.sample_prompt(&mut rng);
                env.generate(&policy, &prompt, &mut rng).unwrap().tokens
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(3), draw(3));
    assert_ne!(draw(3), draw(4));
}
