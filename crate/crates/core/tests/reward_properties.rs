use decs_lab::advantage::{decs_advantage, grpo_advantage, rpp_advantage};
use decs_lab::env::{Prompt, Rollout};
use decs_lab::rewards::{decoupled_rewards, length_reward, LengthBasis, RewardParams, TokenMatrix};
use decs_lab::vocab::{TokenId, Vocab};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::new(3, 2, 2).unwrap()
}

fn prompt(v: &Vocab) -> Prompt {
    Prompt {
        prompt_class: 0,
        target: v.answer(0),
        difficulty: 0.0,
    }
}

/// Correct rollout whose thinking has length `t` with `y*` first at `k`.
fn correct(v: &Vocab, t: usize, k: usize) -> Rollout {
    let mut tokens: Vec<TokenId> = (0..t).map(|_| v.filler(0)).collect();
    tokens[k - 1] = v.answer(0);
    tokens.extend([v.think_end(), v.answer(0), v.eos()]);
    let probs = vec![1.0; tokens.len()];
    Rollout::from_tokens(tokens, probs, &prompt(v), v)
}

fn incorrect(v: &Vocab, t: usize) -> Rollout {
    let mut tokens: Vec<TokenId> = (0..t).map(|_| v.filler(1)).collect();
    tokens.extend([v.think_end(), v.answer(1), v.eos()]);
    let probs = vec![1.0; tokens.len()];
    Rollout::from_tokens(tokens, probs, &prompt(v), v)
}

/// `(thinking length, first y* position)` pairs.
fn spans(max_t: usize) -> impl Strategy<Value = (usize, usize)> {
    (1..=max_t).prop_flat_map(|t| (Just(t), 1..=t))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

proptest! {
    #[test]
    fn redundancy_gap_grows_with_length(
        (t, k) in spans(30),
        r_zero in 0.5f64..1.5,
        bump in 0.01f64..1.0,
    ) {
        let v = vocab();
        let params = RewardParams { gamma: 0.0, r_plus: r_zero + bump, r_zero, length_basis: LengthBasis::Full };
        let short = correct(&v, t, k);
        let long = correct(&v, t + 5, k);
        let m = decoupled_rewards(&[short.clone(), long.clone()], &[Some(k), Some(k)], &params).unwrap();
        for (row, r) in [(0, &short), (1, &long)] {
            let l = r.len() as f64;
            for j in 0..r.len() {
                let value = m.rows[row][j];
                if j >= k && j < r.thinking_len() {
                    let gap = params.r_plus - value;
                    prop_assert!(gap > 0.0);
                    prop_assert!((gap - bump * (1.0 - 1.0 / l)).abs() < 1e-12);
                } else {
                    prop_assert_eq!(value, params.r_plus);
                }
            }
        }
        let gap = |r: &Rollout| bump * (1.0 - 1.0 / r.len() as f64);
        prop_assert!(gap(&long) > gap(&short));
    }

    #[test]
    fn length_reward_strictly_decreases(t in 1usize..200, gamma in 1e-5f64..1e-2) {
        let v = vocab();
        let a = correct(&v, t, 1);
        let b = correct(&v, t + 1, 1);
        prop_assert!(length_reward(&a, gamma) > length_reward(&b, gamma));
    }

    #[test]
    fn grpo_is_zero_sum_and_affine_invariant(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..20),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let a = grpo_advantage(&rewards).unwrap();
        let spread = rewards.iter().cloned().fold(f64::MIN, f64::max)
            - rewards.iter().cloned().fold(f64::MAX, f64::min);
        if spread > 1e-6 {
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        }
        let moved: Vec<f64> = rewards.iter().map(|r| scale * r + shift).collect();
        let b = grpo_advantage(&moved).unwrap();
        if spread > 1e-6 {
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn decs_columns_are_zero_sum(
        group in prop::collection::vec((spans(12), any::<bool>()), 2..10),
    ) {
        let v = vocab();
        let params = RewardParams::default();
        let rollouts: Vec<Rollout> = group
            .iter()
            .map(|&((t, k), ok)| if ok { correct(&v, t, k) } else { incorrect(&v, t) })
            .collect();
        let ends: Vec<Option<usize>> = rollouts.iter().map(|r| r.nrp_end).collect();
        let m = decoupled_rewards(&rollouts, &ends, &params).unwrap();
        let a = decs_advantage(&m).unwrap();
        for j in 0..m.width() {
            let col: Vec<f64> = m.rows.iter().map(|r| r[j]).collect();
            let adv: Vec<f64> = a.values.rows.iter().map(|r| r[j]).collect();
            let degenerate = col.iter().all(|&x| x == col[0]);
            if degenerate {
                prop_assert!(adv.iter().all(|&x| x == 0.0));
            } else {
                prop_assert!(adv.iter().sum::<f64>().abs() < 1e-9);
            }
        }
        // Answer and padding positions of correct rollouts carry the top
        // reward, so their advantage is never negative.
        for (i, r) in rollouts.iter().enumerate() {
            if r.correct {
                for j in r.thinking_len()..m.width() {
                    prop_assert!(a.values.rows[i][j] >= 0.0);
                }
                for j in 0..r.nrp_end.unwrap() {
                    prop_assert!(a.values.rows[i][j] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn redundant_tokens_lose_to_covered_competitors(
        t in 2usize..16,
        ks in prop::collection::vec(1usize..16, 2..8),
    ) {
        let v = vocab();
        let ks: Vec<usize> = ks.into_iter().map(|k| 1 + (k - 1) % t).collect();
        let rollouts: Vec<Rollout> = ks.iter().map(|&k| correct(&v, t, k)).collect();
        let ends: Vec<Option<usize>> = ks.iter().map(|&k| Some(k)).collect();
        let m = decoupled_rewards(&rollouts, &ends, &RewardParams::default()).unwrap();
        let a = decs_advantage(&m).unwrap();
        for j in 1..=t {
            let covered = ks.iter().any(|&k| j <= k);
            for (i, &k) in ks.iter().enumerate() {
                if j > k && covered {
                    prop_assert!(a.values.rows[i][j - 1] < 0.0, "row {} position {}", i, j);
                }
            }
        }
    }
}

#[test]
fn sign_law_needs_matching_redundant_rewards() {
    // Unequal lengths give unequal redundant rewards; a long run of small
    // ones drags the column mean below a short rollout's redundant reward.
    let v = vocab();
    let mut rollouts = vec![correct(&v, 5, 5), correct(&v, 5, 1)];
    rollouts.extend((0..10).map(|_| correct(&v, 40, 1)));
    let ends: Vec<Option<usize>> = rollouts.iter().map(|r| r.nrp_end).collect();
    let m = decoupled_rewards(&rollouts, &ends, &RewardParams::default()).unwrap();
    let a = decs_advantage(&m).unwrap();
    // Position 2 is covered for row 0 and redundant for row 1.
    assert_eq!(m.rows[0][1], 1.1);
    assert!(a.values.rows[1][1] > 0.0);

    // Incorrect rollouts put zeros in the column with the same effect.
    let rollouts = vec![correct(&v, 5, 5), correct(&v, 5, 1), incorrect(&v, 5), incorrect(&v, 5)];
    let ends: Vec<Option<usize>> = rollouts.iter().map(|r| r.nrp_end).collect();
    let m = decoupled_rewards(&rollouts, &ends, &RewardParams::default()).unwrap();
    let a = decs_advantage(&m).unwrap();
    assert!(a.values.rows[1][1] > 0.0);
}

#[test]
fn hand_examples_match_arithmetic_oracles() {
    let oracle = |xs: &[f64]| -> Vec<f64> {
        let m = mean(xs);
        let s = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        xs.iter().map(|x| (x - m) / s).collect()
    };
    let got = grpo_advantage(&[1.0, 1.0, 0.0, 0.0]).unwrap();
    assert_eq!(got, oracle(&[1.0, 1.0, 0.0, 0.0]));
    assert_eq!(got, vec![1.0, 1.0, -1.0, -1.0]);

    let m = TokenMatrix {
        rows: vec![vec![1.1], vec![1.1], vec![0.0]],
        lengths: vec![1, 1, 1],
    };
    let a = decs_advantage(&m).unwrap();
    let expected = oracle(&[1.1, 1.1, 0.0]);
    for i in 0..3 {
        assert!((a.values.rows[i][0] - expected[i]).abs() < 1e-12);
    }
    assert!((expected[0] - 0.5f64.sqrt()).abs() < 1e-12);
    assert!((expected[2] + 2f64.sqrt()).abs() < 1e-12);

    // Global whitening with the n − 1 denominator over four tokens.
    let m = TokenMatrix {
        rows: vec![vec![1.0, 1.0], vec![0.0, 0.0]],
        lengths: vec![2, 2],
    };
    let a = rpp_advantage(&[m]).unwrap();
    let s = ((4.0 * 0.25) / 3.0f64).sqrt();
    assert!((a[0].values.rows[0][0] - 0.5 / s).abs() < 1e-12);
    assert!((a[0].values.rows[1][1] + 0.5 / s).abs() < 1e-12);
}
