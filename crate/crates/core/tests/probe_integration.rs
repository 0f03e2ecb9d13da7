mod common;

use std::collections::HashMap;

use decs_lab::advantage::{decs_advantage, grpo_advantage};
use decs_lab::env::{generate_rollout, Prompt, Rollout};
use decs_lab::par::{map_indexed, stream_rng, Exec};
use decs_lab::probe::instances::{
    lemma2_suite, theorem1_equal_rate_instance, theorem1_instance, theorem2_counterexample, theorem2_suite,
};
use decs_lab::probe::{
    batch_terms, enumerate_rollouts, lemma1_suite, lemma2_value, monte_carlo_group_sum, probe_theorem1,
    probe_theorem2, theorem2_value, BatchInstance, PromptInstance, RedundancyMode, Verdict,
};
use decs_lab::rewards::{decoupled_rewards, length_reward, RewardParams};

const GAMMA: f64 = 0.001;

fn prompt_instances() -> Vec<PromptInstance> {
    let mut all = lemma2_suite().unwrap();
    all.extend(theorem2_suite().unwrap());
    all.push(theorem2_counterexample().unwrap());
    all
}

fn batch_prompts(inst: &BatchInstance) -> [Prompt; 2] {
    [inst.easy.clone(), inst.mixed.clone()]
}

#[test]
fn shipped_instances_enumerate_to_unit_mass() {
    for inst in prompt_instances() {
        let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.prompt, inst.max_len, Exec::Parallel).unwrap();
        let total: f64 = leaves.iter().map(|l| l.prob).sum();
        assert!((total - 1.0).abs() < 1e-9, "{}: {total}", inst.name);
        assert!(leaves.iter().all(|l| l.rollout.len() <= inst.max_len));
    }
    for inst in [theorem1_instance().unwrap(), theorem1_equal_rate_instance().unwrap()] {
        for p in batch_prompts(&inst) {
            let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &p, inst.max_len, Exec::Parallel).unwrap();
            let total: f64 = leaves.iter().map(|l| l.prob).sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn enumeration_matches_sampled_frequencies() {
    let inst = theorem1_instance().unwrap();
    let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.mixed, inst.max_len, Exec::Parallel).unwrap();
    let n = 1_000_000usize;
    let chunks = 100usize;
    let partial: Vec<HashMap<Vec<u16>, usize>> = map_indexed(Exec::Parallel, chunks, |c| {
        let mut rng = stream_rng(21, &[c as u64]);
        let mut counts = HashMap::new();
        for _ in 0..n / chunks {
            let r = generate_rollout(&inst.policy, &inst.vocab, &inst.mixed, inst.max_len, &mut rng).unwrap();
            *counts.entry(r.tokens.iter().map(|t| t.0).collect()).or_insert(0) += 1;
        }
        counts
    });
    let mut counts: HashMap<Vec<u16>, usize> = HashMap::new();
    for m in partial {
        for (k, v) in m {
            *counts.entry(k).or_insert(0) += v;
        }
    }
    // Family-wise 3σ level: each leaf gets the Bonferroni bound for a 0.27%
    // total error rate (4.2σ covers up to 110 leaves), and Σz² is held to
    // the chi-square mean plus three of its standard deviations.
    let tested: Vec<f64> = leaves
        .iter()
        .filter(|l| l.prob >= 1e-3)
        .map(|l| {
            let key: Vec<u16> = l.rollout.tokens.iter().map(|t| t.0).collect();
            let observed = counts.get(&key).copied().unwrap_or(0) as f64 / n as f64;
            (observed - l.prob) / (l.prob * (1.0 - l.prob) / n as f64).sqrt()
        })
        .collect();
    let k = tested.len() as f64;
    assert!((50.0..=110.0).contains(&k));
    assert!(tested.iter().all(|z| z.abs() <= 4.2), "{tested:?}");
    let chi2: f64 = tested.iter().map(|z| z * z).sum();
    assert!(chi2 <= k + 3.0 * (2.0 * k).sqrt(), "chi2 {chi2} over {k} leaves");
    let seen: usize = leaves
        .iter()
        .map(|l| {
            let key: Vec<u16> = l.rollout.tokens.iter().map(|t| t.0).collect();
            counts.get(&key).copied().unwrap_or(0)
        })
        .sum();
    // Nothing was sampled outside the enumerated support.
    assert_eq!(seen, n);
}

#[test]
fn lemma2_values_match_independent_oracles() {
    for inst in lemma2_suite().unwrap() {
        let v = lemma2_value(&inst, GAMMA, Exec::Parallel).unwrap();
        let by_length = common::lemma2_length_oracle(&inst, GAMMA);
        assert!((v.change - by_length).abs() <= 1e-9, "{}: {} vs {}", inst.name, v.change, by_length);
        if let Some(brute) = common::lemma2_leaf_tuple_oracle(&inst, GAMMA, 20_000_000) {
            assert!((v.change - brute).abs() <= 1e-9, "{}: {} vs {}", inst.name, v.change, brute);
        }
        assert!(v.sigma_l > 0.0 && v.change < 0.0, "{}", inst.name);
    }
}

#[test]
fn lemma2_agrees_with_monte_carlo() {
    let suite = lemma2_suite().unwrap();
    for inst in [&suite[0], &suite[4], &suite[5]] {
        let exact = lemma2_value(inst, GAMMA, Exec::Parallel).unwrap().change;
        let (mean, se) = monte_carlo_group_sum(
            inst,
            100_000,
            8,
            |r| r.correct,
            |r| common::high_mass(r, &inst.vocab),
            |g| grpo_advantage(&g.iter().map(|r| length_reward(r, GAMMA)).collect::<Vec<_>>()),
            Exec::Parallel,
        )
        .unwrap();
        assert!((mean - exact).abs() <= 3.0 * se, "{}: mc {mean} ± {se}, exact {exact}", inst.name);
    }
}

/// Decoupled advantage each correct member receives on its first redundant
/// token; other members contribute 0.
fn first_redundant_advantages(group: &[&Rollout]) -> decs_lab::Result<Vec<f64>> {
    let owned: Vec<Rollout> = group.iter().map(|&r| r.clone()).collect();
    let ends: Vec<Option<usize>> = owned.iter().map(|r| r.correct.then(|| r.nrp_end.unwrap())).collect();
    let m = decoupled_rewards(&owned, &ends, &RewardParams::default())?;
    let a = decs_advantage(&m)?;
    Ok(owned
        .iter()
        .enumerate()
        .map(|(i, r)| if r.correct { a.values.rows[i][r.nrp_end.unwrap()] } else { 0.0 })
        .collect())
}

#[test]
fn theorem2_agrees_with_monte_carlo() {
    let inst = &theorem2_suite().unwrap()[1];
    let g = inst.group_size as f64;
    let stat = |r: &Rollout| r.probs[r.nrp_end.unwrap()];
    let exact_len = theorem2_value(inst, &RedundancyMode::Length { gamma: GAMMA }, Exec::Parallel).unwrap().j;
    let (mean, se) = monte_carlo_group_sum(
        inst,
        100_000,
        3,
        |r| r.correct,
        stat,
        |t| grpo_advantage(&t.iter().map(|r| length_reward(r, GAMMA)).collect::<Vec<_>>()),
        Exec::Parallel,
    )
    .unwrap();
    assert!((mean / g - exact_len).abs() <= 3.0 * se / g, "length: {} ± {} vs {exact_len}", mean / g, se / g);

    let exact_dec = theorem2_value(inst, &RedundancyMode::Decoupled(RewardParams::default()), Exec::Parallel)
        .unwrap()
        .j;
    let (mean, se) = monte_carlo_group_sum(
        inst,
        100_000,
        4,
        |r| r.correct,
        stat,
        first_redundant_advantages,
        Exec::Parallel,
    )
    .unwrap();
    assert!((mean / g - exact_dec).abs() <= 3.0 * se / g, "decoupled: {} ± {} vs {exact_dec}", mean / g, se / g);
}

#[test]
fn theorem1_mixed_term_agrees_with_monte_carlo() {
    let inst = theorem1_instance().unwrap();
    let terms = batch_terms(&inst, GAMMA, Exec::Parallel).unwrap();
    let g = inst.group_size;
    let n = 100_000;
    let values: Vec<f64> = map_indexed(Exec::Parallel, n, |s| {
        let mut rng = stream_rng(13, &[s as u64]);
        loop {
            let group: Vec<Rollout> = (0..g)
                .map(|_| generate_rollout(&inst.policy, &inst.vocab, &inst.mixed, inst.max_len, &mut rng).unwrap())
                .collect();
            let correct = group.iter().filter(|r| r.correct).count();
            if correct == 0 || correct == g {
                continue;
            }
            let rewards: Vec<f64> = group.iter().map(|r| length_reward(r, GAMMA)).collect();
            let a = grpo_advantage(&rewards).unwrap();
            return group
                .iter()
                .zip(&a)
                .filter(|(r, _)| r.correct)
                .map(|(r, a)| common::high_mass(r, &inst.vocab) * a)
                .sum();
        }
    });
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    assert!((mean - terms.mixed_change).abs() <= 3.0 * se, "{mean} ± {se} vs {}", terms.mixed_change);
}

#[test]
fn theorem1_flip_and_equal_rate_contrast() {
    let shipped = probe_theorem1(&theorem1_instance().unwrap(), 0.2, GAMMA, 21, Exec::Parallel).unwrap();
    assert_eq!(shipped.verdict, Verdict::Pass);
    assert_eq!(shipped.curve.len(), 21);
    // With equal high-entropy rates the flip still happens, but far below C.
    let equal = theorem1_equal_rate_instance().unwrap();
    let terms = batch_terms(&equal, GAMMA, Exec::Parallel).unwrap();
    let k = terms.flip_kappa().unwrap();
    let ratio = k * terms.sigma_l / terms.threshold(k, 0.2, equal.group_size);
    assert!(ratio > 0.0 && ratio < 0.5, "{ratio}");
}

#[test]
fn theorem2_contrast_and_counterexample() {
    let report = probe_theorem2(&theorem2_suite().unwrap(), GAMMA, &RewardParams::default(), Exec::Parallel).unwrap();
    assert_eq!(report.verdict, Verdict::Pass);
    let ce = theorem2_counterexample().unwrap();
    let len = theorem2_value(&ce, &RedundancyMode::Length { gamma: GAMMA }, Exec::Parallel).unwrap();
    assert!(len.j < 0.0);
    let dec = theorem2_value(&ce, &RedundancyMode::Decoupled(RewardParams::default()), Exec::Parallel).unwrap();
    assert!(dec.j < 0.0);
}

#[test]
fn lemma1_suite_is_exact() {
    let report = lemma1_suite(100, 1).unwrap();
    assert_eq!(report.verdict, Verdict::Pass);
    assert!(report.measured <= 1e-10);
}
