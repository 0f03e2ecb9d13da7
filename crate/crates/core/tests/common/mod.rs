//! Independent oracles shared by the integration suites.

#![allow(dead_code)]

use std::collections::BTreeMap;

use decs_lab::env::Rollout;
use decs_lab::par::Exec;
use decs_lab::probe::{enumerate_rollouts, Leaf, PromptInstance};
use decs_lab::vocab::Vocab;

/// Population standardization of the first entry, 0 for equal inputs.
pub fn first_standardized(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let s = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    (xs[0] - m) / s
}

/// `Σ_{j: o_j high} π(o_j)` recomputed from the token list.
pub fn high_mass(r: &Rollout, v: &Vocab) -> f64 {
    let highs = v.high_entropy_tokens();
    r.tokens
        .iter()
        .zip(&r.probs)
        .filter(|(t, _)| highs.contains(t))
        .map(|(_, p)| p)
        .sum()
}

pub fn correct_leaves(inst: &PromptInstance) -> (Vec<Leaf>, f64) {
    let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.prompt, inst.max_len, Exec::Parallel).unwrap();
    let correct: Vec<Leaf> = leaves.into_iter().filter(|l| l.rollout.correct).collect();
    let z = correct.iter().map(|l| l.prob).sum();
    (correct, z)
}

/// Expected group sum of high-entropy mass times length-reward advantage
/// for an all-correct group. Rewards depend on a rollout only through its
/// length, so the leaves are pooled by length and the group is enumerated
/// over length tuples.
pub fn lemma2_length_oracle(inst: &PromptInstance, gamma: f64) -> f64 {
    let (leaves, z) = correct_leaves(inst);
    let mut by_len: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for l in &leaves {
        let e = by_len.entry(l.rollout.len()).or_default();
        e.0 += l.prob / z;
        e.1 += l.prob / z * high_mass(&l.rollout, &inst.vocab);
    }
    let lens: Vec<(usize, f64, f64)> = by_len.into_iter().map(|(l, (q, s))| (l, q, s)).collect();
    let g = inst.group_size;
    let mut idx = vec![0usize; g];
    let mut total = 0.0;
    loop {
        let rewards: Vec<f64> = idx.iter().map(|&i| 1.0 - gamma * lens[i].0 as f64).collect();
        let rest: f64 = idx[1..].iter().map(|&i| lens[i].1).product();
        total += lens[idx[0]].2 * rest * first_standardized(&rewards);
        let mut pos = g;
        loop {
            if pos == 0 {
                return g as f64 * total;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < lens.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// The same expectation by brute force over ordered tuples of leaves.
/// Returns `None` when the tuple count exceeds `budget`.
pub fn lemma2_leaf_tuple_oracle(inst: &PromptInstance, gamma: f64, budget: usize) -> Option<f64> {
    let (leaves, z) = correct_leaves(inst);
    let g = inst.group_size;
    if (leaves.len() as f64).powi(g as i32) > budget as f64 {
        return None;
    }
    let mass: Vec<f64> = leaves.iter().map(|l| high_mass(&l.rollout, &inst.vocab)).collect();
    let reward: Vec<f64> = leaves.iter().map(|l| 1.0 - gamma * l.rollout.len() as f64).collect();
    let prob: Vec<f64> = leaves.iter().map(|l| l.prob / z).collect();
    let mut idx = vec![0usize; g];
    let mut total = 0.0;
    let mut rs = vec![0.0; g];
    loop {
        let p: f64 = idx.iter().map(|&i| prob[i]).product();
        for (k, &i) in idx.iter().enumerate() {
            rs[k] = reward[i];
        }
        for k in 0..g {
            rs.swap(0, k);
            total += p * mass[idx[k]] * first_standardized(&rs);
            rs.swap(0, k);
        }
        let mut pos = g;
        loop {
            if pos == 0 {
                return Some(total);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < leaves.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Exact pass@K by listing every K-subset of `n` samples, the first `c` of
/// which are correct.
pub fn pass_at_k_by_subsets(n: u64, c: u64, k: u64) -> num_rational::BigRational {
    use num_bigint::BigInt;
    let correct_mask: u32 = (1u32 << c) - 1;
    let (mut hit, mut total) = (0u64, 0u64);
    for subset in 0u32..(1u32 << n) {
        if subset.count_ones() as u64 != k {
            continue;
        }
        total += 1;
        if subset & correct_mask != 0 {
            hit += 1;
        }
    }
    num_rational::BigRational::new(BigInt::from(hit), BigInt::from(total))
}
