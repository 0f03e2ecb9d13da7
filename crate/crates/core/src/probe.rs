//! Exact probes of the logit-dynamics results.
//!
//! Every probe enumerates the rollout tree of a small policy, collapses the
//! leaves into reward-relevant types and evaluates group expectations over
//! all ordered `G`-tuples of types. By exchangeability of the `G` draws the
//! expected group sum `E[Σ_i f(o_i)·A_i]` equals `G·E[f(o_1)·A_1]`, so only
//! the first member's statistic has to be weighted.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;

use crate::advantage::{decs_advantage, grpo_advantage};
use crate::env::{Prompt, Rollout};
use crate::error::{Error, Result};
use crate::par::{map_slice, stream_rng, Exec};
use crate::policy::{Context, TabularPolicy, TokenAdvantageMap};
use crate::rewards::{decoupled_rewards, length_reward, RewardParams};
use crate::vocab::{TokenId, Vocab};

/// Largest number of leaves (or type tuples) a probe will enumerate.
pub const ENUMERATION_GUARD: usize = 10_000_000;

/// Logit used to remove a token from a constructed row; `exp(−800)`
/// underflows to exactly zero.
pub const BLOCKED: f64 = -800.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Leaf {
    pub rollout: Rollout,
    pub prob: f64,
}

/// Every rollout reachable under `policy` with its exact probability,
/// following the same episode protocol as sampling. Zero-probability
/// branches are pruned; truncated leaves are included.
pub fn enumerate_rollouts(
    policy: &TabularPolicy,
    vocab: &Vocab,
    prompt: &Prompt,
    max_len: usize,
    exec: Exec,
) -> Result<Vec<Leaf>> {
    enumerate_with_limit(policy, vocab, prompt, max_len, exec, ENUMERATION_GUARD)
}

/// [`enumerate_rollouts`] with an explicit leaf limit.
pub fn enumerate_with_limit(
    policy: &TabularPolicy,
    vocab: &Vocab,
    prompt: &Prompt,
    max_len: usize,
    exec: Exec,
    limit: usize,
) -> Result<Vec<Leaf>> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let walker = Walker {
        policy,
        vocab,
        prompt,
        max_len,
        limit,
    };
    let root = policy.dist_on(&policy.context(prompt.prompt_class, &[]), vocab.thinking_support());
    let firsts: Vec<(TokenId, f64)> = root
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > 0.0)
        .map(|(i, &p)| (TokenId(i as u16), p))
        .collect();
    let subtrees = map_slice(exec, &firsts, |&(t, p)| -> Result<Vec<Leaf>> {
        let mut out = Vec::new();
        let mut tokens = Vec::with_capacity(max_len);
        let mut probs = Vec::with_capacity(max_len);
        walker.take(&mut tokens, &mut probs, 1.0, t, p, &mut out)?;
        Ok(out)
    });
    let mut leaves = Vec::new();
    for s in subtrees {
        leaves.extend(s?);
        if leaves.len() > limit {
            return Err(Error::EnumerationGuard { limit });
        }
    }
    Ok(leaves)
}

struct Walker<'a> {
    policy: &'a TabularPolicy,
    vocab: &'a Vocab,
    prompt: &'a Prompt,
    max_len: usize,
    limit: usize,
}

impl Walker<'_> {
    fn push_leaf(&self, tokens: &[TokenId], probs: &[f64], prob: f64, out: &mut Vec<Leaf>) -> Result<()> {
        if out.len() >= self.limit {
            return Err(Error::EnumerationGuard { limit: self.limit });
        }
        out.push(Leaf {
            rollout: Rollout::from_tokens(tokens.to_vec(), probs.to_vec(), self.prompt, self.vocab),
            prob,
        });
        Ok(())
    }

    /// Appends thinking token `t` (probability `p`) and expands below it.
    fn take(
        &self,
        tokens: &mut Vec<TokenId>,
        probs: &mut Vec<f64>,
        prob: f64,
        t: TokenId,
        p: f64,
        out: &mut Vec<Leaf>,
    ) -> Result<()> {
        tokens.push(t);
        probs.push(p);
        let prob = prob * p;
        if t == self.vocab.think_end() {
            let ctx = self.policy.context(self.prompt.prompt_class, tokens);
            let answers = self.policy.dist_on(&ctx, self.vocab.answer_support());
            for (i, &q) in answers.iter().enumerate().filter(|(_, &q)| q > 0.0) {
                tokens.push(TokenId(i as u16));
                probs.push(q);
                tokens.push(self.vocab.eos());
                probs.push(1.0);
                self.push_leaf(tokens, probs, prob * q, out)?;
                tokens.truncate(tokens.len() - 2);
                probs.truncate(probs.len() - 2);
            }
        } else if tokens.len() == self.max_len - 2 {
            self.push_leaf(tokens, probs, prob, out)?;
        } else {
            let ctx = self.policy.context(self.prompt.prompt_class, tokens);
            let dist = self.policy.dist_on(&ctx, self.vocab.thinking_support());
            for (i, &q) in dist.iter().enumerate().filter(|(_, &q)| q > 0.0) {
                self.take(tokens, probs, prob, TokenId(i as u16), q, out)?;
            }
        }
        tokens.pop();
        probs.pop();
        Ok(())
    }
}

/// Reward-relevant summary of a rollout: every reward and advantage used by
/// the probes depends on a rollout only through these fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct RolloutType {
    pub correct: bool,
    pub len: usize,
    pub thinking_len: usize,
    pub nrp_end: Option<usize>,
}

impl RolloutType {
    pub fn of(r: &Rollout) -> Self {
        RolloutType {
            correct: r.correct,
            len: r.len(),
            thinking_len: r.thinking_len(),
            nrp_end: r.nrp_end,
        }
    }
}

/// Conditional probability mass of a type and the mass-weighted statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeMass {
    pub ty: RolloutType,
    /// A representative rollout of the type, used to evaluate rewards.
    pub rep: Rollout,
    pub prob: f64,
    /// `Σ p(o)·stat(o)` over the type's leaves, conditionally normalized.
    pub weight: f64,
}

/// Groups the leaves passing `include` by [`RolloutType`], renormalizing to
/// the conditional distribution given `include`.
pub fn collapse(
    leaves: &[Leaf],
    include: impl Fn(&Rollout) -> bool,
    stat: impl Fn(&Rollout) -> f64,
) -> Result<Vec<TypeMass>> {
    let mut map: BTreeMap<RolloutType, TypeMass> = BTreeMap::new();
    let mut z = 0.0;
    for leaf in leaves.iter().filter(|l| include(&l.rollout)) {
        z += leaf.prob;
        let entry = map.entry(RolloutType::of(&leaf.rollout)).or_insert_with(|| TypeMass {
            ty: RolloutType::of(&leaf.rollout),
            rep: leaf.rollout.clone(),
            prob: 0.0,
            weight: 0.0,
        });
        entry.prob += leaf.prob;
        entry.weight += leaf.prob * stat(&leaf.rollout);
    }
    if z <= 0.0 {
        return Err(Error::NotApplicable(
            "no probability mass satisfies the conditioning event".into(),
        ));
    }
    Ok(map
        .into_values()
        .map(|mut t| {
            t.prob /= z;
            t.weight /= z;
            t
        })
        .collect())
}

fn check_tuple_guard(k: usize, g: usize) -> Result<()> {
    let mut count: usize = 1;
    for _ in 0..g {
        count = count.saturating_mul(k);
        if count > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard {
                limit: ENUMERATION_GUARD,
            });
        }
    }
    Ok(())
}

/// Calls `f` for every ordered `g`-tuple of indices below `k`.
fn for_each_tuple(k: usize, g: usize, mut f: impl FnMut(&[usize])) {
    if k == 0 {
        return;
    }
    let mut idx = vec![0usize; g];
    loop {
        f(&idx);
        let mut pos = g;
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < k {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Expected group sum `E[Σ_i stat(o_i)·A_i·1_event]` and `P(event)` for `g`
/// iid draws from `types`. `first_adv` receives the representatives of a
/// tuple and returns the advantage of its first member.
pub fn exchangeable_sum(
    types: &[TypeMass],
    g: usize,
    event: impl Fn(&[&Rollout]) -> bool,
    first_adv: impl Fn(&[&Rollout]) -> Result<f64>,
) -> Result<(f64, f64)> {
    check_tuple_guard(types.len(), g)?;
    let mut total = 0.0;
    let mut p_event = 0.0;
    let mut failure = None;
    let mut reps: Vec<&Rollout> = Vec::with_capacity(g);
    for_each_tuple(types.len(), g, |idx| {
        if failure.is_some() {
            return;
        }
        reps.clear();
        reps.extend(idx.iter().map(|&i| &types[i].rep));
        if !event(&reps) {
            return;
        }
        let rest: f64 = idx[1..].iter().map(|&i| types[i].prob).product();
        p_event += types[idx[0]].prob * rest;
        let w = types[idx[0]].weight * rest;
        if w != 0.0 {
            match first_adv(&reps) {
                Ok(a) => total += w * a,
                Err(e) => failure = Some(e),
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((g as f64 * total, p_event))
}

/// `E[f(o_1..o_g)·1_{f defined}]` and the probability that `f` is defined.
pub fn tuple_expectation(
    types: &[TypeMass],
    g: usize,
    f: impl Fn(&[&Rollout]) -> Option<f64>,
) -> Result<(f64, f64)> {
    check_tuple_guard(types.len(), g)?;
    let mut total = 0.0;
    let mut mass = 0.0;
    let mut reps: Vec<&Rollout> = Vec::with_capacity(g);
    for_each_tuple(types.len(), g, |idx| {
        reps.clear();
        reps.extend(idx.iter().map(|&i| &types[i].rep));
        if let Some(v) = f(&reps) {
            let p: f64 = idx.iter().map(|&i| types[i].prob).product();
            total += p * v;
            mass += p;
        }
    });
    Ok((total, mass))
}

/// Sequence advantage of the first member under the length reward.
pub fn length_advantage_first(group: &[&Rollout], gamma: f64) -> Result<f64> {
    let rewards: Vec<f64> = group.iter().map(|r| length_reward(r, gamma)).collect();
    Ok(grpo_advantage(&rewards)?[0])
}

/// Token advantage of the first member at 1-based position `j` under the
/// decoupled reward, using each correct member's own prefix end.
pub fn decoupled_advantage_first(group: &[&Rollout], j: usize, params: &RewardParams) -> Result<f64> {
    let owned: Vec<Rollout> = group.iter().map(|&r| r.clone()).collect();
    let ends: Vec<Option<usize>> = owned
        .iter()
        .map(|r| r.correct.then(|| r.nrp_end.unwrap_or(r.thinking_len())))
        .collect();
    let m = decoupled_rewards(&owned, &ends, params)?;
    Ok(decs_advantage(&m)?.values.rows[0][j - 1])
}

/// Probability-weighted count of high-entropy tokens, `Σ_{j high} π(o_j)`.
pub fn high_entropy_mass(r: &Rollout, vocab: &Vocab) -> f64 {
    r.tokens
        .iter()
        .zip(&r.probs)
        .filter(|(&t, _)| vocab.is_high_entropy(t))
        .map(|(_, &p)| p)
        .sum()
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeCase {
    pub name: String,
    pub measured: f64,
    pub predicted: String,
    pub enumeration_size: usize,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub kappa: f64,
    pub change: f64,
    pub kappa_sigma: f64,
    pub c: f64,
}

/// Result of one probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub probe: String,
    pub measured: f64,
    pub predicted: String,
    pub enumeration_size: usize,
    pub verdict: Verdict,
    pub note: String,
    pub cases: Vec<ProbeCase>,
    pub curve: Vec<CurvePoint>,
}

impl ProbeReport {
    fn new(probe: &str, measured: f64, predicted: String, enumeration_size: usize, verdict: Verdict, note: String) -> Self {
        ProbeReport {
            probe: probe.to_string(),
            measured,
            predicted,
            enumeration_size,
            verdict,
            note,
            cases: Vec::new(),
            curve: Vec::new(),
        }
    }

    fn from_cases(probe: &str, predicted: &str, cases: Vec<ProbeCase>, worst: f64, note: String) -> Self {
        let verdict = if cases.iter().all(|c| c.pass) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let mut r = ProbeReport::new(
            probe,
            worst,
            predicted.to_string(),
            cases.iter().map(|c| c.enumeration_size).sum(),
            verdict,
            note,
        );
        r.cases = cases;
        r
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Fixed-width human-readable rendering.
    pub fn table(&self) -> String {
        let mut s = format!(
            "probe {}: {:?}\n  measured {:.6e}  predicted {}\n  enumerated {}  {}\n",
            self.probe, self.verdict, self.measured, self.predicted, self.enumeration_size, self.note
        );
        for c in &self.cases {
            s.push_str(&format!(
                "  {:<28} {:>14.6e}  {:<12} {}\n",
                c.name,
                c.measured,
                c.predicted,
                if c.pass { "pass" } else { "FAIL" }
            ));
        }
        if !self.curve.is_empty() {
            s.push_str("  kappa    change          kappa*sigma_L   C\n");
            for p in &self.curve {
                s.push_str(&format!(
                    "  {:<8.3} {:>14.6e} {:>14.6e} {:>14.6e}\n",
                    p.kappa, p.change, p.kappa_sigma, p.c
                ));
            }
        }
        s
    }
}

/// Largest elementwise deviation of an exact update from `η·π·A`.
pub fn lemma1_deviation(policy: &TabularPolicy, adv: &TokenAdvantageMap) -> Result<f64> {
    let next = policy.pg_update_exact(adv)?;
    let mut worst: f64 = 0.0;
    for (ctx, a) in adv.rows() {
        let pi = policy.next_dist(ctx);
        for k in 0..policy.vocab_size() {
            let t = TokenId(k as u16);
            let dz = next.logit(ctx, t) - policy.logit(ctx, t);
            worst = worst.max((dz - policy.learning_rate() * pi[k] * a[k]).abs());
        }
    }
    Ok(worst)
}

pub const LEMMA1_TOL: f64 = 1e-10;

pub fn probe_lemma1(policy: &TabularPolicy, adv: &TokenAdvantageMap) -> ProbeReport {
    let rows = adv.rows().count();
    match lemma1_deviation(policy, adv) {
        Ok(d) => ProbeReport::new(
            "lemma1",
            d,
            format!("<= {LEMMA1_TOL:e}"),
            rows,
            if d <= LEMMA1_TOL { Verdict::Pass } else { Verdict::Fail },
            "max |dz - eta*pi*A| over the advantage rows".into(),
        ),
        Err(e) => ProbeReport::new(
            "lemma1",
            f64::NAN,
            format!("<= {LEMMA1_TOL:e}"),
            rows,
            Verdict::NotApplicable,
            format!("precondition unmet: {e}"),
        ),
    }
}

/// Random policy with centered advantages on a few contexts.
pub fn random_lemma1_instance(seed: u64, trial: u64) -> Result<(TabularPolicy, TokenAdvantageMap)> {
    let mut rng = stream_rng(seed, &[trial]);
    let n = rng.random_range(2..=9usize);
    let eta = 10f64.powf(rng.random_range(-3.0..0.0));
    let mut policy = TabularPolicy::new(n, 2, eta)?;
    let mut adv = TokenAdvantageMap::new(n);
    let rows = rng.random_range(1..=6u16);
    for r in 0..rows {
        let ctx = Context::from_history(r, &[TokenId(rng.random_range(0..n as u16))], 2);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        policy.set_row(ctx.clone(), logits)?;
        let pi = policy.next_dist(&ctx);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mean: f64 = pi.iter().zip(&raw).map(|(p, a)| p * a).sum();
        adv.set_row(ctx, raw.iter().map(|a| a - mean).collect())?;
    }
    Ok((policy, adv))
}

/// Lemma-1 exactness over `trials` random centered instances.
pub fn lemma1_suite(trials: usize, seed: u64) -> Result<ProbeReport> {
    let mut cases = Vec::with_capacity(trials);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (policy, adv) = random_lemma1_instance(seed, t as u64)?;
        let d = lemma1_deviation(&policy, &adv)?;
        worst = worst.max(d);
        cases.push(ProbeCase {
            name: format!("random-{t}"),
            measured: d,
            predicted: format!("<= {LEMMA1_TOL:e}"),
            enumeration_size: adv.rows().count(),
            pass: d <= LEMMA1_TOL,
        });
    }
    Ok(ProbeReport::from_cases(
        "lemma1",
        &format!("<= {LEMMA1_TOL:e}"),
        cases,
        worst,
        format!("{trials} random tabular instances with centered advantages"),
    ))
}

/// Instance on which a single prompt is probed.
#[derive(Clone, Debug)]
pub struct PromptInstance {
    pub name: String,
    pub policy: TabularPolicy,
    pub vocab: Vocab,
    pub prompt: Prompt,
    pub max_len: usize,
    pub group_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Lemma2Value {
    /// Expected group sum of `π·A` over correct high-entropy tokens.
    pub change: f64,
    /// Expected within-group population std of lengths.
    pub sigma_l: f64,
    pub leaves: usize,
}

/// Exact expected high-entropy logit change (per unit learning rate) for a
/// group of correct rollouts under the length reward.
pub fn lemma2_value(inst: &PromptInstance, gamma: f64, exec: Exec) -> Result<Lemma2Value> {
    let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.prompt, inst.max_len, exec)?;
    let types = collapse(&leaves, |r| r.correct, |r| high_entropy_mass(r, &inst.vocab))?;
    let (change, _) = exchangeable_sum(&types, inst.group_size, |_| true, |g| length_advantage_first(g, gamma))?;
    let (sigma_l, _) = tuple_expectation(&types, inst.group_size, |g| {
        let lens: Vec<f64> = g.iter().map(|r| r.len() as f64).collect();
        Some(population_std(&lens))
    })?;
    Ok(Lemma2Value {
        change,
        sigma_l,
        leaves: leaves.len(),
    })
}

pub fn probe_lemma2(inst: &PromptInstance, gamma: f64, exec: Exec) -> Result<ProbeReport> {
    let v = lemma2_value(inst, gamma, exec)?;
    if v.sigma_l == 0.0 {
        return Ok(ProbeReport::new(
            "lemma2",
            v.change,
            "< 0".into(),
            v.leaves,
            Verdict::NotApplicable,
            format!("{}: zero length variance, expectation is degenerate", inst.name),
        ));
    }
    Ok(ProbeReport::new(
        "lemma2",
        v.change,
        "< 0".into(),
        v.leaves,
        if v.change < 0.0 { Verdict::Pass } else { Verdict::Fail },
        format!("{}: sigma_L = {:.6}", inst.name, v.sigma_l),
    ))
}

pub fn lemma2_suite_report(instances: &[PromptInstance], gamma: f64, exec: Exec) -> Result<ProbeReport> {
    let mut cases = Vec::new();
    let mut worst = f64::NEG_INFINITY;
    for inst in instances {
        let v = lemma2_value(inst, gamma, exec)?;
        worst = worst.max(v.change);
        cases.push(ProbeCase {
            name: inst.name.clone(),
            measured: v.change,
            predicted: "< 0".into(),
            enumeration_size: v.leaves,
            pass: v.sigma_l > 0.0 && v.change < 0.0,
        });
    }
    Ok(ProbeReport::from_cases(
        "lemma2",
        "< 0",
        cases,
        worst,
        "largest expected high-entropy logit change across instances".into(),
    ))
}

/// Easy and mixed prompts sharing one policy.
#[derive(Clone, Debug)]
pub struct BatchInstance {
    pub policy: TabularPolicy,
    pub vocab: Vocab,
    pub easy: Prompt,
    pub mixed: Prompt,
    pub max_len: usize,
    pub batch_size: usize,
    pub group_size: usize,
}

/// Exact ingredients of the batch condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BatchTerms {
    /// Expected high-entropy change of one easy group.
    pub easy_change: f64,
    /// Expected high-entropy change of one mixed group.
    pub mixed_change: f64,
    pub sigma_l: f64,
    /// `E[Σ_i L_i (1−a)/√(a(1−a)) 1_correct]` per mixed group.
    pub c_mixed: f64,
    pub leaves: usize,
}

pub fn batch_terms(inst: &BatchInstance, gamma: f64, exec: Exec) -> Result<BatchTerms> {
    let g = inst.group_size;
    let easy_leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.easy, inst.max_len, exec)?;
    let easy = collapse(&easy_leaves, |r| r.correct, |r| high_entropy_mass(r, &inst.vocab))?;
    let (easy_change, _) = exchangeable_sum(&easy, g, |_| true, |t| length_advantage_first(t, gamma))?;
    let (sigma_l, _) = tuple_expectation(&easy, g, |t| {
        let lens: Vec<f64> = t.iter().map(|r| r.len() as f64).collect();
        Some(population_std(&lens))
    })?;

    let mixed_leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.mixed, inst.max_len, exec)?;
    let mixed = collapse(
        &mixed_leaves,
        |_| true,
        |r| if r.correct { high_entropy_mass(r, &inst.vocab) } else { 0.0 },
    )?;
    let is_mixed = |t: &[&Rollout]| t.iter().any(|r| r.correct) && !t.iter().all(|r| r.correct);
    let (sum, p_mixed) = exchangeable_sum(&mixed, g, is_mixed, |t| length_advantage_first(t, gamma))?;
    if p_mixed == 0.0 {
        return Err(Error::NotApplicable("mixed prompt never yields a mixed group".into()));
    }
    let (c_sum, _) = tuple_expectation(&mixed, g, |t| {
        if !is_mixed(t) {
            return None;
        }
        let a = t.iter().filter(|r| r.correct).count() as f64 / t.len() as f64;
        let scale = (1.0 - a) / (a * (1.0 - a)).sqrt();
        Some(t.iter().filter(|r| r.correct).map(|r| r.len() as f64 * scale).sum())
    })?;
    Ok(BatchTerms {
        easy_change,
        mixed_change: sum / p_mixed,
        sigma_l,
        c_mixed: c_sum / p_mixed,
        leaves: easy_leaves.len() + mixed_leaves.len(),
    })
}

impl BatchTerms {
    /// Expected batch change with `κB` easy and `(1−κ)B` mixed groups.
    pub fn batch_change(&self, kappa: f64, batch_size: usize) -> f64 {
        batch_size as f64 * (kappa * self.easy_change + (1.0 - kappa) * self.mixed_change)
    }

    /// `C = C_B/(BhG)` with `C_B = (1−κ)B·c_mixed`.
    pub fn threshold(&self, kappa: f64, h: f64, group_size: usize) -> f64 {
        (1.0 - kappa) * self.c_mixed / (h * group_size as f64)
    }

    /// Ratio at which the batch change crosses zero; the change is linear
    /// in κ, so this is exact.
    pub fn flip_kappa(&self) -> Option<f64> {
        if self.mixed_change > 0.0 && self.easy_change < 0.0 {
            Some(self.mixed_change / (self.mixed_change - self.easy_change))
        } else {
            None
        }
    }
}

pub fn probe_theorem1(inst: &BatchInstance, h: f64, gamma: f64, points: usize, exec: Exec) -> Result<ProbeReport> {
    if !(h > 0.0 && h < 1.0) {
        return Err(Error::InvalidArgument(format!("h must lie in (0, 1), got {h}")));
    }
    let terms = batch_terms(inst, gamma, exec)?;
    let points = points.max(2);
    let curve: Vec<CurvePoint> = (0..points)
        .map(|i| {
            let kappa = i as f64 / (points - 1) as f64;
            CurvePoint {
                kappa,
                change: terms.batch_change(kappa, inst.batch_size),
                kappa_sigma: kappa * terms.sigma_l,
                c: terms.threshold(kappa, h, inst.group_size),
            }
        })
        .collect();
    let grid_flip = curve
        .windows(2)
        .find(|w| w[0].change >= 0.0 && w[1].change < 0.0)
        .map(|w| w[0].kappa + (w[1].kappa - w[0].kappa) * w[0].change / (w[0].change - w[1].change));
    let mut report = match (grid_flip, terms.flip_kappa()) {
        (Some(k), Some(_)) => {
            let ks = k * terms.sigma_l;
            let c = terms.threshold(k, h, inst.group_size);
            let pass = ks >= c / 2.0 && ks <= 2.0 * c;
            ProbeReport::new(
                "theorem1",
                ks,
                format!("in [{:.6}, {:.6}]", c / 2.0, 2.0 * c),
                terms.leaves,
                if pass { Verdict::Pass } else { Verdict::Fail },
                format!(
                    "sign flip at kappa = {k:.6}; sigma_L = {:.6}; C = {c:.6}; easy change {:.6e}, mixed change {:.6e}",
                    terms.sigma_l, terms.easy_change, terms.mixed_change
                ),
            )
        }
        _ => ProbeReport::new(
            "theorem1",
            f64::NAN,
            "sign flip inside the kappa grid".into(),
            terms.leaves,
            Verdict::Fail,
            format!(
                "no sign flip: easy change {:.6e}, mixed change {:.6e}",
                terms.easy_change, terms.mixed_change
            ),
        ),
    };
    report.curve = curve;
    Ok(report)
}

/// Reward mode for the first-redundant-token probe.
#[derive(Clone, Debug, PartialEq)]
pub enum RedundancyMode {
    /// Sequence advantage from the length reward.
    Length { gamma: f64 },
    /// Token advantage from the decoupled reward.
    Decoupled(RewardParams),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Theorem2Value {
    pub j: f64,
    pub leaves: usize,
}

/// `J = E[π(o_{K*+1} | o_{≤K*})·A]` over correct rollouts, where `A` is the
/// advantage the first redundant token receives.
pub fn theorem2_value(inst: &PromptInstance, mode: &RedundancyMode, exec: Exec) -> Result<Theorem2Value> {
    if inst.group_size < 2 {
        return Err(Error::NotApplicable(
            "single-rollout groups have zero variance; J is identically 0".into(),
        ));
    }
    let leaves = enumerate_rollouts(&inst.policy, &inst.vocab, &inst.prompt, inst.max_len, exec)?;
    for l in leaves.iter().filter(|l| l.rollout.correct && l.prob > 0.0) {
        match l.rollout.nrp_end {
            Some(k) if k < l.rollout.thinking_len() => {}
            _ => {
                return Err(Error::NotApplicable(format!(
                    "correct rollout `{}` has no redundant thinking token",
                    inst.vocab.render(&l.rollout.tokens)
                )))
            }
        }
    }
    let types = collapse(
        &leaves,
        |r| r.correct,
        |r| r.probs[r.nrp_end.expect("checked above")],
    )?;
    let (sum, _) = exchangeable_sum(&types, inst.group_size, |_| true, |t| match mode {
        RedundancyMode::Length { gamma } => length_advantage_first(t, *gamma),
        RedundancyMode::Decoupled(params) => {
            decoupled_advantage_first(t, t[0].nrp_end.expect("checked above") + 1, params)
        }
    })?;
    Ok(Theorem2Value {
        j: sum / inst.group_size as f64,
        leaves: leaves.len(),
    })
}

pub fn probe_theorem2(instances: &[PromptInstance], gamma: f64, params: &RewardParams, exec: Exec) -> Result<ProbeReport> {
    let mut cases = Vec::new();
    let mut worst = f64::INFINITY;
    for inst in instances {
        let eq4 = theorem2_value(inst, &RedundancyMode::Length { gamma }, exec)?;
        let dec = theorem2_value(inst, &RedundancyMode::Decoupled(params.clone()), exec)?;
        worst = worst.min(eq4.j.min(-dec.j));
        cases.push(ProbeCase {
            name: format!("{} length", inst.name),
            measured: eq4.j,
            predicted: "> 0".into(),
            enumeration_size: eq4.leaves,
            pass: eq4.j > 0.0,
        });
        cases.push(ProbeCase {
            name: format!("{} decoupled", inst.name),
            measured: dec.j,
            predicted: "< 0".into(),
            enumeration_size: dec.leaves,
            pass: dec.j < 0.0,
        });
    }
    Ok(ProbeReport::from_cases(
        "theorem2",
        "length > 0, decoupled < 0",
        cases,
        worst,
        "measured = smallest margin min(J_length, -J_decoupled) across instances".into(),
    ))
}

/// Builders for constructed probe policies.
pub mod instances {
    use super::*;

    /// Vocabulary used by every constructed instance: `A0..A2`, `H0 H1`,
    /// `F0 F1`, `</think>`, `<eos>`.
    pub fn probe_vocab() -> Vocab {
        Vocab::new(3, 2, 2).expect("valid layout")
    }

    fn ln_or_blocked(p: f64) -> f64 {
        if p > 0.0 {
            p.ln()
        } else {
            BLOCKED
        }
    }

    fn answer_row(vocab: &Vocab, target: TokenId, correct_prob: f64) -> Vec<f64> {
        let mut row = vec![BLOCKED; vocab.size()];
        row[target.index()] = ln_or_blocked(correct_prob);
        let wrong = vocab
            .answer_tokens()
            .iter()
            .copied()
            .find(|&t| t != target)
            .expect("at least two answers");
        row[wrong.index()] = ln_or_blocked(1.0 - correct_prob);
        row
    }

    fn check_prob(p: f64, what: &str) -> Result<()> {
        if (0.0..=1.0).contains(&p) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("{what} {p} outside [0, 1]")))
        }
    }

    /// Makes class `class` generate exactly the given thinking paths (each
    /// ending in `</think>`) with the given probabilities, then answer `y*`
    /// with probability `correct_prob`. The policy order must cover the
    /// longest path so that every prefix has its own row.
    pub fn set_path_class(
        policy: &mut TabularPolicy,
        vocab: &Vocab,
        class: u16,
        target: TokenId,
        paths: &[(Vec<TokenId>, f64)],
        correct_prob: f64,
    ) -> Result<()> {
        check_prob(correct_prob, "correct probability")?;
        let total: f64 = paths.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("path probabilities sum to {total}")));
        }
        let mut trie: BTreeMap<Vec<TokenId>, BTreeMap<TokenId, f64>> = BTreeMap::new();
        for (path, p) in paths {
            if path.last() != Some(&vocab.think_end())
                || path[..path.len() - 1].iter().any(|&t| t == vocab.think_end() || t == vocab.eos())
            {
                return Err(Error::InvalidArgument(format!(
                    "path `{}` must end with its only </think>",
                    vocab.render(path)
                )));
            }
            if path.len() > policy.order() {
                return Err(Error::InvalidArgument(format!(
                    "path of length {} exceeds policy order {}",
                    path.len(),
                    policy.order()
                )));
            }
            for j in 0..path.len() {
                *trie.entry(path[..j].to_vec()).or_default().entry(path[j]).or_default() += p;
            }
            let ctx = policy.context(class, path);
            policy.set_row(ctx, answer_row(vocab, target, correct_prob))?;
        }
        for (prefix, children) in trie {
            let mass: f64 = children.values().sum();
            let mut row = vec![BLOCKED; vocab.size()];
            for (t, m) in children {
                row[t.index()] = ln_or_blocked(m / mass);
            }
            let ctx = policy.context(class, &prefix);
            policy.set_row(ctx, row)?;
        }
        Ok(())
    }

    /// Makes class `class` draw every thinking token from the same
    /// distribution (an order-1 policy is required), then answer `y*` with
    /// probability `correct_prob`.
    pub fn set_uniform_class(
        policy: &mut TabularPolicy,
        vocab: &Vocab,
        class: u16,
        target: TokenId,
        thinking: &[(TokenId, f64)],
        correct_prob: f64,
    ) -> Result<()> {
        if policy.order() != 1 {
            return Err(Error::InvalidArgument("uniform-rate classes need an order-1 policy".into()));
        }
        check_prob(correct_prob, "correct probability")?;
        let mut row = vec![BLOCKED; vocab.size()];
        let mut total = 0.0;
        for &(t, p) in thinking {
            check_prob(p, "token probability")?;
            row[t.index()] = ln_or_blocked(p);
            total += p;
        }
        if (total - 1.0).abs() > 1e-12 || !thinking.iter().any(|&(t, p)| t == vocab.think_end() && p > 0.0) {
            return Err(Error::InvalidArgument(
                "thinking distribution must sum to 1 and allow </think>".into(),
            ));
        }
        policy.set_row(Context::root(class), row.clone())?;
        for t in vocab.thinking_support().iter() {
            let ctx = policy.context(class, &[t]);
            if t == vocab.think_end() {
                policy.set_row(ctx, answer_row(vocab, target, correct_prob))?;
            } else {
                policy.set_row(ctx, row.clone())?;
            }
        }
        Ok(())
    }

    fn prompt(class: u16, target: TokenId) -> Prompt {
        Prompt {
            prompt_class: class,
            target,
            difficulty: 0.0,
        }
    }

    fn seq(vocab: &Vocab, text: &str) -> Vec<TokenId> {
        vocab.parse_sequence(text).expect("instance token names are valid")
    }

    fn path_instance(name: String, paths: &[(&str, f64)], group_size: usize) -> Result<PromptInstance> {
        let vocab = probe_vocab();
        let mut policy = TabularPolicy::new(vocab.size(), 16, 1.0)?;
        let target = vocab.answer(0);
        let owned: Vec<(Vec<TokenId>, f64)> = paths.iter().map(|&(s, p)| (seq(&vocab, s), p)).collect();
        let max_len = owned.iter().map(|p| p.0.len()).max().unwrap_or(1) + 2;
        set_path_class(&mut policy, &vocab, 0, target, &owned, 1.0)?;
        Ok(PromptInstance {
            name,
            policy,
            vocab,
            prompt: prompt(0, target),
            max_len,
            group_size,
        })
    }

    fn uniform_instance(name: String, thinking: &[(&str, f64)], max_len: usize, group_size: usize) -> Result<PromptInstance> {
        let vocab = probe_vocab();
        let mut policy = TabularPolicy::new(vocab.size(), 1, 1.0)?;
        let target = vocab.answer(0);
        let dist: Vec<(TokenId, f64)> = thinking
            .iter()
            .map(|&(s, p)| (vocab.parse_name(s).expect("valid token name"), p))
            .collect();
        set_uniform_class(&mut policy, &vocab, 0, target, &dist, 1.0)?;
        Ok(PromptInstance {
            name,
            policy,
            vocab,
            prompt: prompt(0, target),
            max_len,
            group_size,
        })
    }

    /// Two equally likely paths whose thinking lengths are `m − d` and
    /// `m + d`, with a high-entropy token at every other forced position.
    pub fn spread_instance(m: usize, d: usize, group_size: usize) -> Result<PromptInstance> {
        let body = |n: usize| -> String {
            (0..n).map(|i| if i % 2 == 0 { "H0" } else { "F1" }).collect::<Vec<_>>().join(" ")
        };
        let short = format!("F0 {} </think>", body(m - d - 1));
        let long = format!("F1 {} </think>", body(m + d - 1));
        path_instance(
            format!("spread m={m} d={d} G={group_size}"),
            &[(short.trim(), 0.5), (long.trim(), 0.5)],
            group_size,
        )
    }

    /// The shipped all-correct instances with positive length variance.
    pub fn lemma2_suite() -> Result<Vec<PromptInstance>> {
        let mut out = vec![path_instance(
            "lengths 4 and 8".into(),
            &[("H0 </think>", 0.5), ("F0 F1 H0 F0 F1 </think>", 0.5)],
            2,
        )?];
        for d in 1..=3 {
            out.push(spread_instance(7, d, 2)?);
        }
        let rates: [(f64, f64, f64, f64); 8] = [
            (0.2, 0.0, 0.5, 0.3),
            (0.3, 0.1, 0.3, 0.3),
            (0.1, 0.1, 0.4, 0.4),
            (0.4, 0.0, 0.2, 0.4),
            (0.25, 0.25, 0.25, 0.25),
            (0.15, 0.05, 0.6, 0.2),
            (0.5, 0.0, 0.1, 0.4),
            (0.05, 0.15, 0.3, 0.5),
        ];
        for (i, &(h0, h1, f0, end)) in rates.iter().enumerate() {
            for (g, max_len) in [(2usize, 8usize), (3, 6)] {
                let mut thinking = vec![("H0", h0), ("F0", f0), ("</think>", end)];
                if h1 > 0.0 {
                    thinking.push(("H1", h1));
                }
                out.push(uniform_instance(
                    format!("uniform-{i} G={g} T={max_len}"),
                    &thinking,
                    max_len,
                    g,
                )?);
            }
        }
        Ok(out)
    }

    /// Easy class 0 (always correct, low high-entropy rate) and mixed class
    /// 1 (correct half the time, higher high-entropy rate).
    pub fn theorem1_instance() -> Result<BatchInstance> {
        let vocab = probe_vocab();
        let mut policy = TabularPolicy::new(vocab.size(), 1, 1.0)?;
        let h0 = vocab.high(0);
        let f0 = vocab.filler(0);
        let end = vocab.think_end();
        let target = vocab.answer(0);
        set_uniform_class(&mut policy, &vocab, 0, target, &[(h0, 0.15), (f0, 0.55), (end, 0.3)], 1.0)?;
        set_uniform_class(&mut policy, &vocab, 1, target, &[(h0, 0.5), (f0, 0.2), (end, 0.3)], 0.5)?;
        Ok(BatchInstance {
            policy,
            vocab,
            easy: prompt(0, target),
            mixed: prompt(1, target),
            max_len: 9,
            batch_size: 8,
            group_size: 4,
        })
    }

    /// Same shape as [`theorem1_instance`] but with equal high-entropy rates.
    pub fn theorem1_equal_rate_instance() -> Result<BatchInstance> {
        let vocab = probe_vocab();
        let mut policy = TabularPolicy::new(vocab.size(), 1, 1.0)?;
        let h0 = vocab.high(0);
        let f0 = vocab.filler(0);
        let end = vocab.think_end();
        let target = vocab.answer(0);
        let dist = [(h0, 0.3), (f0, 0.4), (end, 0.3)];
        set_uniform_class(&mut policy, &vocab, 0, target, &dist, 1.0)?;
        set_uniform_class(&mut policy, &vocab, 1, target, &dist, 0.5)?;
        Ok(BatchInstance {
            policy,
            vocab,
            easy: prompt(0, target),
            mixed: prompt(1, target),
            max_len: 9,
            batch_size: 8,
            group_size: 4,
        })
    }

    /// Redundant-token instances: every correct rollout keeps thinking after
    /// stating `y*`, the answer is stated at different depths, and shorter
    /// continuations are the likelier ones.
    pub fn theorem2_suite() -> Result<Vec<PromptInstance>> {
        let mut out = Vec::new();
        let variants: [(f64, f64, f64, usize); 5] = [
            (0.5, 0.9, 0.8, 2),
            (0.5, 0.9, 0.8, 3),
            (0.6, 0.8, 0.7, 2),
            (0.4, 0.95, 0.9, 4),
            (0.5, 0.7, 0.75, 3),
        ];
        for (i, &(r, s, l, g)) in variants.iter().enumerate() {
            out.push(path_instance(
                format!("redundant-{i} G={g}"),
                &[
                    ("A0 F0 </think>", r * s),
                    ("A0 F1 F1 F0 </think>", r * (1.0 - s)),
                    ("H0 F0 A0 F0 </think>", (1.0 - r) * l),
                    ("H0 F0 A0 F1 F0 F1 </think>", (1.0 - r) * (1.0 - l)),
                ],
                g,
            )?);
        }
        Ok(out)
    }

    /// An instance violating the "shorter is likelier" premise: the longer
    /// continuation has the likelier first redundant token.
    pub fn theorem2_counterexample() -> Result<PromptInstance> {
        path_instance(
            "longer-is-likelier".into(),
            &[("A0 F0 </think>", 0.2), ("A0 F1 F0 F1 F0 F1 </think>", 0.8)],
            2,
        )
    }
}

/// Monte Carlo estimate (mean, standard error) of `E[Σ_i stat(o_i)·A_i]`
/// over groups drawn by rejection from the conditional distribution given
/// `include`, used to cross-check the enumerated values.
pub fn monte_carlo_group_sum(
    inst: &PromptInstance,
    samples: usize,
    seed: u64,
    include: impl Fn(&Rollout) -> bool + Sync,
    stat: impl Fn(&Rollout) -> f64 + Sync,
    adv: impl Fn(&[&Rollout]) -> Result<Vec<f64>> + Sync,
    exec: Exec,
) -> Result<(f64, f64)> {
    let values = crate::par::map_indexed(exec, samples, |s| -> Result<f64> {
        let mut rng = stream_rng(seed, &[s as u64]);
        let mut group = Vec::with_capacity(inst.group_size);
        let mut tries = 0usize;
        while group.len() < inst.group_size {
            tries += 1;
            if tries > 1_000_000 {
                return Err(Error::NotApplicable("conditioning event too rare to sample".into()));
            }
            let r = crate::env::generate_rollout(&inst.policy, &inst.vocab, &inst.prompt, inst.max_len, &mut rng)?;
            if include(&r) {
                group.push(r);
            }
        }
        let refs: Vec<&Rollout> = group.iter().collect();
        let a = adv(&refs)?;
        Ok(group.iter().zip(&a).map(|(r, a)| stat(r) * a).sum())
    });
    let values = values.into_iter().collect::<Result<Vec<f64>>>()?;
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
