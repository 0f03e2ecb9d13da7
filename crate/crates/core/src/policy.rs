//! Exact tabular softmax autoregressive policy.
//!
//! Each conditioning [`Context`] (prompt class plus the last `order` tokens)
//! owns a logit row over the whole vocabulary. Missing rows read as all-zero
//! logits, i.e. the uniform distribution. Updates never mutate a policy in
//! place: they return a new snapshot, so a snapshot can be shared freely by
//! parallel rollout workers.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use arrayvec::ArrayVec;
use rand::Rng;

use crate::error::{Error, Result};
use crate::vocab::{TokenId, TokenSet, MAX_VOCAB};

/// Largest supported context order.
pub const MAX_ORDER: usize = 16;

/// Tolerance for the per-row centering precondition of [`TabularPolicy::pg_update_exact`].
pub const CENTERING_TOL: f64 = 1e-9;

/// Conditioning key: prompt class and a bounded suffix of recent tokens.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Context {
    pub prompt_class: u16,
    pub suffix: ArrayVec<TokenId, MAX_ORDER>,
}

impl Context {
    /// Context after `history`, keeping only the last `order` tokens.
    pub fn from_history(prompt_class: u16, history: &[TokenId], order: usize) -> Self {
        let order = order.min(MAX_ORDER);
        let start = history.len().saturating_sub(order);
        let mut suffix = ArrayVec::new();
        suffix.extend(history[start..].iter().copied());
        Context {
            prompt_class,
            suffix,
        }
    }

    pub fn root(prompt_class: u16) -> Self {
        Context {
            prompt_class,
            suffix: ArrayVec::new(),
        }
    }

    pub fn last(&self) -> Option<TokenId> {
        self.suffix.last().copied()
    }
}

impl fmt::Display for Context {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "class {} [", self.prompt_class)?;
        for (i, t) in self.suffix.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{t}")?;
        }
        write!(f, "]")
    }
}

/// Numerically stable softmax restricted to `support`; tokens outside the
/// support get probability zero.
pub fn softmax_on(logits: &[f64], support: TokenSet) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| support.contains_index(*i))
        .map(|(_, &z)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            if support.contains_index(i) {
                (z - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_on(logits, TokenSet::all(logits.len()))
}

/// Draws an index from a probability vector using one uniform variate.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Per-(context, token) advantages, stored as dense rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenAdvantageMap {
    rows: BTreeMap<Context, Vec<f64>>,
    vocab_size: usize,
}

impl TokenAdvantageMap {
    pub fn new(vocab_size: usize) -> Self {
        TokenAdvantageMap {
            rows: BTreeMap::new(),
            vocab_size,
        }
    }

    pub fn set(&mut self, ctx: Context, token: TokenId, value: f64) {
        let n = self.vocab_size;
        self.rows.entry(ctx).or_insert_with(|| vec![0.0; n])[token.index()] = value;
    }

    pub fn set_row(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "advantage row has {} entries, vocabulary has {}",
                row.len(),
                self.vocab_size
            )));
        }
        self.rows.insert(ctx, row);
        Ok(())
    }

    pub fn get(&self, ctx: &Context, token: TokenId) -> f64 {
        self.rows.get(ctx).map_or(0.0, |r| r[token.index()])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.rows.iter().map(|(c, r)| (c, r.as_slice()))
    }
}

/// One token-level sample for the clipped surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoSample {
    pub context: Context,
    pub token: TokenId,
    /// Tokens the sampler could choose from at this step.
    pub support: TokenSet,
    pub advantage: f64,
    /// Probability of `token` under the behaviour (old) policy.
    pub old_prob: f64,
    /// Prompt group the token belongs to; normalization is per group.
    pub group: usize,
}

/// Context-indexed logit table.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    vocab_size: usize,
    order: usize,
    learning_rate: f64,
    logits: BTreeMap<Context, Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(vocab_size: usize, order: usize, learning_rate: f64) -> Result<Self> {
        if vocab_size == 0 || vocab_size > MAX_VOCAB {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be in 1..={MAX_VOCAB}, got {vocab_size}"
            )));
        }
        if order > MAX_ORDER {
            return Err(Error::InvalidArgument(format!(
                "context order must be at most {MAX_ORDER}, got {order}"
            )));
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(TabularPolicy {
            vocab_size,
            order,
            learning_rate,
            logits: BTreeMap::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        self.learning_rate = learning_rate;
        Ok(self)
    }

    pub fn context(&self, prompt_class: u16, history: &[TokenId]) -> Context {
        Context::from_history(prompt_class, history, self.order)
    }

    pub fn num_rows(&self) -> usize {
        self.logits.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (&Context, &[f64])> {
        self.logits.iter().map(|(c, r)| (c, r.as_slice()))
    }

    /// Logit row for `ctx`, or `None` when the row is implicit zeros.
    pub fn row(&self, ctx: &Context) -> Option<&[f64]> {
        self.logits.get(ctx).map(Vec::as_slice)
    }

    pub fn logit(&self, ctx: &Context, token: TokenId) -> f64 {
        self.row(ctx).map_or(0.0, |r| r[token.index()])
    }

    pub fn set_row(&mut self, ctx: Context, row: Vec<f64>) -> Result<()> {
        if row.len() != self.vocab_size {
            return Err(Error::InvalidArgument(format!(
                "logit row has {} entries, vocabulary has {}",
                row.len(),
                self.vocab_size
            )));
        }
        if let Some(z) = row.iter().find(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("logit {z} in row {ctx}")));
        }
        self.logits.insert(ctx, row);
        Ok(())
    }

    pub fn set_logit(&mut self, ctx: &Context, token: TokenId, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("logit {value} in row {ctx}")));
        }
        let n = self.vocab_size;
        self.logits.entry(ctx.clone()).or_insert_with(|| vec![0.0; n])[token.index()] = value;
        Ok(())
    }

    fn row_or_zeros(&self, ctx: &Context) -> std::borrow::Cow<'_, [f64]> {
        match self.logits.get(ctx) {
            Some(r) => std::borrow::Cow::Borrowed(r.as_slice()),
            None => std::borrow::Cow::Owned(vec![0.0; self.vocab_size]),
        }
    }

    /// Full next-token distribution: softmax of the context's logit row.
    pub fn next_dist(&self, ctx: &Context) -> Vec<f64> {
        softmax(&self.row_or_zeros(ctx))
    }

    /// Next-token distribution renormalized over `support`.
    pub fn dist_on(&self, ctx: &Context, support: TokenSet) -> Vec<f64> {
        softmax_on(&self.row_or_zeros(ctx), support)
    }

    pub fn prob_on(&self, ctx: &Context, support: TokenSet, token: TokenId) -> f64 {
        self.dist_on(ctx, support)[token.index()]
    }

    pub fn sample_token<R: Rng + ?Sized>(&self, ctx: &Context, rng: &mut R) -> TokenId {
        TokenId(sample_index(&self.next_dist(ctx), rng) as u16)
    }

    /// Samples from the support-restricted distribution, returning the token
    /// and its probability.
    pub fn sample_on<R: Rng + ?Sized>(
        &self,
        ctx: &Context,
        support: TokenSet,
        rng: &mut R,
    ) -> (TokenId, f64) {
        let probs = self.dist_on(ctx, support);
        let i = sample_index(&probs, rng);
        (TokenId(i as u16), probs[i])
    }

    /// Exact-expectation policy-gradient step.
    ///
    /// For every row of `adv` the update is the expected score-function
    /// gradient `Σ_a π(a) A(a) ∇ log π(a)` scaled by the learning rate. On a
    /// centered row this equals `η · π(token) · A(token)` elementwise; rows
    /// that are not centered are rejected.
    pub fn pg_update_exact(&self, adv: &TokenAdvantageMap) -> Result<TabularPolicy> {
        let mut next = self.clone();
        for (ctx, a) in adv.rows() {
            if a.len() != self.vocab_size {
                return Err(Error::InvalidArgument(format!(
                    "advantage row for {ctx} has {} entries",
                    a.len()
                )));
            }
            if let Some(x) = a.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("advantage {x} in row {ctx}")));
            }
            let pi = self.next_dist(ctx);
            let mean: f64 = pi.iter().zip(a).map(|(p, x)| p * x).sum();
            if mean.abs() > CENTERING_TOL {
                return Err(Error::Uncentered {
                    context: ctx.to_string(),
                    mean,
                });
            }
            let mut grad = vec![0.0; self.vocab_size];
            for (action, (&p_a, &a_a)) in pi.iter().zip(a).enumerate() {
                let w = p_a * a_a;
                for (k, g) in grad.iter_mut().enumerate() {
                    let indicator = if k == action { 1.0 } else { 0.0 };
                    *g += w * (indicator - pi[k]);
                }
            }
            let mut row = self.row_or_zeros(ctx).into_owned();
            for (z, g) in row.iter_mut().zip(&grad) {
                *z += self.learning_rate * g;
            }
            next.set_row(ctx.clone(), row)?;
        }
        Ok(next)
    }

    /// Single-sample REINFORCE step `z += η · A · ∇ log π(token)` on the
    /// support-restricted distribution.
    pub fn pg_sample_step(
        &self,
        ctx: &Context,
        support: TokenSet,
        token: TokenId,
        advantage: f64,
    ) -> Result<TabularPolicy> {
        if !advantage.is_finite() {
            return Err(Error::NonFinite(format!("advantage {advantage}")));
        }
        let probs = self.dist_on(ctx, support);
        let mut row = self.row_or_zeros(ctx).into_owned();
        for (k, z) in row.iter_mut().enumerate() {
            if support.contains_index(k) {
                let indicator = if k == token.index() { 1.0 } else { 0.0 };
                *z += self.learning_rate * advantage * (indicator - probs[k]);
            }
        }
        let mut next = self.clone();
        next.set_row(ctx.clone(), row)?;
        Ok(next)
    }

    /// One gradient-ascent step on the clipped surrogate.
    ///
    /// `self` is the policy being optimized; `old_prob` in each sample is the
    /// behaviour probability. Each prompt group's token contributions are
    /// divided by that group's token count and the groups are averaged.
    pub fn ppo_update(&self, batch: &[PpoSample], clip_eps: f64) -> Result<TabularPolicy> {
        if !(clip_eps.is_finite() && clip_eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip ratio must be positive, got {clip_eps}"
            )));
        }
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty PPO batch".into()));
        }
        let mut group_tokens: BTreeMap<usize, usize> = BTreeMap::new();
        for s in batch {
            if !(s.old_prob > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "old probability must be positive, got {} at {}",
                    s.old_prob, s.context
                )));
            }
            if !s.advantage.is_finite() {
                return Err(Error::NonFinite(format!(
                    "advantage {} at {}",
                    s.advantage, s.context
                )));
            }
            *group_tokens.entry(s.group).or_default() += 1;
        }
        let n_groups = group_tokens.len() as f64;

        let mut grads: BTreeMap<&Context, Vec<f64>> = BTreeMap::new();
        let mut dist_cache: BTreeMap<(&Context, TokenSet), Vec<f64>> = BTreeMap::new();
        for s in batch {
            let probs = dist_cache
                .entry((&s.context, s.support))
                .or_insert_with(|| self.dist_on(&s.context, s.support));
            let p = probs[s.token.index()];
            let ratio = p / s.old_prob;
            if !surrogate_gradient_active(ratio, s.advantage, clip_eps) {
                continue;
            }
            let weight = 1.0 / (n_groups * group_tokens[&s.group] as f64);
            let scale = weight * s.advantage * ratio;
            // A forced token or a zero advantage contributes nothing; skipping
            // it also avoids materializing rows that never change.
            if scale == 0.0 || s.support.len() == 1 {
                continue;
            }
            let g = grads
                .entry(&s.context)
                .or_insert_with(|| vec![0.0; self.vocab_size]);
            for (k, gk) in g.iter_mut().enumerate() {
                if s.support.contains_index(k) {
                    let indicator = if k == s.token.index() { 1.0 } else { 0.0 };
                    *gk += scale * (indicator - probs[k]);
                }
            }
        }

        let mut next = self.clone();
        for (ctx, g) in grads {
            let mut row = self.row_or_zeros(ctx).into_owned();
            for (z, gk) in row.iter_mut().zip(&g) {
                *z += self.learning_rate * gk;
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite(format!("updated logits in row {ctx}")));
            }
            next.logits.insert(ctx.clone(), row);
        }
        Ok(next)
    }

    /// Writes the textual checkpoint format.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "decs-policy v1 vocab={} order={}",
            self.vocab_size, self.order
        )?;
        for (ctx, row) in &self.logits {
            let suffix = ctx
                .suffix
                .iter()
                .map(|t| t.0.to_string())
                .collect::<Vec<_>>()
                .join(",");
            let logits = row
                .iter()
                .map(|z| format!("{z:?}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(out, "{}\t{}\t{}", ctx.prompt_class, suffix, logits)?;
        }
        Ok(())
    }

    pub fn to_checkpoint_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("checkpoint text is ASCII")
    }

    /// Parses the textual checkpoint format. The learning rate is not part of
    /// the checkpoint and must be supplied.
    pub fn read_checkpoint<R: BufRead>(input: R, learning_rate: f64) -> Result<TabularPolicy> {
        let bad = |line: usize, message: String| Error::Parse {
            what: "policy checkpoint",
            line,
            message,
        };
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad(1, "empty checkpoint".into()))?
            .map_err(|e| bad(1, e.to_string()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("decs-policy") || fields.next() != Some("v1") {
            return Err(bad(1, format!("unrecognized header `{header}`")));
        }
        let mut vocab = None;
        let mut order = None;
        for f in fields {
            match f.split_once('=') {
                Some(("vocab", v)) => vocab = v.parse::<usize>().ok(),
                Some(("order", v)) => order = v.parse::<usize>().ok(),
                _ => return Err(bad(1, format!("unexpected header field `{f}`"))),
            }
        }
        let (vocab, order) = match (vocab, order) {
            (Some(v), Some(o)) => (v, o),
            _ => return Err(bad(1, "header must carry vocab= and order=".into())),
        };
        let mut policy = TabularPolicy::new(vocab, order, learning_rate)?;
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| bad(lineno, e.to_string()))?;
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(bad(lineno, "expected 3 tab-separated fields".into()));
            }
            let prompt_class: u16 = parts[0]
                .parse()
                .map_err(|_| bad(lineno, format!("bad prompt class `{}`", parts[0])))?;
            let mut suffix = ArrayVec::new();
            if !parts[1].is_empty() {
                for t in parts[1].split(',') {
                    let id: u16 = t
                        .parse()
                        .map_err(|_| bad(lineno, format!("bad token id `{t}`")))?;
                    if id as usize >= vocab {
                        return Err(bad(lineno, format!("token id {id} out of range")));
                    }
                    suffix
                        .try_push(TokenId(id))
                        .map_err(|_| bad(lineno, "suffix longer than maximum order".into()))?;
                }
            }
            if suffix.len() > order {
                return Err(bad(lineno, "suffix longer than the declared order".into()));
            }
            let row: Vec<f64> = parts[2]
                .split(',')
                .map(|z| z.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(lineno, format!("bad logit: {e}")))?;
            policy
                .set_row(
                    Context {
                        prompt_class,
                        suffix,
                    },
                    row,
                )
                .map_err(|e| bad(lineno, e.to_string()))?;
        }
        Ok(policy)
    }
}

/// Whether the clipped surrogate `min(ρA, clip(ρ, 1−ε, 1+ε)A)` passes gradient
/// through ρ, i.e. the unclipped branch attains the minimum.
pub fn surrogate_gradient_active(ratio: f64, advantage: f64, clip_eps: f64) -> bool {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    unclipped <= clipped
}

/// Value of the clipped surrogate for one token.
pub fn surrogate_value(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    unclipped.min(clipped)
}
