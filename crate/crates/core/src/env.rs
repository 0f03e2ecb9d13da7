//! Synthetic reasoning task.
//!
//! A prompt class fixes a target answer token `y*`. A rollout is a thinking
//! segment over every token but `<eos>`, a `</think>` marker, exactly one
//! answer token and a forced `<eos>`. The rollout is correct iff the
//! post-think answer equals `y*`. The necessary reasoning prefix ends at the
//! first thinking position whose most recent answer token is `y*`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_index, Context, TabularPolicy};
use crate::vocab::{TokenClass, TokenId, TokenSet, Vocab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub prompt_class: u16,
    pub target: TokenId,
    pub difficulty: f64,
}

/// One sampled (or enumerated) episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    /// Probability each token had under the sampling policy.
    pub probs: Vec<f64>,
    /// 0-based index of `</think>`, if emitted.
    pub think_end_pos: Option<usize>,
    pub final_answer: Option<TokenId>,
    pub correct: bool,
    /// 1-based end of the necessary reasoning prefix.
    pub nrp_end: Option<usize>,
}

impl Rollout {
    /// Classifies a finished token sequence against `prompt`.
    pub fn from_tokens(
        tokens: Vec<TokenId>,
        probs: Vec<f64>,
        prompt: &Prompt,
        vocab: &Vocab,
    ) -> Rollout {
        let think_end_pos = tokens.iter().position(|&t| t == vocab.think_end());
        let final_answer = think_end_pos
            .and_then(|p| tokens.get(p + 1).copied())
            .filter(|&t| vocab.is_answer(t));
        let thinking = &tokens[..think_end_pos.unwrap_or(tokens.len())];
        let nrp_end = nrp_oracle(thinking, prompt.target, vocab);
        Rollout {
            correct: final_answer == Some(prompt.target),
            tokens,
            probs,
            think_end_pos,
            final_answer,
            nrp_end,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens before `</think>`; the whole sequence for truncated rollouts.
    pub fn thinking(&self) -> &[TokenId] {
        &self.tokens[..self.thinking_len()]
    }

    pub fn thinking_len(&self) -> usize {
        self.think_end_pos.unwrap_or(self.tokens.len())
    }

    pub fn is_truncated(&self) -> bool {
        self.think_end_pos.is_none()
    }

    /// Action support the sampler used at position `j`.
    pub fn support_at(&self, j: usize, vocab: &Vocab) -> TokenSet {
        match self.think_end_pos {
            Some(p) if j == p + 1 => vocab.answer_support(),
            Some(p) if j > p + 1 => TokenSet::single(vocab.eos()),
            _ => vocab.thinking_support(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub rollouts: Vec<Rollout>,
}

impl RolloutGroup {
    pub fn is_all_correct(&self) -> bool {
        self.rollouts.iter().all(|r| r.correct)
    }

    pub fn is_all_incorrect(&self) -> bool {
        self.rollouts.iter().all(|r| !r.correct)
    }

    pub fn mean_len(&self) -> f64 {
        let total: usize = self.rollouts.iter().map(Rollout::len).sum();
        total as f64 / self.rollouts.len() as f64
    }
}

/// Most recent answer-class token in a thinking prefix.
pub fn answer_of(prefix: &[TokenId], vocab: &Vocab) -> Option<TokenId> {
    prefix.iter().rev().copied().find(|&t| vocab.is_answer(t))
}

/// Smallest 1-based `k` with `answer_of(thinking[..k]) == target`.
pub fn nrp_oracle(thinking: &[TokenId], target: TokenId, vocab: &Vocab) -> Option<usize> {
    let mut current = None;
    for (i, &t) in thinking.iter().enumerate() {
        if vocab.is_answer(t) {
            current = Some(t);
        }
        if current == Some(target) {
            return Some(i + 1);
        }
    }
    None
}

/// Samples one episode.
///
/// Thinking occupies at most `max_len − 2` positions; if `</think>` has not
/// appeared by then the rollout is truncated (and incorrect). Otherwise one
/// answer token is drawn from the answer support and `<eos>` follows with
/// probability one, so complete rollouts never exceed `max_len` tokens.
pub fn generate_rollout<R: Rng + ?Sized>(
    policy: &TabularPolicy,
    vocab: &Vocab,
    prompt: &Prompt,
    max_len: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if max_len < 3 {
        return Err(Error::InvalidArgument(format!(
            "max_len must be at least 3, got {max_len}"
        )));
    }
    let mut tokens = Vec::with_capacity(max_len);
    let mut probs = Vec::with_capacity(max_len);
    let thinking = vocab.thinking_support();
    let mut ended = false;
    while tokens.len() < max_len - 2 {
        let ctx = policy.context(prompt.prompt_class, &tokens);
        let (t, p) = policy.sample_on(&ctx, thinking, rng);
        tokens.push(t);
        probs.push(p);
        if t == vocab.think_end() {
            ended = true;
            break;
        }
    }
    if ended {
        let ctx = policy.context(prompt.prompt_class, &tokens);
        let (a, p) = policy.sample_on(&ctx, vocab.answer_support(), rng);
        tokens.push(a);
        probs.push(p);
        tokens.push(vocab.eos());
        probs.push(1.0);
    }
    Ok(Rollout::from_tokens(tokens, probs, prompt, vocab))
}

/// Draws a class index from a probability vector.
pub fn sample_prompt_class<R: Rng + ?Sized>(mix: &[f64], rng: &mut R) -> Result<usize> {
    validate_mix(mix)?;
    Ok(sample_index(mix, rng))
}

fn validate_mix(mix: &[f64]) -> Result<()> {
    if mix.is_empty() {
        return Err(Error::InvalidArgument("empty prompt mix".into()));
    }
    if mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::InvalidArgument(
            "prompt mix weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = mix.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "prompt mix sums to {total}, expected 1"
        )));
    }
    Ok(())
}

/// Initial logit layout shared by every prompt class.
///
/// Per class, the `y*` logits are scaled by `1 − difficulty`, so easy classes
/// state and answer the target more often.
#[derive(Clone, Debug, PartialEq)]
pub struct InitBias {
    /// Logit of `y*` in thinking rows, before difficulty scaling.
    pub target: f64,
    /// Logit of `y*` in answer rows, before difficulty scaling.
    pub answer: f64,
    pub high: f64,
    pub filler: f64,
    pub think_end: f64,
    /// Extra `y*` logit right after a high-entropy token.
    pub after_high: f64,
    /// Extra logit for repeating the answer token stated right before `</think>`.
    pub copy: f64,
}

impl Default for InitBias {
    fn default() -> Self {
        InitBias {
            target: 0.5,
            answer: 1.0,
            high: 0.5,
            filler: 1.0,
            think_end: 0.3,
            after_high: 1.5,
            copy: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvConfig {
    pub n_answer: usize,
    pub n_high: usize,
    pub n_filler: usize,
    pub order: usize,
    pub max_len: usize,
    /// Answer ordinal of `y*` for each class.
    pub targets: Vec<usize>,
    pub difficulty: Vec<f64>,
    /// Per class, probability that a sampled prompt's `y*` is the class's
    /// alternate answer (the next answer token, cyclically) instead of its
    /// target. The policy sees only the class, so at 0.5 no answer policy
    /// beats 50% accuracy and groups stay mixed.
    pub ambiguity: Vec<f64>,
    pub mix: Vec<f64>,
    pub bias: InitBias,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            n_answer: 3,
            n_high: 2,
            n_filler: 2,
            order: 2,
            max_len: 32,
            targets: vec![0, 1, 2, 0, 1, 2],
            difficulty: vec![0.0, 0.1, 0.2, 0.4, 0.6, 0.8],
            ambiguity: vec![0.0, 0.0, 0.0, 0.0, 0.5, 0.5],
            mix: vec![1.0 / 6.0; 6],
            bias: InitBias::default(),
        }
    }
}

/// The environment: vocabulary, prompt classes and the prompt sampler.
#[derive(Clone, Debug)]
pub struct SynthEnv {
    config: EnvConfig,
    vocab: Vocab,
    prompts: Vec<Prompt>,
}

impl SynthEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        let vocab = Vocab::new(config.n_answer, config.n_high, config.n_filler)?;
        if config.max_len < 3 {
            return Err(Error::InvalidArgument(format!(
                "env.max_len must be at least 3, got {}",
                config.max_len
            )));
        }
        let n = config.targets.len();
        if n == 0
            || config.difficulty.len() != n
            || config.ambiguity.len() != n
            || config.mix.len() != n
        {
            return Err(Error::InvalidArgument(format!(
                "env.targets, env.difficulty, env.ambiguity and env.mix must have the same nonzero length (got {}, {}, {}, {})",
                n,
                config.difficulty.len(),
                config.ambiguity.len(),
                config.mix.len()
            )));
        }
        if let Some(a) = config.ambiguity.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("ambiguity {a} outside [0, 1]")));
        }
        if config.n_answer < 2 && config.ambiguity.iter().any(|&a| a > 0.0) {
            return Err(Error::InvalidArgument(
                "ambiguity needs at least two answer tokens".into(),
            ));
        }
        validate_mix(&config.mix)?;
        let mut prompts = Vec::with_capacity(n);
        for (class, (&target, &difficulty)) in
            config.targets.iter().zip(&config.difficulty).enumerate()
        {
            if target >= config.n_answer {
                return Err(Error::InvalidArgument(format!(
                    "class {class} targets answer {target}, only {} answers exist",
                    config.n_answer
                )));
            }
            if !(0.0..=1.0).contains(&difficulty) {
                return Err(Error::InvalidArgument(format!(
                    "class {class} difficulty {difficulty} outside [0, 1]"
                )));
            }
            prompts.push(Prompt {
                prompt_class: class as u16,
                target: vocab.answer(target),
                difficulty,
            });
        }
        Ok(SynthEnv {
            config,
            vocab,
            prompts,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    pub fn prompt(&self, class: usize) -> &Prompt {
        &self.prompts[class]
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Prompt {
        let class = sample_index(&self.config.mix, rng);
        self.prompt_instance(class, rng)
    }

    /// A prompt of class `class`, with its `y*` switched to the alternate
    /// answer with the class's ambiguity probability.
    pub fn prompt_instance<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Prompt {
        let mut prompt = self.prompts[class].clone();
        let a = self.config.ambiguity[class];
        if a > 0.0 && rng.random::<f64>() < a {
            let alternate = (self.config.targets[class] + 1) % self.config.n_answer;
            prompt.target = self.vocab.answer(alternate);
        }
        prompt
    }

    pub fn generate<R: Rng + ?Sized>(
        &self,
        policy: &TabularPolicy,
        prompt: &Prompt,
        rng: &mut R,
    ) -> Result<Rollout> {
        generate_rollout(policy, &self.vocab, prompt, self.config.max_len, rng)
    }

    /// Builds the initial policy with one materialized row per reachable
    /// context.
    pub fn initial_policy(&self, learning_rate: f64) -> Result<TabularPolicy> {
        let mut policy = TabularPolicy::new(self.vocab.size(), self.config.order, learning_rate)?;
        let thinking: Vec<TokenId> = self.vocab.thinking_support().iter().collect();
        let mut suffixes: Vec<Vec<TokenId>> = vec![Vec::new()];
        let mut frontier: Vec<Vec<TokenId>> = vec![Vec::new()];
        for _ in 0..self.config.order {
            let mut next = Vec::new();
            for s in &frontier {
                // Only thinking tokens can precede another sampled token,
                // and nothing follows `</think>` except the answer row.
                if s.last() == Some(&self.vocab.think_end()) {
                    continue;
                }
                for &t in &thinking {
                    let mut e = s.clone();
                    e.push(t);
                    next.push(e);
                }
            }
            suffixes.extend(next.iter().cloned());
            frontier = next;
        }
        for prompt in &self.prompts {
            for s in &suffixes {
                let ctx = Context::from_history(prompt.prompt_class, s, self.config.order);
                policy.set_row(ctx, self.initial_row(prompt, s))?;
            }
        }
        Ok(policy)
    }

    fn initial_row(&self, prompt: &Prompt, suffix: &[TokenId]) -> Vec<f64> {
        let b = &self.config.bias;
        let ease = 1.0 - prompt.difficulty;
        let mut row = vec![0.0; self.vocab.size()];
        if suffix.last() == Some(&self.vocab.think_end()) {
            row[prompt.target.index()] = b.answer * ease;
            if let Some(&prev) = suffix.iter().rev().nth(1) {
                if self.vocab.is_answer(prev) {
                    row[prev.index()] += b.copy;
                }
            }
            return row;
        }
        for (i, z) in row.iter_mut().enumerate() {
            *z = match self.vocab.class_of(TokenId(i as u16)) {
                TokenClass::Answer => 0.0,
                TokenClass::HighEntropy => b.high,
                TokenClass::Filler => b.filler,
                TokenClass::ThinkEnd => b.think_end,
                TokenClass::Eos => 0.0,
            };
        }
        row[prompt.target.index()] = b.target * ease;
        if suffix.last().is_some_and(|&t| self.vocab.is_high_entropy(t)) {
            row[prompt.target.index()] += b.after_high;
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::stream_rng;

    fn vocab() -> Vocab {
        Vocab::new(3, 2, 2).unwrap()
    }

    fn prompt(v: &Vocab, k: usize) -> Prompt {
        Prompt {
            prompt_class: 0,
            target: v.answer(k),
            difficulty: 0.0,
        }
    }

    /// Policy that deterministically emits `seq` (history-indexed, order large
    /// enough to disambiguate the steps).
    fn forced(v: &Vocab, seq: &[TokenId]) -> TabularPolicy {
        let mut p = TabularPolicy::new(v.size(), 8, 1.0).unwrap();
        for j in 0..seq.len() {
            let ctx = p.context(0, &seq[..j]);
            let mut row = vec![-1e6; v.size()];
            row[seq[j].index()] = 0.0;
            p.set_row(ctx, row).unwrap();
        }
        p
    }

    #[test]
    fn forced_trace_matches_hand_trace() {
        let v = vocab();
        let seq = v.parse_sequence("A1 </think> A1 <eos>").unwrap();
        let p = forced(&v, &seq);
        let r = generate_rollout(&p, &v, &prompt(&v, 1), 24, &mut stream_rng(0, &[])).unwrap();
        assert_eq!(r.tokens, seq);
        assert!(r.correct);
        assert_eq!(r.nrp_end, Some(1));
        assert_eq!(r.len(), 4);
        assert_eq!(r.think_end_pos, Some(1));
    }

    #[test]
    fn immediate_stop_wrong_answer() {
        let v = vocab();
        let seq = v.parse_sequence("</think> A2 <eos>").unwrap();
        let p = forced(&v, &seq);
        let r = generate_rollout(&p, &v, &prompt(&v, 1), 24, &mut stream_rng(0, &[])).unwrap();
        assert!(!r.correct);
        assert_eq!(r.nrp_end, None);
    }

    #[test]
    fn truncation_is_incorrect() {
        let v = vocab();
        let mut p = TabularPolicy::new(v.size(), 2, 1.0).unwrap();
        for t in v.thinking_support().iter() {
            let mut row = vec![0.0; v.size()];
            row[v.think_end().index()] = -1e6;
            p.set_row(p.context(0, &[t]), row.clone()).unwrap();
            p.set_row(Context::root(0), row).unwrap();
            for u in v.thinking_support().iter() {
                let mut row = vec![0.0; v.size()];
                row[v.think_end().index()] = -1e6;
                p.set_row(p.context(0, &[t, u]), row).unwrap();
            }
        }
        let r = generate_rollout(&p, &v, &prompt(&v, 0), 10, &mut stream_rng(1, &[])).unwrap();
        assert!(!r.correct);
        assert_eq!(r.final_answer, None);
        assert!(r.is_truncated());
        assert_eq!(r.len(), 8);
        assert!(generate_rollout(&p, &v, &prompt(&v, 0), 2, &mut stream_rng(1, &[])).is_err());
    }

    #[test]
    fn answer_of_examples() {
        let v = vocab();
        assert_eq!(answer_of(&v.parse_sequence("H0 F1").unwrap(), &v), None);
        assert_eq!(
            answer_of(&v.parse_sequence("A2 H0 A1").unwrap(), &v),
            Some(v.answer(1))
        );
        assert_eq!(answer_of(&v.parse_sequence("A1").unwrap(), &v), Some(v.answer(1)));
    }

    #[test]
    fn nrp_examples() {
        let v = vocab();
        let a1 = v.answer(1);
        assert_eq!(nrp_oracle(&v.parse_sequence("A1 H0 A1").unwrap(), a1, &v), Some(1));
        assert_eq!(nrp_oracle(&v.parse_sequence("A2 A2").unwrap(), a1, &v), None);
        assert_eq!(nrp_oracle(&v.parse_sequence("H0 A1").unwrap(), a1, &v), Some(2));
    }

    #[test]
    fn prompt_sampling() {
        let mut rng = stream_rng(5, &[]);
        for _ in 0..100 {
            assert_eq!(sample_prompt_class(&[1.0, 0.0], &mut rng).unwrap(), 0);
        }
        assert!(sample_prompt_class(&[], &mut rng).is_err());
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| sample_prompt_class(&[0.5, 0.5], &mut rng).unwrap() == 0)
            .count();
        let sigma = (n as f64 * 0.25).sqrt();
        assert!((hits as f64 - n as f64 / 2.0).abs() <= 3.0 * sigma);
        let draw = |seed| {
            let mut r = stream_rng(seed, &[]);
            (0..50)
                .map(|_| sample_prompt_class(&[0.2, 0.3, 0.5], &mut r).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn default_env_materializes_rows() {
        let env = SynthEnv::new(EnvConfig::default()).unwrap();
        let p = env.initial_policy(1.0).unwrap();
        // Per class: root, 8 single-token suffixes, 7·8 two-token suffixes
        // (nothing is sampled after `</think>` except through the answer row).
        assert_eq!(p.num_rows(), 6 * (1 + 8 + 56));
        let mut rng = stream_rng(2, &[]);
        for _ in 0..200 {
            let prompt = env.sample_prompt(&mut rng);
            let r = env.generate(&p, &prompt, &mut rng).unwrap();
            assert!(r.len() <= env.max_len());
            // `<eos>` is forced, not sampled, so its context needs no row.
            for j in (0..r.len()).filter(|&j| r.tokens[j] != env.vocab().eos()) {
                let ctx = p.context(prompt.prompt_class, &r.tokens[..j]);
                assert!(p.row(&ctx).is_some(), "unmaterialized row {ctx}");
            }
        }
    }

    #[test]
    fn rejects_bad_env_configs() {
        let mut c = EnvConfig::default();
        c.mix = vec![0.5; 6];
        assert!(SynthEnv::new(c).is_err());
        let mut c = EnvConfig::default();
        c.targets[0] = 7;
        assert!(SynthEnv::new(c).is_err());
        let mut c = EnvConfig::default();
        c.max_len = 2;
        assert!(SynthEnv::new(c).is_err());
    }
}
