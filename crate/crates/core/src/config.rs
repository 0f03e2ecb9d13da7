//! Run configuration: a flat `section.key = value` text format.
//!
//! Blank lines and `#` comments are ignored. Every key is listed in
//! [`KEYS`]; unknown keys and malformed values are rejected with their line
//! number. `seed` is mandatory. [`RunConfig::snapshot`] writes every key in
//! canonical order, and parsing a snapshot reproduces the configuration
//! exactly.

use std::fmt::Display;
use std::str::FromStr;
use std::time::Duration;

use crate::advantage::Estimator;
use crate::env::{EnvConfig, SynthEnv};
use crate::error::{Error, Result};
use crate::nrp::{Granularity, Judge, OracleJudge, RemoteJudge};
use crate::rewards::LengthBasis;
use crate::trainer::{RewardKind, TrainConfig};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed of every random stream (required)"),
    ("env.n_answer", "number of answer tokens"),
    ("env.n_high", "number of high-entropy tokens"),
    ("env.n_filler", "number of filler tokens"),
    ("env.order", "context length c of the tabular policy"),
    ("env.max_len", "episode length cap T_max"),
    ("env.targets", "comma list: target answer ordinal per prompt class"),
    ("env.difficulty", "comma list: initial bias damping per class, in [0, 1]"),
    ("env.ambiguity", "comma list: probability of the alternate target per class"),
    ("env.mix", "comma list: prompt class sampling weights, summing to 1"),
    ("env.bias_target", "initial y* logit in thinking rows"),
    ("env.bias_answer", "initial y* logit in answer rows"),
    ("env.bias_high", "initial high-entropy logit"),
    ("env.bias_filler", "initial filler logit"),
    ("env.bias_think_end", "initial </think> logit"),
    ("env.bias_after_high", "extra y* logit after a high-entropy token"),
    ("env.bias_copy", "extra answer logit for repeating the last stated answer"),
    ("policy.learning_rate", "step size eta"),
    ("reward.kind", "correctness | length | decoupled"),
    ("reward.gamma", "length penalty per token"),
    ("reward.r_plus", "reward of prefix and answer tokens"),
    ("reward.r_zero", "base reward of redundant tokens"),
    ("reward.length_basis", "full | thinking: length dividing the redundant bonus"),
    ("reward.nrp_granularity", "token | chunk"),
    ("advantage.estimator", "grpo | decs | rpp"),
    ("trainer.batch_size", "prompts per batch B"),
    ("trainer.group_size", "rollouts per prompt G"),
    ("trainer.clip_eps", "clip ratio epsilon"),
    ("trainer.steps", "number of updates"),
    ("trainer.beta", "curriculum step size"),
    ("trainer.curriculum", "true | false: ration easy groups"),
    ("trainer.resample_budget", "attempts per missing group before a step aborts"),
    ("trainer.checkpoint_every", "checkpoint cadence in steps"),
    ("trainer.eval_samples", "rollouts for the initial and final evaluation"),
    ("judge.kind", "oracle | remote"),
    ("judge.endpoint", "host:port of the remote judge"),
    ("judge.timeout_ms", "remote judge timeout per request"),
    ("judge.max_in_flight", "concurrent remote judge requests"),
    ("probe.h", "high-entropy fraction h of the batch condition"),
    ("probe.kappa_points", "grid size of the kappa sweep"),
    ("probe.lemma1_trials", "random instances of the exactness probe"),
    ("probe.monte_carlo_samples", "groups drawn for sampled cross-checks"),
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum JudgeKind {
    #[default]
    Oracle,
    Remote,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    pub endpoint: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig {
            kind: JudgeKind::Oracle,
            endpoint: "127.0.0.1:7878".into(),
            timeout_ms: 5000,
            max_in_flight: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub h: f64,
    pub kappa_points: usize,
    pub lemma1_trials: usize,
    pub monte_carlo_samples: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            h: 0.2,
            kappa_points: 21,
            lemma1_trials: 100,
            monte_carlo_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub judge: JudgeConfig,
    pub probe: ProbeConfig,
}

fn parse_scalar<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("invalid value `{value}`: {e}"))
}

fn parse_list<T: FromStr>(value: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: Display,
{
    value.split(',').map(|v| parse_scalar(v.trim())).collect()
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Keys whose value is a list and therefore cannot be swept.
pub fn is_list_key(key: &str) -> bool {
    matches!(key, "env.targets" | "env.difficulty" | "env.ambiguity" | "env.mix")
}

impl RunConfig {
    /// Defaults for everything but the seed.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            env: EnvConfig::default(),
            train: TrainConfig::default(),
            judge: JudgeConfig::default(),
            probe: ProbeConfig::default(),
        }
    }

    /// Sets one key; the error message names the problem without location.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let e = &mut self.env;
        let t = &mut self.train;
        match key {
            "seed" => self.seed = parse_scalar(value)?,
            "env.n_answer" => e.n_answer = parse_scalar(value)?,
            "env.n_high" => e.n_high = parse_scalar(value)?,
            "env.n_filler" => e.n_filler = parse_scalar(value)?,
            "env.order" => e.order = parse_scalar(value)?,
            "env.max_len" => e.max_len = parse_scalar(value)?,
            "env.targets" => e.targets = parse_list(value)?,
            "env.difficulty" => e.difficulty = parse_list(value)?,
            "env.ambiguity" => e.ambiguity = parse_list(value)?,
            "env.mix" => e.mix = parse_list(value)?,
            "env.bias_target" => e.bias.target = parse_scalar(value)?,
            "env.bias_answer" => e.bias.answer = parse_scalar(value)?,
            "env.bias_high" => e.bias.high = parse_scalar(value)?,
            "env.bias_filler" => e.bias.filler = parse_scalar(value)?,
            "env.bias_think_end" => e.bias.think_end = parse_scalar(value)?,
            "env.bias_after_high" => e.bias.after_high = parse_scalar(value)?,
            "env.bias_copy" => e.bias.copy = parse_scalar(value)?,
            "policy.learning_rate" => t.learning_rate = parse_scalar(value)?,
            "reward.kind" => t.reward = value.parse::<RewardKind>().map_err(|e| e.to_string())?,
            "reward.gamma" => t.reward_params.gamma = parse_scalar(value)?,
            "reward.r_plus" => t.reward_params.r_plus = parse_scalar(value)?,
            "reward.r_zero" => t.reward_params.r_zero = parse_scalar(value)?,
            "reward.length_basis" => {
                t.reward_params.length_basis = match value {
                    "full" => LengthBasis::Full,
                    "thinking" => LengthBasis::Thinking,
                    _ => return Err(format!("expected full or thinking, got `{value}`")),
                }
            }
            "reward.nrp_granularity" => {
                t.granularity = match value {
                    "token" => Granularity::Token,
                    "chunk" => Granularity::Chunk,
                    _ => return Err(format!("expected token or chunk, got `{value}`")),
                }
            }
            "advantage.estimator" => t.estimator = value.parse::<Estimator>().map_err(|e| e.to_string())?,
            "trainer.batch_size" => t.batch_size = parse_scalar(value)?,
            "trainer.group_size" => t.group_size = parse_scalar(value)?,
            "trainer.clip_eps" => t.clip_eps = parse_scalar(value)?,
            "trainer.steps" => t.steps = parse_scalar(value)?,
            "trainer.beta" => t.beta = parse_scalar(value)?,
            "trainer.curriculum" => t.curriculum = parse_bool(value)?,
            "trainer.resample_budget" => t.resample_budget = parse_scalar(value)?,
            "trainer.checkpoint_every" => t.checkpoint_every = parse_scalar(value)?,
            "trainer.eval_samples" => t.eval_samples = parse_scalar(value)?,
            "judge.kind" => {
                self.judge.kind = match value {
                    "oracle" => JudgeKind::Oracle,
                    "remote" => JudgeKind::Remote,
                    _ => return Err(format!("expected oracle or remote, got `{value}`")),
                }
            }
            "judge.endpoint" => self.judge.endpoint = value.to_string(),
            "judge.timeout_ms" => self.judge.timeout_ms = parse_scalar(value)?,
            "judge.max_in_flight" => self.judge.max_in_flight = parse_scalar(value)?,
            "probe.h" => self.probe.h = parse_scalar(value)?,
            "probe.kappa_points" => self.probe.kappa_points = parse_scalar(value)?,
            "probe.lemma1_trials" => self.probe.lemma1_trials = parse_scalar(value)?,
            "probe.monte_carlo_samples" => self.probe.monte_carlo_samples = parse_scalar(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses configuration text. Overrides of the form `key=value` are
    /// applied after the file and take precedence over it.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut config = RunConfig::with_seed(0);
        let mut seen_seed = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            config.set(key, value.trim()).map_err(|message| Error::ConfigLine {
                line: n + 1,
                message: format!("{key}: {message}"),
            })?;
            seen_seed |= key == "seed";
        }
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not `key=value`")))?;
            let key = key.trim();
            config
                .set(key, value.trim())
                .map_err(|m| Error::Config(format!("override {key}: {m}")))?;
            seen_seed |= key == "seed";
        }
        if !seen_seed {
            return Err(Error::Config("missing required key `seed`".into()));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        SynthEnv::new(self.env.clone())?;
        self.train.validate()?;
        if !(self.probe.h > 0.0 && self.probe.h < 1.0) {
            return Err(Error::Config(format!("probe.h must lie in (0, 1), got {}", self.probe.h)));
        }
        if self.probe.kappa_points < 2 {
            return Err(Error::Config("probe.kappa_points must be at least 2".into()));
        }
        Ok(())
    }

    /// Every key with its current value, in [`KEYS`] order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.env;
        let t = &self.train;
        let values = vec![
            self.seed.to_string(),
            e.n_answer.to_string(),
            e.n_high.to_string(),
            e.n_filler.to_string(),
            e.order.to_string(),
            e.max_len.to_string(),
            join(&e.targets),
            join(&e.difficulty),
            join(&e.ambiguity),
            join(&e.mix),
            e.bias.target.to_string(),
            e.bias.answer.to_string(),
            e.bias.high.to_string(),
            e.bias.filler.to_string(),
            e.bias.think_end.to_string(),
            e.bias.after_high.to_string(),
            e.bias.copy.to_string(),
            t.learning_rate.to_string(),
            t.reward.to_string(),
            t.reward_params.gamma.to_string(),
            t.reward_params.r_plus.to_string(),
            t.reward_params.r_zero.to_string(),
            match t.reward_params.length_basis {
                LengthBasis::Full => "full".into(),
                LengthBasis::Thinking => "thinking".into(),
            },
            match t.granularity {
                Granularity::Token => "token".into(),
                Granularity::Chunk => "chunk".into(),
            },
            t.estimator.to_string(),
            t.batch_size.to_string(),
            t.group_size.to_string(),
            t.clip_eps.to_string(),
            t.steps.to_string(),
            t.beta.to_string(),
            t.curriculum.to_string(),
            t.resample_budget.to_string(),
            t.checkpoint_every.to_string(),
            t.eval_samples.to_string(),
            match self.judge.kind {
                JudgeKind::Oracle => "oracle".into(),
                JudgeKind::Remote => "remote".into(),
            },
            self.judge.endpoint.clone(),
            self.judge.timeout_ms.to_string(),
            self.judge.max_in_flight.to_string(),
            self.probe.h.to_string(),
            self.probe.kappa_points.to_string(),
            self.probe.lemma1_trials.to_string(),
            self.probe.monte_carlo_samples.to_string(),
        ];
        KEYS.iter().map(|(k, _)| *k).zip(values).collect()
    }

    /// Canonical text with every key, parseable by [`RunConfig::parse`].
    pub fn snapshot(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// The configured judge.
    pub fn build_judge(&self) -> Result<Box<dyn Judge>> {
        Ok(match self.judge.kind {
            JudgeKind::Oracle => Box::new(OracleJudge),
            JudgeKind::Remote => Box::new(RemoteJudge::new(
                self.judge.endpoint.clone(),
                Duration::from_millis(self.judge.timeout_ms),
                self.judge.max_in_flight,
                SynthEnv::new(self.env.clone())?.vocab().clone(),
            )),
        })
    }
}
