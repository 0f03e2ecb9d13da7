//! Training loop: group collection with the all-incorrect filter, curriculum
//! scheduling of easy groups, batch assembly, the clipped policy update and
//! run-directory telemetry.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::advantage::{broadcast, decs_advantage, grpo_advantage, rpp_advantage, AdvantageMatrix, Estimator};
use crate::env::{Prompt, Rollout, RolloutGroup, SynthEnv};
use crate::error::{Error, Result};
use crate::metrics::{self, DumpRecord};
use crate::nrp::{chunk_nrp_end, Granularity, Judge};
use crate::par::{map_indexed, stream_rng, Exec};
use crate::policy::{PpoSample, TabularPolicy};
use crate::rewards::{correctness_reward, decoupled_rewards, length_reward, RewardParams, TokenMatrix};

/// Stream tags keeping the random streams of different phases apart.
const COLLECT_TAG: u64 = 1;
const BACKFILL_TAG: u64 = 2;
const EVAL_TAG: u64 = 3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RewardKind {
    Correctness,
    Length,
    #[default]
    Decoupled,
}

impl FromStr for RewardKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correctness" => Ok(RewardKind::Correctness),
            "length" => Ok(RewardKind::Length),
            "decoupled" => Ok(RewardKind::Decoupled),
            _ => Err(Error::Config(format!(
                "unknown reward kind `{s}` (expected correctness, length or decoupled)"
            ))),
        }
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RewardKind::Correctness => "correctness",
            RewardKind::Length => "length",
            RewardKind::Decoupled => "decoupled",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub clip_eps: f64,
    pub steps: usize,
    pub beta: f64,
    /// Whether easy groups are rationed by the curriculum schedule.
    pub curriculum: bool,
    /// Attempts allowed per missing group before a step aborts.
    pub resample_budget: usize,
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub reward: RewardKind,
    pub reward_params: RewardParams,
    pub estimator: Estimator,
    pub granularity: Granularity,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            group_size: 16,
            learning_rate: 2.0e-6,
            clip_eps: 0.2,
            steps: 500,
            beta: 0.2,
            curriculum: true,
            resample_budget: 8,
            checkpoint_every: 100,
            eval_samples: 6000,
            reward: RewardKind::Decoupled,
            reward_params: RewardParams::default(),
            estimator: Estimator::Decs,
            granularity: Granularity::Token,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("trainer.batch_size must be at least 1".into()));
        }
        if self.group_size < 2 {
            return Err(Error::Config("trainer.group_size must be at least 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("policy.learning_rate must be positive".into()));
        }
        if !(self.clip_eps.is_finite() && self.clip_eps > 0.0) {
            return Err(Error::Config("trainer.clip_eps must be positive".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::Config("trainer.beta must be nonnegative".into()));
        }
        if self.resample_budget < 1 {
            return Err(Error::Config("trainer.resample_budget must be at least 1".into()));
        }
        self.reward_params.validate().map_err(|e| Error::Config(e.to_string()))?;
        match (self.reward, self.estimator) {
            (RewardKind::Correctness | RewardKind::Length, Estimator::Grpo) => Ok(()),
            (RewardKind::Decoupled, Estimator::Decs | Estimator::Rpp) => Ok(()),
            (r, e) => Err(Error::Config(format!(
                "reward `{r}` cannot be used with estimator `{e}`: grpo takes a sequence reward \
                 (correctness, length), decs and rpp take the decoupled token reward"
            ))),
        }
    }
}

/// Eq.-11 style scheduler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumState {
    pub kappa_prev: f64,
    pub r_prev: f64,
    pub beta: f64,
    /// False until the first batch has been measured.
    pub initialized: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KappaUpdate {
    pub kappa: f64,
    pub kappa_prev: f64,
    pub r_prev: f64,
    /// `β·(R_m − R_{m−1})` before clipping.
    pub increment: f64,
}

impl CurriculumState {
    pub fn new(beta: f64) -> Self {
        CurriculumState {
            kappa_prev: 0.0,
            r_prev: 0.0,
            beta,
            initialized: false,
        }
    }

    /// `κ_m = clip(κ_{m−1} + β(R_m − R_{m−1}), 0, κ0_m)`, then advances the
    /// state. The first call seeds `R_{m−1} = R_m` and `κ_{m−1} = κ0_m`.
    pub fn schedule_kappa(&mut self, r_m: f64, kappa0: f64) -> KappaUpdate {
        if !self.initialized {
            self.r_prev = r_m;
            self.kappa_prev = kappa0;
            self.initialized = true;
        }
        let increment = self.beta * (r_m - self.r_prev);
        let kappa = (self.kappa_prev + increment).clamp(0.0, kappa0);
        let update = KappaUpdate {
            kappa,
            kappa_prev: self.kappa_prev,
            r_prev: self.r_prev,
            increment,
        };
        self.kappa_prev = kappa;
        self.r_prev = r_m;
        update
    }
}

/// Groups that survived the all-incorrect filter.
#[derive(Clone, Debug, PartialEq)]
pub struct Collected {
    pub groups: Vec<RolloutGroup>,
    pub filtered_all_incorrect: usize,
    pub attempts: usize,
}

impl Collected {
    pub fn easy_count(&self) -> usize {
        self.groups.iter().filter(|g| g.is_all_correct()).count()
    }

    pub fn kappa0(&self) -> f64 {
        self.easy_count() as f64 / self.groups.len() as f64
    }
}

/// Draws `count` groups, the `a`-th from its own random stream.
fn sample_groups(
    policy: &TabularPolicy,
    env: &SynthEnv,
    group_size: usize,
    seed: u64,
    path: [u64; 2],
    first_attempt: usize,
    count: usize,
    exec: Exec,
) -> Result<Vec<RolloutGroup>> {
    map_indexed(exec, count, |i| {
        let mut rng = stream_rng(seed, &[path[0], path[1], (first_attempt + i) as u64]);
        let prompt = env.sample_prompt(&mut rng);
        let rollouts = (0..group_size)
            .map(|_| env.generate(policy, &prompt, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(RolloutGroup { prompt, rollouts })
    })
    .into_iter()
    .collect()
}

/// Samples groups until `batch_size` of them are not all-incorrect.
///
/// Sampling proceeds in waves of as many attempts as groups are missing; at
/// most `resample_budget · batch_size` attempts are made.
pub fn collect_groups(
    policy: &TabularPolicy,
    env: &SynthEnv,
    config: &TrainConfig,
    seed: u64,
    step: usize,
    exec: Exec,
) -> Result<Collected> {
    let b = config.batch_size;
    let cap = config.resample_budget * b;
    let mut groups = Vec::with_capacity(b);
    let mut filtered = 0;
    let mut attempts = 0;
    while groups.len() < b {
        let wave = (b - groups.len()).min(cap - attempts);
        if wave == 0 {
            return Err(Error::ResampleBudget(format!(
                "step {step}: only {} of {b} groups survived after {attempts} attempts",
                groups.len()
            )));
        }
        let sampled = sample_groups(
            policy,
            env,
            config.group_size,
            seed,
            [COLLECT_TAG, step as u64],
            attempts,
            wave,
            exec,
        )?;
        attempts += wave;
        for g in sampled {
            if g.is_all_incorrect() {
                filtered += 1;
            } else {
                groups.push(g);
            }
        }
    }
    Ok(Collected {
        groups,
        filtered_all_incorrect: filtered,
        attempts,
    })
}

/// Samples additional mixed (neither all-correct nor all-incorrect) groups.
pub fn collect_mixed(
    policy: &TabularPolicy,
    env: &SynthEnv,
    config: &TrainConfig,
    seed: u64,
    step: usize,
    needed: usize,
    exec: Exec,
) -> Result<Vec<RolloutGroup>> {
    let cap = config.resample_budget * needed;
    let mut out = Vec::with_capacity(needed);
    let mut attempts = 0;
    while out.len() < needed {
        let wave = (needed - out.len()).min(cap - attempts);
        if wave == 0 {
            return Err(Error::ResampleBudget(format!(
                "step {step}: found {} of {needed} mixed groups for backfill after {attempts} attempts",
                out.len()
            )));
        }
        let sampled = sample_groups(
            policy,
            env,
            config.group_size,
            seed,
            [BACKFILL_TAG, step as u64],
            attempts,
            wave,
            exec,
        )?;
        attempts += wave;
        out.extend(
            sampled
                .into_iter()
                .filter(|g| !g.is_all_correct() && !g.is_all_incorrect()),
        );
    }
    Ok(out)
}

/// Number of easy groups admitted at ratio `kappa`: `⌊κB⌋`, with a small
/// tolerance so that ratios computed as `count/B` round-trip.
pub fn easy_quota(kappa: f64, batch_size: usize) -> usize {
    (kappa * batch_size as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub groups: Vec<RolloutGroup>,
    pub kappa: f64,
    pub easy_retained: usize,
}

/// Number of mixed groups that must be over-sampled to assemble a batch.
pub fn backfill_needed(groups: &[RolloutGroup], kappa: f64, batch_size: usize) -> usize {
    let easy = groups.iter().filter(|g| g.is_all_correct()).count();
    let mixed = groups.len() - easy;
    let keep = easy.min(easy_quota(kappa, batch_size));
    batch_size.saturating_sub(keep + mixed)
}

/// Keeps at most `⌊κB⌋` easy groups (shortest mean length first) and fills
/// the rest of the batch with mixed groups, drawing on `backfill` after the
/// mixed groups of `groups` are used up.
pub fn assemble_batch(
    groups: Vec<RolloutGroup>,
    backfill: Vec<RolloutGroup>,
    kappa: f64,
    batch_size: usize,
) -> Result<TrainBatch> {
    if groups.iter().chain(&backfill).any(RolloutGroup::is_all_incorrect) {
        return Err(Error::InvalidArgument(
            "all-incorrect group offered to batch assembly".into(),
        ));
    }
    if backfill.iter().any(RolloutGroup::is_all_correct) {
        return Err(Error::InvalidArgument("backfill groups must be mixed".into()));
    }
    let (mut easy, mixed): (Vec<_>, Vec<_>) = groups.into_iter().partition(RolloutGroup::is_all_correct);
    // Stable sort keeps sampling order among equal lengths.
    easy.sort_by(|a, b| a.mean_len().total_cmp(&b.mean_len()));
    let keep = easy.len().min(easy_quota(kappa, batch_size));
    easy.truncate(keep);
    let mut out = easy;
    out.extend(mixed.into_iter().chain(backfill).take(batch_size - keep));
    if out.len() < batch_size {
        return Err(Error::ResampleBudget(format!(
            "only {} groups available for a batch of {batch_size}",
            out.len()
        )));
    }
    Ok(TrainBatch {
        groups: out,
        kappa,
        easy_retained: keep,
    })
}

/// `R_m`: mean over correct rollouts with a resolved prefix of
/// prefix length / thinking length.
pub fn nrp_ratio(groups: &[RolloutGroup]) -> Option<f64> {
    let ratios: Vec<f64> = groups
        .iter()
        .flat_map(|g| &g.rollouts)
        .filter(|r| r.correct)
        .filter_map(|r| r.nrp_end.map(|k| k as f64 / r.thinking_len() as f64))
        .collect();
    if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

/// Prefix ends fed to the decoupled reward. A correct rollout whose thinking
/// never states `y*` has no redundant tokens: its prefix is the whole
/// thinking segment.
pub fn reward_nrp_ends(
    group: &RolloutGroup,
    env: &SynthEnv,
    granularity: Granularity,
    judge: &dyn Judge,
) -> Result<Vec<Option<usize>>> {
    group
        .rollouts
        .iter()
        .map(|r| {
            if !r.correct {
                return Ok(None);
            }
            let end = match granularity {
                Granularity::Token => r.nrp_end,
                Granularity::Chunk => chunk_nrp_end(r, &group.prompt, env.vocab(), judge)?,
            };
            Ok(Some(end.unwrap_or(r.thinking_len())))
        })
        .collect()
}

/// Aggregate statistics of one update.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub mean_reward: f64,
    pub tokens: usize,
}

/// Rewards and advantages for every group of a batch.
pub fn batch_advantages(
    groups: &[RolloutGroup],
    env: &SynthEnv,
    config: &TrainConfig,
    judge: &dyn Judge,
) -> Result<(Vec<AdvantageMatrix>, f64)> {
    match config.estimator {
        Estimator::Grpo => {
            let mut out = Vec::with_capacity(groups.len());
            let mut reward_sum = 0.0;
            let mut count = 0usize;
            for g in groups {
                let rewards: Vec<f64> = g
                    .rollouts
                    .iter()
                    .map(|r| match config.reward {
                        RewardKind::Length => length_reward(r, config.reward_params.gamma),
                        _ => correctness_reward(r),
                    })
                    .collect();
                reward_sum += rewards.iter().sum::<f64>();
                count += rewards.len();
                let adv = grpo_advantage(&rewards)?;
                let lengths: Vec<usize> = g.rollouts.iter().map(Rollout::len).collect();
                out.push(broadcast(&adv, &lengths));
            }
            Ok((out, reward_sum / count as f64))
        }
        Estimator::Decs | Estimator::Rpp => {
            let mut matrices = Vec::with_capacity(groups.len());
            for g in groups {
                let ends = reward_nrp_ends(g, env, config.granularity, judge)?;
                matrices.push(decoupled_rewards(&g.rollouts, &ends, &config.reward_params)?);
            }
            let mean_reward = mean_token_value(&matrices);
            let adv = if config.estimator == Estimator::Decs {
                matrices.iter().map(decs_advantage).collect::<Result<Vec<_>>>()?
            } else {
                rpp_advantage(&matrices)?
            };
            Ok((adv, mean_reward))
        }
    }
}

fn mean_token_value(matrices: &[TokenMatrix]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for m in matrices {
        for (row, &len) in m.rows.iter().zip(&m.lengths) {
            sum += row[..len].iter().sum::<f64>();
            n += len;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Clipped-surrogate samples for every unpadded token of the batch.
pub fn ppo_samples(
    policy: &TabularPolicy,
    groups: &[RolloutGroup],
    advantages: &[AdvantageMatrix],
    env: &SynthEnv,
) -> Vec<PpoSample> {
    let mut out = Vec::new();
    for (n, (g, adv)) in groups.iter().zip(advantages).enumerate() {
        for (i, r) in g.rollouts.iter().enumerate() {
            for j in 0..r.len() {
                out.push(PpoSample {
                    context: policy.context(g.prompt.prompt_class, &r.tokens[..j]),
                    token: r.tokens[j],
                    support: r.support_at(j, env.vocab()),
                    advantage: adv.values.rows[i][j],
                    old_prob: r.probs[j],
                    group: n,
                });
            }
        }
    }
    out
}

/// One clipped policy-gradient update on an assembled batch.
pub fn train_step(
    policy: &TabularPolicy,
    batch: &TrainBatch,
    env: &SynthEnv,
    config: &TrainConfig,
    judge: &dyn Judge,
) -> Result<(TabularPolicy, StepStats)> {
    let (advantages, mean_reward) = batch_advantages(&batch.groups, env, config, judge)?;
    for (n, adv) in advantages.iter().enumerate() {
        if adv.values.rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "advantages of group {n} (prompt class {})",
                batch.groups[n].prompt.prompt_class
            )));
        }
    }
    let samples = ppo_samples(policy, &batch.groups, &advantages, env);
    let next = policy.ppo_update(&samples, config.clip_eps)?;
    Ok((
        next,
        StepStats {
            mean_reward,
            tokens: samples.len(),
        },
    ))
}

/// Persisted telemetry of one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub kappa: f64,
    pub kappa0: f64,
    pub kappa_prev: f64,
    pub r: f64,
    pub r_prev: f64,
    /// Pooled prefix proportion of the assembled batch.
    pub pnrp: Option<f64>,
    pub mean_length: f64,
    pub mean_thinking_length: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub high_entropy_freq: f64,
    pub easy_in_batch: usize,
    pub all_incorrect_in_batch: usize,
    pub filtered_all_incorrect: usize,
}

pub const SUMMARY_HEADER: &str = "step,kappa,kappa0,r,pnrp,mean_length,mean_thinking_length,accuracy,mean_reward,high_entropy_freq,easy_in_batch,filtered_all_incorrect";

impl RunRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.kappa,
            self.kappa0,
            self.r,
            self.pnrp.map_or(String::new(), |p| p.to_string()),
            self.mean_length,
            self.mean_thinking_length,
            self.accuracy,
            self.mean_reward,
            self.high_entropy_freq,
            self.easy_in_batch,
            self.filtered_all_incorrect
        )
    }
}

fn batch_record(
    step: usize,
    batch: &TrainBatch,
    collected: &Collected,
    update: &KappaUpdate,
    r_m: f64,
    stats: &StepStats,
    env: &SynthEnv,
) -> RunRecord {
    let rollouts: Vec<&Rollout> = batch.groups.iter().flat_map(|g| &g.rollouts).collect();
    let n = rollouts.len() as f64;
    let thinking_tokens: usize = rollouts.iter().map(|r| r.thinking_len()).sum();
    let high: usize = rollouts
        .iter()
        .map(|r| r.thinking().iter().filter(|&&t| env.vocab().is_high_entropy(t)).count())
        .sum();
    let pairs: Vec<(usize, usize)> = rollouts
        .iter()
        .filter(|r| r.correct)
        .filter_map(|r| r.nrp_end.map(|k| (k, r.thinking_len())))
        .collect();
    RunRecord {
        step,
        kappa: update.kappa,
        kappa0: collected.kappa0(),
        kappa_prev: update.kappa_prev,
        r: r_m,
        r_prev: update.r_prev,
        pnrp: metrics::pnrp_from_pairs(&pairs),
        mean_length: rollouts.iter().map(|r| r.len() as f64).sum::<f64>() / n,
        mean_thinking_length: thinking_tokens as f64 / n,
        accuracy: rollouts.iter().filter(|r| r.correct).count() as f64 / n,
        mean_reward: stats.mean_reward,
        high_entropy_freq: if thinking_tokens == 0 {
            0.0
        } else {
            high as f64 / thinking_tokens as f64
        },
        easy_in_batch: batch.easy_retained,
        all_incorrect_in_batch: batch.groups.iter().filter(|g| g.is_all_incorrect()).count(),
        filtered_all_incorrect: collected.filtered_all_incorrect,
    }
}

/// Mutable loop state between steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub curriculum: CurriculumState,
}

/// Collects, schedules, assembles and updates once.
pub fn run_step(
    policy: &TabularPolicy,
    state: &mut TrainerState,
    env: &SynthEnv,
    config: &TrainConfig,
    judge: &dyn Judge,
    seed: u64,
    exec: Exec,
) -> Result<(TabularPolicy, RunRecord)> {
    let step = state.step + 1;
    let collected = collect_groups(policy, env, config, seed, step, exec)?;
    let kappa0 = collected.kappa0();
    let r_m = nrp_ratio(&collected.groups).unwrap_or(if state.curriculum.initialized {
        state.curriculum.r_prev
    } else {
        0.0
    });
    let update = if config.curriculum {
        state.curriculum.schedule_kappa(r_m, kappa0)
    } else {
        KappaUpdate {
            kappa: kappa0,
            kappa_prev: kappa0,
            r_prev: r_m,
            increment: 0.0,
        }
    };
    let needed = backfill_needed(&collected.groups, update.kappa, config.batch_size);
    let backfill = if needed > 0 {
        collect_mixed(policy, env, config, seed, step, needed, exec)?
    } else {
        Vec::new()
    };
    let batch = assemble_batch(collected.groups.clone(), backfill, update.kappa, config.batch_size)?;
    let (next, stats) = train_step(policy, &batch, env, config, judge)?;
    let record = batch_record(step, &batch, &collected, &update, r_m, &stats, env);
    state.step = step;
    Ok((next, record))
}

/// Monte Carlo evaluation on a fixed-seed prompt/rollout stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalStats {
    pub samples: usize,
    pub accuracy: f64,
    pub mean_length: f64,
    pub mean_thinking_length: f64,
    pub pnrp: Option<f64>,
}

/// Evaluates `samples` rollouts spread evenly over prompt classes.
pub fn evaluate(
    policy: &TabularPolicy,
    env: &SynthEnv,
    samples: usize,
    seed: u64,
    exec: Exec,
) -> Result<(EvalStats, Vec<DumpRecord>)> {
    let classes = env.prompts().len();
    let records = map_indexed(exec, samples, |i| {
        let mut rng = stream_rng(seed, &[EVAL_TAG, i as u64]);
        let prompt: Prompt = env.prompt_instance(i % classes, &mut rng);
        env.generate(policy, &prompt, &mut rng)
            .map(|r| DumpRecord::from_rollout(prompt.prompt_class, &r))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let n = records.len().max(1) as f64;
    let pairs: Vec<(usize, usize)> = records
        .iter()
        .filter(|r| r.correct)
        .filter_map(|r| r.nrp_end.map(|k| (k, r.think_len)))
        .collect();
    let stats = EvalStats {
        samples: records.len(),
        accuracy: records.iter().filter(|r| r.correct).count() as f64 / n,
        mean_length: records.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / n,
        mean_thinking_length: records.iter().map(|r| r.think_len as f64).sum::<f64>() / n,
        pnrp: metrics::pnrp_from_pairs(&pairs),
    };
    Ok((stats, records))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub steps: usize,
    pub initial: EvalStats,
    #[serde(rename = "final")]
    pub final_: EvalStats,
    /// `1 − final/initial` mean thinking length.
    pub thinking_length_reduction: f64,
    pub accuracy_change: f64,
}

/// Everything needed to reproduce a run.
pub struct RunSetup<'a> {
    pub env: &'a SynthEnv,
    pub config: &'a TrainConfig,
    pub judge: &'a dyn Judge,
    pub seed: u64,
    pub exec: Exec,
    /// Verbatim configuration text written to `config.snapshot`.
    pub snapshot: &'a str,
}

pub fn checkpoint_paths(dir: &Path, step: usize) -> (PathBuf, PathBuf) {
    let base = dir.join("checkpoints");
    (
        base.join(format!("step-{step}.policy")),
        base.join(format!("step-{step}.state")),
    )
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_checkpoint(dir: &Path, policy: &TabularPolicy, state: &TrainerState) -> Result<()> {
    let (p, s) = checkpoint_paths(dir, state.step);
    write_file(&p, policy.to_checkpoint_string().as_bytes())?;
    write_file(&s, serde_json::to_string(state)?.as_bytes())
}

/// Loads the policy and loop state saved after `step`.
pub fn load_checkpoint(dir: &Path, step: usize, learning_rate: f64) -> Result<(TabularPolicy, TrainerState)> {
    let (p, s) = checkpoint_paths(dir, step);
    let file = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
    let policy = TabularPolicy::read_checkpoint(BufReader::new(file), learning_rate)?;
    let text = fs::read_to_string(&s).map_err(|e| Error::io(&s, e))?;
    Ok((policy, serde_json::from_str(&text)?))
}

/// Reads every record of a run directory.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let path = dir.join("records.jsonl");
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "run record",
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Trains for `config.steps` steps, writing the run directory.
pub fn run(setup: &RunSetup<'_>, dir: &Path) -> Result<RunReport> {
    fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("config.snapshot"), setup.snapshot.as_bytes())?;
    let policy = setup.env.initial_policy(setup.config.learning_rate)?;
    let state = TrainerState {
        step: 0,
        curriculum: CurriculumState::new(setup.config.beta),
    };
    save_checkpoint(dir, &policy, &state)?;
    write_file(&dir.join("records.jsonl"), b"")?;
    continue_run(setup, dir, policy, state, Vec::new())
}

/// Continues a run from the checkpoint saved after `step`, discarding any
/// later records. Produces the same records as an uninterrupted run.
pub fn resume(setup: &RunSetup<'_>, dir: &Path, step: usize) -> Result<RunReport> {
    let (policy, state) = load_checkpoint(dir, step, setup.config.learning_rate)?;
    let mut records = read_records(dir)?;
    if records.len() < step {
        return Err(Error::InvalidArgument(format!(
            "run directory has {} records, cannot resume at step {step}",
            records.len()
        )));
    }
    records.truncate(step);
    // Earlier lines are kept verbatim so the file stays byte-identical.
    let path = dir.join("records.jsonl");
    let existing = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut text = String::new();
    for line in existing.lines().filter(|l| !l.is_empty()).take(step) {
        text.push_str(line);
        text.push('\n');
    }
    write_file(&path, text.as_bytes())?;
    continue_run(setup, dir, policy, state, records)
}

fn continue_run(
    setup: &RunSetup<'_>,
    dir: &Path,
    mut policy: TabularPolicy,
    mut state: TrainerState,
    mut records: Vec<RunRecord>,
) -> Result<RunReport> {
    let records_path = dir.join("records.jsonl");
    let mut out = fs::OpenOptions::new()
        .append(true)
        .open(&records_path)
        .map_err(|e| Error::io(&records_path, e))?;
    while state.step < setup.config.steps {
        let (next, record) = run_step(
            &policy,
            &mut state,
            setup.env,
            setup.config,
            setup.judge,
            setup.seed,
            setup.exec,
        )?;
        policy = next;
        let line = serde_json::to_string(&record)?;
        writeln!(out, "{line}").map_err(|e| Error::io(&records_path, e))?;
        records.push(record);
        if setup.config.checkpoint_every > 0
            && (state.step % setup.config.checkpoint_every == 0 || state.step == setup.config.steps)
        {
            save_checkpoint(dir, &policy, &state)?;
        }
    }
    drop(out);

    let mut csv = String::from(SUMMARY_HEADER);
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    write_file(&dir.join("summary.csv"), csv.as_bytes())?;

    let initial_policy = setup.env.initial_policy(setup.config.learning_rate)?;
    let samples = setup.config.eval_samples;
    let (initial, _) = evaluate(&initial_policy, setup.env, samples, setup.seed, setup.exec)?;
    let (final_, dump) = evaluate(&policy, setup.env, samples, setup.seed, setup.exec)?;
    let mut dump_text = Vec::new();
    metrics::write_dump(&mut dump_text, &dump)?;
    write_file(&dir.join("eval_rollouts.jsonl"), &dump_text)?;
    let report = RunReport {
        steps: state.step,
        thinking_length_reduction: if initial.mean_thinking_length > 0.0 {
            1.0 - final_.mean_thinking_length / initial.mean_thinking_length
        } else {
            0.0
        },
        accuracy_change: final_.accuracy - initial.accuracy,
        initial,
        final_,
    };
    write_file(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    let final_path = dir.join("final.policy");
    write_file(&final_path, policy.to_checkpoint_string().as_bytes())?;
    Ok(report)
}
