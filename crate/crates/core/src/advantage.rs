//! Advantage estimators: group-standardized sequence advantages, per-position
//! standardized token advantages, and the batch-whitened variant.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rewards::TokenMatrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Estimator {
    Grpo,
    #[default]
    Decs,
    Rpp,
}

impl FromStr for Estimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Estimator::Grpo),
            "decs" => Ok(Estimator::Decs),
            "rpp" => Ok(Estimator::Rpp),
            _ => Err(Error::Config(format!(
                "unknown advantage estimator `{s}` (expected grpo, decs or rpp)"
            ))),
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Grpo => "grpo",
            Estimator::Decs => "decs",
            Estimator::Rpp => "rpp",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageMatrix {
    pub estimator: Estimator,
    pub values: TokenMatrix,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn population_std(xs: &[f64], mean: f64) -> f64 {
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Standardizes with population moments; a zero-variance input maps to zeros.
fn standardize(xs: &[f64]) -> Vec<f64> {
    // Equal inputs are checked directly: their rounded mean can differ from
    // the common value and leave a spurious nonzero std.
    if xs.iter().all(|&x| x == xs[0]) {
        return vec![0.0; xs.len()];
    }
    let m = mean(xs);
    let s = population_std(xs, m);
    if s == 0.0 {
        vec![0.0; xs.len()]
    } else {
        xs.iter().map(|x| (x - m) / s).collect()
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    match xs.iter().find(|x| !x.is_finite()) {
        Some(x) => Err(Error::NonFinite(format!("{what} {x}"))),
        None => Ok(()),
    }
}

/// Sequence advantages `(r_i − mean)/std` with population std.
pub fn grpo_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "group needs at least 2 rollouts, got {}",
            rewards.len()
        )));
    }
    check_finite(rewards, "reward")?;
    Ok(standardize(rewards))
}

/// Broadcasts sequence advantages along each rollout.
pub fn broadcast(advantages: &[f64], lengths: &[usize]) -> AdvantageMatrix {
    let width = lengths.iter().copied().max().unwrap_or(0);
    AdvantageMatrix {
        estimator: Estimator::Grpo,
        values: TokenMatrix {
            rows: advantages.iter().map(|&a| vec![a; width]).collect(),
            lengths: lengths.to_vec(),
        },
    }
}

/// Per-position standardization across the group. Padded entries take part
/// in the column moments, as their rewards are defined.
pub fn decs_advantage(rewards: &TokenMatrix) -> Result<AdvantageMatrix> {
    rewards.validate()?;
    let g = rewards.rows.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!(
            "group needs at least 2 rollouts, got {g}"
        )));
    }
    let width = rewards.width();
    let mut rows = vec![vec![0.0; width]; g];
    let mut column = vec![0.0; g];
    for j in 0..width {
        for (i, c) in column.iter_mut().enumerate() {
            *c = rewards.rows[i][j];
        }
        check_finite(&column, "reward")?;
        for (i, a) in standardize(&column).into_iter().enumerate() {
            rows[i][j] = a;
        }
    }
    Ok(AdvantageMatrix {
        estimator: Estimator::Decs,
        values: TokenMatrix {
            rows,
            lengths: rewards.lengths.clone(),
        },
    })
}

/// Per-position group-mean subtraction followed by whitening with the
/// batch-wide token mean and sample (n − 1) standard deviation over
/// unpadded tokens.
pub fn rpp_advantage(batch: &[TokenMatrix]) -> Result<Vec<AdvantageMatrix>> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut centered = Vec::with_capacity(batch.len());
    for m in batch {
        m.validate()?;
        let width = m.width();
        let g = m.rows.len();
        let mut rows = m.rows.clone();
        for j in 0..width {
            let col: Vec<f64> = (0..g).map(|i| m.rows[i][j]).collect();
            check_finite(&col, "reward")?;
            let equal = col.iter().all(|&x| x == col[0]);
            let mu = mean(&col);
            for row in rows.iter_mut() {
                row[j] = if equal { 0.0 } else { row[j] - mu };
            }
        }
        centered.push(TokenMatrix {
            rows,
            lengths: m.lengths.clone(),
        });
    }
    let tokens: Vec<f64> = centered
        .iter()
        .flat_map(|m| {
            m.rows
                .iter()
                .zip(&m.lengths)
                .flat_map(|(row, &len)| row[..len].iter().copied())
        })
        .collect();
    let n = tokens.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 tokens batch-wide, got {n}"
        )));
    }
    let mu = mean(&tokens);
    let degenerate = tokens.iter().all(|&x| x == tokens[0]);
    let sd = (tokens.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (n - 1) as f64).sqrt();
    Ok(centered
        .into_iter()
        .map(|mut m| {
            for row in m.rows.iter_mut() {
                for x in row.iter_mut() {
                    *x = if degenerate || sd == 0.0 { 0.0 } else { (*x - mu) / sd };
                }
            }
            AdvantageMatrix {
                estimator: Estimator::Rpp,
                values: m,
            }
        })
        .collect())
}
