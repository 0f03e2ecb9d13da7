//! Sequence-level and token-level rewards.

use crate::env::Rollout;
use crate::error::{Error, Result};

/// Which length divides the reward bonus of redundant tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LengthBasis {
    /// Total token count of the rollout.
    #[default]
    Full,
    /// Length of the thinking segment only.
    Thinking,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardParams {
    pub gamma: f64,
    pub r_plus: f64,
    pub r_zero: f64,
    pub length_basis: LengthBasis,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            gamma: 0.001,
            r_plus: 1.1,
            r_zero: 1.0,
            length_basis: LengthBasis::Full,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reward.gamma must be nonnegative, got {}",
                self.gamma
            )));
        }
        if !(self.r_zero.is_finite() && self.r_plus.is_finite() && self.r_plus > self.r_zero && self.r_zero > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need r_plus > r_zero > 0, got r_plus = {}, r_zero = {}",
                self.r_plus, self.r_zero
            )));
        }
        Ok(())
    }
}

pub fn correctness_reward(rollout: &Rollout) -> f64 {
    if rollout.correct {
        1.0
    } else {
        0.0
    }
}

/// `1 − γL` for correct rollouts, 0 otherwise.
pub fn length_reward(rollout: &Rollout, gamma: f64) -> f64 {
    if rollout.correct {
        1.0 - gamma * rollout.len() as f64
    } else {
        0.0
    }
}

/// Group of per-token values padded to the longest rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    /// `rows[i][j]` for rollout `i`, position `j` (0-based).
    pub rows: Vec<Vec<f64>>,
    /// Unpadded length of each row.
    pub lengths: Vec<usize>,
}

impl TokenMatrix {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn is_pad(&self, i: usize, j: usize) -> bool {
        j >= self.lengths[i]
    }

    /// Checks that every row has the common width and the lengths fit.
    pub fn validate(&self) -> Result<()> {
        let w = self.width();
        if self.rows.len() != self.lengths.len() {
            return Err(Error::InvalidArgument("row and length counts differ".into()));
        }
        for (i, (row, &len)) in self.rows.iter().zip(&self.lengths).enumerate() {
            if row.len() != w {
                return Err(Error::InvalidArgument(format!(
                    "ragged matrix: row {i} has {} columns, expected {w}",
                    row.len()
                )));
            }
            if len > w {
                return Err(Error::InvalidArgument(format!(
                    "row {i} length {len} exceeds width {w}"
                )));
            }
        }
        Ok(())
    }
}

pub type TokenRewardMatrix = TokenMatrix;

/// Token-level decoupled rewards for one group.
///
/// `nrp_ends[i]` is the 1-based prefix end of rollout `i`; it is required
/// for every correct rollout. For a correct rollout, positions inside the
/// prefix, outside the thinking segment, or in the padding get `r_plus`;
/// thinking positions past the prefix get `r_zero + (r_plus − r_zero)/L`.
/// Incorrect rollouts get 0 everywhere.
pub fn decoupled_rewards(
    rollouts: &[Rollout],
    nrp_ends: &[Option<usize>],
    params: &RewardParams,
) -> Result<TokenRewardMatrix> {
    params.validate()?;
    if rollouts.len() != nrp_ends.len() {
        return Err(Error::InvalidArgument(format!(
            "{} prefix ends for {} rollouts",
            nrp_ends.len(),
            rollouts.len()
        )));
    }
    let width = rollouts.iter().map(Rollout::len).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(rollouts.len());
    for (i, (r, &k)) in rollouts.iter().zip(nrp_ends).enumerate() {
        if !r.correct {
            rows.push(vec![0.0; width]);
            continue;
        }
        let k = k.ok_or(Error::MissingNrp { index: i })?;
        let basis = match params.length_basis {
            LengthBasis::Full => r.len(),
            LengthBasis::Thinking => r.thinking_len().max(1),
        };
        let redundant = params.r_zero + (params.r_plus - params.r_zero) / basis as f64;
        let thinking = r.thinking_len();
        let row = (1..=width)
            .map(|j| if j > k && j <= thinking { redundant } else { params.r_plus })
            .collect();
        rows.push(row);
    }
    Ok(TokenMatrix {
        rows,
        lengths: rollouts.iter().map(Rollout::len).collect(),
    })
}
