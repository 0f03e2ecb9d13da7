//! Evaluation metrics: pass@K, AES, PNRP and the log-linear scaling fit.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::env::Rollout;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

fn check_pass_args(n: u64, c: u64, k: u64) -> Result<()> {
    if c > n {
        return Err(Error::InvalidArgument(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("K = {k} outside 1..={n}")));
    }
    Ok(())
}

/// `1 − C(n−c, K)/C(n, K)` via the product `Π_{i=n−c+1}^{n} (1 − K/i)`.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    check_pass_args(n, c, k)?;
    if n - c < k {
        return Ok(1.0);
    }
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

fn binomial(n: u64, k: u64) -> BigInt {
    if k > n {
        return BigInt::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

/// Exact rational pass@K.
pub fn pass_at_k_exact(n: u64, c: u64, k: u64) -> Result<BigRational> {
    check_pass_args(n, c, k)?;
    Ok(BigRational::one() - BigRational::new(binomial(n - c, k), binomial(n, k)))
}

/// Unit of pass@1 inputs to [`aes_with_unit`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PassUnit {
    Percent,
    Fraction,
}

/// Accuracy-efficiency score: relative token savings plus three times the
/// relative pass@1 gain, or minus five times the relative loss.
pub fn aes(pass: f64, pass_base: f64, len: f64, len_base: f64) -> Result<f64> {
    if !(pass_base > 0.0 && len_base > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "baselines must be positive, got pass {pass_base}, length {len_base}"
        )));
    }
    if !(pass.is_finite() && len.is_finite() && pass_base.is_finite() && len_base.is_finite()) {
        return Err(Error::NonFinite("AES input".into()));
    }
    let savings = (len_base - len) / len_base;
    let accuracy = if pass >= pass_base {
        3.0 * (pass - pass_base) / pass_base
    } else {
        -5.0 * (pass_base - pass) / pass_base
    };
    Ok(savings + accuracy)
}

/// [`aes`] with a range check on the pass@1 unit. The score itself does not
/// depend on the unit since only ratios of pass@1 values enter.
pub fn aes_with_unit(pass: f64, pass_base: f64, len: f64, len_base: f64, unit: PassUnit) -> Result<f64> {
    let max = match unit {
        PassUnit::Percent => 100.0,
        PassUnit::Fraction => 1.0,
    };
    for p in [pass, pass_base] {
        if !(0.0..=max).contains(&p) {
            return Err(Error::InvalidArgument(format!("pass@1 {p} outside [0, {max}]")));
        }
    }
    aes(pass, pass_base, len, len_base)
}

/// Fraction of thinking tokens that belong to the necessary prefix,
/// pooled over `(prefix end, thinking length)` pairs. `None` when empty.
pub fn pnrp_from_pairs(pairs: &[(usize, usize)]) -> Option<f64> {
    let (k, t) = pairs
        .iter()
        .fold((0usize, 0usize), |(k, t), &(a, b)| (k + a, t + b));
    if pairs.is_empty() || t == 0 {
        None
    } else {
        Some(k as f64 / t as f64)
    }
}

/// PNRP over correct rollouts with a resolved prefix end.
pub fn pnrp(rollouts: &[Rollout]) -> Option<f64> {
    let pairs: Vec<(usize, usize)> = rollouts
        .iter()
        .filter(|r| r.correct)
        .filter_map(|r| r.nrp_end.map(|k| (k, r.thinking_len())))
        .collect();
    pnrp_from_pairs(&pairs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogLinearFit {
    pub a: f64,
    pub b: f64,
    pub r_squared: f64,
}

/// Least-squares fit of `y = a·log2(x) + b`.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<LogLinearFit> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 points".into()));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::InvalidArgument("x must be positive and all values finite".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.log2()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all x values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - a * x - b).powi(2)).sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LogLinearFit { a, b, r_squared })
}

/// One line of a rollout dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub prompt: u16,
    pub tokens: Vec<TokenId>,
    pub correct: bool,
    pub nrp_end: Option<usize>,
    pub think_len: usize,
}

impl DumpRecord {
    pub fn from_rollout(prompt: u16, r: &Rollout) -> Self {
        DumpRecord {
            prompt,
            tokens: r.tokens.clone(),
            correct: r.correct,
            nrp_end: r.nrp_end,
            think_len: r.thinking_len(),
        }
    }
}

pub fn write_dump<W: Write>(mut out: W, records: &[DumpRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<dump>", e))?;
    }
    Ok(())
}

pub fn read_dump<R: BufRead>(input: R) -> Result<Vec<DumpRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dump>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            what: "rollout dump",
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

/// Per-prompt evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub prompt: u16,
    pub n: u64,
    pub c: u64,
    pub pass_at: BTreeMap<u64, f64>,
    pub mean_tokens: f64,
    pub mean_thinking_tokens: f64,
    pub pnrp: Option<f64>,
}

/// K values reported by default: powers of two up to `n`.
pub fn default_ks(n: u64) -> Vec<u64> {
    std::iter::successors(Some(1u64), |k| Some(k * 2))
        .take_while(|&k| k <= n)
        .collect()
}

/// Groups dump records by prompt and summarizes each group.
pub fn summarize(records: &[DumpRecord], ks: &[u64]) -> Result<Vec<EvalSummary>> {
    let mut by_prompt: BTreeMap<u16, Vec<&DumpRecord>> = BTreeMap::new();
    for r in records {
        by_prompt.entry(r.prompt).or_default().push(r);
    }
    let mut out = Vec::new();
    for (prompt, rs) in by_prompt {
        let n = rs.len() as u64;
        let c = rs.iter().filter(|r| r.correct).count() as u64;
        let mut pass_at = BTreeMap::new();
        for &k in ks.iter().filter(|&&k| k <= n) {
            pass_at.insert(k, pass_at_k(n, c, k)?);
        }
        let pairs: Vec<(usize, usize)> = rs
            .iter()
            .filter(|r| r.correct)
            .filter_map(|r| r.nrp_end.map(|k| (k, r.think_len)))
            .collect();
        out.push(EvalSummary {
            prompt,
            n,
            c,
            pass_at,
            mean_tokens: rs.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / n as f64,
            mean_thinking_tokens: rs.iter().map(|r| r.think_len as f64).sum::<f64>() / n as f64,
            pnrp: pnrp_from_pairs(&pairs),
        });
    }
    Ok(out)
}

/// Writes summaries as CSV with one `pass@K` column per requested K.
pub fn write_summary_csv<W: Write>(mut out: W, summaries: &[EvalSummary], ks: &[u64]) -> std::io::Result<()> {
    write!(out, "prompt,n,c,mean_tokens,mean_thinking_tokens,pnrp")?;
    for k in ks {
        write!(out, ",pass@{k}")?;
    }
    writeln!(out)?;
    for s in summaries {
        write!(
            out,
            "{},{},{},{},{},{}",
            s.prompt,
            s.n,
            s.c,
            s.mean_tokens,
            s.mean_thinking_tokens,
            s.pnrp.map_or(String::new(), |p| p.to_string())
        )?;
        for k in ks {
            match s.pass_at.get(k) {
                Some(v) => write!(out, ",{v}")?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
