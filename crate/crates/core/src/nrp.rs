//! Chunk-based detection of the necessary reasoning prefix.
//!
//! The thinking segment is split at high-entropy separator tokens, a judge
//! decides per chunk whether it reaches the reference answer, and the prefix
//! ends with the first chunk judged `yes`.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::env::{Prompt, Rollout};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

/// A contiguous piece of the thinking segment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Chunk {
    /// 1-based position of the chunk.
    pub index: usize,
    pub tokens: Vec<TokenId>,
    /// 0-based start (inclusive) in the thinking segment.
    pub start: usize,
    /// 0-based end (exclusive); equals the 1-based index of the last token.
    pub end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Judgment {
    Yes,
    No,
}

/// Which prefix end feeds the token-level reward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Granularity {
    #[default]
    Token,
    Chunk,
}

#[derive(Debug, thiserror::Error)]
pub enum JudgeError {
    #[error("transport failure talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("malformed judge response: {0}")]
    Malformed(String),
}

/// Splits a thinking segment so that every high-entropy token starts a new
/// chunk.
pub fn segment(thinking: &[TokenId], vocab: &Vocab) -> Vec<Chunk> {
    let mut chunks: Vec<Chunk> = Vec::new();
    let mut start = 0;
    for j in 1..=thinking.len() {
        if j == thinking.len() || vocab.is_high_entropy(thinking[j]) {
            chunks.push(Chunk {
                index: chunks.len() + 1,
                tokens: thinking[start..j].to_vec(),
                start,
                end: j,
            });
            start = j;
        }
    }
    chunks
}

/// Judge interface. Implementations must never turn a failure into `No`.
pub trait Judge: Sync {
    fn judge(&self, prompt: &Prompt, chunk: &Chunk) -> std::result::Result<Judgment, JudgeError>;

    /// Judges every chunk; the default runs them one after another.
    fn judge_all(
        &self,
        prompt: &Prompt,
        chunks: &[Chunk],
    ) -> std::result::Result<Vec<Judgment>, JudgeError> {
        chunks.iter().map(|c| self.judge(prompt, c)).collect()
    }
}

/// Exact judge: `yes` iff the chunk contains `y*`.
#[derive(Clone, Copy, Debug, Default)]
pub struct OracleJudge;

impl Judge for OracleJudge {
    fn judge(&self, prompt: &Prompt, chunk: &Chunk) -> std::result::Result<Judgment, JudgeError> {
        Ok(if chunk.tokens.contains(&prompt.target) {
            Judgment::Yes
        } else {
            Judgment::No
        })
    }
}

/// First chunk judged `yes`; returns its 1-based index and its end.
pub fn extract_nrp(judgments: &[Judgment], chunks: &[Chunk]) -> Result<Option<(usize, usize)>> {
    if judgments.len() != chunks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} judgments for {} chunks",
            judgments.len(),
            chunks.len()
        )));
    }
    Ok(judgments
        .iter()
        .position(|&j| j == Judgment::Yes)
        .map(|i| (chunks[i].index, chunks[i].end)))
}

/// Chunk-level prefix end for a rollout.
pub fn chunk_nrp_end(
    rollout: &Rollout,
    prompt: &Prompt,
    vocab: &Vocab,
    judge: &dyn Judge,
) -> Result<Option<usize>> {
    let chunks = segment(rollout.thinking(), vocab);
    let judgments = judge.judge_all(prompt, &chunks)?;
    Ok(extract_nrp(&judgments, &chunks)?.map(|(_, end)| end))
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    problem: &'a str,
    segment: &'a str,
    answer: &'a str,
}

/// Parses a judge response line: `{"judgment": "yes"|"no"}`, also accepting a
/// boxed verdict such as `\boxed{yes}`.
pub fn parse_judgment(line: &str) -> std::result::Result<Judgment, JudgeError> {
    let value: serde_json::Value = serde_json::from_str(line.trim())
        .map_err(|e| JudgeError::Malformed(format!("{e}: {line:?}")))?;
    let text = value
        .get("judgment")
        .and_then(|v| v.as_str())
        .ok_or_else(|| JudgeError::Malformed(format!("missing \"judgment\" string: {line:?}")))?;
    let trimmed = text.trim();
    let inner = trimmed
        .strip_prefix("\\boxed{")
        .and_then(|s| s.strip_suffix('}'))
        .unwrap_or(trimmed);
    match inner.trim().to_ascii_lowercase().as_str() {
        "yes" => Ok(Judgment::Yes),
        "no" => Ok(Judgment::No),
        other => Err(JudgeError::Malformed(format!("verdict {other:?}"))),
    }
}

/// Client for a judge served over TCP, one line-delimited JSON request per
/// connection.
#[derive(Clone, Debug)]
pub struct RemoteJudge {
    endpoint: String,
    timeout: Duration,
    max_in_flight: usize,
    vocab: Vocab,
}

impl RemoteJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, max_in_flight: usize, vocab: Vocab) -> Self {
        RemoteJudge {
            endpoint: endpoint.into(),
            timeout,
            max_in_flight: max_in_flight.max(1),
            vocab,
        }
    }

    fn transport(&self, message: impl ToString) -> JudgeError {
        JudgeError::Transport {
            endpoint: self.endpoint.clone(),
            message: message.to_string(),
        }
    }

    fn request(&self, prompt: &Prompt, chunk: &Chunk) -> std::result::Result<Judgment, JudgeError> {
        let addr = self
            .endpoint
            .to_socket_addrs()
            .map_err(|e| self.transport(e))?
            .next()
            .ok_or_else(|| self.transport("endpoint resolved to no address"))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout).map_err(|e| self.transport(e))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .and_then(|_| stream.set_write_timeout(Some(self.timeout)))
            .map_err(|e| self.transport(e))?;
        let problem = format!("class {}", prompt.prompt_class);
        let segment = self.vocab.render(&chunk.tokens);
        let answer = self.vocab.name(prompt.target);
        let mut line = serde_json::to_string(&JudgeRequest {
            problem: &problem,
            segment: &segment,
            answer: &answer,
        })
        .map_err(|e| self.transport(e))?;
        line.push('\n');
        let mut writer = stream.try_clone().map_err(|e| self.transport(e))?;
        writer
            .write_all(line.as_bytes())
            .and_then(|_| writer.flush())
            .map_err(|e| self.transport(e))?;
        let mut response = String::new();
        let n = BufReader::new(stream)
            .read_line(&mut response)
            .map_err(|e| self.transport(e))?;
        if n == 0 {
            return Err(self.transport("connection closed before a response"));
        }
        parse_judgment(&response)
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, prompt: &Prompt, chunk: &Chunk) -> std::result::Result<Judgment, JudgeError> {
        self.request(prompt, chunk)
    }

    /// Issues at most `max_in_flight` concurrent requests.
    fn judge_all(
        &self,
        prompt: &Prompt,
        chunks: &[Chunk],
    ) -> std::result::Result<Vec<Judgment>, JudgeError> {
        let mut out = Vec::with_capacity(chunks.len());
        for wave in chunks.chunks(self.max_in_flight) {
            let results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|c| s.spawn(move || self.request(prompt, c)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(self.transport("judge worker panicked"))))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }
}
