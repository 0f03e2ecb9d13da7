//! Token ids, token classes and the vocabulary layout.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`Vocab`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Answer,
    HighEntropy,
    Filler,
    ThinkEnd,
    Eos,
}

/// Largest vocabulary a [`TokenSet`] can address.
pub const MAX_VOCAB: usize = 64;

/// Bitset over token ids; used for the per-phase action supports.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSet(u64);

impl TokenSet {
    pub const EMPTY: TokenSet = TokenSet(0);

    pub fn all(size: usize) -> Self {
        debug_assert!(size <= MAX_VOCAB);
        if size == MAX_VOCAB {
            TokenSet(u64::MAX)
        } else {
            TokenSet((1u64 << size) - 1)
        }
    }

    pub fn single(token: TokenId) -> Self {
        TokenSet(1u64 << token.0)
    }

    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a TokenId>) -> Self {
        tokens
            .into_iter()
            .fold(TokenSet::EMPTY, |set, t| set.with(*t))
    }

    pub fn with(self, token: TokenId) -> Self {
        TokenSet(self.0 | (1u64 << token.0))
    }

    pub fn without(self, token: TokenId) -> Self {
        TokenSet(self.0 & !(1u64 << token.0))
    }

    pub fn contains(self, token: TokenId) -> bool {
        token.index() < MAX_VOCAB && self.0 & (1u64 << token.0) != 0
    }

    pub fn contains_index(self, index: usize) -> bool {
        index < MAX_VOCAB && self.0 & (1u64 << index) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = TokenId> {
        (0..MAX_VOCAB as u16)
            .filter(move |i| self.0 & (1u64 << i) != 0)
            .map(TokenId)
    }
}

/// Vocabulary partitioned into answer, high-entropy (separator), filler,
/// think-end and end-of-sequence tokens.
///
/// The standard layout built by [`Vocab::new`] places answer tokens first,
/// then high-entropy tokens, fillers, `</think>` and `<eos>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    answer_tokens: Vec<TokenId>,
    high_entropy_tokens: Vec<TokenId>,
    filler_tokens: Vec<TokenId>,
    think_end: TokenId,
    eos: TokenId,
    classes: Vec<TokenClass>,
}

impl Vocab {
    pub fn new(n_answer: usize, n_high: usize, n_filler: usize) -> Result<Self> {
        let ids = |start: usize, n: usize| (start..start + n).map(|i| TokenId(i as u16)).collect();
        let answer = ids(0, n_answer);
        let high = ids(n_answer, n_high);
        let filler = ids(n_answer + n_high, n_filler);
        let think_end = TokenId((n_answer + n_high + n_filler) as u16);
        let eos = TokenId(think_end.0 + 1);
        Self::from_classes(answer, high, filler, think_end, eos)
    }

    pub fn from_classes(
        answer_tokens: Vec<TokenId>,
        high_entropy_tokens: Vec<TokenId>,
        filler_tokens: Vec<TokenId>,
        think_end: TokenId,
        eos: TokenId,
    ) -> Result<Self> {
        if answer_tokens.len() < 2 {
            return Err(Error::Vocab("at least 2 answer tokens required".into()));
        }
        if high_entropy_tokens.is_empty() {
            return Err(Error::Vocab("at least 1 high-entropy token required".into()));
        }
        let size = answer_tokens.len() + high_entropy_tokens.len() + filler_tokens.len() + 2;
        if size > MAX_VOCAB {
            return Err(Error::Vocab(format!("vocabulary size {size} exceeds {MAX_VOCAB}")));
        }
        let mut classes: Vec<Option<TokenClass>> = vec![None; size];
        let mut assign = |t: TokenId, class: TokenClass| -> Result<()> {
            let slot = classes
                .get_mut(t.index())
                .ok_or_else(|| Error::Vocab(format!("token id {t} out of range 0..{size}")))?;
            if slot.is_some() {
                return Err(Error::Vocab(format!("token id {t} assigned to two classes")));
            }
            *slot = Some(class);
            Ok(())
        };
        for &t in &answer_tokens {
            assign(t, TokenClass::Answer)?;
        }
        for &t in &high_entropy_tokens {
            assign(t, TokenClass::HighEntropy)?;
        }
        for &t in &filler_tokens {
            assign(t, TokenClass::Filler)?;
        }
        assign(think_end, TokenClass::ThinkEnd)?;
        assign(eos, TokenClass::Eos)?;
        let classes = classes
            .into_iter()
            .map(|c| c.expect("every slot assigned: sizes add up"))
            .collect();
        Ok(Vocab {
            answer_tokens,
            high_entropy_tokens,
            filler_tokens,
            think_end,
            eos,
            classes,
        })
    }

    pub fn size(&self) -> usize {
        self.classes.len()
    }

    pub fn answer_tokens(&self) -> &[TokenId] {
        &self.answer_tokens
    }

    pub fn high_entropy_tokens(&self) -> &[TokenId] {
        &self.high_entropy_tokens
    }

    pub fn filler_tokens(&self) -> &[TokenId] {
        &self.filler_tokens
    }

    pub fn think_end(&self) -> TokenId {
        self.think_end
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn class_of(&self, token: TokenId) -> TokenClass {
        self.classes[token.index()]
    }

    pub fn is_answer(&self, token: TokenId) -> bool {
        self.class_of(token) == TokenClass::Answer
    }

    pub fn is_high_entropy(&self, token: TokenId) -> bool {
        self.class_of(token) == TokenClass::HighEntropy
    }

    /// Tokens the policy may emit while thinking: everything but `<eos>`.
    pub fn thinking_support(&self) -> TokenSet {
        TokenSet::all(self.size()).without(self.eos)
    }

    /// Tokens the policy may emit right after `</think>`.
    pub fn answer_support(&self) -> TokenSet {
        TokenSet::from_tokens(&self.answer_tokens)
    }

    /// Answer token with the given ordinal (`A<k>`).
    pub fn answer(&self, k: usize) -> TokenId {
        self.answer_tokens[k]
    }

    pub fn high(&self, k: usize) -> TokenId {
        self.high_entropy_tokens[k]
    }

    pub fn filler(&self, k: usize) -> TokenId {
        self.filler_tokens[k]
    }

    /// Human-readable name: `A<k>`, `H<k>`, `F<k>`, `</think>` or `<eos>`.
    pub fn name(&self, token: TokenId) -> String {
        let ordinal = |list: &[TokenId]| list.iter().position(|&t| t == token).unwrap_or(0);
        match self.class_of(token) {
            TokenClass::Answer => format!("A{}", ordinal(&self.answer_tokens)),
            TokenClass::HighEntropy => format!("H{}", ordinal(&self.high_entropy_tokens)),
            TokenClass::Filler => format!("F{}", ordinal(&self.filler_tokens)),
            TokenClass::ThinkEnd => "</think>".to_string(),
            TokenClass::Eos => "<eos>".to_string(),
        }
    }

    pub fn parse_name(&self, name: &str) -> Option<TokenId> {
        match name {
            "</think>" => return Some(self.think_end),
            "<eos>" => return Some(self.eos),
            _ => {}
        }
        let (prefix, rest) = name.split_at(1.min(name.len()));
        let k: usize = rest.parse().ok()?;
        let list = match prefix {
            "A" => &self.answer_tokens,
            "H" => &self.high_entropy_tokens,
            "F" => &self.filler_tokens,
            _ => return None,
        };
        list.get(k).copied()
    }

    /// Renders a token sequence as space-separated names.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.name(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parses a space-separated list of token names.
    pub fn parse_sequence(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| {
                self.parse_name(w)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown token name `{w}`")))
            })
            .collect()
    }
}
