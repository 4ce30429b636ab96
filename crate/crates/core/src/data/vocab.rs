use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::VideoRecord;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const N_RESERVED: usize = 4;
const RESERVED: [&str; N_RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Token table with ids `0..4` reserved for PAD, BOS, EOS and UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds from an id-ordered token list whose first four entries are the
    /// reserved markers.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < N_RESERVED || tokens[..N_RESERVED] != RESERVED {
            return Err("vocabulary must start with <pad> <bos> <eos> <unk>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(format!("duplicate token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Counts caption tokens and keeps those seen at least `min_count`
    /// times, ordered by count (descending) then lexicographically.
    pub fn build(records: &[VideoRecord], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for ev in records.iter().flat_map(|r| &r.events) {
            for tok in tokenize(&ev.caption) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved words in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[N_RESERVED..]
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or(RESERVED[UNK as usize], String::as_str)
    }

    /// Caption ids without BOS/EOS.
    pub fn encode(&self, caption: &str) -> Vec<u32> {
        tokenize(caption).iter().map(|t| self.id(t)).collect()
    }

    /// `[BOS, caption..., EOS]`.
    pub fn encode_framed(&self, caption: &str) -> Vec<u32> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(caption));
        ids.push(EOS);
        ids
    }

    /// Joins word tokens, skipping reserved ids and stopping at EOS.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i as usize >= N_RESERVED || i == UNK)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, String> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
