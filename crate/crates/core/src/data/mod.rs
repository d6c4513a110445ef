//! Parallel corpora: synthetic generation, noise injection, batching and I/O.

mod batch;
mod synth;
mod tsv;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{make_batches, BatchStream, StreamPosition, TokenBatch};
pub use synth::{
    cipher_target, generate_cipher_corpus, generate_splits, inject_noise, split_clean, token_name, Cipher,
    GenSpec, NoiseSpec, Splits, JUNK_FRACTION,
};
pub use tsv::{load_data_dir, load_tsv, load_vocab, save_data_dir, save_tsv, save_vocab};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: usize = 4;

/// Where a sentence pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clean,
    Copied,
    Misaligned,
    Junk,
    /// No label available.
    None,
}

impl Provenance {
    pub const ALL: [Provenance; 5] = [
        Provenance::Clean,
        Provenance::Copied,
        Provenance::Misaligned,
        Provenance::Junk,
        Provenance::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Clean => "clean",
            Provenance::Copied => "copied",
            Provenance::Misaligned => "misaligned",
            Provenance::Junk => "junk",
            Provenance::None => "none",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Provenance::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Data(format!("unknown provenance label {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: u64,
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
    /// Target positions overwritten by junk corruption.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corrupted: Vec<usize>,
}

impl SentencePair {
    pub fn validate(&self) -> Result<()> {
        if self.source.is_empty() || self.target.is_empty() {
            return Err(Error::Data(format!("pair {} has an empty side", self.id)));
        }
        if self.provenance == Provenance::Copied && self.source != self.target {
            return Err(Error::Data(format!(
                "pair {} is labelled copied but target differs from source",
                self.id
            )));
        }
        Ok(())
    }
}

/// Token/id mapping. Ids 0..4 are reserved for pad, begin, end and unknown.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// Adds a token if absent and returns its id.
    pub fn add(&mut self, token: impl Into<String>) -> usize {
        let token = token.into();
        if let Some(&id) = self.index.get(&token) {
            return id;
        }
        let id = RESERVED + self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        id
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        match id {
            PAD => "<pad>",
            BOS => "<s>",
            EOS => "</s>",
            UNK => "<unk>",
            _ => self
                .tokens
                .get(id - RESERVED)
                .map_or("<unk>", String::as_str),
        }
    }

    /// Total id space including the reserved ids.
    pub fn size(&self) -> usize {
        RESERVED + self.tokens.len()
    }

    /// Non-reserved tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub src_vocab: Vocab,
    pub trg_vocab: Vocab,
}

impl Corpus {
    /// Builds a corpus whose vocabularies list tokens in first-seen order.
    pub fn from_pairs(pairs: Vec<SentencePair>) -> Self {
        let mut src_vocab = Vocab::new();
        let mut trg_vocab = Vocab::new();
        for p in &pairs {
            p.source.iter().for_each(|t| {
                src_vocab.add(t.as_str());
            });
            p.target.iter().for_each(|t| {
                trg_vocab.add(t.as_str());
            });
        }
        Corpus {
            pairs,
            src_vocab,
            trg_vocab,
        }
    }

    pub fn with_pairs(&self, pairs: Vec<SentencePair>) -> Corpus {
        Corpus {
            pairs,
            src_vocab: self.src_vocab.clone(),
            trg_vocab: self.trg_vocab.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.provenance == provenance)
            .count()
    }

    pub fn encode_source(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.src_vocab.id(t)).collect()
    }

    pub fn encode_target(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.trg_vocab.id(t)).collect()
    }

    pub fn decode_target(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.trg_vocab.token(i).to_string())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_the_first_four_ids() {
        let v = Vocab::from_tokens(["a", "b", "a"]);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.size(), 6);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.token(5), "b");
    }

    #[test]
    fn provenance_labels_round_trip() {
        for p in Provenance::ALL {
            assert_eq!(p.as_str().parse::<Provenance>().unwrap(), p);
        }
        assert!("noisy".parse::<Provenance>().is_err());
    }

    #[test]
    fn copied_pairs_must_match() {
        let p = SentencePair {
            id: 0,
            source: vec!["a".into()],
            target: vec!["b".into()],
            provenance: Provenance::Copied,
            corrupted: vec![],
        };
        assert!(p.validate().is_err());
    }
}
