use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Corpus, Provenance, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Padded id matrices for one batch.
///
/// `trg_ids` rows are `<s> w1 .. wn </s>` followed by padding, so the matrix
/// is two columns wider than the longest target sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub src_len: usize,
    pub trg_len: usize,
    pub src_ids: Vec<usize>,
    pub trg_ids: Vec<usize>,
    pub src_pad: Vec<bool>,
    pub trg_pad: Vec<bool>,
    pub provenance: Vec<Provenance>,
    pub pair_ids: Vec<u64>,
    /// Junk-corrupted target word positions per row (0-based word index).
    pub corrupted: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EncodedPair {
    pub src: Vec<usize>,
    pub trg: Vec<usize>,
    pub provenance: Provenance,
    pub id: u64,
    pub corrupted: Vec<usize>,
}

impl EncodedPair {
    pub(crate) fn encode(corpus: &Corpus) -> Vec<EncodedPair> {
        corpus
            .pairs
            .iter()
            .map(|p| EncodedPair {
                src: corpus.encode_source(&p.source),
                trg: corpus.encode_target(&p.target),
                provenance: p.provenance,
                id: p.id,
                corrupted: p.corrupted.clone(),
            })
            .collect()
    }
}

impl TokenBatch {
    /// Pads raw id sequences (targets without begin/end markers).
    pub fn from_ids(src: &[Vec<usize>], trg: &[Vec<usize>]) -> Result<Self> {
        if src.len() != trg.len() {
            return Err(Error::Data(format!(
                "{} source rows vs {} target rows",
                src.len(),
                trg.len()
            )));
        }
        let rows: Vec<EncodedPair> = src
            .iter()
            .zip(trg)
            .enumerate()
            .map(|(i, (s, t))| EncodedPair {
                src: s.clone(),
                trg: t.clone(),
                provenance: Provenance::None,
                id: i as u64,
                corrupted: Vec::new(),
            })
            .collect();
        let refs: Vec<&EncodedPair> = rows.iter().collect();
        Self::build(&refs)
    }

    pub fn from_corpus(corpus: &Corpus, indices: &[usize]) -> Result<Self> {
        let encoded = EncodedPair::encode(&corpus.with_pairs(
            indices.iter().map(|&i| corpus.pairs[i].clone()).collect(),
        ));
        let refs: Vec<&EncodedPair> = encoded.iter().collect();
        Self::build(&refs)
    }

    pub(crate) fn build(rows: &[&EncodedPair]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let batch = rows.len();
        let src_len = rows.iter().map(|r| r.src.len()).max().unwrap_or(0).max(1);
        let trg_len = rows.iter().map(|r| r.trg.len()).max().unwrap_or(0) + 2;
        let mut out = TokenBatch {
            batch,
            src_len,
            trg_len,
            src_ids: vec![PAD; batch * src_len],
            trg_ids: vec![PAD; batch * trg_len],
            src_pad: vec![true; batch * src_len],
            trg_pad: vec![true; batch * trg_len],
            provenance: Vec::with_capacity(batch),
            pair_ids: Vec::with_capacity(batch),
            corrupted: Vec::with_capacity(batch),
        };
        for (b, row) in rows.iter().enumerate() {
            for (j, &id) in row.src.iter().enumerate() {
                out.src_ids[b * src_len + j] = id;
                out.src_pad[b * src_len + j] = false;
            }
            let base = b * trg_len;
            out.trg_ids[base] = BOS;
            out.trg_pad[base] = false;
            for (j, &id) in row.trg.iter().enumerate() {
                out.trg_ids[base + 1 + j] = id;
                out.trg_pad[base + 1 + j] = false;
            }
            out.trg_ids[base + 1 + row.trg.len()] = EOS;
            out.trg_pad[base + 1 + row.trg.len()] = false;
            out.provenance.push(row.provenance);
            out.pair_ids.push(row.id);
            out.corrupted.push(row.corrupted.clone());
        }
        Ok(out)
    }

    /// Width of the per-token loss grid (target positions after `<s>`).
    pub fn loss_width(&self) -> usize {
        self.trg_len - 1
    }

    /// Pad mask of the loss grid `[batch, loss_width]`.
    pub fn loss_pad(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.batch * self.loss_width());
        for b in 0..self.batch {
            out.extend_from_slice(&self.trg_pad[b * self.trg_len + 1..(b + 1) * self.trg_len]);
        }
        out
    }

    /// Number of target words (excluding `</s>`) in a row.
    pub fn target_words(&self, row: usize) -> usize {
        let r = &self.trg_pad[row * self.trg_len..(row + 1) * self.trg_len];
        r.iter().filter(|p| !**p).count() - 2
    }

    pub fn src_row(&self, row: usize) -> Vec<usize> {
        (0..self.src_len)
            .filter(|&j| !self.src_pad[row * self.src_len + j])
            .map(|j| self.src_ids[row * self.src_len + j])
            .collect()
    }

    /// Target word ids of a row (without begin/end markers).
    pub fn trg_row(&self, row: usize) -> Vec<usize> {
        let n = self.target_words(row);
        self.trg_ids[row * self.trg_len + 1..row * self.trg_len + 1 + n].to_vec()
    }

    pub fn validate(&self, src_vocab: usize, trg_vocab: usize) -> Result<()> {
        let bad_src = self
            .src_ids
            .iter()
            .zip(&self.src_pad)
            .any(|(&i, &p)| !p && i >= src_vocab);
        let bad_trg = self
            .trg_ids
            .iter()
            .zip(&self.trg_pad)
            .any(|(&i, &p)| !p && i >= trg_vocab);
        if bad_src || bad_trg {
            return Err(Error::Data(format!(
                "batch holds ids outside vocabularies of {src_vocab}/{trg_vocab}"
            )));
        }
        Ok(())
    }
}

/// Position inside an infinite batch stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StreamPosition {
    pub epoch: u64,
    pub cursor: usize,
}

/// Endless shuffled batches over a filtered corpus, reshuffled every epoch.
/// The final batch of an epoch may be smaller than `batch_size`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    pairs: Vec<EncodedPair>,
    batch_size: usize,
    seed: u64,
    position: StreamPosition,
    order: Vec<usize>,
}

pub fn make_batches(
    corpus: &Corpus,
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<BatchStream> {
    if batch_size == 0 {
        return Err(Error::Config(vec!["batch_size must be at least 1".into()]));
    }
    let pairs: Vec<EncodedPair> = EncodedPair::encode(corpus)
        .into_iter()
        .filter(|p| p.src.len() <= max_len && p.trg.len() <= max_len)
        .collect();
    if pairs.is_empty() {
        return Err(Error::Data(format!(
            "no pairs left after the length filter (max_len {max_len})"
        )));
    }
    let mut s = BatchStream {
        pairs,
        batch_size,
        seed,
        position: StreamPosition::default(),
        order: Vec::new(),
    };
    s.reshuffle();
    Ok(s)
}

impl BatchStream {
    fn reshuffle(&mut self) {
        self.order = (0..self.pairs.len()).collect();
        self.order
            .shuffle(&mut stream(self.seed, Purpose::Shuffle, self.position.epoch));
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn position(&self) -> StreamPosition {
        self.position
    }

    pub fn seek(&mut self, position: StreamPosition) {
        let reshuffle = position.epoch != self.position.epoch;
        self.position = position;
        if reshuffle {
            self.reshuffle();
        }
    }

    pub fn next_batch(&mut self) -> TokenBatch {
        if self.position.cursor >= self.order.len() {
            self.position = StreamPosition {
                epoch: self.position.epoch + 1,
                cursor: 0,
            };
            self.reshuffle();
        }
        let start = self.position.cursor;
        let end = (start + self.batch_size).min(self.order.len());
        let rows: Vec<&EncodedPair> = self.order[start..end]
            .iter()
            .map(|&i| &self.pairs[i])
            .collect();
        self.position.cursor = end;
        TokenBatch::build(&rows).expect("stream batches are non-empty")
    }
}

impl Iterator for BatchStream {
    type Item = TokenBatch;

    fn next(&mut self) -> Option<TokenBatch> {
        Some(self.next_batch())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SentencePair;

    fn pair(id: u64, src: usize, trg: usize) -> SentencePair {
        SentencePair {
            id,
            source: (0..src).map(|i| format!("s{i}")).collect(),
            target: (0..trg).map(|i| format!("t{i}")).collect(),
            provenance: Provenance::Clean,
            corrupted: vec![],
        }
    }

    #[test]
    fn padding_layout() {
        let corpus = Corpus::from_pairs(vec![pair(0, 2, 3), pair(1, 4, 5)]);
        let b = TokenBatch::from_corpus(&corpus, &[0, 1]).unwrap();
        assert_eq!(b.trg_len, 7);
        assert_eq!(b.src_len, 4);
        assert_eq!(&b.trg_pad[..7], &[false, false, false, false, false, true, true]);
        assert_eq!(b.trg_ids[0], BOS);
        assert_eq!(b.trg_ids[4], EOS);
        assert_eq!(b.target_words(0), 3);
        assert_eq!(b.loss_width(), 6);
        assert_eq!(b.loss_pad()[..6], [false, false, false, false, true, true]);
        assert_eq!(b.src_row(0).len(), 2);
    }

    #[test]
    fn length_filter_and_errors() {
        let corpus = Corpus::from_pairs(vec![pair(0, 3, 3), pair(1, 6, 2)]);
        assert!(make_batches(&corpus, 2, 2, 0).is_err());
        assert!(make_batches(&corpus, 0, 10, 0).is_err());
        let s = make_batches(&corpus, 2, 4, 0).unwrap();
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn stream_is_deterministic_and_resumable() {
        let corpus = Corpus::from_pairs((0..10).map(|i| pair(i, 1 + i as usize % 3, 2)).collect());
        let a: Vec<_> = make_batches(&corpus, 3, 10, 5).unwrap().take(9).collect();
        let b: Vec<_> = make_batches(&corpus, 3, 10, 5).unwrap().take(9).collect();
        assert_eq!(a, b);
        // epoch of 10 pairs in batches of 3 -> sizes 3,3,3,1
        assert_eq!(a[3].batch, 1);
        let mut s = make_batches(&corpus, 3, 10, 5).unwrap();
        for _ in 0..5 {
            s.next_batch();
        }
        let pos = s.position();
        let mut t = make_batches(&corpus, 3, 10, 5).unwrap();
        t.seek(pos);
        assert_eq!(t.next_batch(), a[5]);
    }
}
