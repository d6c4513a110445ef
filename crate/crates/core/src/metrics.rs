//! Translation quality metrics: corpus BLEU and greedy token accuracy.

use std::collections::HashMap;

use crate::autodiff::ParameterSet;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::model::{greedy_decode, ModelConfig};

const MAX_ORDER: usize = 4;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level 4-gram BLEU on a 0..100 scale. With `smooth`, precisions of
/// order 2 and above use add-one smoothing.
pub fn corpus_bleu<T: AsRef<str>>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
    smooth: bool,
) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::Data("no hypotheses to score".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        let (m, t) = if smooth && n > 0 {
            (matches[n] + 1, totals[n] + 1)
        } else {
            (matches[n], totals[n])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

/// Fraction of reference positions whose hypothesis token matches, after
/// truncating or padding each hypothesis to its reference length. Empty
/// references are skipped.
pub fn token_accuracy_of(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        total += r.len();
        hit += r.iter().zip(h).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return Err(Error::Data("no reference tokens".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Greedy-decoded translations of every source in `corpus`, as target ids.
pub fn translate(
    params: &ParameterSet,
    config: &ModelConfig,
    corpus: &Corpus,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let sources: Vec<Vec<usize>> = corpus
        .pairs
        .iter()
        .map(|p| corpus.encode_source(&p.source))
        .collect();
    greedy_decode(params, config, &sources, max_len)
}

/// Greedy token accuracy of the model on `corpus`.
pub fn token_accuracy(params: &ParameterSet, config: &ModelConfig, corpus: &Corpus) -> Result<f64> {
    let refs: Vec<Vec<usize>> = corpus
        .pairs
        .iter()
        .map(|p| corpus.encode_target(&p.target))
        .collect();
    let max_len = refs.iter().map(Vec::len).max().unwrap_or(0);
    let hyps = translate(params, config, corpus, max_len)?;
    token_accuracy_of(&hyps, &refs)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Bleu {
    pub bleu: f64,
    pub bleu_unsmoothed: f64,
}

/// Smoothed and unsmoothed BLEU of greedy translations of `corpus`.
pub fn bleu(params: &ParameterSet, config: &ModelConfig, corpus: &Corpus) -> Result<Bleu> {
    let refs: Vec<Vec<String>> = corpus.pairs.iter().map(|p| p.target.clone()).collect();
    let max_len = refs.iter().map(Vec::len).max().unwrap_or(0) + 5;
    let hyps: Vec<Vec<String>> = translate(params, config, corpus, max_len)?
        .iter()
        .map(|ids| corpus.decode_target(ids))
        .collect();
    Ok(Bleu {
        bleu: corpus_bleu(&hyps, &refs, true)?,
        bleu_unsmoothed: corpus_bleu(&hyps, &refs, false)?,
    })
}
