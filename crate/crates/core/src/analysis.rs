//! Corpus-level masking statistics, word profiles, annotated examples and the
//! report bundle built from them.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::align::{align, clean_gradient, AlignmentResult, Granularity};
use crate::autodiff::{FlatGradient, ParameterSet};
use crate::data::{Corpus, Provenance, TokenBatch};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const MASK_OPEN: char = '⟦';
pub const MASK_CLOSE: char = '⟧';

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCount {
    pub masked: u64,
    pub seen: u64,
}

impl MaskCount {
    fn add(&mut self, masked: bool) {
        self.seen += 1;
        self.masked += u64::from(masked);
    }

    pub fn rate(&self) -> f64 {
        if self.seen == 0 {
            0.0
        } else {
            self.masked as f64 / self.seen as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub provenance: Provenance,
    pub unmasked_fraction: f64,
}

/// Masking statistics over target words (the end-of-sentence slot is not a
/// word and is left out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingStats {
    pub granularity: Granularity,
    pub n_sentences: usize,
    pub per_sentence: BTreeMap<u64, SentenceScore>,
    pub per_word: BTreeMap<String, MaskCount>,
    pub per_provenance_mean: BTreeMap<Provenance, f64>,
    /// Junk sentences only: positions overwritten by the generator.
    pub corrupted_positions: MaskCount,
    /// Junk sentences only: positions left intact.
    pub intact_positions: MaskCount,
}

impl MaskingStats {
    fn new(granularity: Granularity) -> Self {
        MaskingStats {
            granularity,
            n_sentences: 0,
            per_sentence: BTreeMap::new(),
            per_word: BTreeMap::new(),
            per_provenance_mean: BTreeMap::new(),
            corrupted_positions: MaskCount::default(),
            intact_positions: MaskCount::default(),
        }
    }

    /// Adds one sentence given its target words and per-word mask.
    pub fn add_sentence(
        &mut self,
        id: u64,
        provenance: Provenance,
        words: &[String],
        unmasked: &[bool],
        corrupted: &[usize],
    ) -> Result<()> {
        if words.len() != unmasked.len() || words.is_empty() {
            return Err(Error::Data(format!(
                "sentence {id}: {} words vs {} mask entries",
                words.len(),
                unmasked.len()
            )));
        }
        let kept = unmasked.iter().filter(|m| **m).count();
        let fraction = kept as f64 / words.len() as f64;
        for (j, (w, &m)) in words.iter().zip(unmasked).enumerate() {
            self.per_word.entry(w.clone()).or_default().add(!m);
            if provenance == Provenance::Junk {
                if corrupted.contains(&j) {
                    self.corrupted_positions.add(!m);
                } else {
                    self.intact_positions.add(!m);
                }
            }
        }
        self.per_sentence.insert(
            id,
            SentenceScore {
                provenance,
                unmasked_fraction: fraction,
            },
        );
        self.n_sentences = self.per_sentence.len();
        self.refresh_means();
        Ok(())
    }

    fn refresh_means(&mut self) {
        let mut acc: BTreeMap<Provenance, (f64, usize)> = BTreeMap::new();
        for s in self.per_sentence.values() {
            let e = acc.entry(s.provenance).or_default();
            e.0 += s.unmasked_fraction;
            e.1 += 1;
        }
        self.per_provenance_mean = acc.into_iter().map(|(p, (s, n))| (p, s / n as f64)).collect();
    }

    pub fn mean_unmasked(&self) -> f64 {
        if self.per_sentence.is_empty() {
            return 0.0;
        }
        self.per_sentence.values().map(|s| s.unmasked_fraction).sum::<f64>() / self.per_sentence.len() as f64
    }
}

/// Gradient of the mean sentence loss over every pair of `clean`, built from
/// batch gradients weighted by batch size.
pub fn full_clean_gradient(
    params: &ParameterSet,
    model: &ModelConfig,
    clean: &Corpus,
    batch_size: usize,
) -> Result<FlatGradient> {
    if clean.is_empty() {
        return Err(Error::Data("empty clean split".into()));
    }
    let n = clean.len();
    let mut total = FlatGradient::zeros(params.layout());
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_corpus(clean, chunk)?;
        let g = clean_gradient(model, params, &batch)?;
        total.axpy(chunk.len() as f64 / n as f64, &g)?;
    }
    Ok(total)
}

/// Per-word unmasked flags of each row of an alignment result.
fn word_masks(result: &AlignmentResult, batch: &TokenBatch) -> Vec<Vec<bool>> {
    (0..batch.batch)
        .map(|r| {
            let n = batch.target_words(r);
            match result.granularity {
                Granularity::Sentence => vec![result.mask[r]; n],
                Granularity::Word => result.row_mask(r)[..n].to_vec(),
            }
        })
        .collect()
}

/// Aligns every pair of `subset` against the clean gradient of the whole
/// `clean` split and aggregates the masks.
pub fn score_corpus(
    params: &ParameterSet,
    model: &ModelConfig,
    subset: &Corpus,
    clean: &Corpus,
    granularity: Granularity,
    batch_size: usize,
) -> Result<MaskingStats> {
    if subset.is_empty() {
        return Err(Error::Data("empty subset to score".into()));
    }
    let cg = full_clean_gradient(params, model, clean, batch_size)?;
    let mut stats = MaskingStats::new(granularity);
    let idx: Vec<usize> = (0..subset.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_corpus(subset, chunk)?;
        let result = align(model, params, &batch, &cg, granularity)?;
        for (r, unmasked) in word_masks(&result, &batch).into_iter().enumerate() {
            let pair = &subset.pairs[chunk[r]];
            stats.add_sentence(pair.id, pair.provenance, &pair.target, &unmasked, &pair.corrupted)?;
        }
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProvenanceRow {
    pub provenance: String,
    pub n_sentences: usize,
    pub mean_unmasked_fraction: f64,
}

/// Mean unmasked fraction per provenance present, followed by an `all` row.
pub fn provenance_comparison(stats: &MaskingStats) -> Vec<ProvenanceRow> {
    let mut rows: Vec<ProvenanceRow> = Provenance::ALL
        .iter()
        .filter_map(|p| {
            let mean = *stats.per_provenance_mean.get(p)?;
            Some(ProvenanceRow {
                provenance: p.as_str().to_string(),
                n_sentences: stats.per_sentence.values().filter(|s| s.provenance == *p).count(),
                mean_unmasked_fraction: mean,
            })
        })
        .collect();
    if !stats.per_sentence.is_empty() {
        rows.push(ProvenanceRow {
            provenance: "all".into(),
            n_sentences: stats.n_sentences,
            mean_unmasked_fraction: stats.mean_unmasked(),
        });
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordMaskProfile {
    pub word: String,
    pub mask_rate: f64,
    pub is_alphabetical: bool,
    pub count: u64,
}

pub fn is_alphabetical(word: &str) -> bool {
    !word.is_empty() && word.chars().all(char::is_alphabetic)
}

/// Percentage (0..100) of alphabetical words in a list.
pub fn alphabetical_percentage(words: &[WordMaskProfile]) -> f64 {
    if words.is_empty() {
        return 0.0;
    }
    100.0 * words.iter().filter(|w| w.is_alphabetical).count() as f64 / words.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremeProfiles {
    /// Highest mask rates first.
    pub top: Vec<WordMaskProfile>,
    /// Lowest mask rates first.
    pub bottom: Vec<WordMaskProfile>,
    pub eligible: usize,
    pub warning: Option<String>,
}

/// The `k` most and least masked words among those seen at least
/// `min_count` times. Ranking is by mask rate, then by higher count, then
/// lexicographically.
pub fn extreme_word_profiles(stats: &MaskingStats, k: usize, min_count: u64) -> Result<ExtremeProfiles> {
    if k == 0 {
        return Err(Error::Config(vec!["top-k must be at least 1".into()]));
    }
    let mut eligible: Vec<WordMaskProfile> = stats
        .per_word
        .iter()
        .filter(|(_, c)| c.seen >= min_count)
        .map(|(w, c)| WordMaskProfile {
            word: w.clone(),
            mask_rate: c.rate(),
            is_alphabetical: is_alphabetical(w),
            count: c.seen,
        })
        .collect();
    eligible.sort_by(|a, b| {
        b.mask_rate
            .total_cmp(&a.mask_rate)
            .then(b.count.cmp(&a.count))
            .then(a.word.cmp(&b.word))
    });
    let n = eligible.len();
    let warning = (n < k).then(|| {
        let msg = format!("only {n} words seen at least {min_count} times; requested {k}");
        warn!("{msg}");
        msg
    });
    let take = k.min(n);
    let top = eligible[..take].to_vec();
    let bottom = eligible[n - take..].iter().rev().cloned().collect();
    Ok(ExtremeProfiles {
        top,
        bottom,
        eligible: n,
        warning,
    })
}

/// Renders target words, wrapping masked ones in delimiters.
pub fn render_masked(words: &[String], unmasked: &[bool]) -> String {
    words
        .iter()
        .zip(unmasked)
        .map(|(w, &keep)| {
            if keep {
                w.clone()
            } else {
                format!("{MASK_OPEN}{w}{MASK_CLOSE}")
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Word-level masks for the first `n` pairs, one annotated block per pair.
pub fn dump_masked_examples(
    params: &ParameterSet,
    model: &ModelConfig,
    pairs: &Corpus,
    clean: &Corpus,
    n: usize,
    batch_size: usize,
) -> Result<Vec<String>> {
    let n = n.min(pairs.len());
    if n == 0 {
        return Ok(Vec::new());
    }
    let cg = full_clean_gradient(params, model, clean, batch_size)?;
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let batch = TokenBatch::from_corpus(pairs, chunk)?;
        let result = align(model, params, &batch, &cg, Granularity::Word)?;
        for (r, unmasked) in word_masks(&result, &batch).into_iter().enumerate() {
            let p = &pairs.pairs[chunk[r]];
            let mut block = format!(
                "#{} [{}]\nsrc: {}\ntrg: {}\n",
                p.id,
                p.provenance,
                p.source.join(" "),
                render_masked(&p.target, &unmasked)
            );
            if !p.corrupted.is_empty() {
                let pos: Vec<String> = p.corrupted.iter().map(usize::to_string).collect();
                block.push_str(&format!("corrupted: {}\n", pos.join(",")));
            }
            out.push(block);
        }
    }
    Ok(out)
}

fn write_csv<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("csv: {other:?}")),
    }
}

#[derive(Serialize)]
struct ProfileRow<'a> {
    list: &'a str,
    rank: usize,
    word: &'a str,
    count: u64,
    mask_rate: f64,
    is_alphabetical: bool,
}

#[derive(Serialize)]
struct Point<X: Serialize> {
    x: X,
    y: f64,
}

/// Writes `stats.json`, `provenance.csv`, `word_profiles.csv`,
/// `examples.txt` and `plotdata/*.csv` into `dir`.
pub fn write_report(
    dir: &Path,
    stats: &MaskingStats,
    profiles: &ExtremeProfiles,
    examples: &[String],
) -> Result<()> {
    fs::create_dir_all(dir.join("plotdata"))?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(stats)?)?;
    let prov = provenance_comparison(stats);
    write_csv(&dir.join("provenance.csv"), &prov)?;
    let rows = profiles
        .top
        .iter()
        .enumerate()
        .map(|(i, p)| ("top", i, p))
        .chain(profiles.bottom.iter().enumerate().map(|(i, p)| ("bottom", i, p)))
        .map(|(list, i, p)| ProfileRow {
            list,
            rank: i + 1,
            word: &p.word,
            count: p.count,
            mask_rate: p.mask_rate,
            is_alphabetical: p.is_alphabetical,
        });
    write_csv(&dir.join("word_profiles.csv"), rows)?;
    fs::write(dir.join("examples.txt"), examples.join("\n"))?;

    let plot = dir.join("plotdata");
    write_csv(
        &plot.join("unmasked_by_provenance.csv"),
        prov.iter().map(|r| Point {
            x: r.provenance.as_str(),
            y: r.mean_unmasked_fraction,
        }),
    )?;
    write_csv(
        &plot.join("alphabetical_percentage.csv"),
        [
            Point {
                x: "top",
                y: alphabetical_percentage(&profiles.top),
            },
            Point {
                x: "bottom",
                y: alphabetical_percentage(&profiles.bottom),
            },
        ],
    )?;
    let mut hist = [0usize; 10];
    for s in stats.per_sentence.values() {
        hist[((s.unmasked_fraction * 10.0) as usize).min(9)] += 1;
    }
    write_csv(
        &plot.join("unmasked_fraction_histogram.csv"),
        hist.iter().enumerate().map(|(i, &c)| Point {
            x: format!("{:.1}", i as f64 / 10.0),
            y: c as f64,
        }),
    )?;
    write_csv(
        &plot.join("junk_position_mask_rate.csv"),
        [
            Point {
                x: "corrupted",
                y: stats.corrupted_positions.rate(),
            },
            Point {
                x: "intact",
                y: stats.intact_positions.rate(),
            },
        ],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::tests::tiny;
    use crate::data::{generate_cipher_corpus, inject_noise, NoiseSpec};
    use crate::model::init_model;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn unmasked_fraction_and_word_rates() {
        let mut st = MaskingStats::new(Granularity::Word);
        st.add_sentence(0, Provenance::Clean, &words("a b c d"), &[true, false, true, true], &[])
            .unwrap();
        assert_eq!(st.per_sentence[&0].unmasked_fraction, 0.75);
        for i in 0..10u64 {
            st.add_sentence(10 + i, Provenance::Copied, &words("w"), &[i >= 4], &[]).unwrap();
        }
        assert_eq!(st.per_word["w"].rate(), 0.4);
        assert!(st.add_sentence(99, Provenance::Clean, &words("a b"), &[true], &[]).is_err());
    }

    #[test]
    fn provenance_table_includes_all_row() {
        let mut st = MaskingStats::new(Granularity::Word);
        st.add_sentence(0, Provenance::Clean, &words("a"), &[true], &[]).unwrap();
        let rows = provenance_comparison(&st);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].provenance, "all");
        st.add_sentence(1, Provenance::Copied, &words("a"), &[false], &[]).unwrap();
        let rows = provenance_comparison(&st);
        assert_eq!(
            rows.iter().map(|r| r.mean_unmasked_fraction).collect::<Vec<_>>(),
            vec![1.0, 0.0, 0.5]
        );
    }

    #[test]
    fn junk_positions_are_split_by_corruption() {
        let mut st = MaskingStats::new(Granularity::Word);
        st.add_sentence(0, Provenance::Junk, &words("a b c"), &[false, true, true], &[0])
            .unwrap();
        assert_eq!(st.corrupted_positions, MaskCount { masked: 1, seen: 1 });
        assert_eq!(st.intact_positions, MaskCount { masked: 0, seen: 2 });
    }

    #[test]
    fn alphabetical_words() {
        assert!(is_alphabetical("Haus"));
        assert!(!is_alphabetical("12,5"));
        assert!(!is_alphabetical("q7"));
        assert!(!is_alphabetical(""));
        let list = [
            WordMaskProfile { word: "Haus".into(), mask_rate: 0.0, is_alphabetical: true, count: 5 },
            WordMaskProfile { word: "q7".into(), mask_rate: 0.0, is_alphabetical: false, count: 5 },
        ];
        assert_eq!(alphabetical_percentage(&list), 50.0);
    }

    fn stats_with(rates: &[(&str, u64, u64)]) -> MaskingStats {
        let mut st = MaskingStats::new(Granularity::Word);
        for (w, masked, seen) in rates {
            st.per_word.insert(w.to_string(), MaskCount { masked: *masked, seen: *seen });
        }
        st
    }

    #[test]
    fn extremes_rank_and_tie_break() {
        let st = stats_with(&[("a", 9, 10), ("b", 1, 10)]);
        let ex = extreme_word_profiles(&st, 1, 5).unwrap();
        assert_eq!(ex.top[0].word, "a");
        assert_eq!(ex.bottom[0].word, "b");
        assert!(ex.warning.is_none());

        let st = stats_with(&[("x", 5, 10), ("y", 10, 20), ("z", 10, 20), ("rare", 1, 1)]);
        let ex = extreme_word_profiles(&st, 2, 5).unwrap();
        assert_eq!(ex.top.iter().map(|p| p.word.as_str()).collect::<Vec<_>>(), ["y", "z"]);
        assert_eq!(ex.bottom[0].word, "x");
        assert_eq!(ex.eligible, 3);

        let ex = extreme_word_profiles(&st, 100, 5).unwrap();
        assert_eq!(ex.top.len(), 3);
        assert!(ex.warning.is_some());
        assert!(extreme_word_profiles(&st, 0, 5).is_err());
    }

    #[test]
    fn rendering_marks_masked_words() {
        let w = words("a b c");
        assert_eq!(render_masked(&w, &[true, true, true]), "a b c");
        assert_eq!(render_masked(&w, &[false, false, false]), "⟦a⟧ ⟦b⟧ ⟦c⟧");
    }

    fn scored(gran: Granularity) -> (MaskingStats, Corpus) {
        let clean = generate_cipher_corpus(40, 8, 1, 5, 1).unwrap();
        let noisy = inject_noise(
            &clean,
            &NoiseSpec { copied_rate: 0.25, misaligned_rate: 0.25, junk_rate: 0.25, seed: 2 },
        )
        .unwrap();
        let cfg = ModelConfig {
            src_vocab_size: noisy.src_vocab.size(),
            trg_vocab_size: noisy.trg_vocab.size(),
            ..tiny()
        };
        let params = init_model(&cfg, 1).unwrap();
        (score_corpus(&params, &cfg, &noisy, &clean, gran, 7).unwrap(), noisy)
    }

    #[test]
    fn corpus_scoring_covers_every_sentence() {
        let (st, noisy) = scored(Granularity::Sentence);
        assert_eq!(st.n_sentences, noisy.len());
        assert!(st.per_sentence.values().all(|s| s.unmasked_fraction == 0.0 || s.unmasked_fraction == 1.0));
        let seen: u64 = st.per_word.values().map(|c| c.seen).sum();
        assert_eq!(seen as usize, noisy.pairs.iter().map(|p| p.target.len()).sum::<usize>());
        let (w, _) = scored(Granularity::Word);
        assert!(w.per_word.values().all(|c| c.masked <= c.seen));
        assert!(w.per_sentence.values().all(|s| (0.0..=1.0).contains(&s.unmasked_fraction)));
    }

    #[test]
    fn report_bundle_files() {
        let (st, _) = scored(Granularity::Word);
        let ex = extreme_word_profiles(&st, 2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), &st, &ex, &["one".into()]).unwrap();
        for f in [
            "stats.json",
            "provenance.csv",
            "word_profiles.csv",
            "examples.txt",
            "plotdata/unmasked_by_provenance.csv",
        ] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let prov = fs::read_to_string(dir.path().join("provenance.csv")).unwrap();
        assert!(prov.starts_with("provenance,n_sentences,mean_unmasked_fraction\n"));
        assert!(prov.contains("\ncopied,"));
        let back: MaskingStats =
            serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
        assert_eq!(back.n_sentences, st.n_sentences);
    }
}
