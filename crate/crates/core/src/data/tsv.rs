use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{Corpus, Provenance, SentencePair, Splits, Vocab};
use crate::error::{Error, Result};

const CORRUPT_PREFIX: &str = "corrupt=";

/// Writes `source<TAB>target<TAB>provenance`, plus a fourth
/// `corrupt=i,j,..` column for pairs with junk-corrupted positions.
pub fn save_tsv(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for p in &corpus.pairs {
        write!(
            w,
            "{}\t{}\t{}",
            p.source.join(" "),
            p.target.join(" "),
            p.provenance
        )?;
        if !p.corrupted.is_empty() {
            let pos: Vec<String> = p.corrupted.iter().map(usize::to_string).collect();
            write!(w, "\t{CORRUPT_PREFIX}{}", pos.join(","))?;
        }
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_line(line: &str, id: u64, path: &str, lineno: usize) -> Result<SentencePair> {
    let err = |msg: String| Error::Parse {
        path: path.to_string(),
        line: lineno,
        msg,
    };
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() < 2 {
        return Err(err("expected source<TAB>target".into()));
    }
    if cols.len() > 4 {
        return Err(err(format!("expected at most 4 columns, got {}", cols.len())));
    }
    let provenance = match cols.get(2) {
        Some(label) => label.parse().map_err(|e: Error| err(e.to_string()))?,
        None => Provenance::None,
    };
    let corrupted = match cols.get(3) {
        Some(col) => {
            let list = col
                .strip_prefix(CORRUPT_PREFIX)
                .ok_or_else(|| err(format!("unexpected fourth column {col:?}")))?;
            list.split(',')
                .map(|v| v.parse::<usize>().map_err(|e| err(e.to_string())))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    let pair = SentencePair {
        id,
        source: cols[0].split_whitespace().map(str::to_string).collect(),
        target: cols[1].split_whitespace().map(str::to_string).collect(),
        provenance,
        corrupted,
    };
    pair.validate().map_err(|e| err(e.to_string()))?;
    if pair.corrupted.iter().any(|&c| c >= pair.target.len()) {
        return Err(err("corrupted position beyond the target".into()));
    }
    Ok(pair)
}

/// Reads a TSV corpus. Pair ids are line indices; vocabularies list tokens
/// in first-seen order unless supplied.
pub fn load_tsv(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let name = path.display().to_string();
    let pairs = text
        .lines()
        .enumerate()
        .map(|(i, line)| parse_line(line, i as u64, &name, i + 1))
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(Error::Parse {
            path: name,
            line: 0,
            msg: "empty corpus file".into(),
        });
    }
    Ok(Corpus::from_pairs(pairs))
}

/// One token per line; line `k` holds id `k + 4`.
pub fn save_vocab(vocab: &Vocab, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for t in vocab.tokens() {
        writeln!(w, "{t}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let mut vocab = Vocab::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.contains(char::is_whitespace) {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("invalid vocabulary token {line:?}"),
            });
        }
        if vocab.get(line).is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("duplicate vocabulary token {line:?}"),
            });
        }
        vocab.add(line);
    }
    Ok(vocab)
}

pub const SPLIT_FILES: [&str; 4] = ["train.tsv", "clean.tsv", "dev.tsv", "test.tsv"];

pub fn save_data_dir(splits: &Splits, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (file, corpus) in SPLIT_FILES
        .iter()
        .zip([&splits.train, &splits.clean, &splits.dev, &splits.test])
    {
        save_tsv(corpus, &dir.join(file))?;
    }
    save_vocab(&splits.train.src_vocab, &dir.join("src.vocab"))?;
    save_vocab(&splits.train.trg_vocab, &dir.join("trg.vocab"))?;
    Ok(())
}

/// Loads a directory written by [`save_data_dir`]. Missing clean/dev/test
/// files yield empty splits; vocabulary files, when present, fix the ids.
pub fn load_data_dir(dir: &Path) -> Result<Splits> {
    let src_path = dir.join("src.vocab");
    let trg_path = dir.join("trg.vocab");
    let load = |file: &str| -> Result<Option<Corpus>> {
        let p = dir.join(file);
        if p.exists() {
            load_tsv(&p).map(Some)
        } else {
            Ok(None)
        }
    };
    let train = load(SPLIT_FILES[0])?.ok_or_else(|| {
        Error::Data(format!("{} has no train.tsv", dir.display()))
    })?;
    let mut parts = vec![train];
    for f in &SPLIT_FILES[1..] {
        parts.push(load(f)?.unwrap_or_else(|| parts[0].with_pairs(Vec::new())));
    }
    let (mut src_vocab, mut trg_vocab) = if src_path.exists() && trg_path.exists() {
        (load_vocab(&src_path)?, load_vocab(&trg_path)?)
    } else {
        (Vocab::new(), Vocab::new())
    };
    for c in &parts {
        for p in &c.pairs {
            p.source.iter().for_each(|t| {
                src_vocab.add(t.as_str());
            });
            p.target.iter().for_each(|t| {
                trg_vocab.add(t.as_str());
            });
        }
    }
    let mut it = parts.into_iter().map(|c| Corpus {
        pairs: c.pairs,
        src_vocab: src_vocab.clone(),
        trg_vocab: trg_vocab.clone(),
    });
    Ok(Splits {
        train: it.next().unwrap(),
        clean: it.next().unwrap(),
        dev: it.next().unwrap(),
        test: it.next().unwrap(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_cipher_corpus, inject_noise, split_clean, NoiseSpec};

    #[test]
    fn parses_three_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "a b c\tx y\tclean\n").unwrap();
        let c = load_tsv(&path).unwrap();
        assert_eq!(c.pairs[0].source.len(), 3);
        assert_eq!(c.pairs[0].target.len(), 2);
        assert_eq!(c.pairs[0].provenance, Provenance::Clean);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        fs::write(&path, "a\tb\nno tab here\n").unwrap();
        match load_tsv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&path, "a\tb\tnoisy\n").unwrap();
        assert!(load_tsv(&path).unwrap_err().to_string().contains("noisy"));
        fs::write(&path, "").unwrap();
        assert!(load_tsv(&path).is_err());
    }

    #[test]
    fn round_trip_of_generated_noisy_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let clean = generate_cipher_corpus(1000, 24, 1, 9, 3).unwrap();
        let noisy = inject_noise(
            &clean,
            &NoiseSpec {
                copied_rate: 0.1,
                misaligned_rate: 0.1,
                junk_rate: 0.2,
                seed: 1,
            },
        )
        .unwrap();
        let path = dir.path().join("c.tsv");
        save_tsv(&noisy, &path).unwrap();
        let back = load_tsv(&path).unwrap();
        assert_eq!(back.len(), noisy.len());
        for (a, b) in back.pairs.iter().zip(&noisy.pairs) {
            assert_eq!(
                (&a.source, &a.target, a.provenance, &a.corrupted),
                (&b.source, &b.target, b.provenance, &b.corrupted)
            );
        }
    }

    #[test]
    fn data_dir_keeps_vocabulary_ids() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_cipher_corpus(200, 16, 1, 6, 2).unwrap();
        let splits = split_clean(&corpus, 20, 10, 10, 1).unwrap();
        save_data_dir(&splits, dir.path()).unwrap();
        let back = load_data_dir(dir.path()).unwrap();
        assert_eq!(back.train.src_vocab, splits.train.src_vocab);
        assert_eq!(back.test.trg_vocab, splits.train.trg_vocab);
        assert_eq!(back.clean.len(), 20);
        let vocab = fs::read_to_string(dir.path().join("trg.vocab")).unwrap();
        let first = vocab.lines().next().unwrap();
        assert_eq!(back.train.trg_vocab.id(first), 4);
    }
}
