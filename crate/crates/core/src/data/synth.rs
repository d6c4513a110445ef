use rand::seq::SliceRandom;
use rand::Rng;

use super::{Corpus, Provenance, SentencePair, Vocab};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Share of target positions overwritten in a junk pair.
pub const JUNK_FRACTION: f64 = 0.3;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Surface form of the `i`-th synthetic token.
///
/// Most tokens are two-syllable letter strings; every eighth one carries a
/// digit so that corpora contain both alphabetical and non-alphabetical
/// words.
pub fn token_name(i: usize) -> String {
    if i % 8 == 7 {
        return format!("n{i}");
    }
    let syllables = CONSONANTS.len() * VOWELS.len();
    let syl = |k: usize| {
        let c = CONSONANTS[k % CONSONANTS.len()] as char;
        let v = VOWELS[k / CONSONANTS.len()] as char;
        format!("{c}{v}")
    };
    let mut out = syl(i % syllables);
    out.push_str(&syl((i / syllables) % syllables));
    if i >= syllables * syllables {
        out.push_str(&syl(i / (syllables * syllables)));
    }
    out
}

/// Seed-derived bijection over token indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Cipher {
    pub fn from_seed(vocab_size: usize, seed: u64) -> Self {
        let mut forward: Vec<usize> = (0..vocab_size).collect();
        forward.shuffle(&mut stream(seed, Purpose::Cipher, 0));
        Self::from_permutation(forward)
    }

    pub fn identity(vocab_size: usize) -> Self {
        Self::from_permutation((0..vocab_size).collect())
    }

    fn from_permutation(forward: Vec<usize>) -> Self {
        let mut inverse = vec![0; forward.len()];
        for (i, &j) in forward.iter().enumerate() {
            inverse[j] = i;
        }
        Cipher { forward, inverse }
    }

    pub fn apply(&self, i: usize) -> usize {
        self.forward[i]
    }

    pub fn invert(&self, j: usize) -> usize {
        self.inverse[j]
    }

    /// Recovers the source indices from a cipher target.
    pub fn decipher(&self, target: &[usize]) -> Vec<usize> {
        reverse_blocks(target).into_iter().map(|j| self.invert(j)).collect()
    }
}

/// Reverses every full block of three; a trailing partial block keeps its order.
fn reverse_blocks(seq: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(seq.len());
    for chunk in seq.chunks(3) {
        if chunk.len() == 3 {
            out.extend(chunk.iter().rev());
        } else {
            out.extend_from_slice(chunk);
        }
    }
    out
}

/// Target indices for a source sentence: substitute through the cipher, then
/// reverse each consecutive 3-token block.
pub fn cipher_target(source: &[usize], cipher: &Cipher) -> Vec<usize> {
    let mapped: Vec<usize> = source.iter().map(|&i| cipher.apply(i)).collect();
    reverse_blocks(&mapped)
}

pub fn generate_cipher_corpus(
    n: usize,
    vocab_size: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<Corpus> {
    let mut problems = Vec::new();
    if vocab_size < 8 {
        problems.push(format!("vocab_size must be at least 8, got {vocab_size}"));
    }
    if min_len < 1 || min_len > max_len {
        problems.push(format!(
            "need 1 <= min_len <= max_len, got {min_len} and {max_len}"
        ));
    }
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let cipher = Cipher::from_seed(vocab_size, seed);
    let names: Vec<String> = (0..vocab_size).map(token_name).collect();
    let mut rng = stream(seed, Purpose::Generate, 0);
    let pairs = (0..n)
        .map(|id| {
            let len = rng.gen_range(min_len..=max_len);
            let src: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab_size)).collect();
            let trg = cipher_target(&src, &cipher);
            SentencePair {
                id: id as u64,
                source: src.iter().map(|&i| names[i].clone()).collect(),
                target: trg.iter().map(|&i| names[i].clone()).collect(),
                provenance: Provenance::Clean,
                corrupted: Vec::new(),
            }
        })
        .collect();
    Ok(Corpus {
        pairs,
        src_vocab: Vocab::from_tokens(names.iter().cloned()),
        trg_vocab: Vocab::from_tokens(names),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub copied_rate: f64,
    pub misaligned_rate: f64,
    pub junk_rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none(seed: u64) -> Self {
        NoiseSpec {
            copied_rate: 0.0,
            misaligned_rate: 0.0,
            junk_rate: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, r) in [
            ("copied_rate", self.copied_rate),
            ("misaligned_rate", self.misaligned_rate),
            ("junk_rate", self.junk_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                problems.push(format!("{name} must lie in [0, 1], got {r}"));
            }
        }
        let total = self.copied_rate + self.misaligned_rate + self.junk_rate;
        if total > 1.0 + 1e-12 {
            problems.push(format!("noise rates sum to {total} > 1"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// `floor(rate * n)`, tolerant of representation error in `rate`.
    pub fn count(rate: f64, n: usize) -> usize {
        (rate * n as f64 + 1e-9).floor() as usize
    }
}

/// Corrupts a seed-chosen disjoint subset of pairs per noise category.
pub fn inject_noise(corpus: &Corpus, spec: &NoiseSpec) -> Result<Corpus> {
    spec.validate()?;
    let n = corpus.len();
    let n_copied = NoiseSpec::count(spec.copied_rate, n);
    let n_misaligned = NoiseSpec::count(spec.misaligned_rate, n);
    let n_junk = NoiseSpec::count(spec.junk_rate, n);
    if n_misaligned > 0 && n < 2 {
        return Err(Error::Data(
            "misaligned noise needs at least two pairs".into(),
        ));
    }

    let mut rng = stream(spec.seed, Purpose::Noise, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let original: Vec<&Vec<String>> = corpus.pairs.iter().map(|p| &p.target).collect();
    let mut out = corpus.clone();
    for p in &mut out.pairs {
        p.provenance = Provenance::Clean;
        p.corrupted.clear();
    }
    let junk_pool: Vec<String> = corpus.trg_vocab.tokens().to_vec();
    if n_junk > 0 && junk_pool.len() < 2 {
        return Err(Error::Data(
            "junk noise needs at least two target tokens".into(),
        ));
    }

    for (rank, &i) in order.iter().enumerate() {
        let pair = &mut out.pairs[i];
        if rank < n_copied {
            pair.target = pair.source.clone();
            pair.provenance = Provenance::Copied;
        } else if rank < n_copied + n_misaligned {
            let mut j = rng.gen_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            pair.target = original[j].clone();
            pair.provenance = Provenance::Misaligned;
        } else if rank < n_copied + n_misaligned + n_junk {
            let len = pair.target.len();
            let k = ((JUNK_FRACTION * len as f64).round() as usize).clamp(1, len);
            let mut positions: Vec<usize> = (0..len).collect();
            positions.shuffle(&mut rng);
            positions.truncate(k);
            positions.sort_unstable();
            for &pos in &positions {
                let replacement = loop {
                    let cand = &junk_pool[rng.gen_range(0..junk_pool.len())];
                    if *cand != pair.target[pos] {
                        break cand.clone();
                    }
                };
                pair.target[pos] = replacement;
            }
            pair.corrupted = positions;
            pair.provenance = Provenance::Junk;
        } else {
            break;
        }
    }
    for p in &out.pairs {
        for t in &p.target {
            out.trg_vocab.add(t.as_str());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Corpus,
    pub clean: Corpus,
    pub dev: Corpus,
    pub test: Corpus,
}

/// Draws the clean, dev and test splits from clean-provenance pairs; the rest
/// (in original order) becomes the training split.
pub fn split_clean(
    corpus: &Corpus,
    n_clean: usize,
    n_dev: usize,
    n_test: usize,
    seed: u64,
) -> Result<Splits> {
    let mut eligible: Vec<usize> = (0..corpus.len())
        .filter(|&i| corpus.pairs[i].provenance == Provenance::Clean)
        .collect();
    let needed = n_clean + n_dev + n_test;
    if eligible.len() < needed {
        return Err(Error::Data(format!(
            "need {needed} clean pairs for clean/dev/test, corpus has {}",
            eligible.len()
        )));
    }
    if corpus.len() == needed {
        return Err(Error::Data(
            "split leaves the training set empty".into(),
        ));
    }
    eligible.shuffle(&mut stream(seed, Purpose::Split, 0));
    let mut owner = vec![0u8; corpus.len()];
    for (rank, &i) in eligible.iter().take(needed).enumerate() {
        owner[i] = if rank < n_clean {
            1
        } else if rank < n_clean + n_dev {
            2
        } else {
            3
        };
    }
    let pick = |which: u8, order: &[usize]| {
        corpus.with_pairs(
            order
                .iter()
                .filter(|&&i| owner[i] == which)
                .map(|&i| corpus.pairs[i].clone())
                .collect(),
        )
    };
    let drawn = &eligible[..needed];
    let all: Vec<usize> = (0..corpus.len()).collect();
    Ok(Splits {
        train: pick(0, &all),
        clean: pick(1, drawn),
        dev: pick(2, drawn),
        test: pick(3, drawn),
    })
}

/// Everything needed to synthesise a full set of splits.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub n_train: usize,
    pub n_clean: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Generates `n_train + n_clean + n_dev + n_test` cipher pairs, carves out
/// the clean splits and corrupts the remaining training split.
pub fn generate_splits(spec: &GenSpec) -> Result<Splits> {
    spec.noise.validate()?;
    let total = spec.n_train + spec.n_clean + spec.n_dev + spec.n_test;
    let corpus = generate_cipher_corpus(total, spec.vocab_size, spec.min_len, spec.max_len, spec.seed)?;
    let mut splits = split_clean(&corpus, spec.n_clean, spec.n_dev, spec.n_test, spec.seed)?;
    splits.train = inject_noise(&splits.train, &spec.noise)?;
    Ok(splits)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn indices(corpus: &Corpus, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| corpus.src_vocab.id(t) - 4).collect()
    }

    #[test]
    fn identity_cipher_reverses_blocks() {
        let id = Cipher::identity(8);
        assert_eq!(cipher_target(&[0, 1, 2, 3], &id), vec![2, 1, 0, 3]);
        assert_eq!(cipher_target(&[5], &id), vec![5]);
        assert_eq!(cipher_target(&[0, 1, 2, 3, 4], &id), vec![2, 1, 0, 3, 4]);
        let c = Cipher::from_seed(8, 3);
        assert_eq!(cipher_target(&[5], &c), vec![c.apply(5)]);
    }

    #[test]
    fn cipher_is_invertible() {
        let corpus = generate_cipher_corpus(200, 40, 1, 11, 9).unwrap();
        let cipher = Cipher::from_seed(40, 9);
        for p in &corpus.pairs {
            let src = indices(&corpus, &p.source);
            let trg: Vec<usize> = p.target.iter().map(|t| corpus.trg_vocab.id(t) - 4).collect();
            assert_eq!(cipher.decipher(&trg), src);
        }
    }

    #[test]
    fn generation_is_deterministic_and_validated() {
        let a = generate_cipher_corpus(50, 16, 2, 6, 1).unwrap();
        assert_eq!(a, generate_cipher_corpus(50, 16, 2, 6, 1).unwrap());
        assert_ne!(a, generate_cipher_corpus(50, 16, 2, 6, 2).unwrap());
        assert!(a.pairs.iter().all(|p| (2..=6).contains(&p.source.len())));
        assert!(generate_cipher_corpus(5, 7, 1, 3, 0).is_err());
        assert!(generate_cipher_corpus(5, 8, 0, 3, 0).is_err());
        assert!(generate_cipher_corpus(5, 8, 4, 3, 0).is_err());
    }

    #[test]
    fn token_names_are_unique_and_mixed() {
        let names: HashSet<String> = (0..5000).map(token_name).collect();
        assert_eq!(names.len(), 5000);
        assert!(token_name(7).chars().any(|c| c.is_ascii_digit()));
        assert!(token_name(3).chars().all(char::is_alphabetic));
    }

    #[test]
    fn noise_counts_are_floored_and_disjoint() {
        let corpus = generate_cipher_corpus(1000, 32, 3, 9, 4).unwrap();
        let spec = NoiseSpec {
            copied_rate: 0.2,
            misaligned_rate: 0.15,
            junk_rate: 0.1,
            seed: 8,
        };
        let noisy = inject_noise(&corpus, &spec).unwrap();
        assert_eq!(noisy.count(Provenance::Copied), 200);
        assert_eq!(noisy.count(Provenance::Misaligned), 150);
        assert_eq!(noisy.count(Provenance::Junk), 100);
        assert_eq!(noisy.count(Provenance::Clean), 550);
        for (p, q) in noisy.pairs.iter().zip(&corpus.pairs) {
            p.validate().unwrap();
            assert_eq!(p.source, q.source);
            match p.provenance {
                Provenance::Clean => assert_eq!(p.target, q.target),
                Provenance::Junk => {
                    let expected =
                        ((JUNK_FRACTION * q.target.len() as f64).round() as usize).max(1);
                    assert_eq!(p.corrupted.len(), expected);
                    for (pos, (a, b)) in p.target.iter().zip(&q.target).enumerate() {
                        assert_eq!(a != b, p.corrupted.contains(&pos));
                    }
                }
                _ => {}
            }
        }
        assert_eq!(noisy, inject_noise(&corpus, &spec).unwrap());
    }

    #[test]
    fn noise_edge_rates() {
        let corpus = generate_cipher_corpus(30, 16, 2, 5, 1).unwrap();
        let all_copied = inject_noise(
            &corpus,
            &NoiseSpec {
                copied_rate: 1.0,
                ..NoiseSpec::none(1)
            },
        )
        .unwrap();
        assert!(all_copied
            .pairs
            .iter()
            .all(|p| p.target == p.source && p.provenance == Provenance::Copied));
        assert_eq!(inject_noise(&corpus, &NoiseSpec::none(3)).unwrap(), corpus);
        let bad = NoiseSpec {
            copied_rate: 0.6,
            misaligned_rate: 0.5,
            ..NoiseSpec::none(0)
        };
        assert!(matches!(inject_noise(&corpus, &bad), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let corpus = generate_cipher_corpus(100, 16, 2, 5, 1).unwrap();
        let s = split_clean(&corpus, 10, 5, 7, 3).unwrap();
        assert_eq!((s.clean.len(), s.dev.len(), s.test.len()), (10, 5, 7));
        assert_eq!(s.train.len(), 78);
        let ids = |c: &Corpus| c.pairs.iter().map(|p| p.id).collect::<HashSet<_>>();
        let all = [ids(&s.train), ids(&s.clean), ids(&s.dev), ids(&s.test)];
        for i in 0..4 {
            for j in i + 1..4 {
                assert!(all[i].is_disjoint(&all[j]));
            }
        }
        assert!(split_clean(&corpus, 50, 30, 20, 3).is_err());
        assert!(split_clean(&corpus, 90, 30, 20, 3).is_err());
    }

    #[test]
    fn generated_splits_have_requested_sizes_and_noise() {
        let spec = GenSpec {
            n_train: 200,
            n_clean: 10,
            n_dev: 5,
            n_test: 7,
            vocab_size: 20,
            min_len: 2,
            max_len: 6,
            noise: NoiseSpec {
                copied_rate: 0.2,
                misaligned_rate: 0.1,
                junk_rate: 0.05,
                seed: 3,
            },
            seed: 3,
        };
        let s = generate_splits(&spec).unwrap();
        assert_eq!(
            [s.train.len(), s.clean.len(), s.dev.len(), s.test.len()],
            [200, 10, 5, 7]
        );
        assert_eq!(s.train.count(Provenance::Copied), 40);
        assert_eq!(s.train.count(Provenance::Misaligned), 20);
        assert_eq!(s.train.count(Provenance::Junk), 10);
        for c in [&s.clean, &s.dev, &s.test] {
            assert_eq!(c.count(Provenance::Clean), c.len());
        }
        assert_eq!(s, generate_splits(&spec).unwrap());
    }
}
