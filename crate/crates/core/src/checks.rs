//! Self-verification suite: every efficient computation against its
//! brute-force reference on small random instances.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{align, clean_gradient, oracle_align, Granularity, UnitLoss};
use crate::autodiff::{sweep_counts, FlatGradient, Graph, ParameterSet};
use crate::data::{generate_cipher_corpus, split_clean, TokenBatch};
use crate::error::{Error, Result};
use crate::model::{init_model, per_token_loss_var, sentence_loss_var, ModelConfig, Mode};
use crate::rng::{stream, Purpose};
use crate::trainer::{objective_gradient, TrainConfig, TrainMode, Trainer};
use crate::verify::{finite_difference, max_abs_diff, max_relative_error};

pub const ALIGN_TOLERANCE: f64 = 1e-9;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const TRAJECTORY_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    fn new(name: &'static str, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name,
            passed: max_error <= tolerance,
            max_error,
            tolerance,
        }
    }
}

/// A one-layer model small enough for brute-force oracles.
pub fn tiny_config(src_vocab: usize, trg_vocab: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        num_heads: 2,
        d_model: 8,
        d_ff: 16,
        src_vocab_size: src_vocab,
        trg_vocab_size: trg_vocab,
        dropout_rate: 0.1,
        label_smoothing: 0.1,
        max_positions: 16,
    }
}

/// `rows` random pairs with lengths in `1..=max_len` over ids `4..vocab`.
pub fn random_batch(rng: &mut ChaCha8Rng, rows: usize, max_len: usize, vocab: usize) -> TokenBatch {
    let sent = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        let n = rng.gen_range(1..=max_len);
        (0..n).map(|_| rng.gen_range(4..vocab)).collect()
    };
    let src: Vec<_> = (0..rows).map(|_| sent(rng)).collect();
    let trg: Vec<_> = (0..rows).map(|_| sent(rng)).collect();
    TokenBatch::from_ids(&src, &trg).expect("non-empty rows")
}

fn gradient_check(seed: u64, trial: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Check, trial);
    let cfg = ModelConfig {
        dropout_rate: 0.0,
        ..tiny_config(10, 11)
    };
    let params = init_model(&cfg, seed.wrapping_add(trial))?;
    let batch = random_batch(&mut rng, 2, 4, 10);
    let loss = |p: &ParameterSet| -> Result<(f64, FlatGradient)> {
        let mut g = Graph::new();
        let b = g.bind(p)?;
        let ptl = per_token_loss_var(&mut g, &b, &cfg, &batch, Mode::Eval)?;
        let s = sentence_loss_var(&mut g, ptl, &batch.loss_pad())?;
        let total = g.sum_all(s)?;
        Ok((g.value(total).data()[0], g.backward(total, &b)?))
    };
    let (_, grad) = loss(&params)?;
    let fd = finite_difference(&params, 1e-5, None, |p| Ok(loss(p)?.0))?;
    Ok(max_relative_error(grad.values(), &fd, 1e-6))
}

fn alignment_check(seed: u64, trial: u64, granularity: Granularity) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Check, 1000 + trial);
    let cfg = tiny_config(12, 12);
    let params = init_model(&cfg, seed.wrapping_add(trial))?;
    let rows = match granularity {
        Granularity::Sentence => rng.gen_range(1..=8),
        Granularity::Word => rng.gen_range(1..=4),
    };
    let batch = random_batch(&mut rng, rows, 6, 12);
    let clean = random_batch(&mut rng, 4, 6, 12);
    let cg = clean_gradient(&cfg, &params, &clean)?;
    let fast = align(&cfg, &params, &batch, &cg, granularity)?;
    let slow = oracle_align(&cfg, &params, &batch, &cg, granularity)?;
    if fast.mask != slow.mask && max_abs_diff(&fast.scores, &slow.scores) > ALIGN_TOLERANCE {
        return Ok(f64::INFINITY);
    }
    Ok(max_abs_diff(&fast.scores, &slow.scores))
}

/// Extra sweeps spent by one clean-gradient plus alignment computation.
fn sweep_check(seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Check, 2000);
    let cfg = tiny_config(12, 12);
    let params = init_model(&cfg, seed)?;
    let batch = random_batch(&mut rng, 4, 6, 12);
    let before = sweep_counts();
    let cg = clean_gradient(&cfg, &params, &batch)?;
    align(&cfg, &params, &batch, &cg, Granularity::Word)?;
    Ok((sweep_counts().since(before).total() as f64 - 2.0).abs())
}

fn decomposition_check(seed: u64, trial: u64) -> Result<f64> {
    let mut rng = stream(seed, Purpose::Check, 3000 + trial);
    let cfg = tiny_config(12, 12);
    let params = init_model(&cfg, seed.wrapping_add(trial))?;
    let batch = random_batch(&mut rng, 3, 5, 12);
    let clean = random_batch(&mut rng, 3, 5, 12);
    let cg = clean_gradient(&cfg, &params, &clean)?;
    let mut worst = 0.0f64;
    for granularity in [Granularity::Sentence, Granularity::Word] {
        let a = align(&cfg, &params, &batch, &cg, granularity)?;
        let (_, masked) = objective_gradient(&cfg, &params, &batch, Mode::Eval, Some(&a))?;
        let mut g = Graph::new();
        let bound = g.bind(&params)?;
        let (ptl, pad) = cfg.record(&mut g, &bound, &batch, Mode::Eval)?;
        let (units, denom) = match granularity {
            Granularity::Sentence => (sentence_loss_var(&mut g, ptl, &pad)?, batch.batch as f64),
            Granularity::Word => (ptl, a.num_units() as f64),
        };
        let n = a.mask.len();
        let mut expected = FlatGradient::zeros(params.layout());
        for u in (0..n).filter(|&u| a.mask[u]) {
            let mut cot = vec![0.0; n];
            cot[u] = 1.0;
            expected.axpy(1.0 / denom, &g.backward_with_cotangent(units, &cot, &bound)?)?;
        }
        worst = worst.max(max_abs_diff(masked.values(), expected.values()));
    }
    Ok(worst)
}

/// Forced-positive masked training against vanilla training, step by step.
fn equivalence_check(seed: u64, steps: u64) -> Result<f64> {
    let corpus = generate_cipher_corpus(80, 10, 1, 5, seed)?;
    let splits = split_clean(&corpus, 10, 4, 4, seed)?;
    let model = tiny_config(splits.train.src_vocab.size(), splits.train.trg_vocab.size());
    let base = TrainConfig {
        total_steps: steps,
        batch_size: 4,
        warmup_steps: 4,
        seed,
        checkpoint_every: 0,
        eval_sentences: 0,
        glmask_start_fraction: 0.0,
        ..TrainConfig::default()
    };
    let mut masked = Trainer::new(
        model.clone(),
        TrainConfig {
            mode: TrainMode::GlmaskSent,
            ..base.clone()
        },
        &splits,
        None,
        seed,
    )?;
    masked.set_score_hook(|r| r.map_scores(|s| s.abs() + 1.0));
    let mut vanilla = Trainer::new(model, base, &splits, None, seed)?;
    let mut worst = 0.0f64;
    while !vanilla.is_done() {
        masked.step()?;
        vanilla.step()?;
        worst = worst.max(max_abs_diff(&masked.params().flatten(), &vanilla.params().flatten()));
    }
    Ok(worst)
}

/// Runs every check `trials` times (where randomised) and reports the worst
/// error of each.
pub fn run_checks(seed: u64, trials: u64) -> Result<Vec<CheckResult>> {
    if trials == 0 {
        return Err(Error::Config(vec!["trials must be at least 1".into()]));
    }
    let worst = |f: &dyn Fn(u64) -> Result<f64>| -> Result<f64> {
        (0..trials).try_fold(0.0f64, |acc, t| Ok(acc.max(f(t)?)))
    };
    Ok(vec![
        CheckResult::new("gradient_finite_difference", worst(&|t| gradient_check(seed, t))?, GRADIENT_TOLERANCE),
        CheckResult::new("align_sentence_vs_oracle", worst(&|t| alignment_check(seed, t, Granularity::Sentence))?, ALIGN_TOLERANCE),
        CheckResult::new("align_word_vs_oracle", worst(&|t| alignment_check(seed, t, Granularity::Word))?, ALIGN_TOLERANCE),
        CheckResult::new("extra_sweeps_per_step", sweep_check(seed)?, 0.0),
        CheckResult::new("masked_objective_decomposition", worst(&|t| decomposition_check(seed, t))?, ALIGN_TOLERANCE),
        CheckResult::new("vanilla_equivalence", equivalence_check(seed, 10 * trials)?, TRAJECTORY_TOLERANCE),
    ])
}
