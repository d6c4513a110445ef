use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use glmask::align::Granularity;
use glmask::analysis::{dump_masked_examples, extreme_word_profiles, provenance_comparison, score_corpus, write_report};
use glmask::checkpoint::{file_sha256, Checkpoint};
use glmask::checks::run_checks;
use glmask::data::{generate_splits, load_data_dir, load_tsv, load_vocab, save_data_dir, save_vocab, Corpus, Provenance};
use glmask::metrics::{bleu, token_accuracy};
use glmask::trainer::{run_training, Trainer, FINAL_CHECKPOINT};
use log::{info, warn};
use serde_json::json;

use crate::config::{RunConfig, SEED_ENV};
use crate::ConfigArgs;

fn resolve(args: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &args.config {
        rc.load_file(path)?;
    }
    for pair in &args.overrides {
        rc.set_pair(pair)?;
    }
    if let Some(seed) = args.seed {
        rc.set("seed", &seed.to_string())?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            rc.set(key, v)?;
        }
    }
    rc.apply_seed_env(std::env::var(SEED_ENV).ok().as_deref())?;
    Ok(rc)
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.parse().map_err(|_| {
            glmask::Error::Config(vec![format!("{SEED_ENV} must be an unsigned integer, got {v:?}")])
        })?)),
        Err(_) => Ok(None),
    }
}

pub fn gen_data(
    out: &Path,
    n: Option<usize>,
    vocab: Option<usize>,
    noise: [Option<f64>; 3],
    force: bool,
    args: &ConfigArgs,
) -> Result<ExitCode> {
    let rc = resolve(
        args,
        &[
            ("data.n_train", n.map(|v| v.to_string())),
            ("data.vocab_size", vocab.map(|v| v.to_string())),
            ("noise.copied", noise[0].map(|v| v.to_string())),
            ("noise.misaligned", noise[1].map(|v| v.to_string())),
            ("noise.junk", noise[2].map(|v| v.to_string())),
        ],
    )?;
    if out.exists() && !force {
        bail!("{} already exists (use --force to overwrite)", out.display());
    }
    let splits = generate_splits(&rc.gen_spec()?)?;
    save_data_dir(&splits, out)?;
    rc.write(out)?;
    let counts: serde_json::Map<String, serde_json::Value> = Provenance::ALL
        .iter()
        .map(|p| (p.as_str().to_string(), json!(splits.train.count(*p))))
        .collect();
    println!(
        "{}",
        json!({
            "train": splits.train.len(),
            "clean": splits.clean.len(),
            "dev": splits.dev.len(),
            "test": splits.test.len(),
            "train_provenance": counts,
        })
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(
    mode: Option<&str>,
    data_dir: &Path,
    out: &Path,
    init_checkpoint: Option<&Path>,
    total_steps: Option<u64>,
    args: &ConfigArgs,
) -> Result<ExitCode> {
    let mut rc = resolve(
        args,
        &[
            ("train.mode", mode.map(str::to_string)),
            ("train.total_steps", total_steps.map(|v| v.to_string())),
        ],
    )?;
    let splits = load_data_dir(data_dir).with_context(|| format!("loading {}", data_dir.display()))?;
    let init = match init_checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            for (k, v) in ckpt.config.to_kv() {
                rc.set(&k, &v)?;
            }
            Some(ckpt)
        }
        None => None,
    };
    let model = rc.model(splits.train.src_vocab.size(), splits.train.trg_vocab.size())?;
    let config = rc.train()?;
    let seed = rc.seed()?;
    rc.write(out)?;
    save_vocab(&splits.train.src_vocab, &out.join("src.vocab"))?;
    save_vocab(&splits.train.trg_vocab, &out.join("trg.vocab"))?;
    info!("training {} for {} steps", config.mode, config.total_steps);
    let trainer = Trainer::new(model, config, &splits, init, seed)?;
    run_training(trainer, &splits.dev, Some(out), |record| {
        if let Ok(line) = serde_json::to_string(record) {
            println!("{line}");
        }
    })?;
    let final_path = out.join(FINAL_CHECKPOINT);
    println!(
        "{}",
        json!({
            "final_checkpoint": final_path.display().to_string(),
            "sha256": file_sha256(&final_path)?,
        })
    );
    Ok(ExitCode::SUCCESS)
}

/// The first of `checkpoint`'s directory and its parent that holds vocab files.
fn default_vocab_dir(checkpoint: &Path) -> Result<PathBuf> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    for candidate in [Some(dir), dir.parent()].into_iter().flatten() {
        let candidate = if candidate.as_os_str().is_empty() { Path::new(".") } else { candidate };
        if candidate.join("src.vocab").exists() && candidate.join("trg.vocab").exists() {
            return Ok(candidate.to_path_buf());
        }
    }
    bail!("no src.vocab/trg.vocab next to {}; pass --vocab-dir", checkpoint.display())
}

pub fn eval(checkpoint: &Path, data: &Path, metric: &str, vocab_dir: Option<&Path>) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let vocab_dir = match vocab_dir {
        Some(d) => d.to_path_buf(),
        None => default_vocab_dir(checkpoint)?,
    };
    let corpus = Corpus {
        pairs: load_tsv(data)?.pairs,
        src_vocab: load_vocab(&vocab_dir.join("src.vocab"))?,
        trg_vocab: load_vocab(&vocab_dir.join("trg.vocab"))?,
    };
    if corpus.src_vocab.size() != ckpt.config.src_vocab_size || corpus.trg_vocab.size() != ckpt.config.trg_vocab_size {
        bail!("vocabularies in {} do not match the checkpoint", vocab_dir.display());
    }
    let mut out = serde_json::Map::new();
    if metric != "acc" {
        out.insert("bleu".into(), serde_json::to_value(bleu(&ckpt.params, &ckpt.config, &corpus)?)?);
    }
    if metric != "bleu" {
        out.insert("acc".into(), json!(token_accuracy(&ckpt.params, &ckpt.config, &corpus)?));
    }
    println!("{}", serde_json::Value::Object(out));
    Ok(ExitCode::SUCCESS)
}

pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub data_dir: PathBuf,
    pub out: PathBuf,
    pub granularity: String,
    pub subset_size: usize,
    pub top_k: usize,
    pub min_count: u64,
    pub examples: usize,
    pub batch_size: usize,
}

pub fn analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let splits = load_data_dir(&a.data_dir)?;
    if splits.train.src_vocab.size() != ckpt.config.src_vocab_size
        || splits.train.trg_vocab.size() != ckpt.config.trg_vocab_size
    {
        bail!("vocabularies in {} do not match the checkpoint", a.data_dir.display());
    }
    let granularity: Granularity = a.granularity.parse()?;
    let subset = splits
        .train
        .with_pairs(splits.train.pairs.iter().take(a.subset_size).cloned().collect());
    let stats = score_corpus(&ckpt.params, &ckpt.config, &subset, &splits.clean, granularity, a.batch_size)?;
    let profiles = extreme_word_profiles(&stats, a.top_k, a.min_count)?;
    if let Some(w) = &profiles.warning {
        warn!("{w}");
    }
    let examples = dump_masked_examples(&ckpt.params, &ckpt.config, &subset, &splits.clean, a.examples, a.batch_size)?;
    write_report(&a.out, &stats, &profiles, &examples)?;
    let resolved = format!(
        "checkpoint = {}\ndata_dir = {}\ngranularity = {granularity}\nsubset_size = {}\ntop_k = {}\nmin_count = {}\nexamples = {}\nbatch_size = {}\n",
        a.checkpoint.display(),
        a.data_dir.display(),
        a.subset_size,
        a.top_k,
        a.min_count,
        a.examples,
        a.batch_size,
    );
    fs::write(a.out.join(crate::config::RESOLVED_FILE), resolved)?;
    for row in provenance_comparison(&stats) {
        println!("{}", serde_json::to_string(&row)?);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn check(seed: Option<u64>, trials: u64) -> Result<ExitCode> {
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(1),
    };
    let results = run_checks(seed, trials)?;
    for r in &results {
        println!(
            "{} {} max_error={:e} tolerance={:e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_error,
            r.tolerance
        );
    }
    Ok(if results.iter().all(|r| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
