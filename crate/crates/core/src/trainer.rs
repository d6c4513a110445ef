//! Training loop: vanilla, finetune and gradient-masked objectives with an
//! adaptive-moment optimizer and exact resumption.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::align::{align, clean_gradient, AlignmentResult, AlignmentTelemetry, Granularity, UnitLoss, MIN_CLEAN_GRAD_NORM};
use crate::autodiff::{FlatGradient, Graph, ParameterSet, Tensor, Var};
use crate::checkpoint::{Checkpoint, Phase, TrainingState};
use crate::data::{make_batches, BatchStream, Corpus, Splits, StreamPosition};
use crate::error::{Error, Result};
use crate::metrics::token_accuracy;
use crate::model::{sentence_loss_var, ModelConfig, Mode};
use crate::rng::{derive_seed, stream, Purpose};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Vanilla,
    Finetune,
    GlmaskSent,
    GlmaskWord,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Vanilla => "vanilla",
            TrainMode::Finetune => "finetune",
            TrainMode::GlmaskSent => "glmask-sent",
            TrainMode::GlmaskWord => "glmask-word",
        }
    }

    pub fn granularity(self) -> Option<Granularity> {
        match self {
            TrainMode::GlmaskSent => Some(Granularity::Sentence),
            TrainMode::GlmaskWord => Some(Granularity::Word),
            _ => None,
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "vanilla" => Ok(TrainMode::Vanilla),
            "finetune" => Ok(TrainMode::Finetune),
            "glmask-sent" => Ok(TrainMode::GlmaskSent),
            "glmask-word" => Ok(TrainMode::GlmaskWord),
            _ => Err(Error::Config(vec![format!(
                "mode must be vanilla, finetune, glmask-sent or glmask-word, got {s:?}"
            )])),
        }
    }
}

/// What to do when every unit of a batch is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipPolicy {
    /// Leave parameters and moments untouched.
    Skip,
    /// Apply a zero gradient, which still decays the moments.
    ZeroUpdate,
}

impl FromStr for SkipPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skip" => Ok(SkipPolicy::Skip),
            "zero_update" | "zero-update" => Ok(SkipPolicy::ZeroUpdate),
            _ => Err(Error::Config(vec![format!(
                "skip policy must be skip or zero_update, got {s:?}"
            )])),
        }
    }
}

impl SkipPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipPolicy::Skip => "skip",
            SkipPolicy::ZeroUpdate => "zero_update",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub glmask_start_fraction: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub seed: u64,
    /// Checkpoint and dev-evaluation interval; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub skip_policy: SkipPolicy,
    /// Pairs with a longer side are dropped from the training stream.
    pub max_len: usize,
    pub finetune_fraction: f64,
    pub finetune_lr_scale: f64,
    /// Dev pairs decoded at each evaluation; 0 disables evaluation.
    pub eval_sentences: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 6000,
            batch_size: 32,
            mode: TrainMode::Vanilla,
            glmask_start_fraction: 0.8,
            peak_lr: 1e-3,
            warmup_steps: 400,
            seed: 1,
            checkpoint_every: 1000,
            skip_policy: SkipPolicy::Skip,
            max_len: 50,
            finetune_fraction: 0.1,
            finetune_lr_scale: 0.1,
            eval_sentences: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut p = Vec::new();
        if self.total_steps == 0 {
            p.push("train.total_steps must be positive".to_string());
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.glmask_start_fraction) {
            p.push(format!(
                "train.glmask_start_fraction must lie in [0, 1], got {}",
                self.glmask_start_fraction
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            p.push(format!("train.peak_lr must be positive, got {}", self.peak_lr));
        }
        if self.max_len == 0 {
            p.push("train.max_len must be positive".to_string());
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            p.push(format!(
                "train.finetune_fraction must lie in (0, 1], got {}",
                self.finetune_fraction
            ));
        }
        if !(self.finetune_lr_scale > 0.0 && self.finetune_lr_scale.is_finite()) {
            p.push(format!(
                "train.finetune_lr_scale must be positive, got {}",
                self.finetune_lr_scale
            ));
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(format!("train.{k}"), v);
        };
        put("total_steps", self.total_steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("mode", self.mode.as_str().to_string());
        put("glmask_start_fraction", self.glmask_start_fraction.to_string());
        put("peak_lr", self.peak_lr.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("seed", self.seed.to_string());
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("skip_policy", self.skip_policy.as_str().to_string());
        put("max_len", self.max_len.to_string());
        put("finetune_fraction", self.finetune_fraction.to_string());
        put("finetune_lr_scale", self.finetune_lr_scale.to_string());
        put("eval_sentences", self.eval_sentences.to_string());
        m
    }

    /// Reads `train.*` keys, keeping defaults for absent ones.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        let mut problems = Vec::new();
        for (key, value) in kv {
            let Some(k) = key.strip_prefix("train.") else { continue };
            let ok = match k {
                "total_steps" => value.parse().map(|v| c.total_steps = v).is_ok(),
                "batch_size" => value.parse().map(|v| c.batch_size = v).is_ok(),
                "mode" => value.parse().map(|v| c.mode = v).is_ok(),
                "glmask_start_fraction" => value.parse().map(|v| c.glmask_start_fraction = v).is_ok(),
                "peak_lr" => value.parse().map(|v| c.peak_lr = v).is_ok(),
                "warmup_steps" => value.parse().map(|v| c.warmup_steps = v).is_ok(),
                "seed" => value.parse().map(|v| c.seed = v).is_ok(),
                "checkpoint_every" => value.parse().map(|v| c.checkpoint_every = v).is_ok(),
                "skip_policy" => value.parse().map(|v| c.skip_policy = v).is_ok(),
                "max_len" => value.parse().map(|v| c.max_len = v).is_ok(),
                "finetune_fraction" => value.parse().map(|v| c.finetune_fraction = v).is_ok(),
                "finetune_lr_scale" => value.parse().map(|v| c.finetune_lr_scale = v).is_ok(),
                "eval_sentences" => value.parse().map(|v| c.eval_sentences = v).is_ok(),
                _ => {
                    problems.push(format!("unknown key {key}"));
                    continue;
                }
            };
            if !ok {
                problems.push(format!("{key}: cannot parse {value:?}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        c.validate()?;
        Ok(c)
    }

    /// Number of finetuning steps run after a vanilla checkpoint.
    pub fn finetune_steps(&self) -> u64 {
        ((self.finetune_fraction * self.total_steps as f64).round() as u64).max(1)
    }

    pub fn glmask_start_step(&self) -> u64 {
        (self.glmask_start_fraction * self.total_steps as f64).floor() as u64
    }
}

/// Whether masking applies at 0-based `step`.
pub fn glmask_active(step: u64, config: &TrainConfig) -> bool {
    config.mode.granularity().is_some() && step >= config.glmask_start_step()
}

/// Linear warmup then inverse-square-root decay; `step` is 1-based.
pub fn learning_rate(step: u64, peak: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    if warmup == 0 {
        return peak / s.sqrt();
    }
    let w = warmup as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// First and second moment estimates plus the count of applied updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub updates: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            first: vec![0.0; n],
            second: vec![0.0; n],
            updates: 0,
        }
    }
}

/// Advances the moments with `grad` and returns the bias-corrected
/// parameter delta for learning rate `lr`.
pub fn optimizer_update(moments: &mut Moments, grad: &FlatGradient, lr: f64) -> Result<Vec<f64>> {
    let g = grad.values();
    if moments.first.len() != g.len() || moments.second.len() != g.len() {
        return Err(Error::LayoutMismatch);
    }
    moments.updates += 1;
    let t = moments.updates as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut delta = Vec::with_capacity(g.len());
    for ((m, v), &gi) in moments.first.iter_mut().zip(moments.second.iter_mut()).zip(g) {
        *m = BETA1 * *m + (1.0 - BETA1) * gi;
        *v = BETA2 * *v + (1.0 - BETA2) * gi * gi;
        let mh = *m / c1;
        let vh = *v / c2;
        delta.push(-lr * mh / (vh.sqrt() + ADAM_EPS));
    }
    Ok(delta)
}

fn mask_tensor(mask: &[bool], shape: &[usize]) -> Result<Tensor> {
    Tensor::new(
        shape.to_vec(),
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
}

/// Records the training objective and returns it as a scalar.
///
/// Without a mask this is the batch mean of sentence losses. A sentence mask
/// keeps the `1/B` normalisation; a word mask divides the masked token-loss
/// sum by the batch's total non-pad token count.
pub fn record_objective<M: UnitLoss>(
    model: &M,
    g: &mut Graph,
    params: &crate::autodiff::BoundParams,
    batch: &M::Batch,
    mode: Mode<'_>,
    mask: Option<&AlignmentResult>,
) -> Result<Var> {
    let (ptl, pad) = model.record(g, params, batch, mode)?;
    let shape = g.value(ptl).shape().to_vec();
    let rows = shape[0];
    if rows == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    match mask {
        None => {
            let sl = sentence_loss_var(g, ptl, &pad)?;
            let total = g.sum_all(sl)?;
            g.scale(total, 1.0 / rows as f64)
        }
        Some(m) if m.granularity == Granularity::Sentence => {
            if m.mask.len() != rows {
                return Err(Error::shape("masked objective", format!("{} sentence flags for {rows} rows", m.mask.len())));
            }
            let sl = sentence_loss_var(g, ptl, &pad)?;
            let w = g.constant(mask_tensor(&m.mask, &[rows])?)?;
            let kept = g.mul(sl, w)?;
            let total = g.sum_all(kept)?;
            g.scale(total, 1.0 / rows as f64)
        }
        Some(m) => {
            if m.mask.len() != pad.len() {
                return Err(Error::shape("masked objective", format!("{} token flags for {} slots", m.mask.len(), pad.len())));
            }
            let n = pad.iter().filter(|p| !**p).count();
            if n == 0 {
                return Err(Error::Data("batch has no target tokens".into()));
            }
            let w = g.constant(mask_tensor(&m.mask, &shape)?)?;
            let kept = g.mul(ptl, w)?;
            let total = g.sum_all(kept)?;
            g.scale(total, 1.0 / n as f64)
        }
    }
}

/// Objective value and gradient for one batch.
pub fn objective_gradient<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    batch: &M::Batch,
    mode: Mode<'_>,
    mask: Option<&AlignmentResult>,
) -> Result<(f64, FlatGradient)> {
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let obj = record_objective(model, &mut g, &bound, batch, mode, mask)?;
    let value = g.value(obj).data()[0];
    Ok((value, g.backward(obj, &bound)?))
}

/// Per-step log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub glmask_active: bool,
    pub frac_unmasked: f64,
    pub skipped: bool,
    /// Masking was abandoned because the clean gradient vanished.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub mode: TrainMode,
    pub dev_token_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub alignment: Option<AlignmentTelemetry>,
}

type ScoreHook = Box<dyn FnMut(&mut AlignmentResult)>;

pub struct Trainer {
    model: ModelConfig,
    config: TrainConfig,
    params: ParameterSet,
    moments: Moments,
    step: u64,
    phase: Phase,
    phase_start: u64,
    end_step: u64,
    lr_scale: f64,
    train: BatchStream,
    clean: Option<BatchStream>,
    resumed: bool,
    score_hook: Option<ScoreHook>,
}

impl fmt::Debug for Trainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Trainer")
            .field("mode", &self.config.mode)
            .field("step", &self.step)
            .field("end_step", &self.end_step)
            .finish_non_exhaustive()
    }
}

fn check_vocab(model: &ModelConfig, corpus: &Corpus) -> Result<()> {
    let mut p = Vec::new();
    if corpus.src_vocab.size() > model.src_vocab_size {
        p.push(format!(
            "source vocabulary of {} exceeds model.src_vocab_size {}",
            corpus.src_vocab.size(),
            model.src_vocab_size
        ));
    }
    if corpus.trg_vocab.size() > model.trg_vocab_size {
        p.push(format!(
            "target vocabulary of {} exceeds model.trg_vocab_size {}",
            corpus.trg_vocab.size(),
            model.trg_vocab_size
        ));
    }
    if p.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(p))
    }
}

impl Trainer {
    /// Builds a trainer. `init` supplies parameters (and, when it carries
    /// training state, the exact point to resume from). Finetuning requires
    /// `init` and starts a new phase unless `init` is itself a finetune
    /// checkpoint.
    pub fn new(
        model: ModelConfig,
        config: TrainConfig,
        splits: &Splits,
        init: Option<Checkpoint>,
        init_seed: u64,
    ) -> Result<Self> {
        model.validate()?;
        config.validate()?;
        check_vocab(&model, &splits.train)?;
        let finetune = config.mode == TrainMode::Finetune;
        let needs_clean = finetune || config.mode.granularity().is_some();
        if needs_clean && splits.clean.is_empty() {
            return Err(Error::Config(vec![format!(
                "mode {} requires a non-empty clean split",
                config.mode
            )]));
        }
        if finetune && init.is_none() {
            return Err(Error::Config(vec![
                "finetune mode requires an initial vanilla checkpoint".into(),
            ]));
        }
        let (params, state) = match init {
            Some(ckpt) => {
                if ckpt.config != model {
                    return Err(Error::Config(vec![
                        "checkpoint model configuration differs from the requested one".into(),
                    ]));
                }
                (ckpt.params, ckpt.state)
            }
            None => (crate::model::init_model(&model, init_seed)?, None),
        };
        let n = params.numel();
        let resumed = state.is_some();
        let (step, moments, phase, phase_start, train_pos, clean_pos) = match state {
            Some(s) => {
                if s.first_moment.len() != n {
                    return Err(Error::LayoutMismatch);
                }
                let moments = Moments {
                    first: s.first_moment,
                    second: s.second_moment,
                    updates: s.updates,
                };
                match (finetune, s.phase) {
                    (true, Phase::Main) => (s.step, moments, Phase::Finetune, s.step, StreamPosition::default(), StreamPosition::default()),
                    (false, Phase::Finetune) => {
                        return Err(Error::Config(vec![format!(
                            "cannot continue a finetune checkpoint in mode {}",
                            config.mode
                        )]))
                    }
                    _ => (s.step, moments, s.phase, s.phase_start, s.train_position, s.clean_position),
                }
            }
            None if finetune => (0, Moments::zeros(n), Phase::Finetune, 0, StreamPosition::default(), StreamPosition::default()),
            None => (0, Moments::zeros(n), Phase::Main, 0, StreamPosition::default(), StreamPosition::default()),
        };
        let (mut train, end_step, lr_scale) = if phase == Phase::Finetune {
            (
                make_batches(&splits.clean, config.batch_size, config.max_len, derive_seed(config.seed, Purpose::Clean, 1))?,
                phase_start + config.finetune_steps(),
                config.finetune_lr_scale,
            )
        } else {
            (
                make_batches(&splits.train, config.batch_size, config.max_len, config.seed)?,
                config.total_steps,
                1.0,
            )
        };
        train.seek(train_pos);
        let clean = if config.mode.granularity().is_some() {
            let mut s = make_batches(&splits.clean, config.batch_size, config.max_len, derive_seed(config.seed, Purpose::Clean, 0))?;
            s.seek(clean_pos);
            Some(s)
        } else {
            None
        };
        if step > end_step {
            return Err(Error::Config(vec![format!(
                "checkpoint step {step} lies beyond the run's final step {end_step}"
            )]));
        }
        Ok(Trainer {
            model,
            config,
            params,
            moments,
            step,
            phase,
            phase_start,
            end_step,
            lr_scale,
            train,
            clean,
            resumed,
            score_hook: None,
        })
    }

    /// Installs a function applied to every alignment result before masking
    /// decisions are taken; used to force or perturb masks in experiments.
    pub fn set_score_hook(&mut self, hook: impl FnMut(&mut AlignmentResult) + 'static) {
        self.score_hook = Some(Box::new(hook));
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn end_step(&self) -> u64 {
        self.end_step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.end_step
    }

    pub fn moments(&self) -> &Moments {
        &self.moments
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            params: self.params.clone(),
            state: Some(TrainingState {
                step: self.step,
                updates: self.moments.updates,
                phase: self.phase,
                phase_start: self.phase_start,
                train_position: self.train.position(),
                clean_position: self.clean.as_ref().map(BatchStream::position).unwrap_or_default(),
                first_moment: self.moments.first.clone(),
                second_moment: self.moments.second.clone(),
            }),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.lr_scale * learning_rate(self.step + 1, self.config.peak_lr, self.config.warmup_steps)
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.is_done() {
            return Err(Error::Config(vec![format!(
                "run already finished at step {}",
                self.step
            )]));
        }
        let step = self.step;
        let batch = self.train.next_batch();
        let active = self.phase == Phase::Main && glmask_active(step, &self.config);
        let mut mask = None;
        let mut alignment = None;
        let mut fallback = false;
        if active {
            let granularity = self.config.mode.granularity().expect("active implies a masking mode");
            let clean = self.clean.as_mut().expect("masking modes own a clean stream").next_batch();
            let cg = clean_gradient(&self.model, &self.params, &clean)?;
            let mut result = align(&self.model, &self.params, &batch, &cg, granularity)?;
            if let Some(hook) = self.score_hook.as_mut() {
                hook(&mut result);
            }
            alignment = Some(result.telemetry(step));
            if cg.norm() < MIN_CLEAN_GRAD_NORM {
                warn!(
                    "step {step}: clean gradient norm {:.3e} below {MIN_CLEAN_GRAD_NORM:e}; training unmasked",
                    cg.norm()
                );
                fallback = true;
            } else {
                mask = Some(result);
            }
        }
        let frac_unmasked = mask.as_ref().map_or(1.0, AlignmentResult::frac_unmasked);
        let lr = self.current_lr();
        let all_masked = mask.as_ref().is_some_and(|m| m.num_unmasked() == 0);
        let (loss, skipped) = if all_masked {
            info!("step {step}: every unit masked ({})", self.config.skip_policy.as_str());
            match self.config.skip_policy {
                SkipPolicy::Skip => (0.0, true),
                SkipPolicy::ZeroUpdate => {
                    let zero = FlatGradient::zeros(self.params.layout());
                    let delta = optimizer_update(&mut self.moments, &zero, lr)?;
                    self.params.add_flat(&delta)?;
                    (0.0, false)
                }
            }
        } else {
            let mut rng = stream(self.config.seed, Purpose::Dropout, step);
            let (loss, grad) = objective_gradient(&self.model, &self.params, &batch, Mode::Train(&mut rng), mask.as_ref())?;
            let delta = optimizer_update(&mut self.moments, &grad, lr)?;
            self.params.add_flat(&delta)?;
            (loss, false)
        };
        self.step += 1;
        Ok(StepOutcome {
            record: StepRecord {
                step,
                loss,
                lr,
                glmask_active: active,
                frac_unmasked,
                skipped,
                fallback,
            },
            alignment,
        })
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: ParameterSet,
    pub steps: Vec<StepRecord>,
    pub alignments: Vec<AlignmentTelemetry>,
    pub evals: Vec<EvalRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const STEPS_FILE: &str = "steps.jsonl";
pub const ALIGNMENT_FILE: &str = "alignment.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:07}.ckpt")
}

fn jsonl(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(BufWriter::new(f))
}

/// Runs `trainer` to its final step. With `out_dir`, writes step and
/// alignment telemetry as JSON lines, periodic checkpoints and
/// `final.ckpt`. Dev accuracy is evaluated at each checkpoint interval and
/// passed to `on_eval`.
pub fn run_training(
    mut trainer: Trainer,
    dev: &Corpus,
    out_dir: Option<&Path>,
    mut on_eval: impl FnMut(&EvalRecord),
) -> Result<RunOutput> {
    let mut out = RunOutput {
        params: ParameterSet::new(),
        steps: Vec::new(),
        alignments: Vec::new(),
        evals: Vec::new(),
        checkpoints: Vec::new(),
    };
    let mut files = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir.join("checkpoints"))?;
            Some((
                jsonl(&dir.join(STEPS_FILE), trainer.resumed)?,
                jsonl(&dir.join(ALIGNMENT_FILE), trainer.resumed)?,
            ))
        }
        None => None,
    };
    let every = trainer.config.checkpoint_every;
    let eval_set = dev.with_pairs(dev.pairs.iter().take(trainer.config.eval_sentences).cloned().collect());
    while !trainer.is_done() {
        let outcome = trainer.step()?;
        if let Some((steps, aligns)) = files.as_mut() {
            serde_json::to_writer(&mut *steps, &outcome.record)?;
            steps.write_all(b"\n")?;
            if let Some(a) = &outcome.alignment {
                serde_json::to_writer(&mut *aligns, a)?;
                aligns.write_all(b"\n")?;
            }
        }
        out.steps.push(outcome.record);
        out.alignments.extend(outcome.alignment);
        let done = trainer.step_index();
        if every > 0 && done.is_multiple_of(every) {
            if let Some(dir) = out_dir {
                let path = dir.join("checkpoints").join(checkpoint_name(done));
                trainer.checkpoint().save(&path)?;
                out.checkpoints.push(path);
            }
            if let Some((steps, aligns)) = files.as_mut() {
                steps.flush()?;
                aligns.flush()?;
            }
            if !eval_set.is_empty() {
                let record = EvalRecord {
                    step: done,
                    mode: trainer.config.mode,
                    dev_token_accuracy: token_accuracy(trainer.params(), trainer.model_config(), &eval_set)?,
                };
                on_eval(&record);
                out.evals.push(record);
            }
        }
    }
    if let Some((mut steps, mut aligns)) = files {
        steps.flush()?;
        aligns.flush()?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&path)?;
        out.checkpoints.push(path);
    }
    out.params = trainer.params;
    Ok(out)
}
