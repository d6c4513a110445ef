//! Gradient alignment of training units against a clean-data gradient and
//! the resulting binary loss masks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, FlatGradient, Graph, ParameterSet, Tensor, Var};
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{per_token_loss_var, sentence_loss_var, ModelConfig, Mode};

/// Clean-gradient norms below this make every alignment sign noise.
pub const MIN_CLEAN_GRAD_NORM: f64 = 1e-8;

/// A model that records a `[B, W]` per-token loss grid on a graph.
pub trait UnitLoss {
    type Batch;

    /// Records the loss grid and returns it with its pad mask (row-major,
    /// `B * W` flags). Pad entries of the grid must be exactly zero.
    fn record(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        batch: &Self::Batch,
        mode: Mode<'_>,
    ) -> Result<(Var, Vec<bool>)>;
}

impl UnitLoss for ModelConfig {
    type Batch = TokenBatch;

    fn record(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        batch: &TokenBatch,
        mode: Mode<'_>,
    ) -> Result<(Var, Vec<bool>)> {
        let v = per_token_loss_var(g, params, self, batch, mode)?;
        Ok((v, batch.loss_pad()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "sent")]
    Sentence,
    #[serde(rename = "word")]
    Word,
}

impl Granularity {
    pub fn as_str(self) -> &'static str {
        match self {
            Granularity::Sentence => "sent",
            Granularity::Word => "word",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sent" | "sentence" => Ok(Granularity::Sentence),
            "word" => Ok(Granularity::Word),
            _ => Err(Error::Config(vec![format!(
                "granularity must be sent or word, got {s:?}"
            )])),
        }
    }
}

/// Alignment scores and masks. Sentence results have `cols == 1`; word
/// results cover the `[B, W]` loss grid, with pad entries scored 0 and masked.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentResult {
    pub granularity: Granularity,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    pub mask: Vec<bool>,
    /// Flags entries that are padding rather than units.
    pub pad: Vec<bool>,
    pub clean_grad_norm: f64,
}

impl AlignmentResult {
    fn from_scores(
        granularity: Granularity,
        rows: usize,
        cols: usize,
        mut scores: Vec<f64>,
        pad: Vec<bool>,
        clean_grad_norm: f64,
    ) -> Self {
        for (s, p) in scores.iter_mut().zip(&pad) {
            if *p {
                *s = 0.0;
            }
        }
        let mask = scores.iter().zip(&pad).map(|(&s, &p)| !p && s > 0.0).collect();
        AlignmentResult {
            granularity,
            rows,
            cols,
            scores,
            mask,
            pad,
            clean_grad_norm,
        }
    }

    /// Replaces each unit score by `f(score)` and recomputes the mask.
    pub fn map_scores(&mut self, mut f: impl FnMut(f64) -> f64) {
        for (s, p) in self.scores.iter_mut().zip(&self.pad) {
            *s = if *p { 0.0 } else { f(*s) };
        }
        self.mask = self
            .scores
            .iter()
            .zip(&self.pad)
            .map(|(&s, &p)| !p && s > 0.0)
            .collect();
    }

    /// Scores of non-pad units.
    pub fn unit_scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.scores
            .iter()
            .zip(&self.pad)
            .filter(|(_, p)| !**p)
            .map(|(s, _)| *s)
    }

    pub fn num_units(&self) -> usize {
        self.pad.iter().filter(|p| !**p).count()
    }

    pub fn num_unmasked(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn frac_unmasked(&self) -> f64 {
        let n = self.num_units();
        if n == 0 {
            0.0
        } else {
            self.num_unmasked() as f64 / n as f64
        }
    }

    pub fn row_mask(&self, row: usize) -> &[bool] {
        &self.mask[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_scores(&self, row: usize) -> &[f64] {
        &self.scores[row * self.cols..(row + 1) * self.cols]
    }

    pub fn telemetry(&self, step: u64) -> AlignmentTelemetry {
        let (mut sum, mut min, mut max, mut n) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
        for s in self.unit_scores() {
            sum += s;
            min = min.min(s);
            max = max.max(s);
            n += 1;
        }
        let (mean, min, max) = if n == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (sum / n as f64, min, max)
        };
        AlignmentTelemetry {
            step,
            granularity: self.granularity,
            frac_unmasked: self.frac_unmasked(),
            clean_grad_norm: self.clean_grad_norm,
            mean_g: mean,
            min_g: min,
            max_g: max,
        }
    }
}

/// One JSON-lines record per alignment computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentTelemetry {
    pub step: u64,
    pub granularity: Granularity,
    pub frac_unmasked: f64,
    pub clean_grad_norm: f64,
    pub mean_g: f64,
    pub min_g: f64,
    pub max_g: f64,
}

fn require_rows(pad: &[bool], rows: usize) -> Result<()> {
    if rows == 0 || pad.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    Ok(())
}

/// Gradient of the mean sentence loss over `clean`, in eval mode.
pub fn clean_gradient<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    clean: &M::Batch,
) -> Result<FlatGradient> {
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let (ptl, pad) = model.record(&mut g, &bound, clean, Mode::Eval)?;
    let rows = g.value(ptl).shape()[0];
    require_rows(&pad, rows)?;
    let sl = sentence_loss_var(&mut g, ptl, &pad)?;
    let total = g.sum_all(sl)?;
    let mean = g.scale(total, 1.0 / rows as f64)?;
    g.backward(mean, &bound)
}

/// Alignment of every unit in `batch` with `clean_grad`.
///
/// The objective `L(z) = sum_i z_i * l_i` is recorded with dummy weights
/// `z = 1`; the per-unit products `grad l_i . clean_grad` then come from a
/// single extra sweep over the record.
pub fn align<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    batch: &M::Batch,
    clean_grad: &FlatGradient,
    granularity: Granularity,
) -> Result<AlignmentResult> {
    if clean_grad.layout() != &params.layout() {
        return Err(Error::LayoutMismatch);
    }
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let (ptl, pad) = model.record(&mut g, &bound, batch, Mode::Eval)?;
    let shape = g.value(ptl).shape().to_vec();
    let (rows, width) = (shape[0], shape[1]);
    require_rows(&pad, rows)?;
    let (units, cols, unit_pad) = match granularity {
        Granularity::Sentence => (sentence_loss_var(&mut g, ptl, &pad)?, 1, vec![false; rows]),
        Granularity::Word => (ptl, width, pad),
    };
    let weights = g.leaf(Tensor::ones(g.value(units).shape()), false)?;
    let weighted = g.mul(weights, units)?;
    let _objective = g.sum_all(weighted)?;
    let scores = g.grad_dot_per_weight(units, weights, &bound, clean_grad)?;
    Ok(AlignmentResult::from_scores(
        granularity,
        rows,
        cols,
        scores.into_data(),
        unit_pad,
        clean_grad.norm(),
    ))
}

pub fn align_sentence<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    batch: &M::Batch,
    clean_grad: &FlatGradient,
) -> Result<AlignmentResult> {
    align(model, params, batch, clean_grad, Granularity::Sentence)
}

pub fn align_word<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    batch: &M::Batch,
    clean_grad: &FlatGradient,
) -> Result<AlignmentResult> {
    align(model, params, batch, clean_grad, Granularity::Word)
}

/// Reference alignment: one independent reverse sweep per unit, dotted with
/// `clean_grad`. Cost grows linearly with the number of units.
pub fn oracle_align<M: UnitLoss>(
    model: &M,
    params: &ParameterSet,
    batch: &M::Batch,
    clean_grad: &FlatGradient,
    granularity: Granularity,
) -> Result<AlignmentResult> {
    if clean_grad.layout() != &params.layout() {
        return Err(Error::LayoutMismatch);
    }
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let (ptl, pad) = model.record(&mut g, &bound, batch, Mode::Eval)?;
    let shape = g.value(ptl).shape().to_vec();
    let (rows, width) = (shape[0], shape[1]);
    require_rows(&pad, rows)?;
    let (units, cols, unit_pad) = match granularity {
        Granularity::Sentence => (sentence_loss_var(&mut g, ptl, &pad)?, 1, vec![false; rows]),
        Granularity::Word => (ptl, width, pad),
    };
    let n = rows * cols;
    let mut scores = vec![0.0; n];
    let mut cot = vec![0.0; n];
    for u in 0..n {
        if unit_pad[u] {
            continue;
        }
        cot[u] = 1.0;
        let grad = g.backward_with_cotangent(units, &cot, &bound)?;
        cot[u] = 0.0;
        scores[u] = grad.dot(clean_grad)?;
    }
    Ok(AlignmentResult::from_scores(
        granularity,
        rows,
        cols,
        scores,
        unit_pad,
        clean_grad.norm(),
    ))
}
