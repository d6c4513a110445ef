//! Pre-norm transformer encoder-decoder with label-smoothed per-token losses.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BoundParams, Graph, ParameterSet, Tensor, Var};
use crate::data::{TokenBatch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub src_vocab_size: usize,
    pub trg_vocab_size: usize,
    pub dropout_rate: f64,
    pub label_smoothing: f64,
    pub max_positions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            d_ff: 256,
            src_vocab_size: 68,
            trg_vocab_size: 68,
            dropout_rate: 0.1,
            label_smoothing: 0.1,
            max_positions: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_layers == 0 {
            problems.push("num_layers must be at least 1".to_string());
        }
        if self.num_heads == 0 {
            problems.push("num_heads must be at least 1".to_string());
        } else if !self.d_model.is_multiple_of(self.num_heads) {
            problems.push(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            ));
        }
        if self.d_model == 0 {
            problems.push("d_model must be positive".to_string());
        }
        if self.d_ff == 0 {
            problems.push("d_ff must be positive".to_string());
        }
        for (name, v) in [
            ("src_vocab_size", self.src_vocab_size),
            ("trg_vocab_size", self.trg_vocab_size),
        ] {
            if v <= EOS + 1 {
                problems.push(format!("{name} must exceed the reserved ids, got {v}"));
            }
        }
        for (name, v) in [
            ("dropout_rate", self.dropout_rate),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&v) {
                problems.push(format!("{name} must lie in [0, 1), got {v}"));
            }
        }
        if self.max_positions == 0 {
            problems.push("max_positions must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("model.num_layers".into(), self.num_layers.to_string());
        m.insert("model.num_heads".into(), self.num_heads.to_string());
        m.insert("model.d_model".into(), self.d_model.to_string());
        m.insert("model.d_ff".into(), self.d_ff.to_string());
        m.insert("model.src_vocab_size".into(), self.src_vocab_size.to_string());
        m.insert("model.trg_vocab_size".into(), self.trg_vocab_size.to_string());
        m.insert("model.dropout_rate".into(), self.dropout_rate.to_string());
        m.insert("model.label_smoothing".into(), self.label_smoothing.to_string());
        m.insert("model.max_positions".into(), self.max_positions.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(
            kv: &BTreeMap<String, String>,
            key: &str,
            problems: &mut Vec<String>,
        ) -> Option<T> {
            match kv.get(key).map(|v| v.parse::<T>()) {
                Some(Ok(v)) => Some(v),
                Some(Err(_)) => {
                    problems.push(format!("{key}: cannot parse {:?}", kv[key]));
                    None
                }
                None => {
                    problems.push(format!("{key}: missing"));
                    None
                }
            }
        }
        let mut p = Vec::new();
        let cfg = (|| {
            Some(ModelConfig {
                num_layers: get(kv, "model.num_layers", &mut p)?,
                num_heads: get(kv, "model.num_heads", &mut p)?,
                d_model: get(kv, "model.d_model", &mut p)?,
                d_ff: get(kv, "model.d_ff", &mut p)?,
                src_vocab_size: get(kv, "model.src_vocab_size", &mut p)?,
                trg_vocab_size: get(kv, "model.trg_vocab_size", &mut p)?,
                dropout_rate: get(kv, "model.dropout_rate", &mut p)?,
                label_smoothing: get(kv, "model.label_smoothing", &mut p)?,
                max_positions: get(kv, "model.max_positions", &mut p)?,
            })
        })();
        match cfg {
            Some(c) => {
                c.validate()?;
                Ok(c)
            }
            None => Err(Error::Config(p)),
        }
    }

    /// Entropy of the smoothed target distribution: the floor of every
    /// non-pad token loss.
    pub fn smoothing_entropy(&self) -> f64 {
        let v = self.trg_vocab_size as f64;
        let eps = self.label_smoothing;
        let off = eps / v;
        let on = 1.0 - eps + off;
        let term = |q: f64| if q > 0.0 { -q * q.ln() } else { 0.0 };
        term(on) + (v - 1.0) * term(off)
    }
}

/// Train mode applies dropout drawn from the given stream; eval mode is
/// deterministic.
#[derive(Debug)]
pub enum Mode<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Deterministic initialization. Weight matrices draw from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, embeddings from
/// `U(-1/sqrt(d_model), 1/sqrt(d_model))`; the output projection is further
/// scaled by 0.01 so an untrained model predicts close to uniformly.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    config.validate()?;
    let mut rng = stream(seed, Purpose::Init, 0);
    let d = config.d_model;
    let ff = config.d_ff;
    let mut p = ParameterSet::new();
    let emb = 1.0 / (d as f64).sqrt();
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    p.insert("src_emb", uniform(&mut rng, &[config.src_vocab_size, d], emb))?;
    p.insert("trg_emb", uniform(&mut rng, &[config.trg_vocab_size, d], emb))?;

    let layer_norm = |p: &mut ParameterSet, prefix: &str| -> Result<()> {
        p.insert(format!("{prefix}.g"), Tensor::ones(&[d]))?;
        p.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))
    };
    let attn = |p: &mut ParameterSet, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{prefix}.{w}"), uniform(rng, &[d, d], fan(d)))?;
        }
        Ok(())
    };
    let ffn = |p: &mut ParameterSet, rng: &mut ChaCha8Rng, prefix: &str| -> Result<()> {
        p.insert(format!("{prefix}.w1"), uniform(rng, &[d, ff], fan(d)))?;
        p.insert(format!("{prefix}.b1"), Tensor::zeros(&[ff]))?;
        p.insert(format!("{prefix}.w2"), uniform(rng, &[ff, d], fan(ff)))?;
        p.insert(format!("{prefix}.b2"), Tensor::zeros(&[d]))
    };
    for l in 0..config.num_layers {
        let e = format!("enc.{l}");
        layer_norm(&mut p, &format!("{e}.ln1"))?;
        attn(&mut p, &mut rng, &format!("{e}.self"))?;
        layer_norm(&mut p, &format!("{e}.ln2"))?;
        ffn(&mut p, &mut rng, &format!("{e}.ff"))?;
    }
    for l in 0..config.num_layers {
        let e = format!("dec.{l}");
        layer_norm(&mut p, &format!("{e}.ln1"))?;
        attn(&mut p, &mut rng, &format!("{e}.self"))?;
        layer_norm(&mut p, &format!("{e}.ln2"))?;
        attn(&mut p, &mut rng, &format!("{e}.cross"))?;
        layer_norm(&mut p, &format!("{e}.ln3"))?;
        ffn(&mut p, &mut rng, &format!("{e}.ff"))?;
    }
    layer_norm(&mut p, "enc.ln")?;
    layer_norm(&mut p, "dec.ln")?;
    p.insert(
        "out.w",
        uniform(&mut rng, &[d, config.trg_vocab_size], 0.01 * fan(d)),
    )?;
    p.insert("out.b", Tensor::zeros(&[config.trg_vocab_size]))?;
    Ok(p)
}

fn positional_encoding(batch: usize, len: usize, d: usize) -> Tensor {
    let mut row = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            row[pos * d + 2 * i] = angle.sin();
            row[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    let data: Vec<f64> = (0..batch).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![batch * len, d], data).expect("positional table shape")
}

/// Records forward computations of one model on a graph.
struct Forward<'a, 'r> {
    g: &'a mut Graph,
    p: &'a BoundParams,
    cfg: &'a ModelConfig,
    mode: Mode<'r>,
}

impl Forward<'_, '_> {
    fn dropout(&mut self, x: Var) -> Result<Var> {
        match &mut self.mode {
            Mode::Train(rng) => self.g.dropout(x, self.cfg.dropout_rate, &mut **rng),
            Mode::Eval => Ok(x),
        }
    }

    fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p.get(&format!("{prefix}.g"))?;
        let bias = self.p.get(&format!("{prefix}.b"))?;
        self.g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn embed(&mut self, table: &str, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.cfg.max_positions {
            return Err(Error::Data(format!(
                "sequence length {len} exceeds max_positions {}",
                self.cfg.max_positions
            )));
        }
        let d = self.cfg.d_model;
        let t = self.p.get(table)?;
        let x = self.g.embedding(t, Rc::from(ids))?;
        let x = self.g.scale(x, (d as f64).sqrt())?;
        let pe = self.g.constant(positional_encoding(batch, len, d))?;
        let x = self.g.add(x, pe)?;
        self.dropout(x)
    }

    /// Multi-head attention of `[B*tq, d]` queries over `[B*tk, d]` keys.
    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        q_in: Var,
        kv_in: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        allowed: Rc<[bool]>,
        prefix: &str,
    ) -> Result<Var> {
        let (h, dh, d) = (self.cfg.num_heads, self.cfg.head_dim(), self.cfg.d_model);
        let heads = |g: &mut Graph, x: Var, w: &str, t: usize| -> Result<Var> {
            let x = g.matmul(x, self.p.get(&format!("{prefix}.{w}"))?)?;
            let x = g.reshape(x, &[batch, t, h, dh])?;
            let x = g.permute_0213(x)?;
            g.reshape(x, &[batch * h, t, dh])
        };
        let q = heads(self.g, q_in, "wq", tq)?;
        let k = heads(self.g, kv_in, "wk", tk)?;
        let v = heads(self.g, kv_in, "wv", tk)?;
        let s = self.g.batch_matmul(q, k, true)?;
        let s = self.g.scale(s, 1.0 / (dh as f64).sqrt())?;
        let a = self.g.softmax(s, Some(allowed))?;
        let o = self.g.batch_matmul(a, v, false)?;
        let o = self.g.reshape(o, &[batch, h, tq, dh])?;
        let o = self.g.permute_0213(o)?;
        let o = self.g.reshape(o, &[batch * tq, d])?;
        self.g.matmul(o, self.p.get(&format!("{prefix}.wo"))?)
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let h = self.g.matmul(x, self.p.get(&format!("{prefix}.w1"))?)?;
        let h = self.g.add_row(h, self.p.get(&format!("{prefix}.b1"))?)?;
        let h = self.g.relu(h)?;
        let o = self.g.matmul(h, self.p.get(&format!("{prefix}.w2"))?)?;
        self.g.add_row(o, self.p.get(&format!("{prefix}.b2"))?)
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var> {
        let u = self.dropout(update)?;
        self.g.add(x, u)
    }

    /// Encoder states `[B*S, d]`.
    fn encode(&mut self, src_ids: &[usize], src_pad: &[bool], batch: usize, s: usize) -> Result<Var> {
        let h = self.cfg.num_heads;
        let allowed: Rc<[bool]> = key_mask(src_pad, batch, h, s, s, false);
        let mut x = self.embed("src_emb", src_ids, batch, s)?;
        for l in 0..self.cfg.num_layers {
            let n = self.layer_norm(x, &format!("enc.{l}.ln1"))?;
            let a = self.attention(n, n, batch, s, s, allowed.clone(), &format!("enc.{l}.self"))?;
            x = self.residual(x, a)?;
            let n = self.layer_norm(x, &format!("enc.{l}.ln2"))?;
            let f = self.feed_forward(n, &format!("enc.{l}.ff"))?;
            x = self.residual(x, f)?;
        }
        self.layer_norm(x, "enc.ln")
    }

    /// Output log-probabilities `[B*t, V]` for decoder inputs `[B, t]`.
    #[allow(clippy::too_many_arguments)]
    fn decode(
        &mut self,
        memory: Var,
        src_pad: &[bool],
        s: usize,
        dec_ids: &[usize],
        dec_pad: &[bool],
        batch: usize,
        t: usize,
    ) -> Result<Var> {
        let h = self.cfg.num_heads;
        let self_mask = key_mask(dec_pad, batch, h, t, t, true);
        let cross_mask = key_mask(src_pad, batch, h, t, s, false);
        let mut x = self.embed("trg_emb", dec_ids, batch, t)?;
        for l in 0..self.cfg.num_layers {
            let n = self.layer_norm(x, &format!("dec.{l}.ln1"))?;
            let a = self.attention(n, n, batch, t, t, self_mask.clone(), &format!("dec.{l}.self"))?;
            x = self.residual(x, a)?;
            let n = self.layer_norm(x, &format!("dec.{l}.ln2"))?;
            let a = self.attention(
                n,
                memory,
                batch,
                t,
                s,
                cross_mask.clone(),
                &format!("dec.{l}.cross"),
            )?;
            x = self.residual(x, a)?;
            let n = self.layer_norm(x, &format!("dec.{l}.ln3"))?;
            let f = self.feed_forward(n, &format!("dec.{l}.ff"))?;
            x = self.residual(x, f)?;
        }
        let x = self.layer_norm(x, "dec.ln")?;
        let logits = self.g.matmul(x, self.p.get("out.w")?)?;
        let logits = self.g.add_row(logits, self.p.get("out.b")?)?;
        self.g.log_softmax(logits)
    }
}

/// Attention mask `[B*H, tq, tk]`: key `j` is visible when it is not padding
/// and, for causal masks, `j <= i`.
fn key_mask(pad: &[bool], batch: usize, heads: usize, tq: usize, tk: usize, causal: bool) -> Rc<[bool]> {
    let mut m = Vec::with_capacity(batch * heads * tq * tk);
    for b in 0..batch {
        for _ in 0..heads {
            for i in 0..tq {
                for j in 0..tk {
                    m.push(!pad[b * tk + j] && (!causal || j <= i));
                }
            }
        }
    }
    m.into()
}

/// Records the teacher-forced per-token loss grid `[B, T-1]` on `g`.
pub fn per_token_loss_var(
    g: &mut Graph,
    params: &BoundParams,
    config: &ModelConfig,
    batch: &TokenBatch,
    mode: Mode<'_>,
) -> Result<Var> {
    batch.validate(config.src_vocab_size, config.trg_vocab_size)?;
    let (b, s, t) = (batch.batch, batch.src_len, batch.trg_len);
    let w = t - 1;
    let mut dec_ids = Vec::with_capacity(b * w);
    let mut dec_pad = Vec::with_capacity(b * w);
    let mut targets = Vec::with_capacity(b * w);
    for r in 0..b {
        let row = &batch.trg_ids[r * t..(r + 1) * t];
        let pad = &batch.trg_pad[r * t..(r + 1) * t];
        dec_ids.extend_from_slice(&row[..w]);
        dec_pad.extend_from_slice(&pad[..w]);
        targets.extend_from_slice(&row[1..]);
    }
    let valid: Rc<[bool]> = batch.loss_pad().iter().map(|p| !p).collect();
    let mut f = Forward {
        g,
        p: params,
        cfg: config,
        mode,
    };
    let memory = f.encode(&batch.src_ids, &batch.src_pad, b, s)?;
    let logp = f.decode(memory, &batch.src_pad, s, &dec_ids, &dec_pad, b, w)?;
    let losses = f
        .g
        .smoothed_nll(logp, targets.into(), valid, config.label_smoothing)?;
    f.g.reshape(losses, &[b, w])
}

/// Records per-sentence losses `[B]` from a `[B, W]` loss grid: the mean
/// over each row's non-pad tokens.
pub fn sentence_loss_var(g: &mut Graph, per_token: Var, pad: &[bool]) -> Result<Var> {
    let shape = g.value(per_token).shape().to_vec();
    if shape.len() != 2 || shape[0] * shape[1] != pad.len() {
        return Err(Error::shape(
            "sentence_loss",
            format!("loss grid {shape:?} vs {} pad flags", pad.len()),
        ));
    }
    let inv = inverse_token_counts(pad, shape[1])?;
    let sums = g.sum_last(per_token)?;
    let scale = g.constant(Tensor::new(vec![shape[0]], inv)?)?;
    g.mul(sums, scale)
}

fn inverse_token_counts(pad: &[bool], width: usize) -> Result<Vec<f64>> {
    pad.chunks(width)
        .enumerate()
        .map(|(r, row)| {
            let n = row.iter().filter(|p| !**p).count();
            if n == 0 {
                Err(Error::Data(format!("sentence {r} has no target tokens")))
            } else {
                Ok(1.0 / n as f64)
            }
        })
        .collect()
}

/// Per-token losses `[B, T]`; pad positions hold exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PerTokenLoss {
    pub batch: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub pad_mask: Vec<bool>,
}

impl PerTokenLoss {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.width..(r + 1) * self.width]
    }
}

pub fn per_token_losses(
    params: &ParameterSet,
    config: &ModelConfig,
    batch: &TokenBatch,
    mode: Mode<'_>,
) -> Result<PerTokenLoss> {
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let v = per_token_loss_var(&mut g, &bound, config, batch, mode)?;
    Ok(PerTokenLoss {
        batch: batch.batch,
        width: batch.loss_width(),
        values: g.value(v).data().to_vec(),
        pad_mask: batch.loss_pad(),
    })
}

/// Mean non-pad token loss per sentence.
pub fn sentence_losses(ptl: &PerTokenLoss) -> Result<Vec<f64>> {
    let inv = inverse_token_counts(&ptl.pad_mask, ptl.width)?;
    Ok((0..ptl.batch)
        .map(|r| ptl.row(r).iter().sum::<f64>() * inv[r])
        .collect())
}

/// Autoregressive argmax decoding. Stops a row at `</s>` or after `max_len`
/// tokens; the returned sequences exclude begin/end markers.
pub fn greedy_decode(
    params: &ParameterSet,
    config: &ModelConfig,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); sources.len()];
    if max_len == 0 || sources.is_empty() {
        return Ok(out);
    }
    const CHUNK: usize = 128;
    for (c, chunk) in sources.chunks(CHUNK).enumerate() {
        let decoded = decode_chunk(params, config, chunk, max_len)?;
        out[c * CHUNK..c * CHUNK + chunk.len()].clone_from_slice(&decoded);
    }
    Ok(out)
}

fn decode_chunk(
    params: &ParameterSet,
    config: &ModelConfig,
    sources: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    let b = sources.len();
    let s = sources.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut src_ids = vec![PAD; b * s];
    let mut src_pad = vec![true; b * s];
    for (r, row) in sources.iter().enumerate() {
        if let Some(&bad) = row.iter().find(|&&i| i >= config.src_vocab_size) {
            return Err(Error::Data(format!("source id {bad} out of vocabulary")));
        }
        for (j, &id) in row.iter().enumerate() {
            src_ids[r * s + j] = id;
            src_pad[r * s + j] = false;
        }
    }
    let mut g = Graph::new();
    let bound = g.bind(params)?;
    let mut f = Forward {
        g: &mut g,
        p: &bound,
        cfg: config,
        mode: Mode::Eval,
    };
    let memory = f.encode(&src_ids, &src_pad, b, s)?;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    let v = config.trg_vocab_size;
    for step in 1..=max_len {
        let t = step;
        let dec_ids: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().copied()).collect();
        let dec_pad = vec![false; b * t];
        let logp = f.decode(memory, &src_pad, s, &dec_ids, &dec_pad, b, t)?;
        let lp = f.g.value(logp).data();
        for r in 0..b {
            if done[r] {
                prefixes[r].push(EOS);
                continue;
            }
            let row = &lp[(r * t + t - 1) * v..(r * t + t) * v];
            let best = (0..v)
                .filter(|&k| k != PAD && k != BOS)
                .fold(EOS, |best, k| if row[k] > row[best] { k } else { best });
            prefixes[r].push(best);
            if best == EOS {
                done[r] = true;
            }
        }
        if done.iter().all(|d| *d) {
            break;
        }
    }
    Ok(prefixes
        .into_iter()
        .map(|p| p.into_iter().skip(1).take_while(|&t| t != EOS).collect())
        .collect())
}
