use std::cell::Cell;
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{add_into, gemm, permute_0213};
use super::{FlatGradient, Layout, ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Number of graph sweeps run on this thread.
///
/// A reverse sweep is one vector-Jacobian pass (`backward`); a tangent sweep
/// is the second pass of the gradient-dot-product trick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepCounts {
    pub reverse: u64,
    pub tangent: u64,
}

impl SweepCounts {
    pub fn total(&self) -> u64 {
        self.reverse + self.tangent
    }

    pub fn since(&self, earlier: SweepCounts) -> SweepCounts {
        SweepCounts {
            reverse: self.reverse - earlier.reverse,
            tangent: self.tangent - earlier.tangent,
        }
    }
}

thread_local! {
    static SWEEPS: Cell<SweepCounts> = const { Cell::new(SweepCounts { reverse: 0, tangent: 0 }) };
}

pub fn sweep_counts() -> SweepCounts {
    SWEEPS.with(Cell::get)
}

fn bump(reverse: bool) {
    SWEEPS.with(|c| {
        let mut v = c.get();
        if reverse {
            v.reverse += 1;
        } else {
            v.tangent += 1;
        }
        c.set(v);
    });
}

#[derive(Debug)]
enum Op {
    Leaf { param_slot: Option<usize> },
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding { table: Var, ids: Rc<[usize]> },
    Dropout { x: Var, keep_scale: Vec<f64> },
    Permute0213 { x: Var, dims: [usize; 4] },
    Reshape(Var),
    SmoothedNll {
        logp: Var,
        targets: Rc<[usize]>,
        valid: Rc<[bool]>,
        eps: f64,
    },
    SumLast(Var),
    SumAll(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Dropout { .. } => "dropout",
            Op::Permute0213 { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::SmoothedNll { .. } => "smoothed_nll",
            Op::SumLast(..) => "sum_last",
            Op::SumAll(..) => "sum_all",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Parameters bound into a graph as differentiable leaves.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
    layout: Layout,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::graph("param", format!("no parameter named {name:?}")))
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }
}

/// Computation record for one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is always
/// topologically sorted.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Leaf that takes part in differentiation.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push(Op::Leaf { param_slot: None }, value, requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Records every parameter as a differentiable leaf, in layout order.
    pub fn bind(&mut self, params: &ParameterSet) -> Result<BoundParams> {
        let mut vars = BTreeMap::new();
        for (slot, (name, t)) in params.iter().enumerate() {
            let v = self.push(
                Op::Leaf {
                    param_slot: Some(slot),
                },
                t.clone(),
                true,
            )?;
            vars.insert(name.clone(), v);
        }
        Ok(BoundParams {
            vars,
            layout: params.layout(),
        })
    }

    /// `[.., k] x [k, n] -> [.., n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.nodes[a.0].value.numel() / k.max(1);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push(Op::MatMul(a, b), Tensor::new(shape, out)?, rg)
    }

    /// Batched product `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T`
    /// when `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "batch_matmul",
                format!("cannot multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; g * m * n];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                false,
                &db[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let rg = self.rg(&[a, b]);
        self.push(
            Op::BatchMatMul { a, b, trans_b },
            Tensor::new(vec![g, m, n], out)?,
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Add(a, b), Tensor::new(shape, out)?, rg)
    }

    /// Adds a `[n]` vector to every row of `[.., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.is_empty() || sb.len() != 1 || sx[sx.len() - 1] != sb[0] {
            return Err(Error::shape(
                "add_row",
                format!("cannot broadcast {sb:?} over {sx:?}"),
            ));
        }
        let n = sb[0];
        let bias_data = self.data(bias);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bias_data).map(|(a, b)| a + b))
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(&[x, bias]);
        self.push(Op::AddRow(x, bias), Tensor::new(shape, out)?, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Op::Mul(a, b), Tensor::new(shape, out)?, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), Tensor::new(shape, out)?, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(Op::Relu(a), Tensor::new(shape, out)?, rg)
    }

    /// Softmax over the last axis. Entries where `allowed` is false get
    /// probability exactly zero; a row with nothing allowed is all zeros.
    pub fn softmax(&mut self, x: Var, allowed: Option<Rc<[bool]>>) -> Result<Var> {
        let n = self.nodes[x.0].value.last_dim();
        if let Some(mask) = &allowed {
            if mask.len() != self.nodes[x.0].value.numel() {
                return Err(Error::shape(
                    "softmax",
                    format!(
                        "mask of {} entries for input {:?}",
                        mask.len(),
                        self.shape(x)
                    ),
                ));
            }
        }
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (r, (row, dst)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let ok = |j: usize| allowed.as_ref().is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for j in 0..n {
                if ok(j) {
                    dst[j] = (row[j] - max).exp();
                    sum += dst[j];
                }
            }
            dst.iter_mut().for_each(|v| *v /= sum);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Softmax(x), Tensor::new(shape, out)?, rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.nodes[x.0].value.last_dim();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (row, dst) in src.chunks(n).zip(out.chunks_mut(n)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (d, v) in dst.iter_mut().zip(row) {
                *d = v - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::LogSoftmax(x), Tensor::new(shape, out)?, rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.nodes[x.0].value.last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            Tensor::new(shape, out)?,
            rg,
        )
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: Rc<[usize]>) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shape("embedding", format!("table shape {st:?}")));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape(
                "embedding",
                format!("id {bad} out of range for vocabulary of {vocab}"),
            ));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids.iter() {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        let shape = vec![ids.len(), d];
        self.push(Op::Embedding { table, ids }, Tensor::new(shape, out)?, rg)
    }

    /// Inverted dropout. `rate == 0` returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::graph("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let keep_scale: Vec<f64> = (0..self.nodes[x.0].value.numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&keep_scale)
            .map(|(a, s)| a * s)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(Op::Dropout { x, keep_scale }, Tensor::new(shape, out)?, rg)
    }

    /// `[a, b, c, d] -> [a, c, b, d]`
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::shape("permute", format!("expected rank 4, got {s:?}")));
        }
        let dims = [s[0], s[1], s[2], s[3]];
        let mut out = vec![0.0; self.nodes[x.0].value.numel()];
        permute_0213(self.data(x), dims, &mut out);
        let rg = self.rg(&[x]);
        self.push(
            Op::Permute0213 { x, dims },
            Tensor::new(vec![dims[0], dims[2], dims[1], dims[3]], out)?,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(Op::Reshape(x), value, rg)
    }

    /// Label-smoothed negative log-likelihood per row of `[N, V]` log
    /// probabilities. The smoothed target puts `1 - eps + eps / V` on the
    /// gold id and `eps / V` elsewhere. Rows with `valid == false` are zero.
    pub fn smoothed_nll(
        &mut self,
        logp: Var,
        targets: Rc<[usize]>,
        valid: Rc<[bool]>,
        eps: f64,
    ) -> Result<Var> {
        let s = self.shape(logp);
        if s.len() != 2 || targets.len() != s[0] || valid.len() != s[0] {
            return Err(Error::shape(
                "smoothed_nll",
                format!(
                    "log-probs {s:?} with {} targets and {} validity flags",
                    targets.len(),
                    valid.len()
                ),
            ));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::graph(
                "smoothed_nll",
                format!("smoothing {eps} outside [0, 1)"),
            ));
        }
        let (rows, v) = (s[0], s[1]);
        if let Some(bad) = (0..rows).find(|&r| valid[r] && targets[r] >= v) {
            return Err(Error::shape(
                "smoothed_nll",
                format!("target {} out of range for {v} classes", targets[bad]),
            ));
        }
        let src = self.data(logp);
        let off = eps / v as f64;
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            if !valid[r] {
                continue;
            }
            let row = &src[r * v..(r + 1) * v];
            let total: f64 = row.iter().sum();
            out[r] = -(off * total + (1.0 - eps) * row[targets[r]]);
        }
        let rg = self.rg(&[logp]);
        self.push(
            Op::SmoothedNll {
                logp,
                targets,
                valid,
                eps,
            },
            Tensor::new(vec![rows], out)?,
            rg,
        )
    }

    /// Sums the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::shape("sum_last", "scalar input"));
        }
        let n = s[s.len() - 1];
        let shape = s[..s.len() - 1].to_vec();
        let out: Vec<f64> = if n == 0 {
            vec![0.0; shape.iter().product()]
        } else {
            self.data(x).chunks(n).map(|c| c.iter().sum()).collect()
        };
        let rg = self.rg(&[x]);
        self.push(Op::SumLast(x), Tensor::new(shape, out)?, rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Op::SumAll(x), Tensor::scalar(total), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    /// Reverse-mode gradient of a scalar with respect to the bound parameters.
    pub fn backward(&self, loss: Var, params: &BoundParams) -> Result<FlatGradient> {
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(Error::graph(
                "backward",
                format!("loss must be a scalar, got shape {:?}", value.shape()),
            ));
        }
        self.backward_with_cotangent(loss, &[1.0], params)
    }

    /// Vector-Jacobian product of `out` against `cotangent`, returned as a
    /// gradient over the bound parameters.
    pub fn backward_with_cotangent(
        &self,
        out: Var,
        cotangent: &[f64],
        params: &BoundParams,
    ) -> Result<FlatGradient> {
        if cotangent.len() != self.nodes[out.0].value.numel() {
            return Err(Error::shape(
                "backward",
                format!(
                    "cotangent of {} entries for output {:?}",
                    cotangent.len(),
                    self.shape(out)
                ),
            ));
        }
        bump(true);
        let offsets = slot_offsets(params.layout());
        let mut flat = FlatGradient::zeros(params.layout().clone());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(cotangent.to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param_slot } = node.op {
                if let Some(slot) = param_slot {
                    let (start, end) = offsets[slot];
                    add_into(&mut flat.values_mut()[start..end], &g);
                }
                continue;
            }
            self.vjp(i, &g, &mut grads);
        }
        Ok(flat)
    }

    fn vjp(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.data(*b), true, da, 1.0);
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, k * n);
                    gemm(k, m, n, self.data(*a), true, g, false, db, 1.0);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.len() / (bs * m).max(1);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, bs * m * k);
                    for t in 0..bs {
                        let gi = &g[t * m * n..(t + 1) * m * n];
                        let bi = &bd[t * k * n..(t + 1) * k * n];
                        let out = &mut da[t * m * k..(t + 1) * m * k];
                        // trans_b: dA = G B ; else dA = G B^T
                        gemm(m, n, k, gi, false, bi, !trans_b, out, 1.0);
                    }
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, bs * k * n);
                    for t in 0..bs {
                        let gi = &g[t * m * n..(t + 1) * m * n];
                        let ai = &ad[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // dB [n, k] = G^T A
                            gemm(n, m, k, gi, true, ai, false, out, 1.0);
                        } else {
                            // dB [k, n] = A^T G
                            gemm(k, m, n, ai, true, gi, false, out, 1.0);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires_grad(*v) {
                        add_into(slot(grads, *v, g.len()), g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.requires_grad(*x) {
                    add_into(slot(grads, *x, g.len()), g);
                }
                if self.requires_grad(*bias) {
                    let n = self.shape(*bias)[0];
                    let db = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.requires_grad(*a) {
                    let da = slot(grads, *a, g.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.requires_grad(*b) {
                    let db = slot(grads, *b, g.len());
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, g.len());
                for (d, gv) in da.iter_mut().zip(g) {
                    *d += c * gv;
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                let da = slot(grads, *a, g.len());
                for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.last_dim();
                let dx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - s);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let dx = slot(grads, *x, g.len());
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += gv - yv.exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let gd = self.data(*gain);
                if self.requires_grad(*gain) {
                    let dg = slot(grads, *gain, n);
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, gv), hv) in dg.iter_mut().zip(gr).zip(hr) {
                            *d += gv * hv;
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let db = slot(grads, *bias, n);
                    for gr in g.chunks(n) {
                        add_into(db, gr);
                    }
                }
                if self.requires_grad(*x) {
                    let dx = slot(grads, *x, g.len());
                    let mut dh = vec![0.0; n];
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        for j in 0..n {
                            dh[j] = gr[j] * gd[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dhh =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dx[r * n + j] += is * (dh[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let numel = self.nodes[table.0].value.numel();
                let dt = slot(grads, *table, numel);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::Dropout { x, keep_scale } => {
                let dx = slot(grads, *x, g.len());
                for ((d, gv), s) in dx.iter_mut().zip(g).zip(keep_scale) {
                    *d += gv * s;
                }
            }
            Op::Permute0213 { x, dims } => {
                let mut back = vec![0.0; g.len()];
                permute_0213(g, [dims[0], dims[2], dims[1], dims[3]], &mut back);
                add_into(slot(grads, *x, g.len()), &back);
            }
            Op::Reshape(x) => {
                add_into(slot(grads, *x, g.len()), g);
            }
            Op::SmoothedNll {
                logp,
                targets,
                valid,
                eps,
            } => {
                let v = self.shape(*logp)[1];
                let off = eps / v as f64;
                let dl = slot(grads, *logp, g.len() * v);
                for (r, gv) in g.iter().enumerate() {
                    if !valid[r] {
                        continue;
                    }
                    let row = &mut dl[r * v..(r + 1) * v];
                    row.iter_mut().for_each(|d| *d -= off * gv);
                    row[targets[r]] -= (1.0 - eps) * gv;
                }
            }
            Op::SumLast(x) => {
                let numel = self.nodes[x.0].value.numel();
                let n = numel / g.len().max(1);
                let dx = slot(grads, *x, numel);
                for (dr, gv) in dx.chunks_mut(n.max(1)).zip(g) {
                    dr.iter_mut().for_each(|d| *d += gv);
                }
            }
            Op::SumAll(x) => {
                let numel = self.nodes[x.0].value.numel();
                let dx = slot(grads, *x, numel);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }

    /// Forward-mode directional derivative of `target` when the bound
    /// parameters move along `direction`.
    pub fn tangent(
        &self,
        target: Var,
        params: &BoundParams,
        direction: &FlatGradient,
    ) -> Result<Tensor> {
        if direction.layout() != params.layout() {
            return Err(Error::LayoutMismatch);
        }
        bump(false);
        let offsets = slot_offsets(params.layout());
        let mut tans: Vec<Option<Vec<f64>>> = Vec::with_capacity(target.0 + 1);
        for i in 0..=target.0 {
            let node = &self.nodes[i];
            let t = if !node.requires_grad {
                None
            } else if let Op::Leaf { param_slot } = node.op {
                param_slot.map(|s| {
                    let (start, end) = offsets[s];
                    direction.values()[start..end].to_vec()
                })
            } else {
                self.jvp(i, &tans)
            };
            tans.push(t);
        }
        let shape = self.shape(target).to_vec();
        let data = tans
            .pop()
            .flatten()
            .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
        Tensor::new(shape, data)
    }

    fn jvp(&self, i: usize, tans: &[Option<Vec<f64>>]) -> Option<Vec<f64>> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let t = |v: &Var| tans[v.0].as_deref();
        match &node.op {
            Op::Leaf { .. } => None,
            Op::MatMul(a, b) => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = y.len() / n.max(1);
                if t(a).is_none() && t(b).is_none() {
                    return None;
                }
                let mut out = vec![0.0; y.len()];
                if let Some(ta) = t(a) {
                    gemm(m, k, n, ta, false, self.data(*b), false, &mut out, 1.0);
                }
                if let Some(tb) = t(b) {
                    gemm(m, k, n, self.data(*a), false, tb, false, &mut out, 1.0);
                }
                Some(out)
            }
            Op::BatchMatMul { a, b, trans_b } => {
                if t(a).is_none() && t(b).is_none() {
                    return None;
                }
                let sa = self.shape(*a);
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = y.len() / (bs * m).max(1);
                let mut out = vec![0.0; y.len()];
                let (ad, bd) = (self.data(*a), self.data(*b));
                for s in 0..bs {
                    let o = &mut out[s * m * n..(s + 1) * m * n];
                    let ra = s * m * k..(s + 1) * m * k;
                    let rb = s * k * n..(s + 1) * k * n;
                    if let Some(ta) = t(a) {
                        gemm(m, k, n, &ta[ra.clone()], false, &bd[rb.clone()], *trans_b, o, 1.0);
                    }
                    if let Some(tb) = t(b) {
                        gemm(m, k, n, &ad[ra], false, &tb[rb], *trans_b, o, 1.0);
                    }
                }
                Some(out)
            }
            Op::Add(a, b) => match (t(a), t(b)) {
                (None, None) => None,
                (Some(x), None) | (None, Some(x)) => Some(x.to_vec()),
                (Some(x), Some(z)) => Some(x.iter().zip(z).map(|(p, q)| p + q).collect()),
            },
            Op::AddRow(x, bias) => {
                if t(x).is_none() && t(bias).is_none() {
                    return None;
                }
                let mut out = t(x).map_or_else(|| vec![0.0; y.len()], <[f64]>::to_vec);
                if let Some(tb) = t(bias) {
                    for row in out.chunks_mut(tb.len()) {
                        add_into(row, tb);
                    }
                }
                Some(out)
            }
            Op::Mul(a, b) => {
                if t(a).is_none() && t(b).is_none() {
                    return None;
                }
                let mut out = vec![0.0; y.len()];
                if let Some(ta) = t(a) {
                    for ((o, p), q) in out.iter_mut().zip(ta).zip(self.data(*b)) {
                        *o += p * q;
                    }
                }
                if let Some(tb) = t(b) {
                    for ((o, p), q) in out.iter_mut().zip(self.data(*a)).zip(tb) {
                        *o += p * q;
                    }
                }
                Some(out)
            }
            Op::Scale(a, c) => t(a).map(|ta| ta.iter().map(|v| v * c).collect()),
            Op::Relu(a) => t(a).map(|ta| {
                ta.iter()
                    .zip(self.data(*a))
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect()
            }),
            Op::Softmax(x) => t(x).map(|tx| {
                let n = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((yr, tr), or) in y.chunks(n).zip(tx.chunks(n)).zip(out.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(tr).map(|(a, b)| a * b).sum();
                    for ((o, yv), tv) in or.iter_mut().zip(yr).zip(tr) {
                        *o = yv * (tv - s);
                    }
                }
                out
            }),
            Op::LogSoftmax(x) => t(x).map(|tx| {
                let n = node.value.last_dim();
                let mut out = vec![0.0; y.len()];
                for ((yr, tr), or) in y.chunks(n).zip(tx.chunks(n)).zip(out.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(tr).map(|(a, b)| a.exp() * b).sum();
                    for (o, tv) in or.iter_mut().zip(tr) {
                        *o = tv - s;
                    }
                }
                out
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if t(x).is_none() && t(gain).is_none() && t(bias).is_none() {
                    return None;
                }
                let n = node.value.last_dim();
                let gd = self.data(*gain);
                let mut out = vec![0.0; y.len()];
                if let Some(tx) = t(x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let tr = &tx[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mean_t = tr.iter().sum::<f64>() / n as f64;
                        let mean_ht = tr.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            out[r * n + j] = gd[j] * is * (tr[j] - mean_t - hr[j] * mean_ht);
                        }
                    }
                }
                if let Some(tg) = t(gain) {
                    for (or, hr) in out.chunks_mut(n).zip(xhat.chunks(n)) {
                        for ((o, h), gv) in or.iter_mut().zip(hr).zip(tg) {
                            *o += h * gv;
                        }
                    }
                }
                if let Some(tb) = t(bias) {
                    for or in out.chunks_mut(n) {
                        add_into(or, tb);
                    }
                }
                Some(out)
            }
            Op::Embedding { table, ids } => t(table).map(|tt| {
                let d = self.shape(*table)[1];
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in ids.iter() {
                    out.extend_from_slice(&tt[id * d..(id + 1) * d]);
                }
                out
            }),
            Op::Dropout { x, keep_scale } => {
                t(x).map(|tx| tx.iter().zip(keep_scale).map(|(a, s)| a * s).collect())
            }
            Op::Permute0213 { x, dims } => t(x).map(|tx| {
                let mut out = vec![0.0; tx.len()];
                permute_0213(tx, *dims, &mut out);
                out
            }),
            Op::Reshape(x) => t(x).map(<[f64]>::to_vec),
            Op::SmoothedNll {
                logp,
                targets,
                valid,
                eps,
            } => t(logp).map(|tl| {
                let v = self.shape(*logp)[1];
                let off = eps / v as f64;
                (0..y.len())
                    .map(|r| {
                        if !valid[r] {
                            return 0.0;
                        }
                        let row = &tl[r * v..(r + 1) * v];
                        -(off * row.iter().sum::<f64>() + (1.0 - eps) * row[targets[r]])
                    })
                    .collect()
            }),
            Op::SumLast(x) => t(x).map(|tx| {
                let n = tx.len() / y.len().max(1);
                if n == 0 {
                    return vec![0.0; y.len()];
                }
                tx.chunks(n).map(|c| c.iter().sum()).collect()
            }),
            Op::SumAll(x) => t(x).map(|tx| vec![tx.iter().sum()]),
        }
    }

    /// Per-unit gradient dot products via the dummy-weight construction.
    ///
    /// The graph must contain `weights * per_unit_losses` (elementwise, with
    /// every weight equal to 1) feeding a scalar objective
    /// `L(z) = sum_i z_i * l_i`. Because `L` is linear in `z`,
    /// `d/dz_i [grad_theta L(z) . direction] = grad_theta l_i . direction`,
    /// which is the directional derivative of `l_i` along `direction`.
    /// That second-order quantity is evaluated in a single tangent sweep over
    /// the record.
    pub fn grad_dot_per_weight(
        &self,
        per_unit_losses: Var,
        weights: Var,
        params: &BoundParams,
        direction: &FlatGradient,
    ) -> Result<Tensor> {
        const OP: &str = "grad_dot_per_weight";
        if self.shape(per_unit_losses) != self.shape(weights) {
            return Err(Error::shape(
                OP,
                format!(
                    "losses {:?} vs weights {:?}",
                    self.shape(per_unit_losses),
                    self.shape(weights)
                ),
            ));
        }
        if !matches!(self.nodes[weights.0].op, Op::Leaf { param_slot: None }) {
            return Err(Error::graph(OP, "weights must be a non-parameter leaf"));
        }
        if self.data(weights).iter().any(|&w| w != 1.0) {
            return Err(Error::graph(OP, "weights must be evaluated at 1"));
        }
        let recorded = self.nodes.iter().any(|n| match n.op {
            Op::Mul(a, b) => {
                (a == weights && b == per_unit_losses) || (a == per_unit_losses && b == weights)
            }
            _ => false,
        });
        if !recorded {
            return Err(Error::graph(
                OP,
                "weights are not a recorded multiplicative factor of the losses",
            ));
        }
        self.tangent(per_unit_losses, params, direction)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn slot_offsets(layout: &Layout) -> Vec<(usize, usize)> {
    let mut offset = 0;
    layout
        .iter()
        .map(|e| {
            let start = offset;
            offset += e.numel();
            (start, offset)
        })
        .collect()
}
