use std::collections::HashMap;

use rand::Rng;

use super::nn::{ParamId, ParamStore};
use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskScale {
        x: Var,
        mask: Vec<f64>,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        segments: Vec<Vec<usize>>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.adjoints[var.0].as_deref()
    }

    /// Adds every parameter adjoint into the matching accumulator in `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, var) in &self.params {
            if let Some(adj) = &self.adjoints[var.0] {
                store.tensor_mut(*id).accumulate_grad(adj);
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn last_dim(op: &'static str, t: &Tensor) -> Result<usize> {
    t.shape()
        .last()
        .copied()
        .ok_or_else(|| Error::shape(op, "expected rank >= 1"))
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor, kind: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        self.nodes.push(Node {
            value,
            op: kind,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A free-standing differentiable input; read its gradient with
    /// [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records parameter `id`. Repeated requests within one graph return the
    /// same handle so its gradient is accumulated once.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let t = store.tensor(id);
        self.nodes.push(Node {
            value: t.detached(),
            op: Op::Param,
            needs_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            "matmul",
            Tensor::new(vec![m, n], data)?,
            Op::MatMul(a, b),
            needs,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), m, n);
        let needs = self.needs(x);
        self.push(
            "transpose",
            Tensor::new(vec![n, m], data)?,
            Op::Transpose(x),
            needs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        kind: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(op, t, kind, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("scale", t, Op::Scale(x, c), needs)
    }

    /// `x[.., d] + b[d]`, broadcasting `b` over every leading index.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let d = last_dim("add_row", tx)?;
        if tb.shape() != [d] {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", tx.shape(), tb.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % d])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(b);
        self.push("add_row", t, Op::AddRow(x, b), needs)
    }

    /// `x[.., d] * w[d]`, broadcasting `w` over every leading index.
    pub fn mul_row(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let d = last_dim("mul_row", tx)?;
        if tw.shape() != [d] {
            return Err(Error::shape(
                "mul_row",
                format!("{:?} * {:?}", tx.shape(), tw.shape()),
            ));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tw.data()[i % d])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(w);
        self.push("mul_row", t, Op::MulRow(x, w), needs)
    }

    /// `x[n, d] * c[n, 1]`, scaling each row by its own coefficient.
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tx.rank() != 2 || tc.shape() != [tx.shape()[0], 1] {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} * {:?}", tx.shape(), tc.shape()),
            ));
        }
        let d = tx.shape()[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * tc.data()[i / d])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(c);
        self.push("mul_col", t, Op::MulCol(x, c), needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(0.0)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("relu", t, Op::Relu(x), needs)
    }

    /// Softmax along `axis`, with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[idx(k)] /= total;
                }
            }
        }
        let t = Tensor::new(t.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("softmax", t, Op::Softmax { x, axis }, needs)
    }

    /// Normalizes over the last axis to zero mean and unit variance. Affine
    /// scale and shift are applied separately with `mul_row` / `add_row`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = last_dim("layer_norm", t)?;
        let rows = t.numel() / d.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[r] = s;
            for (k, v) in row.iter().enumerate() {
                xhat[r * d + k] = (v - mean) * s;
            }
        }
        let out = Tensor::new(t.shape().to_vec(), xhat.clone())?;
        let needs = self.needs(x);
        self.push("layer_norm", out, Op::LayerNorm { x, xhat, inv_std }, needs)
    }

    /// Inverted dropout. Identity (same handle) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} not in [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.value(x);
        let mask: Vec<f64> = (0..t.numel())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        let needs = self.needs(x);
        self.push("dropout", t, Op::MaskScale { x, mask }, needs)
    }

    /// Rows `table[indices[i]]`; the embedding lookup.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.gather_rows(table, indices)
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::shape(
                    "gather_rows",
                    format!("index {i} >= {n} rows"),
                ));
            }
            data.extend_from_slice(t.row(i));
        }
        let t = Tensor::new(vec![indices.len(), d], data)?;
        let needs = self.needs(x);
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            needs,
        )
    }

    /// Output row `s` is the sum of `x` rows listed in `segments[s]`, added in
    /// list order. An empty segment yields a zero row.
    pub fn segment_sum(&mut self, x: Var, segments: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::shape("segment_sum", format!("{:?}", t.shape())));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; segments.len() * d];
        for (s, members) in segments.iter().enumerate() {
            let out = &mut data[s * d..(s + 1) * d];
            for &e in members {
                if e >= n {
                    return Err(Error::shape("segment_sum", format!("row {e} >= {n}")));
                }
                for (o, v) in out.iter_mut().zip(t.row(e)) {
                    *o += v;
                }
            }
        }
        let t = Tensor::new(vec![segments.len(), d], data)?;
        let needs = self.needs(x);
        self.push(
            "segment_sum",
            t,
            Op::SegmentSum {
                x,
                segments: segments.to_vec(),
            },
            needs,
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        axis_split(&base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.value(*p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", s, base),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis)?;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        let t = Tensor::new(shape, data)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// `len` entries of `x` along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, extent, inner) = axis_split(t.shape(), axis)?;
        if start + len > extent {
            return Err(Error::shape("slice", format!("{start}+{len} > {extent}")));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push("slice", t, Op::Slice { x, axis, start }, needs)
    }

    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let (_, extent, _) = axis_split(self.shape(x), axis)?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::shape(
                "split",
                format!("sizes {sizes:?} do not sum to {extent}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis)?;
        if len == 0 {
            return Err(Error::shape("mean_pool", "cannot pool an empty axis"));
        }
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += t.data()[(o * len + k) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push("mean_pool", t, Op::MeanAxis { x, axis }, needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Mean squared error between two same-shape values.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape("mse_loss", tp, tt)?;
        if tp.numel() == 0 {
            return Err(Error::shape("mse_loss", "empty input"));
        }
        let s: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let loss = s / tp.numel() as f64;
        let needs = self.needs(pred) || self.needs(target);
        self.push(
            "mse_loss",
            Tensor::scalar(loss),
            Op::Mse(pred, target),
            needs,
        )
    }

    /// Mean cross entropy of `logits` (`[k]` or `[rows, k]`) against class
    /// indices, one per row.
    pub fn cross_entropy_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let k = last_dim("cross_entropy_loss", t)?;
        let rows = if t.rank() == 1 {
            1
        } else {
            t.numel() / k.max(1)
        };
        if t.rank() > 2 || rows != targets.len() || k == 0 {
            return Err(Error::shape(
                "cross_entropy_loss",
                format!("logits {:?} vs {} targets", t.shape(), targets.len()),
            ));
        }
        let mut probs = vec![0.0; rows * k];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &t.data()[r * k..(r + 1) * k];
            if targets[r] >= k {
                return Err(Error::shape(
                    "cross_entropy_loss",
                    format!("class {} >= {k}", targets[r]),
                ));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (c, v) in row.iter().enumerate() {
                probs[r * k + c] = (v - lse).exp();
            }
            loss += lse - row[targets[r]];
        }
        loss /= rows as f64;
        let needs = self.needs(logits);
        let op = Op::CrossEntropy {
            logits,
            probs,
            targets: targets.to_vec(),
        };
        self.push("cross_entropy_loss", Tensor::scalar(loss), op, needs)
    }

    /// Mean binary cross entropy of sigmoid(`logits`) against 0/1 labels.
    pub fn binary_cross_entropy_loss(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != labels.len() || labels.is_empty() {
            return Err(Error::shape(
                "binary_cross_entropy_loss",
                format!("{} logits vs {} labels", t.numel(), labels.len()),
            ));
        }
        let s: f64 = t
            .data()
            .iter()
            .zip(labels)
            .map(|(x, y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let loss = s / labels.len() as f64;
        let needs = self.needs(logits);
        let op = Op::BceLogits {
            logits,
            labels: labels.to_vec(),
        };
        self.push("binary_cross_entropy_loss", Tensor::scalar(loss), op, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }

        let params = self.params.iter().map(|(id, v)| (*id, *v)).collect();
        Ok(Gradients {
            adjoints: adj,
            params,
        })
    }

    /// Convenience: backward then accumulate into parameter gradients.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        grads.accumulate_into(store);
        Ok(grads)
    }

    fn propagate(&self, node: &Node, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, delta: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        let shape = node.value.shape();
        match &node.op {
            Op::Constant | Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    send(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    send(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (shape[0], shape[1]);
                send(*x, transpose_raw(g, m, n));
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                send(*b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, b) => {
                send(*x, g.to_vec());
                let d = self.value(*b).numel();
                let mut gb = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gb[i % d] += v;
                }
                send(*b, gb);
            }
            Op::MulRow(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d = tw.numel();
                send(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| v * tw.data()[i % d])
                        .collect(),
                );
                let mut gw = vec![0.0; d];
                for (i, v) in g.iter().enumerate() {
                    gw[i % d] += v * tx.data()[i];
                }
                send(*w, gw);
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (self.value(*x), self.value(*c));
                let d = tx.shape()[1];
                send(
                    *x,
                    g.iter()
                        .enumerate()
                        .map(|(i, v)| v * tc.data()[i / d])
                        .collect(),
                );
                let mut gc = vec![0.0; tc.numel()];
                for (i, v) in g.iter().enumerate() {
                    gc[i / d] += v * tx.data()[i];
                }
                send(*c, gc);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                send(
                    *x,
                    g.iter()
                        .zip(tx.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(shape, *axis).expect("validated in forward");
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                send(*x, gx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = *shape.last().expect("rank >= 1");
                let mut gx = vec![0.0; g.len()];
                for (r, s) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mean_g = gr.iter().sum::<f64>() / d as f64;
                    let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for k in 0..d {
                        gx[r * d + k] = s * (gr[k] - mean_g - xr[k] * mean_gx);
                    }
                }
                send(*x, gx);
            }
            Op::MaskScale { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            Op::GatherRows { x, indices } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for (r, &src) in indices.iter().enumerate() {
                    for k in 0..d {
                        gx[src * d + k] += g[r * d + k];
                    }
                }
                send(*x, gx);
            }
            Op::SegmentSum { x, segments } => {
                let tx = self.value(*x);
                let d = tx.shape()[1];
                let mut gx = vec![0.0; tx.numel()];
                for (s, members) in segments.iter().enumerate() {
                    for &e in members {
                        for k in 0..d {
                            gx[e * d + k] += g[s * d + k];
                        }
                    }
                }
                send(*x, gx);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(shape, *axis).expect("validated in forward");
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    send(*p, gp);
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.value(*x);
                let (outer, extent, inner) =
                    axis_split(tx.shape(), *axis).expect("validated in forward");
                let len = shape[*axis];
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                send(*x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) =
                    axis_split(tx.shape(), *axis).expect("validated in forward");
                let mut gx = vec![0.0; tx.numel()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx[(o * len + k) * inner + i] = g[o * inner + i] / len as f64;
                        }
                    }
                }
                send(*x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0]; n]);
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let scale = 2.0 * g[0] / tp.numel() as f64;
                let diff: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(a, b)| scale * (a - b))
                    .collect();
                send(*t, diff.iter().map(|v| -v).collect());
                send(*p, diff);
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * k + t] -= scale;
                }
                send(*logits, gl);
            }
            Op::BceLogits { logits, labels } => {
                let tl = self.value(*logits);
                let scale = g[0] / labels.len() as f64;
                let gl = tl
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(x, y)| scale * (sigmoid(*x) - y))
                    .collect();
                send(*logits, gl);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
