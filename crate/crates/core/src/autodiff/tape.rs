//! Reverse-mode tape. Every forward op appends one node; `backward` walks the
//! nodes in reverse creation order, which is a valid reverse topological order.

use std::collections::HashMap;

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{axis_extents, gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a per-row loss is reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        x: Var,
        ids: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MaskedFill {
        x: Var,
        keep: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    TokenLoss {
        logits: Var,
        rows: Vec<LossRow>,
        gamma: f64,
        probs: Vec<f64>,
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy)]
struct LossRow {
    row: usize,
    target: usize,
    weight: f64,
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records forward computations for one pass and differentiates them.
///
/// Parameter leaves read their values from a borrowed [`ParamStore`], so
/// building a tape never copies weights.
pub struct Tape<'p> {
    params: Option<&'p ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    nodes: Vec<Node>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            params: None,
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            param_vars: HashMap::new(),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self
                .params
                .expect("param leaf without a store")
                .get(*id),
            (None, _) => unreachable!("non-param node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free-standing trainable leaf (used for op-level gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "tape has no parameter store");
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what}: expected a matrix, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (k2, n) = self.matrix_dims(b, "matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast_check(&self, x: Var, row: Var, what: &str) -> Result<(usize, usize)> {
        let (m, n) = self.matrix_dims(x, what)?;
        if self.value(row).numel() != n {
            return Err(Error::dim(format!(
                "{what}: row vector of {} values against {n} columns",
                self.value(row).numel()
            )));
        }
        Ok((m, n))
    }

    /// `x + b` with `b` (n values) added to every row of `x` (m×n).
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_check(x, b, "add_row")?;
        let bias = self.value(b).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += bias[i % n];
        }
        Ok(self.push(t, Op::AddRow(x, b), &[x, b]))
    }

    /// `x * s` with `s` (n values) multiplied into every row of `x`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (_, n) = self.row_broadcast_check(x, s, "mul_row")?;
        let scale = self.value(s).data().to_vec();
        let mut t = self.value(x).clone();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= scale[i % n];
        }
        Ok(self.push(t, Op::MulRow(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        });
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(t, Op::Tanh(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
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
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes each row (last axis) to zero mean and unit variance.
    /// The affine part is left to `mul_row`/`add_row`.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm of a scalar"))?;
        if n == 0 {
            return Err(Error::dim("layer_norm over an empty axis"));
        }
        let src = self.value(x).data();
        let rows = src.len() / n;
        let mut normalized = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normalized[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let t = Tensor::new(shape, normalized.clone())?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                normalized,
                inv_std,
            },
            &[x],
        ))
    }

    /// Row gather: `out[r] = x[ids[r]]`. Embedding lookup is this op on a table.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= m) {
            return Err(Error::dim(format!("gather_rows index {bad} out of {m} rows")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![ids.len(), n], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    /// Row scatter-add: `out[ids[r]] += x[r]`, output has `n_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, ids: &[usize], n_rows: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "scatter_add_rows")?;
        if ids.len() != m {
            return Err(Error::dim(format!(
                "scatter_add_rows: {} indices for {m} rows",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n_rows) {
            return Err(Error::dim(format!("scatter index {bad} out of {n_rows} rows")));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(&[n_rows, n]);
        for (r, &i) in ids.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(src.row(r)) {
                *o += v;
            }
        }
        Ok(self.push(
            out,
            Op::ScatterRows {
                x,
                ids: ids.to_vec(),
            },
            &[x],
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims(x, "transpose")?;
        let t = self.value(x).transposed();
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rank = self.shape(first).len();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut out_shape = self.shape(first).to_vec();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(&out_shape)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: incompatible shape {s:?} vs {:?}",
                    self.shape(first)
                )));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_extents(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_cols")?;
        if start > end || end > n {
            return Err(Error::dim(format!("column slice {start}..{end} of {n}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src.row(r)[start..end]);
        }
        let t = Tensor::new(vec![m, end - start], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if start > end || end > m {
            return Err(Error::dim(format!("row slice {start}..{end} of {m}")));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let t = Tensor::new(vec![end - start, n], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Replaces every element whose `keep` flag is false with `fill`.
    pub fn masked_fill(&mut self, x: Var, keep: &[bool], fill: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::dim(format!(
                "mask of {} flags for {} elements",
                keep.len(),
                self.value(x).numel()
            )));
        }
        let mut t = self.value(x).clone();
        for (v, &k) in t.data_mut().iter_mut().zip(keep) {
            if !k {
                *v = fill;
            }
        }
        Ok(self.push(
            t,
            Op::MaskedFill {
                x,
                keep: keep.to_vec(),
            },
            &[x],
        ))
    }

    /// Zeroes whole rows whose flag is false.
    pub fn mask_rows(&mut self, x: Var, row_keep: &[bool]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "mask_rows")?;
        if row_keep.len() != m {
            return Err(Error::dim(format!("{} row flags for {m} rows", row_keep.len())));
        }
        let keep: Vec<bool> = row_keep
            .iter()
            .flat_map(|&k| std::iter::repeat(k).take(n))
            .collect();
        self.masked_fill(x, &keep, 0.0)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / v.numel().max(1) as f64);
        self.push(t, Op::Mean(x), &[x])
    }

    /// Focal/weighted cross-entropy over rows of `logits`.
    ///
    /// Row `r` contributes `-w[t] (1 - p_t)^gamma ln p_t` where `t = targets[r]`;
    /// rows whose target is `None` are skipped. `gamma = 0` gives plain
    /// (weighted) cross-entropy. `weights`, when given, is indexed by class.
    pub fn token_loss(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        weights: Option<&[f64]>,
        gamma: f64,
        reduction: Reduction,
    ) -> Result<Var> {
        let (m, v) = self.matrix_dims(logits, "token_loss")?;
        if targets.len() != m {
            return Err(Error::dim(format!("{} targets for {m} logit rows", targets.len())));
        }
        if let Some(w) = weights {
            if w.len() != v {
                return Err(Error::dim(format!("{} class weights for {v} classes", w.len())));
            }
        }
        let z = self.value(logits).data();
        let mut rows = Vec::new();
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::dim(format!("target {t} out of {v} classes")));
            }
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            let log_pt = row[t] - lse;
            let pt = log_pt.exp();
            let weight = weights.map_or(1.0, |w| w[t]);
            total += -weight * (1.0 - pt).powf(gamma) * log_pt;
            rows.push(LossRow {
                row: r,
                target: t,
                weight,
            });
        }
        let scale = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / rows.len().max(1) as f64,
        };
        let t = Tensor::scalar(total * scale);
        Ok(self.push(
            t,
            Op::TokenLoss {
                logits,
                rows,
                gamma,
                probs,
                scale,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar. Every trainable leaf reachable or not gets
    /// a gradient entry (zeros when disconnected); constants get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad
                && matches!(node.op, Op::Leaf | Op::Param(_))
                && grads[i].is_none()
            {
                grads[i] = Some(Tensor::zeros(self.value(Var(i)).shape()));
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = self.value(Var(i));
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g.data(), self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), g.data(), &mut db, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, |x, y| x * y));
                self.accumulate(grads, *b, g.zip_map(va, |x, y| x * y));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                let bshape = self.shape(*b).to_vec();
                let n = g.cols();
                let mut db = vec![0.0; n];
                for r in 0..g.rows() {
                    for (d, v) in db.iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::new(bshape, db)?);
            }
            Op::MulRow(x, s) => {
                let xv = self.value(*x);
                let sv = self.value(*s).data();
                let n = g.cols();
                let mut dx = g.clone();
                for (idx, v) in dx.data_mut().iter_mut().enumerate() {
                    *v *= sv[idx % n];
                }
                self.accumulate(grads, *x, dx);
                let mut ds = vec![0.0; n];
                for (idx, (gv, xv)) in g.data().iter().zip(xv.data()).enumerate() {
                    ds[idx % n] += gv * xv;
                }
                let sshape = self.shape(*s).to_vec();
                self.accumulate(grads, *s, Tensor::new(sshape, ds)?);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Gelu(x) => {
                let dx = self.value(*x).zip_map(g, |v, gv| {
                    let u = GELU_C * (v + GELU_A * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = out.zip_map(g, |y, gv| gv * (1.0 - y * y));
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let gd = g.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::LayerNorm {
                x,
                normalized,
                inv_std,
            } => {
                let n = *out.shape().last().expect("rank >= 1");
                let gd = g.data();
                let mut dx = vec![0.0; gd.len()];
                for (r, &is) in inv_std.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let gr = &gd[span.clone()];
                    let xr = &normalized[span.clone()];
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for ((d, &gv), &xh) in dx[span].iter_mut().zip(gr).zip(xr) {
                        *d = is / n as f64 * (n as f64 * gv - sum_g - xh * sum_gx);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), dx)?);
            }
            Op::GatherRows { x, ids } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (r, &id) in ids.iter().enumerate() {
                    for (d, v) in dx.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ScatterRows { x, ids } => {
                let n = g.cols();
                let mut dx = Vec::with_capacity(ids.len() * n);
                for &id in ids {
                    dx.extend_from_slice(g.row(id));
                }
                self.accumulate(grads, *x, Tensor::new(vec![ids.len(), n], dx)?);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transposed()),
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshaped(&shape)?);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    let mut part = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&g.data()[base..base + len * inner]);
                    }
                    offset += len;
                    let shape = self.shape(v).to_vec();
                    self.accumulate(grads, v, Tensor::new(shape, part)?);
                }
            }
            Op::SliceCols { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let w = g.cols();
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                let n = g.cols();
                dx.data_mut()[start * n..start * n + g.numel()].copy_from_slice(g.data());
                self.accumulate(grads, *x, dx);
            }
            Op::MaskedFill { x, keep } => {
                let mut dx = g.clone();
                for (d, &k) in dx.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *d = 0.0;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel().max(1) as f64;
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::TokenLoss {
                logits,
                rows,
                gamma,
                probs,
                scale,
            } => {
                let v = self.value(*logits).cols();
                let upstream = g.item() * scale;
                let mut dz = Tensor::zeros(self.shape(*logits));
                for lr in rows {
                    let p = &probs[lr.row * v..(lr.row + 1) * v];
                    let pt = p[lr.target];
                    let q = 1.0 - pt;
                    // d(loss_row)/d(p_t) * p_t
                    let focal_term = if *gamma == 0.0 || q <= 0.0 {
                        0.0
                    } else {
                        gamma * q.powf(gamma - 1.0) * pt * pt.ln()
                    };
                    let coef = lr.weight * (focal_term - q.powf(*gamma)) * upstream;
                    let d = dz.row_mut(lr.row);
                    for (k, (dk, &pk)) in d.iter_mut().zip(p).enumerate() {
                        let delta = if k == lr.target { 1.0 } else { 0.0 };
                        *dk = coef * (delta - pk);
                    }
                }
                self.accumulate(grads, *logits, dz);
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, i)| self.grads[i].as_ref())
    }

    /// Adds every parameter gradient into `out`.
    pub fn accumulate_into(&self, out: &mut ParamGrads) {
        for &(id, i) in &self.params {
            if let Some(g) = &self.grads[i] {
                out.accumulate(id, g);
            }
        }
    }
}
