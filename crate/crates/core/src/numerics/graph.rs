//! Dynamic tape for reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters are read in place
//! from a borrowed [`ParamStore`]; [`Graph::backward`] returns a [`Gradients`]
//! table that the caller folds back into the store once the graph is dropped.

use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Architecture stage a matmul is charged to by the operation counter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    SequenceEncoder,
    UniCrossAttn,
    QFormer,
    Head,
    Pretrain,
    Other,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::SequenceEncoder => "sequence_encoder",
            Stage::UniCrossAttn => "uni_cross_attn",
            Stage::QFormer => "qformer",
            Stage::Head => "head",
            Stage::Pretrain => "pretrain_heads",
            Stage::Other => "other",
        }
    }
}

/// Matmul FLOPs actually executed, tallied per stage (2·m·k·n per product).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    counts: BTreeMap<Stage, u64>,
}

impl FlopCounter {
    pub fn add(&mut self, stage: Stage, flops: u64) {
        *self.counts.entry(stage).or_default() += flops;
    }

    pub fn get(&self, stage: Stage) -> u64 {
        self.counts.get(&stage).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for (&s, &c) in &other.counts {
            self.add(s, c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, u64)> + '_ {
        self.counts.iter().map(|(&s, &c)| (s, c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Visibility pattern for attention scores.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Per-key visibility shared by every query row.
    Keys(Vec<bool>),
    /// Full `[queries, keys]` visibility matrix, row-major.
    Full { cols: usize, allowed: Vec<bool> },
}

enum Op<R> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddRow(Var, Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        row: Var,
        positions: Vec<usize>,
    },
    Columns {
        x: Var,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    MeanRows {
        x: Var,
        count: usize,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
    BceLogits {
        logits: Var,
        labels: Vec<R>,
    },
}

struct Node<R> {
    value: Option<Tensor<R>>,
    op: Op<R>,
    grad: bool,
}

pub struct Graph<'s, R: Real = f32> {
    store: &'s ParamStore<R>,
    nodes: Vec<Node<R>>,
    param_vars: HashMap<ParamId, Var>,
    stage: Stage,
    flops: FlopCounter,
    grad_enabled: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl<'s, R: Real> Graph<'s, R> {
    pub fn new(store: &'s ParamStore<R>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            stage: Stage::Other,
            flops: FlopCounter::default(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing requires gradients.
    pub fn inference(store: &'s ParamStore<R>) -> Self {
        let mut g = Self::new(store);
        g.grad_enabled = false;
        g
    }

    pub fn store(&self) -> &'s ParamStore<R> {
        self.store
    }

    pub fn set_stage(&mut self, stage: Stage) -> Stage {
        std::mem::replace(&mut self.stage, stage)
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn data(&self, v: Var) -> &[R] {
        self.value(v).data()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, inputs: &[Var]) -> Var {
        let grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i.0].grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Gradients::var`].
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let grad = self.grad_enabled && !self.store.get(id).frozen;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        self.flops.add(self.stage, 2 * (m * k * n) as u64);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        self.flops.add(self.stage, 2 * (m * k * n) as u64);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.data(a);
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out: Vec<R> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out: Vec<R> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: R) -> Var {
        let out: Vec<R> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(a, c), &[a])
    }

    /// `x[r, c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.value(x).cols();
        if self.value(bias).len() != c {
            return Err(Error::dim(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(bias)),
            ));
        }
        let b = self.data(bias);
        let out: Vec<R> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<R> = self.data(x).iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<R> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Sigmoid(x), &[x])
    }

    /// Row-wise softmax over the last axis. Hidden entries get probability 0.
    pub fn softmax(&mut self, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for r in 0..rows {
            let allowed = match mask {
                None => None,
                Some(AttnMask::Keys(keys)) => {
                    if keys.len() != cols {
                        return Err(Error::dim("softmax", "key mask length != columns"));
                    }
                    Some(keys.as_slice())
                }
                Some(AttnMask::Full { cols: mc, allowed }) => {
                    if *mc != cols || allowed.len() != rows * cols {
                        return Err(Error::dim("softmax", "mask shape != score shape"));
                    }
                    Some(&allowed[r * cols..(r + 1) * cols])
                }
            };
            if let Some(a) = allowed {
                if !a.iter().any(|&b| b) {
                    return Err(Error::Contract(format!("softmax row {r} has no visible entry")));
                }
            }
            kernels::softmax_row(&mut out[r * cols..(r + 1) * cols], allowed);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, d) = (t.rows(), t.cols());
        if d < 2 {
            return Err(Error::dim("layer_norm", "feature extent must be >= 2"));
        }
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", "gain/bias extent != features"));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let eps = R::of(LAYER_NORM_EPS);
        let dn = R::of(d as f64);
        let mut out = vec![R::zero(); rows * d];
        let mut xhat = vec![R::zero(); rows * d];
        let mut rstd = vec![R::zero(); rows];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Embedding lookup: rows of `table[V, d]` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::dim("gather", "no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::dim("gather", format!("id {bad} >= vocabulary {v}")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Copy of `x` with the listed rows overwritten by the vector `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, positions: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "replace_rows")?;
        if self.value(row).len() != d {
            return Err(Error::dim("replace_rows", "row extent != columns"));
        }
        if positions.iter().any(|&p| p >= n) {
            return Err(Error::dim("replace_rows", "position out of range"));
        }
        let mut out = self.data(x).to_vec();
        let r = self.data(row).to_vec();
        for &p in positions {
            out[p * d..(p + 1) * d].copy_from_slice(&r);
        }
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::ReplaceRows {
                x,
                row,
                positions: positions.to_vec(),
            },
            &[x, row],
        ))
    }

    pub fn columns(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "columns")?;
        if start + len > d || len == 0 {
            return Err(Error::dim("columns", format!("[{start}, {start}+{len}) of {d}")));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + start + len]);
        }
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::Columns { x, start, len }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.dims2(parts[0], "concat_rows")?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::dim("concat_rows", "column counts differ"));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        Ok(self.push(Tensor::new(vec![rows, d], out)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "select_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("select_rows", "empty or out-of-range index"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::SelectRows { x, idx: idx.to_vec() },
            &[x],
        ))
    }

    /// Tiles the whole of `x[r, d]` `times` times along rows.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, d) = self.dims2(x, "repeat_rows")?;
        if times == 0 {
            return Err(Error::dim("repeat_rows", "times must be >= 1"));
        }
        let out = self.data(x).repeat(times);
        Ok(self.push(Tensor::new(vec![r * times, d], out)?, Op::RepeatRows { x, times }, &[x]))
    }

    /// Mean of the first `count` rows, as a `[1, d]` row.
    pub fn mean_rows(&mut self, x: Var, count: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_rows")?;
        if count == 0 || count > n {
            return Err(Error::dim("mean_rows", format!("count {count} of {n} rows")));
        }
        let src = self.data(x);
        let mut out = vec![R::zero(); d];
        for r in 0..count {
            for (o, &v) in out.iter_mut().zip(&src[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = R::one() / R::of(count as f64);
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows { x, count }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum::<R>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[n, V]` against `targets[n]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", "one target per row required"));
        }
        if targets.iter().any(|&t| t >= v) {
            return Err(Error::dim("cross_entropy", "target outside vocabulary"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = R::zero();
        for r in 0..n {
            let row = &mut probs[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<R>().ln() + max;
            loss += lse - row[targets[r]];
            kernels::softmax_row(row, None);
        }
        let loss = loss / R::of(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against `labels`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[R]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != labels.len() {
            return Err(Error::dim("bce_with_logits", "one label per logit required"));
        }
        let mut loss = R::zero();
        for (&zi, &y) in z.iter().zip(labels) {
            loss += zi.max(R::zero()) - zi * y + (R::one() + (-zi.abs()).exp()).ln();
        }
        let loss = loss / R::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        self.backward_seeded(loss, R::one())
    }

    /// Reverse pass with the loss gradient seeded to `seed` (e.g. 1/batch).
    pub fn backward_seeded(&self, loss: Var, seed: R) -> Result<Gradients<R>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![seed]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(Var(i), &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
            }
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let params = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, out: Var, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let node = &self.nodes[out.0];
        let acc = |grads: &mut [Option<Vec<R>>], v: Var, f: &mut dyn FnMut(&mut [R])| {
            if !self.requires_grad(v) {
                return;
            }
            let len = self.value(v).len();
            let buf = grads[v.0].get_or_insert_with(|| vec![R::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                acc(grads, *a, &mut |da| gemm_nt(g, self.data(*b), da, m, n, k));
                acc(grads, *b, &mut |db| gemm_tn(self.data(*a), g, db, k, m, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                acc(grads, *a, &mut |da| gemm_nn(g, self.data(*b), da, m, n, k));
                acc(grads, *b, &mut |db| gemm_tn(g, self.data(*a), db, n, m, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                acc(grads, *a, &mut |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(grads, v, &mut |d| add_into(d, g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc(grads, *a, &mut |d| {
                    for ((d, &gi), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d += gi * y;
                    }
                });
                acc(grads, *b, &mut |d| {
                    for ((d, &gi), &x) in d.iter_mut().zip(g).zip(av) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(grads, *a, &mut |d| {
                for (d, &gi) in d.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }),
            Op::AddRow(x, bias) => {
                acc(grads, *x, &mut |d| add_into(d, g));
                let c = self.value(*bias).len();
                acc(grads, *bias, &mut |d| {
                    for (i, &gi) in g.iter().enumerate() {
                        d[i % c] += gi;
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.data(*x);
                acc(grads, *x, &mut |d| {
                    for ((d, &gi), &xi) in d.iter_mut().zip(g).zip(xv) {
                        *d += gi * kernels::gelu_grad(xi);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.data(out);
                acc(grads, *x, &mut |d| {
                    for ((d, &gi), &yi) in d.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (R::one() - yi);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = self.value(out);
                let cols = y.cols();
                acc(grads, *x, &mut |d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<R>();
                        for j in 0..cols {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = self.value(*gain).len();
                let rows = rstd.len();
                let gv = self.data(*gain);
                acc(grads, *x, &mut |dx| {
                    let dn = R::of(d as f64);
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = R::zero();
                        let mut mean_dh_h = R::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(grads, *gain, &mut |dg| {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[i % d] += gi * h;
                    }
                });
                acc(grads, *bias, &mut |db| {
                    for (i, &gi) in g.iter().enumerate() {
                        db[i % d] += gi;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                acc(grads, *table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::ReplaceRows { x, row, positions } => {
                let d = self.value(*row).len();
                acc(grads, *x, &mut |dx| {
                    add_into(dx, g);
                    for &p in positions {
                        for j in 0..d {
                            dx[p * d + j] -= g[p * d + j];
                        }
                    }
                });
                acc(grads, *row, &mut |dr| {
                    for &p in positions {
                        add_into(dr, &g[p * d..(p + 1) * d]);
                    }
                });
            }
            Op::Columns { x, start, len } => {
                let d = self.value(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for (r, gr) in g.chunks(*len).enumerate() {
                        add_into(&mut dx[r * d + start..r * d + start + len], gr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.value(out).cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(grads, p, &mut |dp| {
                        for (r, dr) in dp.chunks_mut(w).enumerate() {
                            add_into(dr, &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(grads, p, &mut |dp| add_into(dp, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SelectRows { x, idx } => {
                let d = self.value(*x).cols();
                acc(grads, *x, &mut |dx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dx[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::RepeatRows { x, times } => {
                let n = self.value(*x).len();
                acc(grads, *x, &mut |dx| {
                    for t in 0..*times {
                        add_into(dx, &g[t * n..(t + 1) * n]);
                    }
                });
            }
            Op::MeanRows { x, count } => {
                let d = self.value(*x).cols();
                let inv = R::one() / R::of(*count as f64);
                acc(grads, *x, &mut |dx| {
                    for r in 0..*count {
                        for j in 0..d {
                            dx[r * d + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(grads, *x, &mut |dx| add_into(dx, g)),
            Op::Sum(x) => acc(grads, *x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / R::of(targets.len() as f64);
                acc(grads, *logits, &mut |dl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { R::one() } else { R::zero() };
                            dl[r * v + j] += (probs[r * v + j] - onehot) * scale;
                        }
                    }
                });
            }
            Op::BceLogits { logits, labels } => {
                let z = self.data(*logits);
                let scale = g[0] / R::of(labels.len() as f64);
                acc(grads, *logits, &mut |dl| {
                    for ((d, &zi), &y) in dl.iter_mut().zip(z).zip(labels) {
                        *d += (kernels::sigmoid(zi) - y) * scale;
                    }
                });
            }
        }
    }
}

#[inline]
fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients produced by one reverse pass.
pub struct Gradients<R> {
    grads: Vec<Option<Vec<R>>>,
    params: Vec<(ParamId, Var)>,
}

impl<R: Real> Gradients<R> {
    pub fn var(&self, v: Var) -> Option<&[R]> {
        self.grads[v.0].as_deref()
    }

    pub fn param(&self, id: ParamId) -> Option<&[R]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.var(v))
    }

    /// Accumulates parameter gradients into `store`.
    pub fn apply(&self, store: &mut ParamStore<R>) {
        let mut params = self.params.clone();
        params.sort();
        for (id, v) in params {
            if let Some(g) = self.var(v) {
                store.accumulate_grad(id, g);
            }
        }
    }
}
