use std::sync::Arc;

use rand::Rng;

use super::tensor::{mm, mm_nt, mm_tn};
use super::{ParamId, ParameterStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Dropout(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. One forward pass, one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(usize, u64, ParamId)>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// A constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient but is not bound to any store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter. Frozen parameters record no gradient.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let rg = store.is_trainable(id);
        let v = self.push_arc(store.value_arc(id), Op::Leaf, rg);
        self.params.push((v.0, store.store_id(), id));
        v
    }

    /// Binds a stored parameter as a constant, regardless of tag.
    pub fn param_frozen(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        self.push_arc(store.value_arc(id), Op::Leaf, false)
    }

    /// Like [`Tape::param`] but always tracks the gradient, regardless of tag.
    pub fn param_tracked(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let v = self.push_arc(store.value_arc(id), Op::Leaf, true);
        self.params.push((v.0, store.store_id(), id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let ((m, k), (k2, n)) = (sa.dims2(), sb.dims2());
        if k != k2 || sa.shape().len() != 2 || sb.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", sa.shape(), sb.shape()),
            ));
        }
        let out = mm(sa.data(), sb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// a · bᵀ.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a), self.value(b));
        let ((m, k), (n, k2)) = (sa.dims2(), sb.dims2());
        if k != k2 || sa.shape().len() != 2 || sb.shape().len() != 2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} · {:?}ᵀ", sa.shape(), sb.shape()),
            ));
        }
        let out = mm_nt(sa.data(), sb.data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (_, n) = va.dims2();
        if vb.numel() != n {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of {:?}", vb.shape(), va.shape()),
            ));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let t = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let (_, n) = va.dims2();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization followed by the affine map `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "affine {:?}/{:?} for rows of width {n}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &vx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        let (m, n) = vt.dims2();
        if vt.shape().len() != 2 {
            return Err(Error::shape("embedding_lookup", "table must be 2-D"));
        }
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::shape(
                    "embedding_lookup",
                    format!("row {r} out of range for {m} rows"),
                ));
            }
            out.extend_from_slice(vt.row(r));
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::GatherRows(table, rows.to_vec()), rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        self.gather_rows(table, &rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if c != n {
                return Err(Error::shape("concat_rows", format!("width {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, n], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        if start + len > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let data = vx.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        let (m, n) = vx.dims2();
        if start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&vx.data()[r * n + start..r * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).dims2().1).collect();
        if parts.iter().any(|p| self.value(*p).dims2().0 != m) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Mean softmax cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (m, n) = vl.dims2();
        if targets.len() != m || targets.iter().any(|&t| t >= n) || m == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for logits {:?}", targets.len(), vl.shape()),
            ));
        }
        let mut probs = vec![0.0; m * n];
        let mut loss = 0.0;
        for r in 0..m {
            let row = vl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[targets[r]];
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / m as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.numel() != targets.len() || targets.is_empty() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} targets for logits {:?}", targets.len(), vl.shape()),
            ));
        }
        let loss: f64 = vl
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means of an m×n matrix, as a 1×n matrix.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let (m, n) = v.dims2();
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x / m as f64;
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::new(vec![1, n], out).expect("1×n"),
            Op::MeanRows(a),
            rg,
        )
    }

    /// Inverted dropout: zeroes entries with probability `rate`, scales the rest.
    pub fn dropout<R: Rng>(&mut self, a: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(a).numel())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let va = self.value(a);
        let data = va.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Dropout(a, mask), rg)
    }

    /// Fills gradients of every tracked node with respect to scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::StaleGraph);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>| {
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ((m, k), (_, n)) = (va.dims2(), vb.dims2());
                if needs(*a) {
                    acc(grads, *a, mm_nt(g, vb.data(), m, n, k));
                }
                if needs(*b) {
                    acc(grads, *b, mm_tn(va.data(), g, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a bᵀ, a m×k, b n×k
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ((m, k), (n, _)) = (va.dims2(), vb.dims2());
                if needs(*a) {
                    acc(grads, *a, mm(g, vb.data(), m, n, k));
                }
                if needs(*b) {
                    acc(grads, *b, mm_tn(g, va.data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(*v) {
                        acc(grads, *v, g.to_vec());
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if needs(*a) {
                    acc(grads, *a, g.to_vec());
                }
                if needs(*bias) {
                    let n = nodes[bias.0].value.numel();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    acc(grads, *bias, gb);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if needs(*a) {
                    acc(grads, *a, g.iter().zip(vb).map(|(x, y)| x * y).collect());
                }
                if needs(*b) {
                    acc(grads, *b, g.iter().zip(va).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    acc(grads, *a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    let y = out.data();
                    acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let x = nodes[a.0].value.data();
                    acc(grads, *a, g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect());
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    let y = out.data();
                    acc(grads, *a, g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect());
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let (_, n) = out.dims2();
                    let mut dx = vec![0.0; g.len()];
                    for ((dxr, yr), gr) in dx
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(g.chunks(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for ((d, y), g) in dxr.iter_mut().zip(yr).zip(gr) {
                            *d = y * (g - dot);
                        }
                    }
                    acc(grads, *a, dx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = nodes[gamma.0].value.numel();
                let gam = nodes[gamma.0].value.data();
                if needs(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if needs(*beta) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(s, x)| *s += x);
                    }
                    acc(grads, *beta, gb);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (r, ((dxr, gr), hr)) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(d, h)| d * h).sum();
                        let nf = n as f64;
                        for c in 0..n {
                            dxr[c] = rstd[r] / nf * (nf * dh[c] - sum_dh - hr[c] * sum_dh_h);
                        }
                    }
                    acc(grads, *x, dx);
                }
            }
            Op::GatherRows(table, rows) => {
                if needs(*table) {
                    let vt = &nodes[table.0].value;
                    let (_, n) = vt.dims2();
                    let mut gt = vec![0.0; vt.numel()];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..n {
                            gt[r * n + c] += g[i * n + c];
                        }
                    }
                    acc(grads, *table, gt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    if needs(*p) {
                        acc(grads, *p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(x, start) => {
                if needs(*x) {
                    let vx = &nodes[x.0].value;
                    let (_, n) = vx.dims2();
                    let mut gx = vec![0.0; vx.numel()];
                    gx[start * n..start * n + g.len()].copy_from_slice(g);
                    acc(grads, *x, gx);
                }
            }
            Op::SliceCols(x, start) => {
                if needs(*x) {
                    let vx = &nodes[x.0].value;
                    let (m, n) = vx.dims2();
                    let len = out.dims2().1;
                    let mut gx = vec![0.0; vx.numel()];
                    for r in 0..m {
                        gx[r * n + start..r * n + start + len]
                            .copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = out.dims2();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.dims2().1;
                    if needs(*p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, *p, gp);
                    }
                    offset += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let m = targets.len();
                    let n = probs.len() / m;
                    let s = g[0] / m as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * s).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * n + t] -= s;
                    }
                    acc(grads, *logits, dl);
                }
            }
            Op::BceWithLogits { logits, targets } => {
                if needs(*logits) {
                    let z = nodes[logits.0].value.data();
                    let s = g[0] / targets.len() as f64;
                    acc(
                        grads,
                        *logits,
                        z.iter().zip(targets).map(|(z, y)| s * (sigmoid(*z) - y)).collect(),
                    );
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    acc(grads, *a, vec![g[0]; nodes[a.0].value.numel()]);
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = nodes[a.0].value.numel();
                    acc(grads, *a, vec![g[0] / n as f64; n]);
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let (m, _) = nodes[a.0].value.dims2();
                    let mut ga = Vec::with_capacity(nodes[a.0].value.numel());
                    for _ in 0..m {
                        ga.extend(g.iter().map(|x| x / m as f64));
                    }
                    acc(grads, *a, ga);
                }
            }
            Op::Dropout(a, mask) => {
                if needs(*a) {
                    acc(grads, *a, g.iter().zip(mask).map(|(g, m)| g * m).collect());
                }
            }
        }
    }

    /// Adds `scale ×` the gradients of the parameters bound from `store` into
    /// the store's gradient slots. Frozen parameters are skipped.
    pub fn accumulate_into(&self, store: &mut ParameterStore, scale: f64) {
        for &(node, sid, pid) in &self.params {
            if sid != store.store_id() || !store.is_trainable(pid) {
                continue;
            }
            if let Some(g) = self.grads.get(node).and_then(|g| g.as_ref()) {
                store.accumulate_grad(pid, g, scale);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        let y = t.softmax(x);
        assert!(close(t.value(y).data(), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(1, 4, &[2.5; 4]).unwrap());
        let g = t.constant(Tensor::vector(&[1.0; 4]));
        let b = t.constant(Tensor::vector(&[0.0; 4]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(t.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_hand_value() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = t.constant(Tensor::matrix(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        // [1·7+2·9+3·11, 1·8+2·10+3·12; 4·7+5·9+6·11, 4·8+5·10+6·12]
        assert_eq!(t.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(t.value(c).shape(), &[2, 2]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("{other:?}"),
        }
        let c = t.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(t.add(a, c), Err(Error::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_and_square_gradients() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(&[1.0, 2.0, 3.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(&[1.0, 2.0]));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_stale() {
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(&[1.0]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(Error::StaleGraph)));
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParameterStore::new();
        let w = store.add("w", Tensor::vector(&[1.0, 2.0]), false);
        let u = store.add("u", Tensor::vector(&[3.0, 4.0]), true);
        let mut t = Tape::new();
        let wv = t.param(&store, w);
        let uv = t.param(&store, u);
        let p = t.mul(wv, uv).unwrap();
        let s = t.sum(p);
        t.backward(s).unwrap();
        assert!(t.grad(wv).is_none());
        t.accumulate_into(&mut store, 1.0);
        assert!(store.grad(w).is_none());
        assert_eq!(store.grad(u).unwrap(), &[1.0, 2.0]);
    }

    /// Central-difference check of d(loss)/d(leaf) for a closure building a graph.
    fn fd_check(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
    ) -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
        let loss = build(&mut t, &vars);
        t.backward(loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, x) in inputs.iter().enumerate() {
            let analytic = t.grad(vars[i]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.numel()]);
            for j in 0..x.numel() {
                let eval = |delta: f64| {
                    let mut shifted = inputs.to_vec();
                    shifted[i].data_mut()[j] += delta;
                    let mut t2 = Tape::new();
                    let v2: Vec<Var> = shifted.iter().map(|x| t2.variable(x.clone())).collect();
                    let l = build(&mut t2, &v2);
                    t2.value(l).item()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = analytic[j].abs().max(numeric.abs()).max(1e-3);
                worst = worst.max((analytic[j] - numeric).abs() / denom);
            }
        }
        worst
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn every_op_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let c = rand_tensor(&mut rng, &[5, 4]);
        let g = rand_tensor(&mut rng, &[4]);
        let bias = rand_tensor(&mut rng, &[4]);
        let ins = [a, b, c, g, bias];
        let err = fd_check(&ins, |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap(); // 3×2
            let act = t.tanh(ab);
            let nt = t.matmul_nt(v[0], v[2]).unwrap(); // 3×5
            let sm = t.softmax(nt);
            let ln = t.layer_norm(v[0], v[3], v[4], 1e-5).unwrap();
            let ge = t.gelu(ln);
            let ar = t.add_row(ge, v[4]).unwrap();
            let sg = t.sigmoid(ar);
            let sl = t.slice_cols(sg, 1, 2).unwrap();
            let cat = t.concat_cols(&[sl, act]).unwrap(); // 3×4
            let rows = t.slice_rows(cat, 1, 2).unwrap();
            let both = t.concat_rows(&[rows, cat]).unwrap(); // 5×4
            let emb = t.gather_rows(v[2], &[0, 4, 4, 1, 2]).unwrap(); // 5×4
            let prod = t.mul(both, emb).unwrap();
            let ce = t.cross_entropy(prod, &[0, 3, 1, 2, 2]).unwrap();
            let pooled = t.mean_rows(sm);
            let bce = t.bce_with_logits(pooled, &[1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
            let m = t.mean(prod);
            let s = t.scale(m, 0.3);
            let x = t.add(ce, bce).unwrap();
            t.add(x, s).unwrap()
        });
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn dropout_gradient_uses_same_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.variable(Tensor::vector(&[1.0; 100]));
        let d = t.dropout(x, 0.5, &mut rng);
        let s = t.sum(d);
        t.backward(s).unwrap();
        let out = t.value(d).data().to_vec();
        assert_eq!(t.grad(x).unwrap(), &out[..]);
        assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
