use rand::Rng;

use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<f32>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var),
    MeanRows(Var),
    Sum(Var),
    Dropout {
        input: Var,
        mask: Vec<f32>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run recording of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of length `len` when no path reaches it.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f32> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f32]>::to_vec)
    }
}

fn matmul_kernel(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for p in 0..k {
            let aip = a[i * k + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += aip * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
    out
}

fn transpose_kernel(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_kernel(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let out = transpose_kernel(self.value(a).data(), r, c);
        self.push("transpose", Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` vector to every row of `x[..×n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::from_parts(shape, data), Op::AddBias(x, bias), &[x, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", Tensor::from_parts(shape, data), Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push("relu", Tensor::from_parts(shape, data), Op::Relu(a), &[a])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax_rows(x, None)
    }

    /// Row-wise softmax. Entries whose `allowed` flag is false are excluded
    /// and receive exactly zero weight; a row with no allowed entry is an error.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if let Some(mask) = allowed {
            if mask.len() != t.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "masked_softmax_rows",
                    left: t.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
        }
        let mut out = vec![0.0f32; t.len()];
        for (r, row) in t.data().chunks(n).enumerate() {
            let keep = |j: usize| allowed.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f32::NEG_INFINITY, f32::max);
            if max == f32::NEG_INFINITY {
                return Err(TensorError::FullyMasked { row: r });
            }
            let mut total = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for j in (0..n).filter(|&j| keep(j)) {
                exps[j] = ((row[j] - max) as f64).exp();
                total += exps[j];
            }
            for j in 0..n {
                out[r * n + j] = (exps[j] / total) as f32;
            }
        }
        let shape = t.shape().to_vec();
        self.push("softmax_rows", Tensor::from_parts(shape, out), Op::Softmax(x), &[x])
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let n = self.value(x).cols();
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.rows();
        let mut xhat = vec![0.0f32; xv.len()];
        let mut inv_std = vec![0.0f32; rows];
        let mut out = vec![0.0f32; xv.len()];
        for (r, row) in xv.data().chunks(n).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            inv_std[r] = inv as f32;
            for j in 0..n {
                let h = (row[j] as f64 - mean) * inv;
                xhat[r * n + j] = h as f32;
                out[r * n + j] = (g[j] as f64 * h + b[j] as f64) as f32;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[t×V]`, ignoring positions whose target is `pad_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let (t, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(TensorError::TargetOutOfRange { target: bad, vocab: v });
        }
        let count = targets.iter().filter(|&&id| id != pad_id).count();
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0f32; t * v];
        let mut total = 0.0f64;
        for (i, &target) in targets.iter().enumerate() {
            if target == pad_id {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            let log_z = max + sum.ln();
            total += log_z - row[target] as f64;
            for j in 0..v {
                probs[i * v + j] = ((row[j] as f64 - log_z).exp()) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims("gather_rows", table)?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        let tv = self.value(table).data();
        let data = ids.iter().flat_map(|&id| tv[id * d..(id + 1) * d].iter().copied()).collect();
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let xv = self.value(x).data();
        let data = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied())
            .collect();
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![r, len], data),
            Op::SliceCols { input: x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| self.matrix_dims("concat_cols", p))
            .collect::<Result<Vec<_>>>()?;
        let rows = dims.first().map(|d| d.0).unwrap_or(0);
        if let Some(bad) = dims.iter().find(|d| d.0 != rows) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                left: vec![rows, dims[0].1],
                right: vec![bad.0, bad.1],
            });
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &(_, c)) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims = parts
            .iter()
            .map(|&p| self.matrix_dims("concat_rows", p))
            .collect::<Result<Vec<_>>>()?;
        let cols = dims.first().map(|d| d.1).unwrap_or(0);
        if let Some(bad) = dims.iter().find(|d| d.1 != cols) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                left: vec![dims[0].0, cols],
                right: vec![bad.0, bad.1],
            });
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let data = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Tiles a `[1×n]` row `times` times into `[times×n]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("repeat_rows", x)?;
        if r != 1 || times == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_rows",
                left: vec![r, c],
                right: vec![times],
            });
        }
        let row = self.value(x).data().to_vec();
        let data = row.iter().copied().cycle().take(times * c).collect();
        self.push(
            "repeat_rows",
            Tensor::from_parts(vec![times, c], data),
            Op::RepeatRows(x),
            &[x],
        )
    }

    /// Column means of `x[r×c]`, as `[1×c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_rows", x)?;
        let xv = self.value(x).data();
        let data = (0..c)
            .map(|j| ((0..r).map(|i| xv[i * c + j] as f64).sum::<f64>() / r as f64) as f32)
            .collect();
        self.push("mean_rows", Tensor::from_parts(vec![1, c], data), Op::MeanRows(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t.with_requires_grad(false), Op::Reshape(x), &[x])
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    /// A rate of zero records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let rate = rate.min(0.999);
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(
            "dropout",
            Tensor::from_parts(shape, data),
            Op::Dropout { input: x, mask },
            &[x],
        )
    }

    /// Reverse-mode pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                self.accumulate(grads, *a, |da| {
                    // dA = dC · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| *x as f64 * *y as f64).sum();
                            da[i * k + p] += dot as f32;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    // dB = Aᵀ · dC
                    let at = transpose_kernel(av.data(), m, k);
                    let prod = matmul_kernel(&at, g, k, m, n);
                    add_into(db, &prod);
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let back = transpose_kernel(g, s[0], s[1]);
                self.accumulate(grads, *a, |da| add_into(da, &back));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| add_into(da, g));
                self.accumulate(grads, *b, |db| add_into(db, g));
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
                let n = node.value.cols();
                self.accumulate(grads, *bias, |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * y;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, gg), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale(a, factor) => {
                self.accumulate(grads, *a, |da| {
                    for (d, gg) in da.iter_mut().zip(g) {
                        *d += gg * factor;
                    }
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |da| {
                    for ((d, gg), x) in da.iter_mut().zip(g).zip(av) {
                        if *x > 0.0 {
                            *d += gg;
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| *a as f64 * *b as f64).sum();
                        for j in 0..n {
                            drow[j] += (yrow[j] as f64 * (grow[j] as f64 - dot)) as f32;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *x, |dx| {
                    for (r, (drow, grow)) in dx.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        let hrow = &xhat[r * n..(r + 1) * n];
                        let dh: Vec<f64> = grow.iter().zip(gv).map(|(a, b)| *a as f64 * *b as f64).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hrow).map(|(a, h)| a * *h as f64).sum();
                        let inv = inv_std[r] as f64;
                        for j in 0..n {
                            let v = inv / n as f64 * (n as f64 * dh[j] - sum_dh - hrow[j] as f64 * sum_dh_h);
                            drow[j] += v as f32;
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *count as f32;
                self.accumulate(grads, *logits, |dl| {
                    for (i, &target) in targets.iter().enumerate() {
                        if target == *pad_id {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = node.value.cols();
                self.accumulate(grads, *table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let c = self.value(*input).cols();
                let len = node.value.cols();
                self.accumulate(grads, *input, |dx| {
                    for (i, grow) in g.chunks(len).enumerate() {
                        add_into(&mut dx[i * c + start..i * c + start + len], grow);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    self.accumulate(grads, p, |dp| {
                        for (i, drow) in dp.chunks_mut(c).enumerate() {
                            add_into(drow, &g[i * total + offset..i * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::RepeatRows(x) => {
                let c = node.value.cols();
                self.accumulate(grads, *x, |dx| {
                    for grow in g.chunks(c) {
                        add_into(dx, grow);
                    }
                });
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                self.accumulate(grads, *x, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j] / r as f32;
                        }
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, |dx| {
                    for ((d, gg), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gg * m;
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |dx| add_into(dx, g));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(2, 2, &[1., 2., 3., 4.]));
        let b = tape.constant(mat(2, 2, &[5., 6., 7., 8.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(mat(2, 3, &[1., -2., 3., 0.5, 4., -6.]));
        let i2 = tape.constant(Tensor::identity(2));
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let ia = tape.matmul(i2, a).unwrap();
        let za = tape.matmul(z, a).unwrap();
        assert_eq!(tape.value(ia).data(), tape.value(a).data());
        assert!(tape.value(za).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(2, 3, &[5., 5., 5., 0., 2f32.ln(), 0.]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        for v in &out[..3] {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        // [0, ln 2, 0] -> [1/4, 1/2, 1/4]
        assert!((out[3] - 0.25).abs() < 1e-7);
        assert!((out[4] - 0.5).abs() < 1e-7);

        let mut tape = Tape::new();
        let x = tape.constant(mat(1, 2, &[0., 2f32.ln()]));
        let y = tape.softmax_rows(x).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] - 1.0 / 3.0).abs() < 1e-7);
        assert!((out[1] - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn masked_softmax_zeroes_masked_and_rejects_full_mask() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(2, 2, &[1., 2., 3., 4.]));
        let y = tape.masked_softmax_rows(x, Some(&[true, false, true, true])).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert_eq!(tape.value(y).data()[1], 0.0);
        let err = tape.masked_softmax_rows(x, Some(&[true, true, false, false]));
        assert_eq!(err.unwrap_err(), TensorError::FullyMasked { row: 1 });
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(2, 2, &[4., 4., 1., 3.]));
        let g = tape.constant(Tensor::vector(vec![1., 1.]).unwrap());
        let b = tape.constant(Tensor::vector(vec![0., 0.]).unwrap());
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let out = tape.value(y).data();
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!((out[2] + 1.0).abs() < 1e-4 && (out[3] - 1.0).abs() < 1e-4);

        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let out = tape.value(y).data();
        assert!((out[2] + 1.0).abs() < 1e-6 && (out[3] - 1.0).abs() < 1e-6);

        let zero_gain = tape.constant(Tensor::vector(vec![0., 0.]).unwrap());
        let bias = tape.constant(Tensor::vector(vec![0.5, -2.]).unwrap());
        let y = tape.layer_norm(x, zero_gain, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -2., 0.5, -2.]);
    }

    #[test]
    fn relu_cases() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![-1., 0., 2.]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 2.]);
        let yy = tape.relu(y).unwrap();
        assert_eq!(tape.value(yy).data(), tape.value(y).data());
        let neg = tape.constant(Tensor::vector(vec![-3., -0.1]).unwrap());
        let z = tape.relu(neg).unwrap();
        assert_eq!(tape.value(z).data(), &[0., 0.]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(vec![3, 4]));
        let loss = tape.cross_entropy(uniform, &[1, 2, 3], 0).unwrap();
        assert!((tape.value(loss).item() - 4f32.ln()).abs() < 1e-6);

        let mut prev = f32::INFINITY;
        for margin in [1.0f32, 5.0, 10.0, 30.0] {
            let logits = tape.constant(mat(1, 3, &[0., margin, 0.]));
            let l = tape.cross_entropy(logits, &[1], 0).unwrap();
            let v = tape.value(l).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-9);

        assert_eq!(tape.cross_entropy(uniform, &[0, 0, 0], 0).unwrap_err(), TensorError::EmptyLoss);
        assert!(matches!(
            tape.cross_entropy(uniform, &[1, 9, 0], 0),
            Err(TensorError::TargetOutOfRange { target: 9, vocab: 4 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(mat(2, 3, &[1., 2., 3., 4., 5., 6.]).with_requires_grad(true));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_dot_is_twice_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -2., 0.25]).unwrap().with_requires_grad(true));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap().with_requires_grad(true));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn dropout_is_inverted_and_seeded() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::vector(vec![1.0; 1000]).unwrap());
            let y = tape.dropout(x, 0.5, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = a.iter().filter(|&&v| v > 0.0).count();
        assert!((400..600).contains(&kept));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0; 4]).unwrap());
        assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    }

    const TARGETS: [usize; 3] = [1, 0, 2];

    /// `ce(softmax(layer_norm(x·w + b))·v) + 0.1·Σ logits` on the tape.
    fn composite(tape: &mut Tape, inputs: &[Tensor; 6]) -> (Var, Vec<Var>) {
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let h = tape.matmul(vars[0], vars[1]).unwrap();
        let h = tape.add_bias(h, vars[2]).unwrap();
        let h = tape.layer_norm(h, vars[3], vars[4], 1e-5).unwrap();
        let a = tape.softmax_rows(h).unwrap();
        let logits = tape.matmul(a, vars[5]).unwrap();
        let loss = tape.cross_entropy(logits, &TARGETS, 0).unwrap();
        let extra = tape.sum(logits).unwrap();
        let extra = tape.scale(extra, 0.1).unwrap();
        (tape.add(loss, extra).unwrap(), vars)
    }

    /// The same expression written out with f64 loops.
    fn composite_f64(p: &[Vec<f64>; 6]) -> f64 {
        let (x, w, b, gain, bias, v) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5]);
        let mut total = 0.0;
        let mut loss = 0.0;
        for r in 0..3 {
            let h: Vec<f64> = (0..4)
                .map(|j| x[r * 2] * w[j] + x[r * 2 + 1] * w[4 + j] + b[j])
                .collect();
            let mean = h.iter().sum::<f64>() / 4.0;
            let var = h.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 4.0;
            let n: Vec<f64> = (0..4)
                .map(|j| gain[j] * (h[j] - mean) / (var + 1e-5).sqrt() + bias[j])
                .collect();
            let m = n.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = n.iter().map(|e| (e - m).exp()).sum();
            let a: Vec<f64> = n.iter().map(|e| (e - m).exp() / z).collect();
            let logits: Vec<f64> = (0..3).map(|c| (0..4).map(|j| a[j] * v[j * 3 + c]).sum()).collect();
            total += logits.iter().sum::<f64>();
            if TARGETS[r] != 0 {
                let lm = logits.iter().cloned().fold(f64::MIN, f64::max);
                let lz = lm + logits.iter().map(|l| (l - lm).exp()).sum::<f64>().ln();
                loss += lz - logits[TARGETS[r]];
            }
        }
        loss / 2.0 + 0.1 * total
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn composite_gradients_match_central_differences(
            seed in proptest::prelude::any::<u64>(),
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rand_t = |shape: Vec<usize>, lo: f32, hi: f32| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
                Tensor::new(shape, data).unwrap().with_requires_grad(true)
            };
            let inputs = [
                rand_t(vec![3, 2], -1.0, 1.0),
                rand_t(vec![2, 4], -1.0, 1.0),
                rand_t(vec![4], -0.5, 0.5),
                rand_t(vec![4], 0.5, 1.5),
                rand_t(vec![4], -0.5, 0.5),
                rand_t(vec![4, 3], -2.0, 2.0),
            ];
            let as_f64: [Vec<f64>; 6] = std::array::from_fn(|k| inputs[k].data().iter().map(|&v| v as f64).collect());
            let mut tape = Tape::new();
            let (loss, vars) = composite(&mut tape, &inputs);
            proptest::prop_assert!((tape.value(loss).item() as f64 - composite_f64(&as_f64)).abs() < 1e-5);
            let grads = tape.backward(loss).unwrap();
            let h = 1e-3f64;
            for (k, var) in vars.iter().enumerate() {
                let analytic = grads.get_or_zeros(*var, inputs[k].len());
                let mut diff = 0.0f64;
                let mut norm = 0.0f64;
                for i in 0..inputs[k].len() {
                    let eval = |delta: f64| {
                        let mut moved = as_f64.clone();
                        moved[k][i] += delta;
                        composite_f64(&moved)
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    diff += (fd - analytic[i] as f64).powi(2);
                    norm += fd.powi(2).max((analytic[i] as f64).powi(2));
                }
                let rel = diff.sqrt() / norm.sqrt().max(1e-6);
                proptest::prop_assert!(rel <= 1e-3, "input {}: relative error {}", k, rel);
            }
        }
    }

    #[test]
    fn non_finite_results_are_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f32::MAX]).unwrap());
        assert!(matches!(tape.scale(x, 10.0), Err(TensorError::NonFinite { .. })));
    }
}
