use super::tensor::gemm;
use super::{AutodiffError, Gradients, ParamId, ParamStore, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchedMatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax { x: Var, tau: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    MeanRowsMasked { x: Var, mask: Vec<bool>, counts: Vec<usize> },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { x: Var, index: Vec<usize> },
    PadRows(Var),
    SliceRows { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    CrossEntropy { logits: Var, labels: Vec<i64>, probs: Vec<f64>, count: usize },
    SegmentMean { x: Var, assign: Vec<usize>, counts: Vec<usize> },
    PatchAttention { q: Var, k: Var, v: Var, order: Vec<usize>, patch: usize, attn: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations in execution order so that a reverse sweep
/// can propagate gradients. An inference tape stores values only.
pub struct Tape {
    nodes: Vec<Node>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &Tensor, right: &Tensor) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, left: left.shape().to_vec(), right: right.shape().to_vec() }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), recording: true }
    }

    /// A tape that evaluates values without retaining backward state.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), recording: false }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let needs_grad = needs_grad && self.recording;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf whose gradient can be read back from [`Grads::var`].
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = self.recording;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let needs_grad = p.trainable && self.recording;
        let op = if needs_grad { Op::Param(id) } else { Op::Leaf };
        self.nodes.push(Node { value: p.tensor.clone(), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs)
    }

    /// `[g, m, k] x [g, k, n] -> [g, m, n]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(mismatch("batched_matmul", av, bv));
        }
        let (g, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; g * m * n];
        for i in 0..g {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push("batched_matmul", Tensor::new(vec![g, m, n], out)?, Op::BatchedMatMul(a, b), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push("add", t, Op::Add(a, b), needs)
    }

    /// Adds a vector along the last dimension of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (av, bv) = (self.value(a), self.value(bias));
        let width = *av.shape().last().unwrap_or(&0);
        if bv.numel() != width || bv.shape().len() != 1 {
            return Err(mismatch("add_bias", av, bv));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(width.max(1)) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(bias);
        self.push("add_bias", t, Op::AddBias(a, bias), needs)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * s).collect())?;
        let needs = self.needs(a);
        self.push("mul_scalar", t, Op::Scale(a, s), needs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect())?;
        let needs = self.needs(a);
        self.push("relu", t, Op::Relu(a), needs)
    }

    /// Softmax of `x / tau` along the last dimension.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var, AutodiffError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(AutodiffError::InvalidTemperature(tau));
        }
        let xv = self.value(x);
        let width = *xv.shape().last().unwrap_or(&1);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(width.max(1)) {
            softmax_in_place(row, tau);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x);
        self.push("softmax_rows", t, Op::Softmax { x, tau }, needs)
    }

    /// Normalizes each row over the last dimension, then applies `gamma` and `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let width = *xv.shape().last().unwrap_or(&0);
        if gv.numel() != width || bv.numel() != width || width == 0 {
            return Err(mismatch("layernorm", xv, gv));
        }
        let rows = xv.numel() / width;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..width {
                let h = (row[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push("layernorm", t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, needs)
    }

    /// `[m, n, c]` with an `m x n` mask -> `[m, c]` mean over unmasked slots.
    /// A fully masked row yields zeros.
    pub fn mean_rows_masked(&mut self, x: Var, mask: &[bool]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || mask.len() != s[0] * s[1] {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean_rows_masked",
                left: s.to_vec(),
                right: vec![mask.len()],
            });
        }
        let (m, n, c) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; m * c];
        let mut counts = vec![0usize; m];
        for i in 0..m {
            let dst = &mut out[i * c..(i + 1) * c];
            for j in 0..n {
                if mask[i * n + j] {
                    counts[i] += 1;
                    let src = &xv.data()[(i * n + j) * c..(i * n + j + 1) * c];
                    dst.iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
            if counts[i] > 0 {
                let inv = counts[i] as f64;
                dst.iter_mut().for_each(|d| *d /= inv);
            }
        }
        let t = Tensor::new(vec![m, c], out)?;
        let needs = self.needs(x);
        self.push("mean_rows_masked", t, Op::MeanRowsMasked { x, mask: mask.to_vec(), counts }, needs)
    }

    /// `out[r] = x[index[r]]` along the leading dimension.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        let (rows, w) = (xv.rows(), xv.row_len());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::IndexOutOfRange { op: "gather_rows", index: bad, len: rows });
        }
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(xv.row(i));
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push("gather_rows", t, Op::GatherRows { x, index: index.to_vec() }, needs)
    }

    /// `out[index[r]] += x[r]` into `out_rows` zero rows.
    pub fn scatter_rows(&mut self, x: Var, index: &[usize], out_rows: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if index.len() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_rows",
                left: xv.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= out_rows) {
            return Err(AutodiffError::IndexOutOfRange { op: "scatter_rows", index: bad, len: out_rows });
        }
        let w = xv.row_len();
        let mut out = vec![0.0; out_rows * w];
        for (r, &i) in index.iter().enumerate() {
            out[i * w..(i + 1) * w].iter_mut().zip(xv.row(r)).for_each(|(d, s)| *d += s);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = out_rows;
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push("scatter_rows", t, Op::ScatterRows { x, index: index.to_vec() }, needs)
    }

    /// Appends zero rows so the leading dimension becomes `total_rows`.
    pub fn pad_rows(&mut self, x: Var, total_rows: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if total_rows < xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "pad_rows",
                left: xv.shape().to_vec(),
                right: vec![total_rows],
            });
        }
        let mut data = xv.data().to_vec();
        data.resize(total_rows * xv.row_len(), 0.0);
        let mut shape = xv.shape().to_vec();
        shape[0] = total_rows;
        let t = Tensor::new(shape, data)?;
        let needs = self.needs(x);
        self.push("pad", t, Op::PadRows(x), needs)
    }

    /// Rows `start..end` of the leading dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "slice",
                left: xv.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let w = xv.row_len();
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, xv.data()[start * w..end * w].to_vec())?;
        let needs = self.needs(x);
        self.push("slice", t, Op::SliceRows { x, start }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(x);
        self.push("reshape", t, Op::Reshape(x), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.value(x).data().iter().sum::<f64>();
        let needs = self.needs(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean cross-entropy of `[n, k]` logits against labels; label `-1` is
    /// ignored. With no labeled rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var, AutodiffError> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != labels.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let k = lv.shape()[1];
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = &mut probs[r * k..(r + 1) * k];
            softmax_in_place(row, 1.0);
            if label < 0 {
                continue;
            }
            let label = label as usize;
            if label >= k {
                return Err(AutodiffError::IndexOutOfRange { op: "cross_entropy", index: label, len: k });
            }
            // log-sum-exp form keeps the loss finite for confident rows
            let logit_row = lv.row(r);
            let max = logit_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logit_row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            total += lse - logit_row[label];
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.needs(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count },
            needs,
        )
    }

    /// Mean of the rows assigned to each of `segments` output rows. Every
    /// segment must receive at least one row.
    pub fn segment_mean(&mut self, x: Var, assign: &[usize], segments: usize) -> Result<Var, AutodiffError> {
        let xv = self.value(x);
        if assign.len() != xv.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "segment_mean",
                left: xv.shape().to_vec(),
                right: vec![assign.len()],
            });
        }
        let w = xv.row_len();
        let mut counts = vec![0usize; segments];
        let mut out = vec![0.0; segments * w];
        for (r, &s) in assign.iter().enumerate() {
            if s >= segments {
                return Err(AutodiffError::IndexOutOfRange { op: "segment_mean", index: s, len: segments });
            }
            counts[s] += 1;
            out[s * w..(s + 1) * w].iter_mut().zip(xv.row(r)).for_each(|(d, v)| *d += v);
        }
        for (s, &c) in counts.iter().enumerate() {
            if c == 0 {
                return Err(AutodiffError::EmptySegment(s));
            }
            out[s * w..(s + 1) * w].iter_mut().for_each(|d| *d /= c as f64);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = segments;
        let t = Tensor::new(shape, out)?;
        let needs = self.needs(x);
        self.push("segment_mean", t, Op::SegmentMean { x, assign: assign.to_vec(), counts }, needs)
    }

    /// Single-head scaled dot-product attention restricted to patches of
    /// `patch` consecutive tokens of the sequence `order` (a permutation of
    /// the rows). Output rows stay in the original row order.
    pub fn patch_attention(&mut self, q: Var, k: Var, v: Var, order: &[usize], patch: usize) -> Result<Var, AutodiffError> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() || qv.shape().len() != 2 {
            return Err(mismatch("patch_attention", qv, kv));
        }
        let (n, c) = (qv.shape()[0], qv.shape()[1]);
        if order.len() != n || patch == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "patch_attention",
                left: qv.shape().to_vec(),
                right: vec![order.len(), patch],
            });
        }
        let scale = 1.0 / (c as f64).sqrt();
        let mut out = vec![0.0; n * c];
        let mut attn = Vec::with_capacity(n * patch);
        for chunk in order.chunks(patch) {
            let s = chunk.len();
            let mut a = vec![0.0; s * s];
            for (i, &ri) in chunk.iter().enumerate() {
                let qi = qv.row(ri);
                for (j, &rj) in chunk.iter().enumerate() {
                    a[i * s + j] = dot(qi, kv.row(rj)) * scale;
                }
                softmax_in_place(&mut a[i * s..(i + 1) * s], 1.0);
                let dst = &mut out[ri * c..(ri + 1) * c];
                for (j, &rj) in chunk.iter().enumerate() {
                    let w = a[i * s + j];
                    dst.iter_mut().zip(vv.row(rj)).for_each(|(d, x)| *d += w * x);
                }
            }
            attn.extend_from_slice(&a);
        }
        let t = Tensor::new(vec![n, c], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            "patch_attention",
            t,
            Op::PatchAttention { q, k, v, order: order.to_vec(), patch, attn },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads, AutodiffError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut params = Gradients::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, &mut params);
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Grads { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut Gradients) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => params.accumulate(*id, node.value.shape(), g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &|da| gemm(m, n, k, g, false, bv.data(), true, da, 1.0));
                acc(*b, &|db| gemm(k, m, n, av.data(), true, g, false, db, 1.0));
            }
            Op::BatchedMatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (av.shape()[0], av.shape()[1], av.shape()[2], bv.shape()[2]);
                acc(*a, &|da| {
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut da[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                });
                acc(*b, &|db| {
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &av.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &mut db[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, g));
                acc(*b, &|d| add_into(d, g));
            }
            Op::AddBias(a, bias) => {
                acc(*a, &|d| add_into(d, g));
                let w = self.value(*bias).numel();
                acc(*bias, &|d| {
                    for row in g.chunks(w.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Relu(a) => {
                let av = self.value(*a);
                acc(*a, &|d| {
                    for ((x, y), z) in d.iter_mut().zip(g).zip(av.data()) {
                        if *z > 0.0 {
                            *x += y;
                        }
                    }
                });
            }
            Op::Softmax { x, tau } => {
                let y = node.value.data();
                let w = *node.value.shape().last().unwrap_or(&1);
                acc(*x, &|d| {
                    for ((dr, gr), yr) in d.chunks_mut(w).zip(g.chunks(w)).zip(y.chunks(w)) {
                        let inner = dot(gr, yr);
                        for ((dx, gy), yy) in dr.iter_mut().zip(gr).zip(yr) {
                            *dx += yy * (gy - inner) / tau;
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gv = self.value(*gamma).data();
                let w = gv.len();
                acc(*gamma, &|d| {
                    for (gr, hr) in g.chunks(w).zip(xhat.chunks(w)) {
                        for ((dg, gy), h) in d.iter_mut().zip(gr).zip(hr) {
                            *dg += gy * h;
                        }
                    }
                });
                acc(*beta, &|d| {
                    for gr in g.chunks(w) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &|d| {
                    for (r, ((dr, gr), hr)) in d.chunks_mut(w).zip(g.chunks(w)).zip(xhat.chunks(w)).enumerate() {
                        // dxhat = g * gamma; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..w {
                            let dh = gr[c] * gv[c];
                            m1 += dh;
                            m2 += dh * hr[c];
                        }
                        m1 /= w as f64;
                        m2 /= w as f64;
                        for c in 0..w {
                            let dh = gr[c] * gv[c];
                            dr[c] += rstd[r] * (dh - m1 - hr[c] * m2);
                        }
                    }
                });
            }
            Op::MeanRowsMasked { x, mask, counts } => {
                let s = self.value(*x).shape();
                let (m, n, c) = (s[0], s[1], s[2]);
                acc(*x, &|d| {
                    for i in 0..m {
                        if counts[i] == 0 {
                            continue;
                        }
                        let inv = 1.0 / counts[i] as f64;
                        for j in 0..n {
                            if mask[i * n + j] {
                                let dst = &mut d[(i * n + j) * c..(i * n + j + 1) * c];
                                dst.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b * inv);
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let w = self.value(*x).row_len();
                acc(*x, &|d| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut d[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::ScatterRows { x, index } => {
                let w = self.value(*x).row_len();
                acc(*x, &|d| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut d[r * w..(r + 1) * w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::PadRows(x) => {
                let len = self.value(*x).numel();
                acc(*x, &|d| add_into(d, &g[..len]));
            }
            Op::SliceRows { x, start } => {
                let w = self.value(*x).row_len();
                acc(*x, &|d| add_into(&mut d[start * w..start * w + g.len()], g));
            }
            Op::Reshape(x) => acc(*x, &|d| add_into(d, g)),
            Op::Sum(x) => acc(*x, &|d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy { logits, labels, probs, count } => {
                if *count == 0 {
                    return;
                }
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                acc(*logits, &|d| {
                    for (r, &label) in labels.iter().enumerate() {
                        if label < 0 {
                            continue;
                        }
                        for c in 0..k {
                            let onehot = if c as i64 == label { 1.0 } else { 0.0 };
                            d[r * k + c] += scale * (probs[r * k + c] - onehot);
                        }
                    }
                });
            }
            Op::SegmentMean { x, assign, counts } => {
                let w = self.value(*x).row_len();
                acc(*x, &|d| {
                    for (r, &s) in assign.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        d[r * w..(r + 1) * w]
                            .iter_mut()
                            .zip(&g[s * w..(s + 1) * w])
                            .for_each(|(a, b)| *a += b * inv);
                    }
                });
            }
            Op::PatchAttention { q, k, v, order, patch, attn } => {
                self.attention_backward(*q, *k, *v, order, *patch, attn, g, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        order: &[usize],
        patch: usize,
        attn: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let c = qv.shape()[1];
        let scale = 1.0 / (c as f64).sqrt();
        let numel = qv.numel();
        let mut dq = vec![0.0; numel];
        let mut dk = vec![0.0; numel];
        let mut dv = vec![0.0; numel];
        let mut offset = 0;
        for chunk in order.chunks(patch) {
            let s = chunk.len();
            let a = &attn[offset..offset + s * s];
            offset += s * s;
            for (i, &ri) in chunk.iter().enumerate() {
                let gi = &g[ri * c..(ri + 1) * c];
                // dA_ij = g_i . v_j ; dV_j += A_ij g_i
                let mut da = vec![0.0; s];
                for (j, &rj) in chunk.iter().enumerate() {
                    da[j] = dot(gi, vv.row(rj));
                    let w = a[i * s + j];
                    dv[rj * c..(rj + 1) * c].iter_mut().zip(gi).for_each(|(d, x)| *d += w * x);
                }
                let arow = &a[i * s..(i + 1) * s];
                let inner = dot(&da, arow);
                for (j, &rj) in chunk.iter().enumerate() {
                    let ds = arow[j] * (da[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    dq[ri * c..(ri + 1) * c].iter_mut().zip(kv.row(rj)).for_each(|(d, x)| *d += ds * x);
                    dk[rj * c..(rj + 1) * c].iter_mut().zip(qv.row(ri)).for_each(|(d, x)| *d += ds * x);
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].needs_grad {
                let slot = grads[var.0].get_or_insert_with(|| vec![0.0; numel]);
                add_into(slot, &d);
            }
        }
    }
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Grads {
    nodes: Vec<Option<Vec<f64>>>,
    params: Gradients,
}

impl Grads {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn var(&self, tape: &Tape, v: Var) -> Option<Tensor> {
        self.nodes[v.0]
            .as_ref()
            .map(|g| Tensor::new(tape.value(v).shape().to_vec(), g.clone()).expect("gradient shape"))
    }

    pub fn params(&self) -> &Gradients {
        &self.params
    }

    pub fn into_params(self) -> Gradients {
        self.params
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
