//! Reverse-mode differentiation over an explicit operation tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! tape from the loss towards the leaves and accumulates adjoints into the
//! gradient buffers of leaves created with [`Tape::param`].

use super::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Real, Tensor};
use super::NnError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    CausalSoftmax(Var),
    SelectRows(Var, Vec<usize>),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    L2NormalizeRows { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    SetCrossEntropy { scores: Var, positives: Vec<usize>, candidates: Vec<Vec<usize>> },
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

const LN_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf: `backward` accumulates into its gradient buffer.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.clear_grad();
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), NnError> {
        match self.nodes[v.0].value.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(NnError::Rank { op, shape: other.to_vec() }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NnError {
        NnError::Shape { op, lhs: self.shape(a), rhs: self.shape(b) }
    }

    /// a[m,k] · b[k,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// a[m,k] · b[n,k]ᵀ
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_nt", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, NnError> {
        let (m, n) = self.matrix("add_row_bias", a)?;
        if self.shape(bias) != [n] {
            return Err(self.mismatch("add_row_bias", a, bias));
        }
        let b = self.data(bias);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for (x, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(b) {
                *x += bv;
            }
        }
        let t = Tensor::new(vec![m, n], data)?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(t, Op::AddRowBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let data = self.data(a).iter().map(|x| *x * factor).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NnError> {
        let (m, n) = self.matrix("layer_norm", x)?;
        if self.shape(gain) != [n] {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.shape(bias) != [n] {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let nf = T::of(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / nf;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nf;
            let r = T::one() / (var + T::of(LN_EPS)).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * r * g[j] + b[j];
            }
            rstd.push(r);
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Softmax over each row of a square score matrix, restricted to columns
    /// `j <= i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var, NnError> {
        let (m, n) = self.matrix("causal_softmax", a)?;
        if m != n {
            return Err(self.mismatch("causal_softmax", a, a));
        }
        let xs = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..i * n + i + 1];
            let probs = softmax(row);
            out[i * n..i * n + i + 1].copy_from_slice(&probs);
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::CausalSoftmax(a), rg))
    }

    /// Gathers rows by index; used for embedding lookup and query pooling.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, NnError> {
        let (m, n) = self.matrix("select_rows", a)?;
        let xs = self.data(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NnError::Index { index: r, bound: m });
            }
            out.extend_from_slice(&xs[r * n..(r + 1) * n]);
        }
        let t = Tensor::new(vec![rows.len(), n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SelectRows(a, rows.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (m, n) = self.matrix("slice_cols", a)?;
        if start + len > n {
            return Err(NnError::Index { index: start + len, bound: n });
        }
        let xs = self.data(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::SliceCols { x: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts.first().ok_or(NnError::Empty("concat_cols"))?;
        let (m, _) = self.matrix("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts.first().ok_or(NnError::Empty("concat_rows"))?;
        let (_, n) = self.matrix("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * n);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(vec![rows, n], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, NnError> {
        let (m, n) = self.matrix("l2_normalize_rows", a)?;
        let xs = self.data(a);
        let mut out = vec![T::zero(); m * n];
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let norm = dot(row, row).sqrt().max(T::of(NORM_FLOOR));
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
            norms.push(norm);
        }
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    /// Mean token cross-entropy over rows whose mask bit is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var, NnError> {
        let (m, v) = self.matrix("cross_entropy", logits)?;
        if targets.len() != m || mask.len() != m {
            return Err(NnError::Shape { op: "cross_entropy", lhs: vec![m, v], rhs: vec![targets.len(), mask.len()] });
        }
        let count = mask.iter().filter(|b| **b).count();
        if count == 0 {
            return Err(NnError::DegenerateMask);
        }
        let xs = self.data(logits);
        let mut total = T::zero();
        for i in 0..m {
            if !mask[i] {
                continue;
            }
            total += softmax_cross_entropy(&xs[i * v..(i + 1) * v], targets[i])?;
        }
        let loss = total / T::of(count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Mean over rows of `logsumexp(s[i, C_i]) - s[i, p_i]`, where `C_i` is the
    /// candidate column set for row i and always contains the positive `p_i`.
    /// This is the in-batch contrastive objective once `scores` holds scaled
    /// similarities.
    pub fn set_cross_entropy(
        &mut self,
        scores: Var,
        positives: &[usize],
        negatives: &[Vec<usize>],
    ) -> Result<Var, NnError> {
        let (m, n) = self.matrix("set_cross_entropy", scores)?;
        if positives.len() != m || negatives.len() != m {
            return Err(NnError::Shape {
                op: "set_cross_entropy",
                lhs: vec![m, n],
                rhs: vec![positives.len(), negatives.len()],
            });
        }
        if m == 0 {
            return Err(NnError::Empty("set_cross_entropy"));
        }
        let xs = self.data(scores);
        let mut candidates = Vec::with_capacity(m);
        let mut total = T::zero();
        for i in 0..m {
            let mut cand = Vec::with_capacity(negatives[i].len() + 1);
            cand.push(positives[i]);
            cand.extend(negatives[i].iter().copied().filter(|&j| j != positives[i]));
            for &j in &cand {
                if j >= n {
                    return Err(NnError::Index { index: j, bound: n });
                }
            }
            let row: Vec<T> = cand.iter().map(|&j| xs[i * n + j]).collect();
            total += softmax_cross_entropy(&row, 0)?;
            candidates.push(cand);
        }
        let loss = total / T::of(m as f64);
        let rg = self.rg(&[scores]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SetCrossEntropy { scores, positives: positives.to_vec(), candidates },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().fold(T::zero(), |acc, &v| acc + v);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Accumulates ∂loss/∂leaf into every trainable leaf reachable from
    /// `loss`. Calling it again without [`Tape::zero_grads`] adds to the
    /// existing gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NnError> {
        let shape = self.shape(loss);
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::NotScalar { shape });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_nt_acc(g, self.data(*b), &mut da, m, n, k);
                    add_into(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(self.data(*a), g, &mut db, m, k, n);
                    add_into(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.dims(*a);
                let (n, _) = self.dims(*b);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g, self.data(*b), &mut da, m, n, k);
                    add_into(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); n * k];
                    gemm_tn_acc(g, self.data(*a), &mut db, m, n, k);
                    add_into(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    add_into(grads, *b, g.to_vec());
                }
            }
            Op::AddRowBias(a, bias) => {
                let (m, n) = self.dims(*a);
                if self.needs(*a) {
                    add_into(grads, *a, g.to_vec());
                }
                if self.needs(*bias) {
                    let mut db = vec![T::zero(); n];
                    for i in 0..m {
                        for (d, &gv) in db.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *d += gv;
                        }
                    }
                    add_into(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = g.iter().zip(self.data(*b)).map(|(x, y)| *x * *y).collect();
                    add_into(grads, *a, da);
                }
                if self.needs(*b) {
                    let db = g.iter().zip(self.data(*a)).map(|(x, y)| *x * *y).collect();
                    add_into(grads, *b, db);
                }
            }
            Op::Scale(a, f) => {
                let da = g.iter().map(|x| *x * *f).collect();
                add_into(grads, *a, da);
            }
            Op::Gelu(a) => {
                let da = g.iter().zip(self.data(*a)).map(|(gv, &x)| *gv * gelu_grad(x)).collect();
                add_into(grads, *a, da);
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let (m, n) = self.dims(*x);
                let xs = self.data(*x);
                let gn = self.data(*gain);
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); m * n];
                let mut dg = vec![T::zero(); n];
                let mut db = vec![T::zero(); n];
                let mut xhat = vec![T::zero(); n];
                let mut dxhat = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xs[i * n..(i + 1) * n];
                    let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) / nf;
                    let r = rstd[i];
                    let grow = &g[i * n..(i + 1) * n];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * r;
                        dxhat[j] = grow[j] * gn[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                    mean_dxhat = mean_dxhat / nf;
                    mean_dxhat_xhat = mean_dxhat_xhat / nf;
                    for j in 0..n {
                        dx[i * n + j] = r * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if self.needs(*x) {
                    add_into(grads, *x, dx);
                }
                if self.needs(*gain) {
                    add_into(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    add_into(grads, *bias, db);
                }
            }
            Op::CausalSoftmax(a) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    let y = &out[i * n..i * n + i + 1];
                    let gy = &g[i * n..i * n + i + 1];
                    let s = dot(y, gy);
                    for j in 0..=i {
                        da[i * n + j] = y[j] * (gy[j] - s);
                    }
                }
                add_into(grads, *a, da);
            }
            Op::SelectRows(a, rows) => {
                let (m, n) = self.dims(*a);
                let mut da = vec![T::zero(); m * n];
                for (k, &r) in rows.iter().enumerate() {
                    for (d, &gv) in da[r * n..(r + 1) * n].iter_mut().zip(&g[k * n..(k + 1) * n]) {
                        *d += gv;
                    }
                }
                add_into(grads, *a, da);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let (_, len) = node.value.dims2();
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                add_into(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.dims(p);
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        add_into(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if self.needs(p) {
                        add_into(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (m, n) = self.dims(*x);
                let mut dx = vec![T::zero(); m * n];
                for i in 0..m {
                    let y = &out[i * n..(i + 1) * n];
                    let gy = &g[i * n..(i + 1) * n];
                    let proj = dot(y, gy);
                    for j in 0..n {
                        dx[i * n + j] = (gy[j] - y[j] * proj) / norms[i];
                    }
                }
                add_into(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let (m, v) = self.dims(*logits);
                let xs = self.data(*logits);
                let scale = g[0] / T::of(*count as f64);
                let mut dl = vec![T::zero(); m * v];
                for i in 0..m {
                    if !mask[i] {
                        continue;
                    }
                    let probs = softmax(&xs[i * v..(i + 1) * v]);
                    for j in 0..v {
                        let onehot = if j == targets[i] { T::one() } else { T::zero() };
                        dl[i * v + j] = (probs[j] - onehot) * scale;
                    }
                }
                add_into(grads, *logits, dl);
            }
            Op::SetCrossEntropy { scores, positives, candidates } => {
                let (m, n) = self.dims(*scores);
                let xs = self.data(*scores);
                let scale = g[0] / T::of(m as f64);
                let mut ds = vec![T::zero(); m * n];
                for i in 0..m {
                    let row: Vec<T> = candidates[i].iter().map(|&j| xs[i * n + j]).collect();
                    let probs = softmax(&row);
                    for (&j, &p) in candidates[i].iter().zip(&probs) {
                        let onehot = if j == positives[i] { T::one() } else { T::zero() };
                        ds[i * n + j] += (p - onehot) * scale;
                    }
                }
                add_into(grads, *scores, ds);
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                add_into(grads, *a, vec![g[0]; n]);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn add_into<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::of(SQRT_2_OVER_PI) * (x + T::of(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(SQRT_2_OVER_PI) * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Max-subtracted softmax.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total = exps.iter().fold(T::zero(), |acc, &v| acc + v);
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, stabilized by subtracting the max logit.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], target: usize) -> Result<T, NnError> {
    if target >= logits.len() {
        return Err(NnError::Index { index: target, bound: logits.len() });
    }
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total = logits.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
    Ok(total.ln() + max - logits[target])
}
