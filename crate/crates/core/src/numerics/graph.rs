use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::{self, ConvGeom};
use crate::numerics::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Conv1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvTranspose1d { x: Var, w: Var, b: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, batch: bool },
    Slopes { x: Var, slopes: Vec<F> },
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNormRows { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherCols { x: Var, idx: Vec<usize> },
    SelectPerCol { x: Var, rows: Vec<usize> },
    L1Mean(Var, Var),
    Pearson { a: Var, b: Var, sab: F, saa: F, sbb: F, denom: F },
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so backward is a single reverse sweep.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: {a:?} vs {b:?}"))
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(what, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let va = &self.nodes[a.0].value;
        Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::vector(vec![s]), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::of(self.value(a).len() as f64);
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::vector(vec![s / n]), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let src = self.value(a).data();
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let v = Tensor::new(vec![c, r], out)?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        kernels::gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let v = Tensor::new(vec![m, n], out)?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// `x[L, d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, d) = self.value(x).dims2()?;
        if self.value(b).len() != d {
            return Err(shape_err("add_row", self.shape(x), self.shape(b)));
        }
        let bias = self.value(b).data().to_vec();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(d) {
            for (y, &bb) in row.iter_mut().zip(&bias) {
                *y += bb;
            }
        }
        Ok(self.push(v, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[L, d_in] · w[d_out, d_in]ᵀ + b[d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        self.add_row(y, b)
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, transpose: bool) -> Result<(ConvGeom, usize)> {
        let (c_in, len) = self.value(x).dims2()?;
        let ws = self.shape(w);
        if ws.len() != 3 {
            return Err(Error::Dimension(format!("conv weight must be rank 3, got {ws:?}")));
        }
        // conv: [c_out, c_in, k]; transpose: [c_in, c_out, k]
        let (w_in, w_out) = if transpose { (ws[0], ws[1]) } else { (ws[1], ws[0]) };
        if w_in != c_in {
            return Err(Error::Dimension(format!(
                "input has {c_in} channels but weight {ws:?} expects {w_in}"
            )));
        }
        if self.value(b).len() != w_out {
            return Err(shape_err("conv bias", ws, self.shape(b)));
        }
        Ok((
            ConvGeom { c_in: ws[1], c_out: ws[0], kernel: ws[2], stride: 1, padding: 0 },
            len,
        ))
    }

    /// Cross-correlation of `x[C_in, L]` with `w[C_out, C_in, k]` plus bias.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (mut geom, len) = self.conv_geom(x, w, b, false)?;
        geom.stride = stride;
        geom.padding = padding;
        let out_len = geom.conv_out_len(len)?;
        let mut out = vec![F::zero(); geom.c_out * out_len];
        for (o, row) in out.chunks_mut(out_len).enumerate() {
            row.fill(self.value(b).data()[o]);
        }
        kernels::correlate(&geom, self.value(x).data(), len, self.value(w).data(), &mut out, out_len);
        let v = Tensor::new(vec![geom.c_out, out_len], out)?;
        Ok(self.push(v, Op::Conv1d { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution of `x[C_in, L]` with `w[C_in, C_out, k]`; the adjoint
    /// of [`Graph::conv1d`] with the same geometry.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (mut geom, len) = self.conv_geom(x, w, b, true)?;
        geom.stride = stride;
        geom.padding = padding;
        let out_len = geom.transpose_out_len(len)?;
        // geom is oriented as the forward conv: c_out = our input channels.
        let mut out = vec![F::zero(); geom.c_in * out_len];
        for (o, row) in out.chunks_mut(out_len).enumerate() {
            row.fill(self.value(b).data()[o]);
        }
        kernels::scatter(&geom, self.value(x).data(), len, self.value(w).data(), &mut out, out_len);
        let v = Tensor::new(vec![geom.c_in, out_len], out)?;
        Ok(self.push(v, Op::ConvTranspose1d { x, w, b, geom }, &[x, w, b]))
    }

    /// Per-channel normalization of `x[C, L]`. In train mode returns the updated
    /// running statistics alongside the output.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BatchNormStats<F>,
        eps: F,
        momentum: F,
        mode: Mode,
    ) -> Result<(Var, Option<BatchNormStats<F>>)> {
        if eps <= F::zero() {
            return Err(Error::Contract("batch norm eps must be positive".into()));
        }
        let (c, len) = self.value(x).dims2()?;
        if len == 0 {
            return Err(Error::EmptyInput("batch norm over zero-length input".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).len() != c {
                return Err(Error::Dimension(format!("batch norm {name} needs {c} channels")));
            }
        }
        if running.mean.len() != c || running.var.len() != c {
            return Err(Error::Dimension(format!("running stats need {c} channels")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![F::zero(); c * len];
        let mut xhat = vec![F::zero(); c * len];
        let mut inv_std = vec![F::zero(); c];
        let mut updated = running.clone();
        for ch in 0..c {
            let row = &xs[ch * len..(ch + 1) * len];
            let (mean, var) = match mode {
                Mode::Train => {
                    let (m, v) = kernels::mean_var(row);
                    let unbiased = if len > 1 { v * F::of(len as f64) / F::of((len - 1) as f64) } else { v };
                    updated.mean[ch] = (F::one() - momentum) * running.mean[ch] + momentum * m;
                    updated.var[ch] = (F::one() - momentum) * running.var[ch] + momentum * unbiased;
                    (m, v)
                }
                Mode::Eval => (running.mean[ch], running.var[ch]),
            };
            let inv = F::one() / (var + eps).sqrt();
            inv_std[ch] = inv;
            for t in 0..len {
                let h = (row[t] - mean) * inv;
                xhat[ch * len + t] = h;
                out[ch * len + t] = g[ch] * h + bt[ch];
            }
        }
        let v = Tensor::new(vec![c, len], out)?;
        let batch = mode == Mode::Train;
        let var = self.push(
            v,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch },
            &[x, gamma, beta],
        );
        Ok((var, batch.then_some(updated)))
    }

    /// Randomized leaky ReLU. Eval mode uses the mean slope; train mode samples
    /// one slope per negative entry and keeps it for backward.
    pub fn rrelu<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        lower: F,
        upper: F,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(F::zero() <= lower && lower <= upper && upper < F::one()) {
            return Err(Error::Contract(format!(
                "rrelu bounds must satisfy 0 <= lower <= upper < 1, got [{lower}, {upper}]"
            )));
        }
        let mean = (lower + upper) / F::of(2.0);
        let xs = self.value(x).data();
        let mut slopes = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = if v >= F::zero() {
                F::one()
            } else {
                match mode {
                    Mode::Eval => mean,
                    Mode::Train => {
                        let u: f64 = rng.random();
                        lower + (upper - lower) * F::of(u)
                    }
                }
            };
            slopes.push(s);
        }
        let data = xs.iter().zip(&slopes).map(|(&v, &s)| v * s).collect();
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(v, Op::Slopes { x, slopes }, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let slopes: Vec<F> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { F::one() } else { F::zero() })
            .collect();
        let v = self.map(x, |v| v.max(F::zero()));
        self.push(v, Op::Slopes { x, slopes }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, kernels::gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, c) = self.value(x).rows_cols();
        let mut v = self.value(x).clone();
        for row in v.data_mut().chunks_mut(c) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for y in row.iter_mut() {
                *y = (*y - m).exp();
                z += *y;
            }
            for y in row.iter_mut() {
                *y /= z;
            }
        }
        self.push(v, Op::SoftmaxRows(x), &[x])
    }

    /// Row-wise layer normalization of `x[L, d]` with affine `gamma[d]`, `beta[d]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let (l, d) = self.value(x).dims2()?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::Dimension(format!("layer norm affine needs {d} entries")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![F::zero(); l * d];
        let mut xhat = vec![F::zero(); l * d];
        let mut inv_std = vec![F::zero(); l];
        for r in 0..l {
            let row = &xs[r * d..(r + 1) * d];
            let (m, v) = kernels::mean_var(row);
            let inv = F::one() / (v + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - m) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(vec![l, d], out)?;
        Ok(self.push(v, Op::LayerNormRows { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!("column slice {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let v = Tensor::new(vec![r, len], out)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let v = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > r {
            return Err(Error::Dimension(format!("row slice {start}..{} of {r}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let v = Tensor::new(vec![len, c], data)?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    /// Stacks along the first axis. Rank-1 inputs count as single rows, so
    /// concatenating `N` series of length `T` yields `[N, T]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat of zero tensors".into()));
        }
        let cols = self.value(parts[0]).rows_cols().1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).rows_cols();
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Keeps the listed columns (timesteps) of every row. Rank is preserved.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).rows_cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= c) {
            return Err(Error::Dimension(format!("column gather out of range for width {c}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            out.extend(idx.iter().map(|&j| src[i * c + j]));
        }
        let shape = if self.value(x).rank() == 1 { vec![idx.len()] } else { vec![r, idx.len()] };
        let v = Tensor::new(shape, out)?;
        Ok(self.push(v, Op::GatherCols { x, idx: idx.to_vec() }, &[x]))
    }

    /// `out[t] = x[rows[t], t]` for `x[N, T]` and zero-based `rows`.
    pub fn select_per_col(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, t) = self.value(x).rows_cols();
        if rows.len() != t {
            return Err(Error::Dimension(format!("{} selectors for {t} columns", rows.len())));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::HeadIndex { index: bad + 1, n_heads: n });
        }
        let src = self.value(x).data();
        let out = rows.iter().enumerate().map(|(j, &r)| src[r * t + j]).collect();
        let v = Tensor::vector(out);
        Ok(self.push(v, Op::SelectPerCol { x, rows: rows.to_vec() }, &[x]))
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let n = F::of(self.value(a).len() as f64);
        let s: F = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        Ok(self.push(Tensor::vector(vec![s / n]), Op::L1Mean(a, b), &[a, b]))
    }

    /// Pearson correlation with `eps` added under the square root of the denominator.
    pub fn pearson(&mut self, a: Var, b: Var, eps: F) -> Result<Var> {
        self.same_shape("pearson", a, b)?;
        let (ma, _) = kernels::mean_var(self.value(a).data());
        let (mb, _) = kernels::mean_var(self.value(b).data());
        let (mut sab, mut saa, mut sbb) = (F::zero(), F::zero(), F::zero());
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let (dx, dy) = (x - ma, y - mb);
            sab += dx * dy;
            saa += dx * dx;
            sbb += dy * dy;
        }
        let denom = (saa * sbb + eps).sqrt();
        let v = Tensor::vector(vec![sab / denom]);
        Ok(self.push(v, Op::Pearson { a, b, sab, saa, sbb, denom }, &[a, b]))
    }

    /// Summed cross-entropy of `logits[K, T]` against per-column labels; `None`
    /// columns contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (k, t) = self.value(logits).dims2()?;
        if labels.len() != t {
            return Err(Error::Dimension(format!("{} labels for {t} columns", labels.len())));
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); k * t];
        let mut total = F::zero();
        for (j, label) in labels.iter().enumerate() {
            let m = (0..k).map(|i| src[i * t + j]).fold(F::neg_infinity(), F::max);
            let z: F = (0..k).map(|i| (src[i * t + j] - m).exp()).sum();
            let lse = m + z.ln();
            for i in 0..k {
                probs[i * t + j] = (src[i * t + j] - lse).exp();
            }
            if let Some(y) = *label {
                if y >= k {
                    return Err(Error::Label { t: j, label: y, classes: k });
                }
                total += lse - src[y * t + j];
            }
        }
        let v = Tensor::vector(vec![total]);
        Ok(self.push(
            v,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Populates gradients of `loss` with respect to every `requires_grad` leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
        }
        self.grads = (0..n)
            .map(|i| {
                let node = &self.nodes[i];
                if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = grads[i].take().unwrap_or_else(|| vec![F::zero(); node.value.len()]);
                Some(Tensor::new(shape, data).expect("grad layout mirrors value"))
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        // Accumulates into a parent's gradient buffer, skipping constants.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
            f(buf);
        };
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(vb) {
                        *x += gy * o;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, &gy), &o) in d.iter_mut().zip(g).zip(va) {
                        *x += gy * o;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c)),
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |d| {
                    for ((x, &gy), &v) in d.iter_mut().zip(g).zip(va) {
                        *x += F::of(2.0) * v * gy;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let s = g[0] / F::of(val(*a).len() as f64);
                acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::Reshape(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y)),
            Op::Transpose(a) => {
                let (r, c) = (node.value.shape()[1], node.value.shape()[0]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.nodes[a.0].value.dims2()?;
                let n = node.value.shape()[1];
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| kernels::gemm(false, true, m, n, k, g, vb, d));
                acc(*b, &mut |d| kernels::gemm(true, false, k, m, n, va, g, d));
            }
            Op::AddRow(x, b) => {
                let d_cols = node.value.shape()[1];
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |d| {
                    for row in g.chunks(d_cols) {
                        d.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Conv1d { x, w, b, geom } => {
                let in_len = self.nodes[x.0].value.shape()[1];
                let out_len = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::scatter(geom, g, out_len, vw, d, in_len));
                acc(*w, &mut |d| kernels::weight_grad(geom, vx, in_len, g, out_len, d));
                acc(*b, &mut |d| {
                    for (o, row) in g.chunks(out_len).enumerate() {
                        d[o] += row.iter().copied().sum();
                    }
                });
            }
            Op::ConvTranspose1d { x, w, b, geom } => {
                let in_len = self.nodes[x.0].value.shape()[1];
                let out_len = node.value.shape()[1];
                let (vx, vw) = (val(*x), val(*w));
                acc(*x, &mut |d| kernels::correlate(geom, g, out_len, vw, d, in_len));
                acc(*w, &mut |d| kernels::weight_grad(geom, g, out_len, vx, in_len, d));
                acc(*b, &mut |d| {
                    for (o, row) in g.chunks(out_len).enumerate() {
                        d[o] += row.iter().copied().sum();
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch } => {
                let len = node.value.shape()[1];
                let vg = val(*gamma);
                acc(*x, &mut |d| {
                    for (ch, &inv) in inv_std.iter().enumerate() {
                        let r = ch * len..(ch + 1) * len;
                        if *batch {
                            kernels::normalize_backward(&g[r.clone()], &xhat[r.clone()], vg[ch], inv, &mut d[r]);
                        } else {
                            for (x, &gy) in d[r.clone()].iter_mut().zip(&g[r]) {
                                *x += gy * vg[ch] * inv;
                            }
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (ch, dg) in d.iter_mut().enumerate() {
                        let r = ch * len..(ch + 1) * len;
                        *dg += g[r.clone()].iter().zip(&xhat[r]).map(|(&a, &h)| a * h).sum();
                    }
                });
                acc(*beta, &mut |d| {
                    for (ch, db) in d.iter_mut().enumerate() {
                        *db += g[ch * len..(ch + 1) * len].iter().copied().sum();
                    }
                });
            }
            Op::Slopes { x, slopes } => acc(*x, &mut |d| {
                for ((x, &gy), &s) in d.iter_mut().zip(g).zip(slopes) {
                    *x += gy * s;
                }
            }),
            Op::Gelu(x) => {
                let vx = val(*x);
                acc(*x, &mut |d| {
                    for ((dx, &gy), &v) in d.iter_mut().zip(g).zip(vx) {
                        *dx += gy * kernels::gelu_grad(v);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.rows_cols().1;
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((dx, &gy), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += y * (gy - dot);
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gamma, beta, xhat, inv_std } => {
                let d_cols = node.value.shape()[1];
                let vg = val(*gamma);
                acc(*x, &mut |d| {
                    let mut scaled = vec![F::zero(); d_cols];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let rr = r * d_cols..(r + 1) * d_cols;
                        for ((s, &gy), &gm) in scaled.iter_mut().zip(&g[rr.clone()]).zip(vg) {
                            *s = gy * gm;
                        }
                        kernels::normalize_backward(&scaled, &xhat[rr.clone()], F::one(), inv, &mut d[rr]);
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, hrow) in g.chunks(d_cols).zip(xhat.chunks(d_cols)) {
                        for ((dg, &gy), &h) in d.iter_mut().zip(grow).zip(hrow) {
                            *dg += gy * h;
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(d_cols) {
                        d.iter_mut().zip(grow).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.shape()[1];
                let w = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        for (j, &gy) in grow.iter().enumerate() {
                            d[i * c + start + j] += gy;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    acc(p, &mut |d| {
                        for (i, drow) in d.chunks_mut(w).enumerate() {
                            for (j, dx) in drow.iter_mut().enumerate() {
                                *dx += g[i * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                acc(*x, &mut |d| {
                    for (dx, &gy) in d[start * c..].iter_mut().zip(g) {
                        *dx += gy;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    acc(p, &mut |d| {
                        for (dx, &gy) in d.iter_mut().zip(&g[offset..offset + n]) {
                            *dx += gy;
                        }
                    });
                    offset += n;
                }
            }
            Op::GatherCols { x, idx } => {
                let c = self.nodes[x.0].value.rows_cols().1;
                let w = idx.len();
                acc(*x, &mut |d| {
                    for (i, grow) in g.chunks(w).enumerate() {
                        for (&j, &gy) in idx.iter().zip(grow) {
                            d[i * c + j] += gy;
                        }
                    }
                });
            }
            Op::SelectPerCol { x, rows } => {
                let t = rows.len();
                acc(*x, &mut |d| {
                    for (j, (&r, &gy)) in rows.iter().zip(g).enumerate() {
                        d[r * t + j] += gy;
                    }
                });
            }
            Op::L1Mean(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let s = g[0] / F::of(va.len() as f64);
                let sign = |x: F, y: F| {
                    if x > y {
                        s
                    } else if x < y {
                        -s
                    } else {
                        F::zero()
                    }
                };
                acc(*a, &mut |d| {
                    for ((dx, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *dx += sign(x, y);
                    }
                });
                acc(*b, &mut |d| {
                    for ((dy, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        *dy -= sign(x, y);
                    }
                });
            }
            Op::Pearson { a, b, sab, saa, sbb, denom } => {
                let (va, vb) = (val(*a), val(*b));
                let (ma, _) = kernels::mean_var(va);
                let (mb, _) = kernels::mean_var(vb);
                let d3 = *denom * *denom * *denom;
                let gs = g[0];
                acc(*a, &mut |d| {
                    for ((dx, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        let (da, db) = (x - ma, y - mb);
                        *dx += gs * (db / *denom - *sab * *sbb * da / d3);
                    }
                });
                acc(*b, &mut |d| {
                    for ((dy, &x), &y) in d.iter_mut().zip(va).zip(vb) {
                        let (da, db) = (x - ma, y - mb);
                        *dy += gs * (da / *denom - *sab * *saa * db / d3);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let t = labels.len();
                let k = probs.len() / t;
                acc(*logits, &mut |d| {
                    for (j, label) in labels.iter().enumerate() {
                        let Some(y) = *label else { continue };
                        for i in 0..k {
                            let onehot = if i == y { F::one() } else { F::zero() };
                            d[i * t + j] += g[0] * (probs[i * t + j] - onehot);
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(data: &[f64]) -> Tensor<f64> {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn sum_has_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1., -2., 3., 0.5, 0., 7.]).unwrap(), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1., 2., 3.]), true);
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1., 2.]), true);
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn unreached_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[1., 2.]), true);
        let unused = g.leaf(v(&[5.]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // loss = sum(x * x) via mul of the same var
        let mut g = Graph::<f64>::new();
        let x = g.leaf(v(&[3., -1.]), true);
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6., -2.]);
    }

    fn conv(input: &[f64], weight: &[f64], k: usize, bias: f64, stride: usize, pad: usize) -> Vec<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, input.len()], input).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 1, k], weight).unwrap());
        let b = g.constant(v(&[bias]));
        let y = g.conv1d(x, w, b, stride, pad).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn conv1d_examples() {
        assert_eq!(conv(&[1., 2., 3., 4.], &[1.], 1, 0., 1, 0), vec![1., 2., 3., 4.]);
        assert_eq!(conv(&[1., 2., 3., 4.], &[1., 0., -1.], 3, 0., 1, 0), vec![-2., -2.]);
        assert_eq!(conv(&[3., -2., 8., 1., 0.], &[0., 0.], 2, 5., 1, 0), vec![5.; 4]);
    }

    #[test]
    fn conv1d_direct_summation_oracle() {
        let x = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1, 0.9];
        let w = [0.5, -0.25, 1.5];
        for stride in 1..=3 {
            for pad in 0..=2 {
                let got = conv(&x, &w, 3, 0.1, stride, pad);
                let padded: Vec<f64> =
                    std::iter::repeat_n(0.0, pad).chain(x).chain(std::iter::repeat_n(0.0, pad)).collect();
                let expect: Vec<f64> = (0..)
                    .map(|t| t * stride)
                    .take_while(|&i| i + 3 <= padded.len())
                    .map(|i| 0.1 + (0..3).map(|j| w[j] * padded[i + j]).sum::<f64>())
                    .collect();
                assert_eq!(got.len(), expect.len());
                for (a, b) in got.iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv1d_channel_mismatch() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv1d(x, w, b, 1, 0), Err(Error::Dimension(_))));
        let wt = g.constant(Tensor::zeros(&[3, 1, 3]));
        assert!(matches!(g.conv_transpose1d(x, wt, b, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_transpose_unit_kernel_scatter() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[1., 2., 3.]).unwrap());
        let w = g.constant(Tensor::from_f64(&[1, 1, 1], &[1.]).unwrap());
        let b = g.constant(v(&[0.]));
        let y = g.conv_transpose1d(x, w, b, 2, 0).unwrap();
        assert_eq!(g.value(y).data(), &[1., 0., 2., 0., 3.]);

        let z = g.constant(Tensor::zeros(&[1, 3]));
        let b = g.constant(v(&[0.75]));
        let w3 = g.constant(Tensor::from_f64(&[1, 1, 3], &[1., 2., 3.]).unwrap());
        let y = g.conv_transpose1d(z, w3, b, 2, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&x| x == 0.75));
    }

    fn bn(x: &[f64], mode: Mode, running: &BatchNormStats<f64>) -> (Vec<f64>, Option<BatchNormStats<f64>>) {
        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_f64(&[1, x.len()], x).unwrap());
        let gamma = g.constant(v(&[1.]));
        let beta = g.constant(v(&[0.25]));
        let (y, stats) = g.batch_norm1d(xv, gamma, beta, running, 1e-5, 0.1, mode).unwrap();
        (g.value(y).data().to_vec(), stats)
    }

    #[test]
    fn batch_norm_examples() {
        let fresh = BatchNormStats { mean: vec![0.0], var: vec![1.0] };
        let (y, _) = bn(&[3., 3., 3.], Mode::Train, &fresh);
        assert!(y.iter().all(|&v| v == 0.25));

        let mut g = Graph::<f64>::new();
        let xv = g.constant(Tensor::from_f64(&[1, 2], &[-1., 1.]).unwrap());
        let one = g.constant(v(&[1.]));
        let zero = g.constant(v(&[0.]));
        let (y, stats) = g.batch_norm1d(xv, one, zero, &fresh, 1e-5, 0.1, Mode::Train).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.999995).abs() < 1e-6);
        let stats = stats.unwrap();
        assert!((stats.mean[0] - 0.0).abs() < 1e-15);
        // unbiased batch variance is 2
        assert!((stats.var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);

        let (a, none) = bn(&[0.3, -2.0, 4.0], Mode::Eval, &stats);
        let (b, _) = bn(&[0.3, -2.0, 4.0], Mode::Eval, &stats);
        assert!(none.is_none());
        assert_eq!(a, b);
    }

    #[test]
    fn batch_norm_rejects_empty_and_bad_eps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let p = g.constant(Tensor::zeros(&[1]));
        let st = BatchNormStats { mean: vec![0.0], var: vec![1.0] };
        assert!(matches!(g.batch_norm1d(x, p, p, &st, 0.0, 0.1, Mode::Train), Err(Error::Contract(_))));
    }

    #[test]
    fn rrelu_eval_and_train() {
        let mut rng = rand::rng();
        let mut g = Graph::<f64>::new();
        let x = g.constant(v(&[-1., 0., 2.]));
        let y = g.rrelu(x, 1.0 / 8.0, 1.0 / 3.0, Mode::Eval, &mut rng).unwrap();
        let out = g.value(y).data();
        assert!((out[0] + 11.0 / 48.0).abs() < 1e-15);
        assert_eq!(&out[1..], &[0., 2.]);
        assert!(g.rrelu(x, 0.5, 0.25, Mode::Eval, &mut rng).is_err());
        assert!(g.rrelu(x, 0.5, 1.0, Mode::Eval, &mut rng).is_err());
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.cross_entropy(l, &[Some(0), Some(2), None]), Err(Error::Label { .. })));
    }

    #[test]
    fn select_per_col_picks_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_f64(&[2, 3], &[1., 2., 3., 10., 20., 30.]).unwrap(), true);
        let y = g.select_per_col(x, &[0, 1, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[1., 20., 3.]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 0., 1., 0., 1., 0.]);
        assert!(matches!(g.select_per_col(x, &[0, 2, 0]), Err(Error::HeadIndex { .. })));
    }

    mod geometry {
        use super::*;
        use proptest::prelude::*;

        #[allow(clippy::too_many_arguments)]
        fn direct(x: &[f64], w: &[f64], ci: usize, co: usize, k: usize, len: usize, s: usize, p: usize) -> Vec<f64> {
            let out_len = (len + 2 * p - k) / s + 1;
            let mut y = vec![0.0; co * out_len];
            for o in 0..co {
                for t in 0..out_len {
                    for c in 0..ci {
                        for j in 0..k {
                            let pos = (t * s + j) as isize - p as isize;
                            if pos >= 0 && (pos as usize) < len {
                                y[o * out_len + t] += w[(o * ci + c) * k + j] * x[c * len + pos as usize];
                            }
                        }
                    }
                }
            }
            y
        }

        fn geometry() -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize)> {
            (1usize..4, 1usize..4, 1usize..8, 1usize..4, 0usize..5, 1usize..9)
                .prop_filter("kernel fits", |&(_, _, k, _, p, len)| len + 2 * p >= k)
        }

        proptest! {
            #[test]
            fn conv1d_matches_direct_sum(
                (ci, co, k, s, p, len) in geometry(),
                seed in proptest::collection::vec(-1.0f64..1.0, 64),
            ) {
                let x: Vec<f64> = (0..ci * len).map(|i| seed[i % 64] + 0.01 * i as f64).collect();
                let w: Vec<f64> = (0..co * ci * k).map(|i| seed[(i * 7 + 3) % 64]).collect();
                let mut g = Graph::<f64>::new();
                let xv = g.constant(Tensor::new(vec![ci, len], x.clone()).unwrap());
                let wv = g.constant(Tensor::new(vec![co, ci, k], w.clone()).unwrap());
                let b = g.constant(Tensor::zeros(&[co]));
                let y = g.conv1d(xv, wv, b, s, p).unwrap();
                let want = direct(&x, &w, ci, co, k, len, s, p);
                for (a, b) in g.value(y).data().iter().zip(&want) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn transpose_is_adjoint(
                (ci, co, k, s, p, len) in geometry(),
                seed in proptest::collection::vec(-1.0f64..1.0, 64),
            ) {
                let out_len = (len + 2 * p - k) / s + 1;
                let x: Vec<f64> = (0..ci * len).map(|i| seed[(i * 5 + 1) % 64]).collect();
                let w: Vec<f64> = (0..co * ci * k).map(|i| seed[(i * 7 + 3) % 64]).collect();
                let r: Vec<f64> = (0..co * out_len).map(|i| seed[(i * 11 + 2) % 64]).collect();
                let mut g = Graph::<f64>::new();
                let xv = g.leaf(Tensor::new(vec![ci, len], x.clone()).unwrap(), true);
                let wv = g.constant(Tensor::new(vec![co, ci, k], w.clone()).unwrap());
                let b = g.constant(Tensor::zeros(&[co]));
                let y = g.conv1d(xv, wv, b, s, p).unwrap();
                let rv = g.constant(Tensor::new(vec![co, out_len], r.clone()).unwrap());
                let prod = g.mul(y, rv).unwrap();
                let loss = g.sum(prod);
                g.backward(loss).unwrap();
                let lhs = g.scalar(loss);
                let input_grad = g.grad(xv).unwrap().data().to_vec();

                // the transposed layer maps the short side back with the same weights
                let ry = g.constant(Tensor::new(vec![co, out_len], r).unwrap());
                let bt = g.constant(Tensor::zeros(&[ci]));
                let wt = g.constant(Tensor::new(vec![co, ci, k], w).unwrap());
                let full = (out_len - 1) * s + k;
                if full > 2 * p {
                    let back = g.conv_transpose1d(ry, wt, bt, s, p).unwrap();
                    let back = g.value(back).data().to_vec();
                    let n = back.len().min(len);
                    for c in 0..ci {
                        let bl = back.len() / ci;
                        for t in 0..n.min(bl) {
                            prop_assert!((back[c * bl + t] - input_grad[c * len + t]).abs() < 1e-12);
                        }
                    }
                    if back.len() == x.len() {
                        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
                        prop_assert!((lhs - rhs).abs() <= 1e-6 * lhs.abs().max(1.0));
                    }
                }
            }
        }
    }
}
