//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation as it executes. Nodes whose inputs are
//! all constants are stored without backward state, so inference through a
//! tape built from constants costs no more than a plain forward pass.
//! Fused kernels defined elsewhere in the crate (attention, rotary encoding,
//! SSIM, Charbonnier) plug in through [`Backward`].

use std::fmt;

use crate::error::{ensure, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product of a fused operation.
pub trait Backward<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    MaskRows { x: Var, keep: Vec<bool> },
    LayerNorm { x: Var, rstd: Vec<T> },
    RmsNormHeads { x: Var, w: Var, head_dim: usize, rstd: Vec<T> },
    Silu { x: Var },
    Tanh { x: Var },
    Exp { x: Var },
    Gather { x: Var, idx: Vec<usize> },
    Interp { x: Var, taps: usize, idx: Vec<usize>, w: Vec<T> },
    SoftmaxRows { x: Var },
    L2NormalizeRows { x: Var, norms: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    Mse { a: Var, b: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn Backward<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Option<Op<T>>,
}

impl<T: Scalar> Node<T> {
    fn requires_grad(&self) -> bool {
        self.op.is_some()
    }
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn layer_eps<T: Scalar>() -> T {
    T::lit(1e-6)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Some(Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad()
    }

    fn any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    fn record(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let op = if self.any(inputs) { Some(op()) } else { None };
        self.push(value, op)
    }

    /// Records a fused operation. `backward` is only built when some input
    /// is tracked, so kernels can skip saving forward state in inference.
    pub fn custom(
        &mut self,
        inputs: Vec<Var>,
        value: Tensor<T>,
        backward: impl FnOnce() -> Box<dyn Backward<T>>,
    ) -> Var {
        if self.any(&inputs) {
            let op = backward();
            self.push(value, Some(Op::Custom { inputs, op }))
        } else {
            self.push(value, None)
        }
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d_in) = self.value(x).dims2();
        let ws = self.shape(w);
        ensure!(ws.len() == 2 && ws[0] == d_in, Shape, "linear: x {:?} vs w {:?}", self.shape(x), ws);
        let d_out = ws[1];
        let mut out = vec![T::zero(); n * d_out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            ensure!(bv.len() == d_out, Shape, "linear: bias {} vs out {}", bv.len(), d_out);
            for row in out.chunks_mut(d_out) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(n, d_in, d_out, T::one(), self.value(x).data(), false, self.value(w).data(), false, beta, &mut out);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = d_out;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.record(value, &inputs, || Op::Linear { x, w, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.record(value, &[a, b], || Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        ensure!(t.rank() == 2, Shape, "transpose needs rank 2, got {:?}", t.shape());
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let src = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.record(value, &[a], || Op::Transpose { a }))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        ensure!(va.numel() == vb.numel(), Shape, "{}: {:?} vs {:?}", what, va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "add", |x, y| x + y)?;
        Ok(self.record(value, &[a, b], || Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(value, &[a, b], || Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(value, &[a, b], || Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        self.record(value, &[a], || Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v + c);
        self.record(value, &[a], || Op::AddScalar { a })
    }

    fn broadcast_row(&self, x: Var, row: Var, what: &str) -> Result<usize> {
        let (_, cols) = self.value(x).dims2();
        let rn = self.value(row).numel();
        ensure!(rn == cols, Shape, "{}: row of {} vs {} columns", what, rn, cols);
        Ok(cols)
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.broadcast_row(x, row, "add_row")?;
        let r = self.value(row).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v += b;
            }
        }
        Ok(self.record(value, &[x, row], || Op::AddRow { x, row }))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.broadcast_row(x, row, "mul_row")?;
        let r = self.value(row).data();
        let mut value = self.value(x).clone();
        for chunk in value.data_mut().chunks_mut(cols) {
            for (v, &b) in chunk.iter_mut().zip(r) {
                *v *= b;
            }
        }
        Ok(self.record(value, &[x, row], || Op::MulRow { x, row }))
    }

    /// Zeroes rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        ensure!(keep.len() == rows, Shape, "mask_rows: {} flags for {} rows", keep.len(), rows);
        let mut value = self.value(x).clone();
        for (chunk, &k) in value.data_mut().chunks_mut(cols).zip(keep) {
            if !k {
                chunk.fill(T::zero());
            }
        }
        let keep = keep.to_vec();
        Ok(self.record(value, &[x], || Op::MaskRows { x, keep }))
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).dims2();
        let mut value = self.value(x).clone();
        let n = T::from_usize(cols).unwrap();
        let mut rstds = Vec::with_capacity(value.numel() / cols.max(1));
        for row in value.data_mut().chunks_mut(cols) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + layer_eps()).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
            rstds.push(rstd);
        }
        self.record(value, &[x], || Op::LayerNorm { x, rstd: rstds })
    }

    /// RMS normalization applied independently to each `head_dim` group of a
    /// row, followed by a gain `w` shared across groups.
    pub fn rms_norm_heads(&mut self, x: Var, w: Var, head_dim: usize) -> Result<Var> {
        let (_, cols) = self.value(x).dims2();
        ensure!(head_dim > 0 && cols % head_dim == 0, Shape, "rms_norm_heads: {} cols, head_dim {}", cols, head_dim);
        ensure!(self.value(w).numel() == head_dim, Shape, "rms_norm_heads: gain length");
        let gain = self.value(w).data().to_vec();
        let mut value = self.value(x).clone();
        let n = T::from_usize(head_dim).unwrap();
        let mut rstds = Vec::with_capacity(value.numel() / head_dim);
        for group in value.data_mut().chunks_mut(head_dim) {
            let ms = group.iter().map(|&v| v * v).sum::<T>() / n;
            let rstd = T::one() / (ms + layer_eps()).sqrt();
            for (v, &g) in group.iter_mut().zip(&gain) {
                *v = *v * rstd * g;
            }
            rstds.push(rstd);
        }
        Ok(self.record(value, &[x, w], || Op::RmsNormHeads { x, w, head_dim, rstd: rstds }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.record(value, &[x], || Op::Silu { x })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        self.record(value, &[x], || Op::Tanh { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.exp());
        self.record(value, &[x], || Op::Exp { x })
    }

    /// `out[i] = x[idx[i]]` over flat storage, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        ensure!(idx.iter().all(|&i| i < src.len()), Shape, "gather index out of range");
        let data = idx.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], || Op::Gather { x, idx }))
    }

    /// Fixed sparse linear map with `taps` weighted source entries per output.
    pub fn interp(&mut self, x: Var, taps: usize, idx: Vec<usize>, w: Vec<T>, shape: Vec<usize>) -> Result<Var> {
        ensure!(taps > 0 && idx.len() == w.len() && idx.len().is_multiple_of(taps), Shape, "interp tap layout");
        let src = self.value(x).data();
        ensure!(idx.iter().all(|&i| i < src.len()), Shape, "interp index out of range");
        let data: Vec<T> = idx
            .chunks(taps)
            .zip(w.chunks(taps))
            .map(|(ii, ww)| ii.iter().zip(ww).map(|(&i, &wt)| src[i] * wt).sum())
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.record(value, &[x], || Op::Interp { x, taps, idx, w }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).dims2();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
        self.record(value, &[x], || Op::SoftmaxRows { x })
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.value(x).dims2();
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.numel() / cols.max(1));
        let floor = T::lit(1e-12);
        for row in value.data_mut().chunks_mut(cols) {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        self.record(value, &[x], || Op::L2NormalizeRows { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(value, &[x], || Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.record(value, &[x], || Op::Mean { x })
    }

    /// Mean squared difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let diff = self.zip(a, b, "mse", |x, y| (x - y) * (x - y))?;
        let value = Tensor::scalar(diff.mean());
        Ok(self.record(value, &[a, b], || Op::Mse { a, b }))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        ensure!(self.value(loss).numel() == 1, InvalidArgument, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.as_ref() else { continue };
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, op, &g, &mut grads)?;
            if matches!(op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, d_in) = self.value(*x).dims2();
                let d_out = self.shape(*w)[1];
                if self.requires_grad(*x) {
                    let gx = self.acc(grads, *x);
                    T::gemm(n, d_out, d_in, T::one(), g, false, self.value(*w).data(), true, T::one(), gx);
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data();
                    let gw = self.acc(grads, *w);
                    T::gemm(d_in, n, d_out, T::one(), xv, true, g, false, T::one(), gw);
                }
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb = self.acc(grads, *b);
                        for row in g.chunks(d_out) {
                            for (a, &v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let ga = self.acc(grads, *a);
                    T::gemm(m, n, k, T::one(), g, false, bv, true, T::one(), ga);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let gb = self.acc(grads, *b);
                    T::gemm(k, m, n, T::one(), av, true, g, false, T::one(), gb);
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = self.acc(grads, *a);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add { a, b } => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub { a, b } => {
                self.acc_with(grads, *a, |ga| add_into(ga, g));
                self.acc_with(grads, *b, |gb| {
                    for (x, &v) in gb.iter_mut().zip(g) {
                        *x -= v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_with(grads, *a, |ga| {
                    for ((x, &gv), &y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gv * y;
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((x, &gv), &y) in gb.iter_mut().zip(g).zip(va) {
                        *x += gv * y;
                    }
                });
            }
            Op::Scale { a, c } => {
                let ga = self.acc(grads, *a);
                for (x, &v) in ga.iter_mut().zip(g) {
                    *x += v * *c;
                }
            }
            Op::AddScalar { a } => {
                let ga = self.acc(grads, *a);
                add_into(ga, g);
            }
            Op::AddRow { x, row } => {
                let cols = self.value(*row).numel();
                self.acc_with(grads, *x, |gx| add_into(gx, g));
                self.acc_with(grads, *row, |gr| {
                    for chunk in g.chunks(cols) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::MulRow { x, row } => {
                let cols = self.value(*row).numel();
                let rv = self.value(*row).data();
                let xv = self.value(*x).data();
                self.acc_with(grads, *x, |gx| {
                    for (gc, gg) in gx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for ((a, &v), &r) in gc.iter_mut().zip(gg).zip(rv) {
                            *a += v * r;
                        }
                    }
                });
                self.acc_with(grads, *row, |gr| {
                    for (xc, gg) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for ((a, &v), &xx) in gr.iter_mut().zip(gg).zip(xc) {
                            *a += v * xx;
                        }
                    }
                });
            }
            Op::MaskRows { x, keep } => {
                let cols = g.len() / keep.len().max(1);
                let gx = self.acc(grads, *x);
                for ((gc, gg), &k) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(keep) {
                    if k {
                        add_into(gc, gg);
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let (_, cols) = out.dims2();
                let n = T::from_usize(cols).unwrap();
                let y = out.data();
                let gx = self.acc(grads, *x);
                for (r, &rs) in rstd.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((dst, &gv), &yv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(yr) {
                        *dst += rs * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::RmsNormHeads { x, w, head_dim, rstd } => {
                let hd = *head_dim;
                let n = T::from_usize(hd).unwrap();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                if self.requires_grad(*w) {
                    let gw = self.acc(grads, *w);
                    for (k, &rs) in rstd.iter().enumerate() {
                        for d in 0..hd {
                            gw[d] += g[k * hd + d] * xv[k * hd + d] * rs;
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gx = self.acc(grads, *x);
                    for (k, &rs) in rstd.iter().enumerate() {
                        let base = k * hd;
                        let mut dot = T::zero();
                        for d in 0..hd {
                            dot += g[base + d] * wv[d] * xv[base + d] * rs;
                        }
                        let dot = dot / n;
                        for d in 0..hd {
                            let u = xv[base + d] * rs;
                            gx[base + d] += rs * (g[base + d] * wv[d] - u * dot);
                        }
                    }
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x).data();
                let gx = self.acc(grads, *x);
                for ((a, &gv), &v) in gx.iter_mut().zip(g).zip(xv) {
                    let s = sigmoid(v);
                    *a += gv * s * (T::one() + v * (T::one() - s));
                }
            }
            Op::Tanh { x } => {
                let y = out.data();
                let gx = self.acc(grads, *x);
                for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *a += gv * (T::one() - yv * yv);
                }
            }
            Op::Exp { x } => {
                let y = out.data();
                let gx = self.acc(grads, *x);
                for ((a, &gv), &yv) in gx.iter_mut().zip(g).zip(y) {
                    *a += gv * yv;
                }
            }
            Op::Gather { x, idx } => {
                let gx = self.acc(grads, *x);
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
            }
            Op::Interp { x, taps, idx, w } => {
                let gx = self.acc(grads, *x);
                for ((ii, ww), &gv) in idx.chunks(*taps).zip(w.chunks(*taps)).zip(g) {
                    for (&i, &wt) in ii.iter().zip(ww) {
                        gx[i] += gv * wt;
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let (_, cols) = out.dims2();
                let y = out.data();
                let gx = self.acc(grads, *x);
                for ((dst, yr), gr) in gx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let (_, cols) = out.dims2();
                let y = out.data();
                let gx = self.acc(grads, *x);
                for (r, &nrm) in norms.iter().enumerate() {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yv), &gv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d += (gv - yv * dot) / nrm;
                    }
                }
            }
            Op::Sum { x } => {
                let gx = self.acc(grads, *x);
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }
            Op::Mean { x } => {
                let gx = self.acc(grads, *x);
                let s = g[0] / T::from_usize(gx.len().max(1)).unwrap();
                for a in gx.iter_mut() {
                    *a += s;
                }
            }
            Op::Mse { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let s = T::lit(2.0) * g[0] / T::from_usize(va.len().max(1)).unwrap();
                self.acc_with(grads, *a, |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += s * (x - y);
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(va).zip(vb) {
                        *d -= s * (x - y);
                    }
                });
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.requires_grad(v)).collect();
                let gs = op.backward(&vals, out, g, &needs);
                if gs.len() != inputs.len() {
                    return Err(Error::Shape(format!("{}: backward returned {} grads", op.name(), gs.len())));
                }
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        if self.requires_grad(v) {
                            let dst = self.acc(grads, v);
                            if dst.len() != gv.len() {
                                return Err(Error::Shape(format!("{}: gradient length mismatch", op.name())));
                            }
                            add_into(dst, &gv);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut [T] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if self.requires_grad(v) {
            f(self.acc(grads, v));
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
