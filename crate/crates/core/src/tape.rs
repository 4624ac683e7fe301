//! Tensor-level reverse-mode differentiation.
//!
//! Operations are recorded on a [`Tape`] in execution order; [`Tape::backward`]
//! walks the record in reverse and accumulates adjoints. Only the operation
//! set used by the denoiser and the guidance/regularisation losses exists:
//! affine maps, 3x3 convolution, row normalisation, softmax attention,
//! SiLU, norms, pooling and the noise-autocorrelation terms.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Real, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;
/// Variance floor for the Gaussian-fit KL term.
pub const KL_VAR_FLOOR: f64 = 1e-8;

pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    tracked: bool,
}

/// Geometry of a same-size, zero-padded 3x3 convolution over an `H x W`
/// grid whose features are stored as an `(H*W) x C` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub dilation: usize,
}

enum Op<T: Real> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MatMul { a: usize, b: usize, trans_b: bool },
    Conv(Box<ConvRecord<T>>),
    Silu(usize),
    SoftmaxRows(usize),
    LayerNormRows { a: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Sum(usize),
    SumSq(usize),
    L2Norm(usize),
    AvgPool2(usize),
    PairCorrelation(usize),
    GaussianKl { a: usize, clamped: Vec<bool> },
    Reshape(usize),
}

struct ConvRecord<T: Real> {
    x: usize,
    w: usize,
    b: usize,
    geom: ConvGeom,
    cin: usize,
    cout: usize,
    cols: Vec<T>,
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Adjoints of the tracked leaves after a backward pass.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    dims: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `var`; zero if the loss does not depend on it.
    pub fn wrt(&self, var: Var<'_, T>) -> Tensor<T> {
        match self.grads.get(var.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => Tensor::zeros(&self.dims[var.id]),
        }
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf whose adjoint is accumulated.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let tracked = parents.iter().any(|&p| self.tracked(p));
        self.push(value, op, tracked)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got dims {:?}",
                nodes[loss.id].value.dims()
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        adj[loss.id] = Some(vec![T::one()]);
        let mut leaves: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let numel_of = |i: usize| nodes[i].value.numel();
            let tracked = |i: usize| nodes[i].tracked;
            let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[i].tracked {
                    return;
                }
                let slot = adj[i].get_or_insert_with(|| vec![T::zero(); numel_of(i)]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    let dims = node.value.dims().to_vec();
                    leaves[id] = Some(Tensor::new(dims, g).expect("adjoint length"));
                }
                Op::Add(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| {
                        for (d, &v) in s.iter_mut().zip(&g) {
                            *d = *d - v;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |s| {
                        for ((d, &gv), &bv) in s.iter_mut().zip(&g).zip(vb.data()) {
                            *d = *d + gv * bv;
                        }
                    });
                    acc(*b, &mut |s| {
                        for ((d, &gv), &av) in s.iter_mut().zip(&g).zip(va.data()) {
                            *d = *d + gv * av;
                        }
                    });
                }
                Op::Scale(a, k) => {
                    acc(*a, &mut |s| {
                        for (d, &gv) in s.iter_mut().zip(&g) {
                            *d = *d + gv * *k;
                        }
                    });
                }
                Op::AddRow(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    let width = numel_of(*b);
                    acc(*b, &mut |s| {
                        for row in g.chunks_exact(width) {
                            add_into(s, row);
                        }
                    });
                }
                Op::MulRow(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let width = vb.numel();
                    acc(*a, &mut |s| {
                        for (srow, grow) in s.chunks_exact_mut(width).zip(g.chunks_exact(width)) {
                            for ((d, &gv), &bv) in srow.iter_mut().zip(grow).zip(vb.data()) {
                                *d = *d + gv * bv;
                            }
                        }
                    });
                    acc(*b, &mut |s| {
                        for (grow, arow) in g.chunks_exact(width).zip(va.data().chunks_exact(width))
                        {
                            for ((d, &gv), &av) in s.iter_mut().zip(grow).zip(arow) {
                                *d = *d + gv * av;
                            }
                        }
                    });
                }
                Op::MatMul { a, b, trans_b } => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k) = (va.dims()[0], va.dims()[1]);
                    let n = node.value.dims()[1];
                    let (k_, n_) = (k as isize, n as isize);
                    acc(*a, &mut |s| {
                        // dA = dC * B^T  (or dC * B when C = A * B^T)
                        let b_strides = if *trans_b { (k_, 1) } else { (1, n_) };
                        T::gemm(m, n, k, T::one(), &g, (n_, 1), vb.data(), b_strides, T::one(), s, (k_, 1));
                    });
                    acc(*b, &mut |s| {
                        if *trans_b {
                            // dB (n x k) = dC^T * A
                            T::gemm(n, m, k, T::one(), &g, (1, n_), va.data(), (k_, 1), T::one(), s, (k_, 1));
                        } else {
                            // dB (k x n) = A^T * dC
                            T::gemm(k, m, n, T::one(), va.data(), (1, k_), &g, (n_, 1), T::one(), s, (n_, 1));
                        }
                    });
                }
                Op::Conv(rec) => {
                    let n = rec.geom.height * rec.geom.width;
                    let kc = 9 * rec.cin;
                    let (kc_, cout_) = (kc as isize, rec.cout as isize);
                    acc(rec.w, &mut |s| {
                        T::gemm(kc, n, rec.cout, T::one(), &rec.cols, (1, kc_), &g, (cout_, 1), T::one(), s, (cout_, 1));
                    });
                    acc(rec.b, &mut |s| {
                        for row in g.chunks_exact(rec.cout) {
                            add_into(s, row);
                        }
                    });
                    if tracked(rec.x) {
                        let wv = &nodes[rec.w].value;
                        let mut dcols = vec![T::zero(); n * kc];
                        T::gemm(n, rec.cout, kc, T::one(), &g, (cout_, 1), wv.data(), (1, cout_), T::zero(), &mut dcols, (kc_, 1));
                        acc(rec.x, &mut |s| col2im(&dcols, s, rec.geom, rec.cin));
                    }
                }
                Op::Silu(a) => {
                    let va = &nodes[*a].value;
                    acc(*a, &mut |s| {
                        for ((d, &gv), &x) in s.iter_mut().zip(&g).zip(va.data()) {
                            let sig = T::one() / (T::one() + (-x).exp());
                            *d = *d + gv * sig * (T::one() + x * (T::one() - sig));
                        }
                    });
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.dims()[1];
                    acc(*a, &mut |s| {
                        for ((srow, grow), yrow) in s
                            .chunks_exact_mut(cols)
                            .zip(g.chunks_exact(cols))
                            .zip(y.data().chunks_exact(cols))
                        {
                            let dot = grow
                                .iter()
                                .zip(yrow)
                                .map(|(&gv, &yv)| (gv * yv).as_f64())
                                .sum::<f64>();
                            let dot = T::cast_from(dot);
                            for ((d, &gv), &yv) in srow.iter_mut().zip(grow).zip(yrow) {
                                *d = *d + yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNormRows { a, xhat, inv_std } => {
                    let width = node.value.dims()[1];
                    acc(*a, &mut |s| {
                        for (r, ((srow, grow), xrow)) in s
                            .chunks_exact_mut(width)
                            .zip(g.chunks_exact(width))
                            .zip(xhat.chunks_exact(width))
                            .enumerate()
                        {
                            let mut mg = 0.0f64;
                            let mut mgx = 0.0f64;
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                mg += gv.as_f64();
                                mgx += (gv * xv).as_f64();
                            }
                            let mg = T::cast_from(mg / width as f64);
                            let mgx = T::cast_from(mgx / width as f64);
                            for ((d, &gv), &xv) in srow.iter_mut().zip(grow).zip(xrow) {
                                *d = *d + inv_std[r] * (gv - mg - xv * mgx);
                            }
                        }
                    });
                }
                Op::Sum(a) => {
                    acc(*a, &mut |s| {
                        for d in s.iter_mut() {
                            *d = *d + g[0];
                        }
                    });
                }
                Op::SumSq(a) => {
                    let va = &nodes[*a].value;
                    let two = T::cast_from(2.0);
                    acc(*a, &mut |s| {
                        for (d, &x) in s.iter_mut().zip(va.data()) {
                            *d = *d + two * g[0] * x;
                        }
                    });
                }
                Op::L2Norm(a) => {
                    let norm = node.value.data()[0];
                    if norm > T::zero() {
                        let va = &nodes[*a].value;
                        let k = g[0] / norm;
                        acc(*a, &mut |s| {
                            for (d, &x) in s.iter_mut().zip(va.data()) {
                                *d = *d + k * x;
                            }
                        });
                    }
                }
                Op::AvgPool2(a) => {
                    let dims = nodes[*a].value.dims().to_vec();
                    let (w, c) = (dims[1], dims[2]);
                    let (oh, ow) = (dims[0] / 2, w / 2);
                    let quarter = T::cast_from(0.25);
                    acc(*a, &mut |s| {
                        for y in 0..oh {
                            for x in 0..ow {
                                for ch in 0..c {
                                    let gv = g[(y * ow + x) * c + ch] * quarter;
                                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                        let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                                        s[i] = s[i] + gv;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::PairCorrelation(a) => {
                    let va = &nodes[*a].value;
                    let (rows, cols) = pair_sums(va);
                    let dims = va.dims();
                    let (side, c) = (dims[0], dims[2]);
                    let inv_area = 1.0 / (side * side) as f64;
                    acc(*a, &mut |s| {
                        for i in 0..side {
                            for j in 0..side {
                                for ch in 0..c {
                                    let idx = (i * side + j) * c + ch;
                                    let v = va.data()[idx].as_f64();
                                    let d = 2.0 * rows[i * c + ch] + 2.0 * cols[j * c + ch] - 4.0 * v;
                                    s[idx] = s[idx] + g[0] * T::cast_from(d * inv_area);
                                }
                            }
                        }
                    });
                }
                Op::GaussianKl { a, clamped } => {
                    let va = &nodes[*a].value;
                    let c = *va.dims().last().expect("rank >= 1");
                    let stats = channel_moments(va);
                    let n = (va.numel() / c) as f64;
                    acc(*a, &mut |s| {
                        for (i, (d, &x)) in s.iter_mut().zip(va.data()).enumerate() {
                            let ch = i % c;
                            let (mu, var) = stats[ch];
                            let centred = x.as_f64() - mu;
                            let var_term = if clamped[ch] { 0.0 } else { (1.0 - 1.0 / var) * centred };
                            *d = *d + g[0] * T::cast_from((var_term + mu) / n);
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(*a, &mut |s| add_into(s, &g));
                }
            }
        }
        let dims = nodes.iter().map(|n| n.value.dims().to_vec()).collect();
        Ok(Gradients { grads: leaves, dims })
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Row sums and column sums (per channel) of an `S x S x C` tensor, in f64.
fn pair_sums<T: Real>(t: &Tensor<T>) -> (Vec<f64>, Vec<f64>) {
    let dims = t.dims();
    let (side, c) = (dims[0], dims[2]);
    let mut rows = vec![0.0; side * c];
    let mut cols = vec![0.0; side * c];
    for i in 0..side {
        for j in 0..side {
            for ch in 0..c {
                let v = t.data()[(i * side + j) * c + ch].as_f64();
                rows[i * c + ch] += v;
                cols[j * c + ch] += v;
            }
        }
    }
    (rows, cols)
}

/// Per-channel (mean, population variance) over all leading positions.
fn channel_moments<T: Real>(t: &Tensor<T>) -> Vec<(f64, f64)> {
    let c = *t.dims().last().expect("rank >= 1");
    let n = (t.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        mean[i % c] += v.as_f64();
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; c];
    for (i, v) in t.data().iter().enumerate() {
        var[i % c] += (v.as_f64() - mean[i % c]).powi(2);
    }
    mean.into_iter()
        .zip(var)
        .map(|(m, v)| (m, v / n))
        .collect()
}

fn im2col<T: Real>(x: &[T], geom: ConvGeom, cin: usize) -> Vec<T> {
    let (h, w, d) = (geom.height as isize, geom.width as isize, geom.dilation as isize);
    let kc = 9 * cin;
    let mut cols = vec![T::zero(); (h * w) as usize * kc];
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) as usize * kc;
            for ky in 0..3isize {
                let sy = y + (ky - 1) * d;
                if sy < 0 || sy >= h {
                    continue;
                }
                for kx in 0..3isize {
                    let sx = xx + (kx - 1) * d;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let src = (sy * w + sx) as usize * cin;
                    let dst = row + (ky * 3 + kx) as usize * cin;
                    cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(dcols: &[T], dx: &mut [T], geom: ConvGeom, cin: usize) {
    let (h, w, d) = (geom.height as isize, geom.width as isize, geom.dilation as isize);
    let kc = 9 * cin;
    for y in 0..h {
        for xx in 0..w {
            let row = (y * w + xx) as usize * kc;
            for ky in 0..3isize {
                let sy = y + (ky - 1) * d;
                if sy < 0 || sy >= h {
                    continue;
                }
                for kx in 0..3isize {
                    let sx = xx + (kx - 1) * d;
                    if sx < 0 || sx >= w {
                        continue;
                    }
                    let dst = (sy * w + sx) as usize * cin;
                    let src = row + (ky * 3 + kx) as usize * cin;
                    add_into(&mut dx[dst..dst + cin], &dcols[src..src + cin]);
                }
            }
        }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn dims(&self) -> Vec<usize> {
        self.value().dims().to_vec()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn binary(self, other: Var<'t, T>, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let v = self.value().zip_map(&other.value(), f)?;
        Ok(self.tape.record(v, op, &[self.id, other.id]))
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        let v = self.value().scale(k);
        self.tape.record(v, Op::Scale(self.id, k), &[self.id])
    }

    fn row_broadcast(self, row: Var<'t, T>, mul: bool) -> Result<Var<'t, T>> {
        self.same_tape(&row);
        let a = self.value();
        let b = row.value();
        let (_, width) = a.matrix_dims()?;
        if b.numel() != width {
            return Err(Error::shape(format!(
                "row operand of {} values for matrix of width {width}",
                b.numel()
            )));
        }
        let mut out = (*a).clone();
        for r in out.data_mut().chunks_exact_mut(width) {
            for (d, &bv) in r.iter_mut().zip(b.data()) {
                *d = if mul { *d * bv } else { *d + bv };
            }
        }
        let op = if mul {
            Op::MulRow(self.id, row.id)
        } else {
            Op::AddRow(self.id, row.id)
        };
        Ok(self.tape.record(out, op, &[self.id, row.id]))
    }

    /// Adds a length-`F` vector to every row of an `N x F` matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, false)
    }

    /// Multiplies every row of an `N x F` matrix by a length-`F` vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.row_broadcast(row, true)
    }

    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, false)
    }

    /// `self * other^T`.
    pub fn matmul_t(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let (m, k) = a.matrix_dims()?;
        let (br, bc) = b.matrix_dims()?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner extents differ: {:?} x {:?}{}",
                a.dims(),
                b.dims(),
                if trans_b { "^T" } else { "" }
            )));
        }
        let mut c = vec![T::zero(); m * n];
        let b_strides = if trans_b {
            (1, bc as isize)
        } else {
            (bc as isize, 1)
        };
        T::gemm(m, k, n, T::one(), a.data(), (k as isize, 1), b.data(), b_strides, T::zero(), &mut c, (n as isize, 1));
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.tape.record(
            out,
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            &[self.id, other.id],
        ))
    }

    /// Same-size 3x3 convolution. `self` is `(H*W) x Cin`, `weight` is
    /// `(9*Cin) x Cout` laid out as `((ky*3 + kx)*Cin + ci, co)`, `bias` has
    /// `Cout` entries.
    pub fn conv3x3(self, weight: Var<'t, T>, bias: Var<'t, T>, geom: ConvGeom) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        self.same_tape(&bias);
        let x = self.value();
        let w = weight.value();
        let b = bias.value();
        let (n, cin) = x.matrix_dims()?;
        let (kc, cout) = w.matrix_dims()?;
        if n != geom.height * geom.width || kc != 9 * cin || b.numel() != cout {
            return Err(Error::shape(format!(
                "conv3x3: input {:?}, weight {:?}, bias {:?} incompatible with {}x{} grid",
                x.dims(),
                w.dims(),
                b.dims(),
                geom.height,
                geom.width
            )));
        }
        let cols = im2col(x.data(), geom, cin);
        let mut out = vec![T::zero(); n * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
        T::gemm(n, kc, cout, T::one(), &cols, (kc as isize, 1), w.data(), (cout as isize, 1), T::one(), &mut out, (cout as isize, 1));
        let out = Tensor::new(vec![n, cout], out)?;
        let rec = ConvRecord {
            x: self.id,
            w: weight.id,
            b: bias.id,
            geom,
            cin,
            cout,
            cols,
        };
        Ok(self
            .tape
            .record(out, Op::Conv(Box::new(rec)), &[self.id, weight.id, bias.id]))
    }

    pub fn silu(self) -> Var<'t, T> {
        let v = self.value().map(|x| x / (T::one() + (-x).exp()));
        self.tape.record(v, Op::Silu(self.id), &[self.id])
    }

    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (_, cols) = a.matrix_dims()?;
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        Ok(self.tape.record(out, Op::SoftmaxRows(self.id), &[self.id]))
    }

    /// Parameter-free normalisation of each row to zero mean, unit variance.
    pub fn layer_norm_rows(self) -> Result<Var<'t, T>> {
        let a = self.value();
        let (rows, width) = a.matrix_dims()?;
        let mut xhat = vec![T::zero(); rows * width];
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in a.data().chunks_exact(width).enumerate() {
            let mean = row.iter().map(|v| v.as_f64()).sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (d, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
                *d = T::cast_from((v.as_f64() - mean) * is);
            }
            inv_std.push(T::cast_from(is));
        }
        let out = Tensor::new(vec![rows, width], xhat.clone())?;
        Ok(self.tape.record(
            out,
            Op::LayerNormRows {
                a: self.id,
                xhat,
                inv_std,
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'t, T> {
        let v = Tensor::scalar(T::cast_from(self.value().sum()));
        self.tape.record(v, Op::Sum(self.id), &[self.id])
    }

    pub fn sum_sq(self) -> Var<'t, T> {
        let v = Tensor::scalar(T::cast_from(self.value().sum_sq()));
        self.tape.record(v, Op::SumSq(self.id), &[self.id])
    }

    /// Euclidean (Frobenius) norm. The gradient at the origin is taken as zero.
    pub fn l2_norm(self) -> Var<'t, T> {
        let v = Tensor::scalar(T::cast_from(self.value().l2_norm()));
        self.tape.record(v, Op::L2Norm(self.id), &[self.id])
    }

    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let v = crate::tensor::avg_pool2(&self.value())?;
        Ok(self.tape.record(v, Op::AvgPool2(self.id), &[self.id]))
    }

    /// Circular pairwise-correlation sum of an `S x S x C` map:
    /// `1/S^2 * sum_{delta=1}^{S-1} sum_{x,y,c} e[x,y,c] (e[x-delta,y,c] + e[x,y-delta,c])`.
    ///
    /// Summing a circular shift over every nonzero offset visits each other
    /// cell of the row exactly once, so the value reduces to squared
    /// row/column sums minus twice the energy.
    pub fn pair_correlation(self) -> Result<Var<'t, T>> {
        let a = self.value();
        a.expect_rank(3)?;
        if a.dims()[0] != a.dims()[1] {
            return Err(Error::shape(format!(
                "pair correlation needs a square map, got {:?}",
                a.dims()
            )));
        }
        let side = a.dims()[0];
        let (rows, cols) = pair_sums(&a);
        let energy = a.sum_sq();
        let sq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
        let value = (sq(&rows) + sq(&cols) - 2.0 * energy) / (side * side) as f64;
        Ok(self.tape.record(
            Tensor::scalar(T::cast_from(value)),
            Op::PairCorrelation(self.id),
            &[self.id],
        ))
    }

    /// `sum_c KL(N(mu_c, var_c) || N(0, 1))` for moments fitted per channel
    /// (last axis). Variances below [`KL_VAR_FLOOR`] are clamped.
    pub fn gaussian_kl(self) -> Var<'t, T> {
        let a = self.value();
        let stats = channel_moments(&a);
        let mut clamped = Vec::with_capacity(stats.len());
        let mut total = 0.0;
        for &(mu, var) in &stats {
            let is_clamped = var < KL_VAR_FLOOR;
            let var = var.max(KL_VAR_FLOOR);
            clamped.push(is_clamped);
            total += 0.5 * (var + mu * mu - 1.0 - var.ln());
        }
        self.tape.record(
            Tensor::scalar(T::cast_from(total)),
            Op::GaussianKl { a: self.id, clamped },
            &[self.id],
        )
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t, T>> {
        let v = (*self.value()).clone().reshape(dims)?;
        Ok(self.tape.record(v, Op::Reshape(self.id), &[self.id]))
    }
}

/// Value and gradient of `build(x)` at `at`. `build` must produce a scalar.
pub fn value_and_gradient<T, F>(at: &Tensor<T>, build: F) -> Result<(f64, Tensor<T>)>
where
    T: Real,
    F: for<'t> FnOnce(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let x = tape.input(at.clone());
    let loss = build(&tape, x)?;
    let grads = tape.backward(loss)?;
    let value = loss.value().data()[0].as_f64();
    Ok((value, grads.wrt(x)))
}

/// Gradient of `build(x)` at `at`.
pub fn gradient<T, F>(at: &Tensor<T>, build: F) -> Result<Tensor<T>>
where
    T: Real,
    F: for<'t> FnOnce(&'t Tape<T>, Var<'t, T>) -> Result<Var<'t, T>>,
{
    value_and_gradient(at, build).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_diff::{central_difference, max_relative_error};
    use crate::rng::SeededRng;

    fn check<F>(at: Tensor<f64>, build: F)
    where
        F: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
    {
        let analytic = gradient(&at, &build).unwrap();
        let numeric = central_difference(&at, 1e-5, |x| {
            let tape = Tape::new();
            let v = tape.constant(x.clone());
            build(&tape, v).unwrap().value().data()[0]
        });
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let mut rng = SeededRng::new(1);
        let x: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let g = gradient(&x, |_, v| Ok(v.sum_sq().scale(0.5))).unwrap();
        assert!(g.max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let x = Tensor::<f64>::full(&[2, 2], 3.0);
        let g = gradient(&x, |tape, _| Ok(tape.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(g, Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let r = gradient(&x, |_, v| Ok(v.scale(2.0)));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_and_norm_ops() {
        let mut rng = SeededRng::new(2);
        let x: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        let w: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        check(x, move |tape, v| {
            let c = tape.constant(w.clone());
            Ok(v.mul(c)?.silu().sub(c)?.l2_norm())
        });
    }

    #[test]
    fn matmul_both_layouts() {
        let mut rng = SeededRng::new(3);
        let a: Tensor<f64> = rng.normal_tensor(&[5, 3]);
        let b: Tensor<f64> = rng.normal_tensor(&[3, 4]);
        let bt: Tensor<f64> = rng.normal_tensor(&[4, 3]);
        let (b1, bt1) = (b.clone(), bt.clone());
        check(a.clone(), move |tape, v| {
            Ok(v.matmul(tape.constant(b1.clone()))?.silu().sum())
        });
        check(a.clone(), move |tape, v| {
            Ok(v.matmul_t(tape.constant(bt1.clone()))?.sum_sq())
        });
        let a1 = a.clone();
        check(b, move |tape, v| Ok(tape.constant(a1.clone()).matmul(v)?.silu().sum()));
        check(bt, move |tape, v| Ok(tape.constant(a.clone()).matmul_t(v)?.sum_sq()));
    }

    #[test]
    fn conv_input_weight_bias() {
        let mut rng = SeededRng::new(4);
        let geom = ConvGeom {
            height: 5,
            width: 4,
            dilation: 2,
        };
        let x: Tensor<f64> = rng.normal_tensor(&[20, 2]);
        let w: Tensor<f64> = rng.normal_tensor(&[18, 3]);
        let b: Tensor<f64> = rng.normal_tensor(&[3]);
        let (w1, b1) = (w.clone(), b.clone());
        check(x.clone(), move |tape, v| {
            let out = v.conv3x3(tape.constant(w1.clone()), tape.constant(b1.clone()), geom)?;
            Ok(out.silu().sum_sq())
        });
        let (x1, b1) = (x.clone(), b.clone());
        check(w.clone(), move |tape, v| {
            let out = tape.constant(x1.clone()).conv3x3(v, tape.constant(b1.clone()), geom)?;
            Ok(out.silu().sum_sq())
        });
        check(b, move |tape, v| {
            let out = tape.constant(x.clone()).conv3x3(tape.constant(w.clone()), v, geom)?;
            Ok(out.silu().sum_sq())
        });
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = SeededRng::new(8);
        let geom = ConvGeom {
            height: 4,
            width: 6,
            dilation: 1,
        };
        let x: Tensor<f64> = rng.normal_tensor(&[24, 2]);
        let w: Tensor<f64> = rng.normal_tensor(&[18, 3]);
        let b: Tensor<f64> = rng.normal_tensor(&[3]);
        let tape = Tape::new();
        let out = tape
            .constant(x.clone())
            .conv3x3(tape.constant(w.clone()), tape.constant(b.clone()), geom)
            .unwrap()
            .value();
        for y in 0..4i64 {
            for xx in 0..6i64 {
                for co in 0..3 {
                    let mut s = b.data()[co];
                    for ky in 0..3i64 {
                        for kx in 0..3i64 {
                            let (sy, sx) = (y + ky - 1, xx + kx - 1);
                            if !(0..4).contains(&sy) || !(0..6).contains(&sx) {
                                continue;
                            }
                            for ci in 0..2 {
                                let xi = ((sy * 6 + sx) * 2) as usize + ci;
                                let wi = (((ky * 3 + kx) * 2) as usize + ci) * 3 + co;
                                s += x.data()[xi] * w.data()[wi];
                            }
                        }
                    }
                    let got = out.data()[((y * 6 + xx) * 3) as usize + co];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_layer_norm_and_row_ops() {
        let mut rng = SeededRng::new(5);
        let x: Tensor<f64> = rng.normal_tensor(&[6, 4]);
        let g: Tensor<f64> = rng.normal_tensor(&[4]);
        let target: Tensor<f64> = rng.normal_tensor(&[6, 4]);
        check(x, move |tape, v| {
            let y = v
                .layer_norm_rows()?
                .mul_row(tape.constant(g.clone()))?
                .add_row(tape.constant(g.clone()))?
                .softmax_rows()?;
            Ok(y.sub(tape.constant(target.clone()))?.l2_norm())
        });
    }

    #[test]
    fn pooling_pair_and_kl_terms() {
        let mut rng = SeededRng::new(6);
        let x: Tensor<f64> = rng.normal_tensor(&[8, 8, 2]);
        check(x, |_, v| {
            let p = v.avg_pool2()?;
            let pair = v.pair_correlation()?.add(p.pair_correlation()?)?;
            Ok(pair.add(v.gaussian_kl())?)
        });
    }

    #[test]
    fn untouched_input_has_zero_adjoint() {
        let tape = Tape::<f64>::new();
        let a = tape.input(Tensor::full(&[2], 1.0));
        let b = tape.input(Tensor::full(&[3], 2.0));
        let loss = a.sum_sq();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b), Tensor::zeros(&[3]));
        assert_eq!(grads.wrt(a).data(), &[2.0, 2.0]);
    }

    #[test]
    fn norm_gradient_at_origin_is_zero() {
        let x = Tensor::<f64>::zeros(&[3]);
        let g = gradient(&x, |_, v| Ok(v.l2_norm())).unwrap();
        assert_eq!(g, Tensor::zeros(&[3]));
    }

    #[test]
    fn replay_is_deterministic() {
        let mut rng = SeededRng::new(7);
        let x: Tensor<f32> = rng.normal_tensor(&[16, 4]);
        let run = || {
            gradient(&x, |_, v| Ok(v.layer_norm_rows()?.softmax_rows()?.silu().sum_sq())).unwrap()
        };
        assert!(run().bit_eq(&run()));
    }
}
