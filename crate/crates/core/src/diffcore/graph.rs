//! Tape of tensor-valued primitives with a reverse sweep.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse scan.

use super::{DiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LeafKind {
    Param,
    Constant,
    Computed,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    PowScalar(Var, f64),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    ClampMin(Var, f64),
    Mean(Var),
    Sum(Var),
    RowMean(Var),
    Reshape(Var),
    Conv2d { x: Var, kernel: Tensor },
    AvgPool2(Var),
    SoftmaxXent { logits: Var, targets: Vec<usize> },
    BceLogits { logits: Var, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    kind: LeafKind,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the root does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Tensor {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Row-major `c = a · b` (+ `c` if `accumulate`), with optional transposes.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    // a is logically m×k, b is k×n.
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths cover the strided extents computed above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    /// Trainable leaf. Non-finite values are rejected.
    pub fn param(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, LeafKind::Param)
    }

    /// Non-trainable leaf. Non-finite values are rejected.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.leaf(value, LeafKind::Constant)
    }

    fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                what: "leaf value".into(),
            });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            kind,
            needs_grad: kind == LeafKind::Param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            kind: LeafKind::Computed,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x · w + b` for `x` of shape `[n, in]` (or `[in]`), `w` `[in, out]`, `b` `[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, DiffError> {
        let (xs, ws, bs) = (
            self.value(x).shape(),
            self.value(w).shape(),
            self.value(b).shape(),
        );
        let (rows, inner) = match xs {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "affine",
                    shape: xs.to_vec(),
                    reason: "input must be 1-D or 2-D".into(),
                })
            }
        };
        if ws.len() != 2 || ws[0] != inner {
            return Err(DiffError::ShapeMismatch {
                op: "affine",
                left: xs.to_vec(),
                right: ws.to_vec(),
            });
        }
        let out = ws[1];
        if bs != [out] {
            return Err(DiffError::ShapeMismatch {
                op: "affine(bias)",
                left: ws.to_vec(),
                right: bs.to_vec(),
            });
        }
        let out_shape = if xs.len() == 1 {
            vec![out]
        } else {
            vec![rows, out]
        };
        let mut data = Vec::with_capacity(rows * out);
        let bias = self.value(b).data();
        for _ in 0..rows {
            data.extend_from_slice(bias);
        }
        gemm(
            rows,
            inner,
            out,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut data,
            true,
        );
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Affine { x, w, b }, &[x, w, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.pow_scalar(x, 2.0)
    }

    pub fn pow_scalar(&mut self, x: Var, p: f64) -> Var {
        self.unary(x, |v| v.powf(p), Op::PowScalar(x, p))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        self.unary(x, |v| v.max(lo), Op::ClampMin(x, lo))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean over all trailing axes: `[n, ...] -> [n]`.
    pub fn row_mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let Some(&rows) = t.shape().first() else {
            return Err(DiffError::InvalidShape {
                op: "row_mean",
                shape: vec![],
                reason: "scalar input".into(),
            });
        };
        let width = t.len() / rows.max(1);
        let data = t
            .data()
            .chunks(width.max(1))
            .map(|c| c.iter().sum::<f64>() / width as f64)
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(value, Op::RowMean(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Valid (unpadded) 2-D correlation of each `[h, w]` slice of `x: [n, h, w]`
    /// with a constant `[kh, kw]` kernel.
    pub fn fixed_conv2d(&mut self, x: Var, kernel: &Tensor) -> Result<Var, DiffError> {
        let xs = self.value(x).shape();
        let ks = kernel.shape();
        let ([n, h, w], [kh, kw]) = (xs, ks) else {
            return Err(DiffError::ShapeMismatch {
                op: "fixed_conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        };
        let (n, h, w, kh, kw) = (*n, *h, *w, *kh, *kw);
        if kh > h || kw > w {
            return Err(DiffError::ShapeMismatch {
                op: "fixed_conv2d",
                left: xs.to_vec(),
                right: ks.to_vec(),
            });
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let src = self.value(x).data();
        let k = kernel.data();
        let mut out = vec![0.0; n * oh * ow];
        for img in 0..n {
            let base = img * h * w;
            let obase = img * oh * ow;
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for a in 0..kh {
                        let row = base + (i + a) * w + j;
                        for b in 0..kw {
                            acc += src[row + b] * k[a * kw + b];
                        }
                    }
                    out[obase + i * ow + j] = acc;
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                kernel: kernel.clone(),
            },
            &[x],
        ))
    }

    /// 2×2 average pooling with stride 2 over `[n, h, w]`, `h` and `w` even.
    pub fn avgpool2(&mut self, x: Var) -> Result<Var, DiffError> {
        let xs = self.value(x).shape();
        let [n, h, w] = *xs else {
            return Err(DiffError::InvalidShape {
                op: "avgpool2",
                shape: xs.to_vec(),
                reason: "expected [n, h, w]".into(),
            });
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(DiffError::InvalidShape {
                op: "avgpool2",
                shape: xs.to_vec(),
                reason: "spatial sides must be even".into(),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow];
        for img in 0..n {
            for i in 0..oh {
                for j in 0..ow {
                    let p = img * h * w + 2 * i * w + 2 * j;
                    out[img * oh * ow + i * ow + j] =
                        0.25 * (src[p] + src[p + 1] + src[p + w] + src[p + w + 1]);
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(x), &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [n, c]` (or `[c]`) against class indices.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var, DiffError> {
        let ls = self.value(logits).shape();
        let (rows, classes) = match ls {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => {
                return Err(DiffError::InvalidShape {
                    op: "softmax_xent",
                    shape: ls.to_vec(),
                    reason: "logits must be 1-D or 2-D".into(),
                })
            }
        };
        if targets.len() != rows || targets.iter().any(|&t| t >= classes) {
            return Err(DiffError::InvalidShape {
                op: "softmax_xent",
                shape: ls.to_vec(),
                reason: format!(
                    "{} targets for {rows} rows of {classes} classes",
                    targets.len()
                ),
            });
        }
        let data = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let value = Tensor::scalar(total / rows as f64);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets`, computed stably.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var, DiffError> {
        same_shape("bce_with_logits", self.value(logits), targets)?;
        let l = self.value(logits).data();
        let total: f64 = l
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / l.len() as f64);
        Ok(self.push(
            value,
            Op::BceLogits {
                logits,
                targets: targets.clone(),
            },
            &[logits],
        ))
    }

    /// Mean absolute elementwise difference; the subgradient at zero is zero.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let d = self.sub(a, b)?;
        let d = self.abs(d);
        Ok(self.mean(d))
    }

    /// Sign pattern of every input to a non-differentiable point (ReLU, abs, clamp).
    ///
    /// Two evaluations with equal patterns lie on the same smooth piece, which is
    /// what finite-difference checks need to know.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let (x, at) = match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => (x, 0.0),
                Op::ClampMin(x, lo) => (x, lo),
                _ => continue,
            };
            out.extend(self.value(x).data().iter().map(|&v| v > at));
        }
        out
    }

    /// Smallest distance from any kink-op input to its kink.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let (x, at) = match node.op {
                Op::Relu(x) | Op::LeakyRelu(x, _) | Op::Abs(x) => (x, 0.0),
                Op::ClampMin(x, lo) => (x, lo),
                _ => continue,
            };
            for &v in self.value(x).data() {
                margin = margin.min((v - at).abs());
            }
        }
        margin
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(DiffError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        if !root_value.is_finite() {
            return Err(DiffError::NonFinite {
                what: "backward root".into(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
        }

        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let g = if node.kind == LeafKind::Param {
                grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .map(|d| Tensor::new(node.value.shape().to_vec(), d).expect("gradient shape"))
            } else {
                None
            };
            out.push(g);
        }
        Ok(Gradients { grads: out, shapes })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        contrib: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        let slot = &mut grads[target.0];
        let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[target.0].value.len()]);
        contrib(buf);
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        g: &[f64],
        local: impl Fn(usize) -> f64,
    ) {
        self.accumulate(grads, target, |buf| {
            for (i, (b, &gi)) in buf.iter_mut().zip(g).enumerate() {
                *b += gi * local(i);
            }
        });
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (inner, outer) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / inner;
                self.accumulate(grads, *x, |buf| {
                    gemm(rows, outer, inner, g, false, wv.data(), true, buf, true);
                });
                self.accumulate(grads, *w, |buf| {
                    gemm(inner, rows, outer, xv.data(), true, g, false, buf, true);
                });
                self.accumulate(grads, *b, |buf| {
                    for row in g.chunks(outer) {
                        for (bb, gg) in buf.iter_mut().zip(row) {
                            *bb += gg;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.elementwise(grads, *a, g, |_| 1.0);
                self.elementwise(grads, *b, g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                self.elementwise(grads, *a, g, |_| 1.0);
                self.elementwise(grads, *b, g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, g, |i| bv[i]);
                self.elementwise(grads, *b, g, |i| av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.elementwise(grads, *a, g, |i| 1.0 / bv[i]);
                self.elementwise(grads, *b, g, |i| -av[i] / (bv[i] * bv[i]));
            }
            Op::Scale(x, c) => self.elementwise(grads, *x, g, |_| *c),
            Op::AddScalar(x) | Op::Reshape(x) => self.elementwise(grads, *x, g, |_| 1.0),
            Op::PowScalar(x, p) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i| p * xv[i].powf(p - 1.0));
            }
            Op::Tanh(x) => {
                let o = out.data();
                self.elementwise(grads, *x, g, |i| 1.0 - o[i] * o[i]);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i| if xv[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i| if xv[i] > 0.0 { 1.0 } else { *slope });
            }
            Op::Sigmoid(x) => {
                let o = out.data();
                self.elementwise(grads, *x, g, |i| o[i] * (1.0 - o[i]));
            }
            Op::Exp(x) => {
                let o = out.data();
                self.elementwise(grads, *x, g, |i| o[i]);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i| sign(xv[i]));
            }
            Op::ClampMin(x, lo) => {
                let xv = self.value(*x).data();
                self.elementwise(grads, *x, g, |i| if xv[i] > *lo { 1.0 } else { 0.0 });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.elementwise(grads, *x, &vec![g[0]; self.value(*x).len()], |_| 1.0 / n);
            }
            Op::Sum(x) => {
                self.elementwise(grads, *x, &vec![g[0]; self.value(*x).len()], |_| 1.0);
            }
            Op::RowMean(x) => {
                let len = self.value(*x).len();
                let rows = g.len();
                let width = len / rows.max(1);
                self.accumulate(grads, *x, |buf| {
                    for (r, chunk) in buf.chunks_mut(width.max(1)).enumerate() {
                        let v = g[r] / width as f64;
                        chunk.iter_mut().for_each(|b| *b += v);
                    }
                });
            }
            Op::Conv2d { x, kernel } => {
                let xs = self.value(*x).shape();
                let (n, h, w) = (xs[0], xs[1], xs[2]);
                let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
                let (oh, ow) = (h - kh + 1, w - kw + 1);
                let k = kernel.data();
                self.accumulate(grads, *x, |buf| {
                    for img in 0..n {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = g[img * oh * ow + i * ow + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for a in 0..kh {
                                    let row = img * h * w + (i + a) * w + j;
                                    for b in 0..kw {
                                        buf[row + b] += gv * k[a * kw + b];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(x) => {
                let xs = self.value(*x).shape();
                let (n, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / 2, w / 2);
                self.accumulate(grads, *x, |buf| {
                    for img in 0..n {
                        for i in 0..oh {
                            for j in 0..ow {
                                let gv = 0.25 * g[img * oh * ow + i * ow + j];
                                let p = img * h * w + 2 * i * w + 2 * j;
                                buf[p] += gv;
                                buf[p + 1] += gv;
                                buf[p + w] += gv;
                                buf[p + w + 1] += gv;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxXent { logits, targets } => {
                let lv = self.value(*logits).data();
                let rows = targets.len();
                let classes = lv.len() / rows;
                let scale = g[0] / rows as f64;
                self.accumulate(grads, *logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &lv[r * classes..(r + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                        for c in 0..classes {
                            let p = (row[c] - max).exp() / z;
                            let y = if c == t { 1.0 } else { 0.0 };
                            buf[r * classes + c] += scale * (p - y);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let scale = g[0] / lv.len() as f64;
                let t = targets.data();
                self.accumulate(grads, *logits, |buf| {
                    for i in 0..lv.len() {
                        buf[i] += scale * (sigmoid(lv[i]) - t[i]);
                    }
                });
            }
        }
    }
}
