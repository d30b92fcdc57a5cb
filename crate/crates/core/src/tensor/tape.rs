use super::conv::ConvGeometry;
use super::{numel, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    /// Position of the producing entry on its tape.
    pub fn id(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
    /// Right operand repeats along the leading (batch) axis of the left.
    RightBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// Names of every differentiable op, as accepted by
/// [`Tape::corrupt_backward`].
pub const OP_NAMES: [&str; 18] = [
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "div_scalar",
    "matmul",
    "conv2d",
    "channel_bias",
    "relu",
    "sigmoid",
    "clamp01",
    "sum",
    "mse",
    "reshape",
    "upsample2x",
    "expand_channels",
];

enum Op<S> {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    AddScalar(Var),
    MulScalar(Var, S),
    DivScalar(Var, S),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeometry,
        cols: Vec<S>,
    },
    ChannelBias(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp01(Var),
    Sum(Var),
    Mse(Var, Var),
    Reshape(Var),
    Upsample2x(Var),
    ExpandChannels(Var),
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::AddScalar(_) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::DivScalar(..) => "div_scalar",
            Op::Matmul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias(..) => "channel_bias",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Clamp01(_) => "clamp01",
            Op::Sum(_) => "sum",
            Op::Mse(..) => "mse",
            Op::Reshape(_) => "reshape",
            Op::Upsample2x(_) => "upsample2x",
            Op::ExpandChannels(_) => "expand_channels",
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    tracked: bool,
    op: Op<S>,
}

fn slot<'a, S: Scalar>(
    pass: &'a mut [Option<Vec<S>>],
    nodes: &[Node<S>],
    v: Var,
) -> &'a mut Vec<S> {
    let n = nodes[v.0].value.numel();
    pass[v.0].get_or_insert_with(|| vec![S::zero(); n])
}

/// Logistic function, evaluated without overflow for either sign.
pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Records operations on tensors and differentiates them in reverse.
///
/// Entries are appended in evaluation order, so every operand of an entry
/// precedes it. Values are never mutated after being recorded.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    fault: Option<&'static str>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales the backward rule of the named op by 1.5. Only used to check
    /// that gradient verification catches a broken rule.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str) {
        self.fault = Some(op);
    }

    /// Records a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient; `None` for untracked values or before any
    /// backward pass reached them.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes.get(v.0).and_then(|n| n.grad.as_ref())
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Drops every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, tracked: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<(), TensorError> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(
        &mut self,
        x: Var,
        op: impl FnOnce(Var) -> Op<S>,
        f: impl Fn(S) -> S,
    ) -> Result<Var, TensorError> {
        self.check(x)?;
        let value = self.nodes[x.0].value.map(f);
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, tracked, op(x)))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bcast = if sa == sb {
            Broadcast::Same
        } else if numel(sb) == 1 && sb.is_empty() {
            Broadcast::RightScalar
        } else if numel(sa) == 1 && sa.is_empty() {
            Broadcast::LeftScalar
        } else if !sa.is_empty()
            && (sb == &sa[1..] || (sb.len() == sa.len() && sb[0] == 1 && sb[1..] == sa[1..]))
        {
            Broadcast::RightBatch
        } else {
            return Err(TensorError::ShapeMismatch {
                op: match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let out_shape = if bcast == Broadcast::LeftScalar {
            sb.to_vec()
        } else {
            sa.to_vec()
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let inner = vb.len();
        let f = |x: S, y: S| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let data: Vec<S> = match bcast {
            Broadcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::RightScalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Broadcast::LeftScalar => vb.iter().map(|&y| f(va[0], y)).collect(),
            Broadcast::RightBatch => va
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % inner]))
                .collect(),
        };
        let value = Tensor::new(out_shape, data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, tracked, Op::Binary { kind, a, b, bcast }))
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        self.unary(x, Op::AddScalar, |v| v + c)
    }

    /// `x * c` for a constant `c`.
    pub fn mul_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        self.unary(x, |x| Op::MulScalar(x, c), |v| v * c)
    }

    /// `x / c` for a constant `c`.
    pub fn div_scalar(&mut self, x: Var, c: S) -> Result<Var, TensorError> {
        self.unary(x, |x| Op::DivScalar(x, c), |v| v / c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Relu, |v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Sigmoid, sigmoid)
    }

    /// `min(1, max(0, x))`.
    pub fn clamp01(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Clamp01, |v| v.max(S::zero()).min(S::one()))
    }

    /// `[r, k] x [k, c] -> [r, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[r, k], &[k2, c]) = (sa, sb) else {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let mut out = vec![S::zero(); r * c];
        S::gemm(
            r,
            k,
            c,
            S::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            c,
            1,
            S::zero(),
            &mut out,
            c,
            1,
        );
        let value = Tensor::new(vec![r, c], out)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, tracked, Op::Matmul(a, b)))
    }

    /// Cross-correlation of `[B, C, H, W]` with `[O, C, kh, kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        self.check(input)?;
        self.check(kernel)?;
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let cols = geom.im2col(self.value(input).data());
        let (o, p, n) = (geom.out_channels, geom.patch_len(), geom.positions());
        let mut tmp = vec![S::zero(); o * n];
        S::gemm(
            o,
            p,
            n,
            S::one(),
            self.value(kernel).data(),
            p,
            1,
            &cols,
            n,
            1,
            S::zero(),
            &mut tmp,
            n,
            1,
        );
        let ohw = geom.out_h * geom.out_w;
        let mut out = vec![S::zero(); o * n];
        for b in 0..geom.batch {
            for ch in 0..o {
                let dst = (b * o + ch) * ohw;
                let src = ch * n + b * ohw;
                out[dst..dst + ohw].copy_from_slice(&tmp[src..src + ohw]);
            }
        }
        let value = Tensor::new(geom.output_shape().to_vec(), out)?;
        let tracked = self.tracked_any(&[input, kernel]);
        let cols = if self.nodes[kernel.0].tracked {
            cols
        } else {
            Vec::new()
        };
        Ok(self.push(
            value,
            tracked,
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            },
        ))
    }

    /// Adds `bias[c]` to every element of channel `c` of a `[B, C, ...]`
    /// tensor.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        self.check(bias)?;
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || sb != [sx[1]] {
            return Err(TensorError::ShapeMismatch {
                op: "channel_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let channels = sx[1];
        let plane = numel(&sx[2..]);
        let vb = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[(i / plane) % channels])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        let tracked = self.tracked_any(&[x, bias]);
        Ok(self.push(value, tracked, Op::ChannelBias(x, bias)))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let total = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(Tensor::scalar(total), tracked, Op::Sum(x)))
    }

    /// Mean squared difference, as a rank-0 tensor.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        self.check(pred)?;
        self.check(target)?;
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                left: sp.to_vec(),
                right: st.to_vec(),
            });
        }
        let (vp, vt) = (self.value(pred).data(), self.value(target).data());
        let n = S::of(vp.len() as f64);
        let total: S = vp.iter().zip(vt).map(|(&p, &t)| (p - t) * (p - t)).sum();
        let tracked = self.tracked_any(&[pred, target]);
        Ok(self.push(Tensor::scalar(total / n), tracked, Op::Mse(pred, target)))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        self.check(x)?;
        let value = self.value(x).clone().reshaped(shape)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, tracked, Op::Reshape(x)))
    }

    /// Nearest-neighbour 2x up-sampling of `[B, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var, TensorError> {
        self.check(x)?;
        let &[b, c, h, w] = self.shape(x) else {
            return Err(TensorError::Rank {
                op: "upsample2x",
                expected: 4,
                shape: self.shape(x).to_vec(),
            });
        };
        let src = self.value(x).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![S::zero(); b * c * h2 * w2];
        for plane in 0..b * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    d[y * w2 + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h2, w2], out)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, tracked, Op::Upsample2x(x)))
    }

    /// Repeats a `[B, 1, ...]` tensor along the channel axis.
    pub fn expand_channels(&mut self, x: Var, channels: usize) -> Result<Var, TensorError> {
        self.check(x)?;
        let sx = self.shape(x);
        if sx.len() < 2 || sx[1] != 1 || channels == 0 {
            return Err(TensorError::Invalid(format!(
                "expand_channels: expected [B, 1, ...] and positive channel count, got {sx:?} -> {channels}"
            )));
        }
        let plane = numel(&sx[2..]);
        let mut shape = sx.to_vec();
        shape[1] = channels;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * channels);
        for row in src.chunks(plane.max(1)) {
            for _ in 0..channels {
                out.extend_from_slice(row);
            }
        }
        let value = Tensor::new(shape, out)?;
        let tracked = self.tracked_any(&[x]);
        Ok(self.push(value, tracked, Op::ExpandChannels(x)))
    }

    /// Propagates d(loss)/d(value) to every tracked entry reachable from
    /// `loss`, adding into gradients left by earlier passes.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        self.check(loss)?;
        let shape = self.shape(loss);
        if !shape.is_empty() {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut pass: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        pass[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = pass[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let scale = if self.fault == Some(node.op.name()) {
                S::of(1.5)
            } else {
                S::one()
            };
            self.propagate(id, &g, scale, &mut pass);
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => {
                    for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                        *a += *v;
                    }
                }
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], scale: S, pass: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].tracked;
        let value = |v: Var| nodes[v.0].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bcast } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (value(a), value(b));
                let inner = vb.len();
                let idx = |i: usize| -> (usize, usize) {
                    match bcast {
                        Broadcast::Same => (i, i),
                        Broadcast::RightScalar => (i, 0),
                        Broadcast::LeftScalar => (0, i),
                        Broadcast::RightBatch => (i, i % inner),
                    }
                };
                if wants(a) {
                    let ga = slot(pass, nodes, a);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = idx(i);
                        let d = match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * vb[ib],
                            Binary::Div => gi / vb[ib],
                        };
                        ga[ia] += d * scale;
                    }
                }
                if wants(b) {
                    let gb = slot(pass, nodes, b);
                    for (i, &gi) in g.iter().enumerate() {
                        let (ia, ib) = idx(i);
                        let d = match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * va[ia],
                            Binary::Div => -gi * va[ia] / (vb[ib] * vb[ib]),
                        };
                        gb[ib] += d * scale;
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    for (a, &gi) in slot(pass, nodes, *x).iter_mut().zip(g) {
                        *a += gi * scale;
                    }
                }
            }
            Op::MulScalar(x, c) => {
                if wants(*x) {
                    for (a, &gi) in slot(pass, nodes, *x).iter_mut().zip(g) {
                        *a += gi * *c * scale;
                    }
                }
            }
            Op::DivScalar(x, c) => {
                if wants(*x) {
                    for (a, &gi) in slot(pass, nodes, *x).iter_mut().zip(g) {
                        *a += gi / *c * scale;
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let vx = value(*x);
                    for ((a, &gi), &xi) in slot(pass, nodes, *x).iter_mut().zip(g).zip(vx) {
                        if xi > S::zero() {
                            *a += gi * scale;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = nodes[id].value.data();
                    for ((a, &gi), &yi) in slot(pass, nodes, *x).iter_mut().zip(g).zip(y) {
                        *a += gi * yi * (S::one() - yi) * scale;
                    }
                }
            }
            Op::Clamp01(x) => {
                if wants(*x) {
                    let vx = value(*x);
                    for ((a, &gi), &xi) in slot(pass, nodes, *x).iter_mut().zip(g).zip(vx) {
                        if xi > S::zero() && xi < S::one() {
                            *a += gi * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    for a in slot(pass, nodes, *x).iter_mut() {
                        *a += g[0] * scale;
                    }
                }
            }
            Op::Mse(p, t) => {
                let (vp, vt) = (value(*p), value(*t));
                let k = S::of(2.0) * g[0] / S::of(vp.len() as f64) * scale;
                if wants(*p) {
                    for ((a, &pi), &ti) in slot(pass, nodes, *p).iter_mut().zip(vp).zip(vt) {
                        *a += k * (pi - ti);
                    }
                }
                if wants(*t) {
                    for ((a, &pi), &ti) in slot(pass, nodes, *t).iter_mut().zip(vp).zip(vt) {
                        *a -= k * (pi - ti);
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    // dA += G * B^T
                    S::gemm(
                        r,
                        c,
                        k,
                        scale,
                        g,
                        c,
                        1,
                        value(b),
                        1,
                        c,
                        S::one(),
                        slot(pass, nodes, a),
                        k,
                        1,
                    );
                }
                if wants(b) {
                    // dB += A^T * G
                    S::gemm(
                        k,
                        r,
                        c,
                        scale,
                        value(a),
                        1,
                        k,
                        g,
                        c,
                        1,
                        S::one(),
                        slot(pass, nodes, b),
                        c,
                        1,
                    );
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
                cols,
            } => {
                let (o, p, n) = (geom.out_channels, geom.patch_len(), geom.positions());
                let ohw = geom.out_h * geom.out_w;
                let mut gp = vec![S::zero(); o * n];
                for b in 0..geom.batch {
                    for ch in 0..o {
                        let src = (b * o + ch) * ohw;
                        let dst = ch * n + b * ohw;
                        gp[dst..dst + ohw].copy_from_slice(&g[src..src + ohw]);
                    }
                }
                if wants(*kernel) {
                    // dK += Gp * cols^T
                    S::gemm(
                        o,
                        n,
                        p,
                        scale,
                        &gp,
                        n,
                        1,
                        cols,
                        1,
                        n,
                        S::one(),
                        slot(pass, nodes, *kernel),
                        p,
                        1,
                    );
                }
                if wants(*input) {
                    let mut dcols = vec![S::zero(); p * n];
                    S::gemm(
                        p,
                        o,
                        n,
                        scale,
                        value(*kernel),
                        1,
                        p,
                        &gp,
                        n,
                        1,
                        S::zero(),
                        &mut dcols,
                        n,
                        1,
                    );
                    geom.col2im(&dcols, slot(pass, nodes, *input));
                }
            }
            Op::ChannelBias(x, bias) => {
                let sx = nodes[x.0].value.shape();
                let channels = sx[1];
                let plane = numel(&sx[2..]);
                if wants(*x) {
                    for (a, &gi) in slot(pass, nodes, *x).iter_mut().zip(g) {
                        *a += gi * scale;
                    }
                }
                if wants(*bias) {
                    let gb = slot(pass, nodes, *bias);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[(i / plane) % channels] += gi * scale;
                    }
                }
            }
            Op::Upsample2x(x) => {
                if wants(*x) {
                    let sx = nodes[x.0].value.shape();
                    let (h, w) = (sx[2], sx[3]);
                    let (h2, w2) = (2 * h, 2 * w);
                    let gx = slot(pass, nodes, *x);
                    for plane in 0..sx[0] * sx[1] {
                        let src = &g[plane * h2 * w2..(plane + 1) * h2 * w2];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                dst[(y / 2) * w + xx / 2] += src[y * w2 + xx] * scale;
                            }
                        }
                    }
                }
            }
            Op::ExpandChannels(x) => {
                if wants(*x) {
                    let channels = nodes[id].value.shape()[1];
                    let plane = numel(&nodes[x.0].value.shape()[2..]);
                    let gx = slot(pass, nodes, *x);
                    for (i, &gi) in g.iter().enumerate() {
                        let b = i / (plane * channels);
                        gx[b * plane + i % plane] += gi * scale;
                    }
                }
            }
        }
    }
}
