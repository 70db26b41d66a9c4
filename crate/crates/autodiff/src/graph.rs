//! Define-by-run computation graph and the reverse sweep.
//!
//! Every op appends one node holding its output value and enough saved
//! state to run its backward rule. Node indices are therefore already in
//! topological order, and [`Graph::backward`] walks them in reverse,
//! visiting each reachable node exactly once.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::conv;
use crate::error::TensorError;
use crate::gemm::{gemm, Trans};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable op defined outside this crate.
///
/// `backward` returns one gradient per input, each shaped like that input.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, TensorError>;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    AbsMean(Var),
    Reshape(Var),
    SliceChannels { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Var },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// One forward pass worth of recorded ops. Rebuilt every iteration.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shaped like its node"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shaped like its node"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: self.op_name(&op).to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    fn op_name<'a>(&self, op: &'a Op) -> &'a str {
        match op {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::Exp(..) => "exp",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Sigmoid(..) => "sigmoid",
            Op::MatMul(..) => "matmul",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "reduce_mean",
            Op::AbsMean(..) => "reduce_abs_mean",
            Op::Reshape(..) => "reshape",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Conv2d { .. } => "conv2d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Custom(c, _) => c.name(),
        }
    }

    fn val(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Trainable leaf; gradients are tracked for it.
    pub fn param(&self, t: Tensor) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, t: Tensor) -> Result<Var, TensorError> {
        self.push(t, Op::Leaf, false)
    }

    /// Borrowed view of a node's value.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_ref())
    }

    /// Owned copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.val(v).as_ref().clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> Result<f64, TensorError> {
        self.val(v).item()
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.val(a), self.val(b));
        same_shape("add", &x, &y)?;
        self.push(zip_map(&x, &y, |p, q| p + q), Op::Add(a, b), self.needs(&[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.val(a), self.val(b));
        same_shape("sub", &x, &y)?;
        self.push(zip_map(&x, &y, |p, q| p - q), Op::Sub(a, b), self.needs(&[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.val(a), self.val(b));
        same_shape("mul", &x, &y)?;
        self.push(zip_map(&x, &y, |p, q| p * q), Op::Mul(a, b), self.needs(&[a, b]))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.val(a), self.val(b));
        same_shape("div", &x, &y)?;
        self.push(zip_map(&x, &y, |p, q| p / q), Op::Div(a, b), self.needs(&[a, b]))
    }

    pub fn scale(&self, a: Var, s: f64) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(|v| v * s), Op::Scale(a, s), self.needs(&[a]))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(|v| v + s), Op::AddScalar(a), self.needs(&[a]))
    }

    pub fn square(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(|v| v * v), Op::Square(a), self.needs(&[a]))
    }

    pub fn exp(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(f64::exp), Op::Exp(a), self.needs(&[a]))
    }

    pub fn relu(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(|v| v.max(0.0)), Op::Relu(a), self.needs(&[a]))
    }

    pub fn softplus(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(softplus), Op::Softplus(a), self.needs(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        self.push(x.map(sigmoid), Op::Sigmoid(a), self.needs(&[a]))
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.val(a), self.val(b));
        let (m, k, n) = match (x.shape(), y.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: x.shape().to_vec(),
                    rhs: y.shape().to_vec(),
                })
            }
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, x.data(), Trans::No, y.data(), Trans::No, 0.0, &mut out);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), self.needs(&[a, b]))
    }

    pub fn sum(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        let s = x.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.needs(&[a]))
    }

    pub fn reduce_mean(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), self.needs(&[a]))
    }

    pub fn reduce_abs_mean(&self, a: Var) -> Result<Var, TensorError> {
        let x = self.val(a);
        let s = x.data().iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::AbsMean(a), self.needs(&[a]))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let x = self.val(a).reshape(shape)?;
        self.push(x, Op::Reshape(a), self.needs(&[a]))
    }

    /// Channels `start..start+len` of an `(N, C, H, W)` tensor.
    pub fn slice_channels(&self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let x = self.val(a);
        let [n, c, h, w] = x.dims4("slice_channels")?;
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_channels".into(),
                msg: format!("channels {start}..{} out of 0..{c}", start + len),
            });
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * len * hw);
        for s in 0..n {
            let base = (s * c + start) * hw;
            out.extend_from_slice(&x.data()[base..base + len * hw]);
        }
        self.push(
            Tensor::new(vec![n, len, h, w], out)?,
            Op::SliceChannels { x: a, start },
            self.needs(&[a]),
        )
    }

    /// Same-padded stride-1 cross-correlation; `w` is `(Cout, Cin, k, k)` with odd `k`.
    pub fn conv2d(&self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = conv::forward(&self.val(x), &self.val(w), &self.val(b))?;
        self.push(y, Op::Conv2d { x, w, b }, self.needs(&[x, w, b]))
    }

    /// Per-(sample, channel) plane normalization with biased variance.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let xv = self.val(x);
        let [n, c, h, w] = xv.dims4("instance_norm")?;
        let hw = h * w;
        if hw < 2 {
            return Err(TensorError::PlaneTooSmall(hw));
        }
        let (gv, bv) = (self.val(gamma), self.val(beta));
        for t in [&gv, &bv] {
            if t.shape() != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "instance_norm affine",
                    lhs: vec![c],
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; n * c];
        for p in 0..n * c {
            let ch = p % c;
            let plane = &xv.data()[p * hw..(p + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[p] = inv;
            let (g, b) = (gv.data()[ch], bv.data()[ch]);
            for i in 0..hw {
                let xh = (plane[i] - mean) * inv;
                xhat[p * hw + i] = xh;
                out[p * hw + i] = g * xh + b;
            }
        }
        let needs = self.needs(&[x, gamma, beta]);
        self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        )
    }

    pub fn custom(&self, op: Rc<dyn CustomOp>, inputs: &[Var]) -> Result<Var, TensorError> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|&v| self.val(v)).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let out = op.forward(&refs)?;
        self.push(out, Op::Custom(op, inputs.to_vec()), self.needs(inputs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let want = |v: &Var| nodes[v.0].requires_grad;
            let value = |v: &Var| nodes[v.0].value.as_ref();
            let out = node.value.as_ref();
            let mut pending: Vec<(Var, Vec<f64>)> = Vec::with_capacity(3);
            let mut emit = |v: Var, gv: Vec<f64>| pending.push((v, gv));

            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if want(a) {
                        emit(*a, g.clone());
                    }
                    if want(b) {
                        emit(*b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if want(a) {
                        emit(*a, g.clone());
                    }
                    if want(b) {
                        emit(*b, g.iter().map(|v| -v).collect());
                    }
                }
                Op::Mul(a, b) => {
                    let (x, y) = (value(a), value(b));
                    if want(a) {
                        emit(*a, g.iter().zip(y.data()).map(|(g, y)| g * y).collect());
                    }
                    if want(b) {
                        emit(*b, g.iter().zip(x.data()).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Div(a, b) => {
                    let y = value(b);
                    if want(a) {
                        emit(*a, g.iter().zip(y.data()).map(|(g, y)| g / y).collect());
                    }
                    if want(b) {
                        let gb = g
                            .iter()
                            .zip(out.data())
                            .zip(y.data())
                            .map(|((g, q), y)| -g * q / y)
                            .collect();
                        emit(*b, gb);
                    }
                }
                Op::Scale(a, s) => emit(*a, g.iter().map(|v| v * s).collect()),
                Op::AddScalar(a) => emit(*a, g),
                Op::Square(a) => {
                    let x = value(a);
                    emit(*a, g.iter().zip(x.data()).map(|(g, x)| 2.0 * g * x).collect());
                }
                Op::Exp(a) => {
                    emit(*a, g.iter().zip(out.data()).map(|(g, e)| g * e).collect());
                }
                Op::Relu(a) => {
                    let x = value(a);
                    let gx = g
                        .iter()
                        .zip(x.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    emit(*a, gx);
                }
                Op::Softplus(a) => {
                    let x = value(a);
                    emit(*a, g.iter().zip(x.data()).map(|(g, &x)| g * sigmoid(x)).collect());
                }
                Op::Sigmoid(a) => {
                    let gx = g
                        .iter()
                        .zip(out.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect();
                    emit(*a, gx);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (value(a), value(b));
                    let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                    if want(a) {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, &g, Trans::No, y.data(), Trans::Yes, 0.0, &mut ga);
                        emit(*a, ga);
                    }
                    if want(b) {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, x.data(), Trans::Yes, &g, Trans::No, 0.0, &mut gb);
                        emit(*b, gb);
                    }
                }
                Op::Sum(a) => emit(*a, vec![g[0]; value(a).len()]),
                Op::Mean(a) => {
                    let n = value(a).len();
                    emit(*a, vec![g[0] / n as f64; n]);
                }
                Op::AbsMean(a) => {
                    let x = value(a);
                    let scale = g[0] / x.len() as f64;
                    let gx = x
                        .data()
                        .iter()
                        .map(|&v| {
                            if v > 0.0 {
                                scale
                            } else if v < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    emit(*a, gx);
                }
                Op::Reshape(a) => emit(*a, g),
                Op::SliceChannels { x, start } => {
                    let xv = value(x);
                    let [n, c, h, w] = xv.dims4("slice_channels").expect("checked in forward");
                    let hw = h * w;
                    let len = out.shape()[1];
                    let mut gx = vec![0.0; xv.len()];
                    for s in 0..n {
                        let dst = (s * c + start) * hw;
                        let src = s * len * hw;
                        gx[dst..dst + len * hw].copy_from_slice(&g[src..src + len * hw]);
                    }
                    emit(*x, gx);
                }
                Op::Conv2d { x, w, b } => {
                    let cg = conv::backward(value(x), value(w), value(b), &g, [want(x), want(w), want(b)]);
                    if let Some(dx) = cg.dx {
                        emit(*x, dx);
                    }
                    if let Some(dw) = cg.dw {
                        emit(*w, dw);
                    }
                    if let Some(db) = cg.db {
                        emit(*b, db);
                    }
                }
                Op::InstanceNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let [n, c, h, w] = out.dims4("instance_norm").expect("checked in forward");
                    let hw = h * w;
                    let gam = value(gamma).data().to_vec();
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx = want(x).then(|| vec![0.0; n * c * hw]);
                    for p in 0..n * c {
                        let ch = p % c;
                        let gp = &g[p * hw..(p + 1) * hw];
                        let xh = &xhat[p * hw..(p + 1) * hw];
                        let sum_g: f64 = gp.iter().sum();
                        let sum_gx: f64 = gp.iter().zip(xh).map(|(a, b)| a * b).sum();
                        dgamma[ch] += sum_gx;
                        dbeta[ch] += sum_g;
                        if let Some(dx) = dx.as_mut() {
                            let scale = gam[ch] * inv_std[p] / hw as f64;
                            for i in 0..hw {
                                dx[p * hw + i] =
                                    scale * (hw as f64 * gp[i] - sum_g - xh[i] * sum_gx);
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        emit(*x, dx);
                    }
                    if want(gamma) {
                        emit(*gamma, dgamma);
                    }
                    if want(beta) {
                        emit(*beta, dbeta);
                    }
                }
                Op::Custom(op, inputs) => {
                    let refs: Vec<&Tensor> = inputs.iter().map(value).collect();
                    let gout = Tensor::new(out.shape().to_vec(), g).expect("grad shaped like output");
                    let gin = op.backward(&refs, out, &gout);
                    assert_eq!(gin.len(), inputs.len(), "{}: one gradient per input", op.name());
                    for (v, gv) in inputs.iter().zip(gin) {
                        if want(v) {
                            assert_eq!(gv.shape(), value(v).shape(), "{}: gradient shape", op.name());
                            emit(*v, gv.into_data());
                        }
                    }
                }
            }
            for (v, gv) in pending {
                accumulate(&mut grads[v.0], gv);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}
