//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during a forward pass; calling
//! [`Var::backward`] on a scalar root propagates adjoints through the
//! recorded nodes in reverse order, visiting each node exactly once.
//!
//! A [`Var`] is a tensor handle that may or may not be tracked. Operations
//! on untracked inputs skip recording entirely, so the same model code
//! serves both training and inference. A tape is confined to one thread;
//! `Tensor` values can cross threads freely.

use super::tensor::{self, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

struct TapeInner {
    nodes: Vec<Node>,
    strict_finite: bool,
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone)]
enum Input {
    Node(usize),
    Const(Tensor),
}

impl Input {
    fn value<'a>(&'a self, nodes: &'a [Node]) -> &'a Tensor {
        match self {
            Input::Node(i) => &nodes[*i].value,
            Input::Const(t) => t,
        }
    }
    fn node(&self) -> Option<usize> {
        match self {
            Input::Node(i) => Some(*i),
            Input::Const(_) => None,
        }
    }
}

enum Op {
    Leaf,
    Add(Input, Input),
    Sub(Input, Input),
    Mul(Input, Input),
    Div(Input, Input),
    Neg(Input),
    Scale(Input, f64),
    AddScalar(Input),
    Matmul(Input, Input),
    Bmm(Input, Input),
    Relu(Input),
    Abs(Input),
    Exp(Input),
    Log(Input),
    Sqrt(Input),
    Sin(Input),
    Cos(Input),
    Sigmoid(Input),
    Tanh(Input),
    SumAll(Input),
    MeanAll(Input),
    SumAxis(Input, usize),
    MeanAxis(Input, usize),
    Softmax(Input),
    LogSoftmax(Input),
    Concat(Vec<Input>, usize),
    Slice(Input, Vec<(usize, usize)>),
    Reshape(Input),
    Permute(Input, Vec<usize>),
    GatherRows(Input, Rc<Vec<usize>>),
    L2Norm(Input),
    Cosine(Input, Input),
    CosineRows(Input, Input),
    KnnAttention {
        q: Input,
        k: Input,
        v: Input,
        idx: Rc<Vec<usize>>,
        scale: f64,
        weights: Tensor,
    },
    AaToMat(Input),
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                strict_finite: false,
            })),
        }
    }

    /// A tape that validates finiteness of every node output (test use).
    pub fn new_strict() -> Self {
        let t = Tape::new();
        t.inner.borrow_mut().strict_finite = true;
        t
    }

    /// Register a gradient-tracked leaf.
    pub fn leaf(&self, value: Tensor) -> Var {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value: value.clone(),
            op: Op::Leaf,
        });
        Var {
            tape: Some(self.clone()),
            node: Some(id),
            value,
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Tensor handle, optionally tracked on a tape.
#[derive(Clone)]
pub struct Var {
    tape: Option<Tape>,
    node: Option<usize>,
    value: Tensor,
}

impl Var {
    /// An untracked value (no gradient flows into it).
    pub fn constant(value: Tensor) -> Var {
        Var {
            tape: None,
            node: None,
            value,
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    fn input(&self) -> Input {
        match self.node {
            Some(i) => Input::Node(i),
            None => Input::Const(self.value.clone()),
        }
    }

    /// Gradients of a scalar root with respect to every tracked node.
    pub fn backward(&self) -> Result<Gradients> {
        if self.value.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.value.shape().to_vec(),
                reason: "root must be scalar".into(),
            });
        }
        let (tape, root) = match (&self.tape, self.node) {
            (Some(t), Some(n)) => (t, n),
            _ => return Ok(Gradients { grads: Vec::new() }),
        };
        let inner = tape.inner.borrow();
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root] = Some(Tensor::ones(self.value.shape()));
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes[id], &g, nodes, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Gradient buffers produced by [`Var::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient w.r.t. a tracked var; `None` for untracked vars and
    /// nodes the root does not depend on.
    pub fn wrt(&self, v: &Var) -> Option<Tensor> {
        v.node.and_then(|id| self.grads.get(id).cloned().flatten())
    }

    /// Gradient w.r.t. `v`, zeros when absent.
    pub fn wrt_or_zeros(&self, v: &Var) -> Tensor {
        self.wrt(v)
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, add: Tensor) {
    *slot = Some(match slot.take() {
        None => add,
        Some(prev) => {
            let data: Vec<f64> = prev
                .data()
                .iter()
                .zip(add.data().iter())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::from_raw(data, prev.shape().to_vec())
        }
    });
}

fn send(grads: &mut [Option<Tensor>], input: &Input, g: Tensor) {
    if let Some(id) = input.node() {
        accumulate(&mut grads[id], g);
    }
}

fn ew(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    tensor::binary_broadcast("backward", a, b, f).expect("backward broadcast")
}

fn backprop_node(
    node: &Node,
    g: &Tensor,
    nodes: &[Node],
    grads: &mut Vec<Option<Tensor>>,
) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let (sa, sb) = (a.value(nodes).shape().to_vec(), b.value(nodes).shape().to_vec());
            send(grads, a, tensor::reduce_to_shape(g, &sa));
            send(grads, b, tensor::reduce_to_shape(g, &sb));
        }
        Op::Sub(a, b) => {
            let (sa, sb) = (a.value(nodes).shape().to_vec(), b.value(nodes).shape().to_vec());
            send(grads, a, tensor::reduce_to_shape(g, &sa));
            let neg = tensor::unary(g, |x| -x);
            send(grads, b, tensor::reduce_to_shape(&neg, &sb));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (a.value(nodes), b.value(nodes));
            if a.node().is_some() {
                let da = ew(g, bv, |x, y| x * y);
                send(grads, a, tensor::reduce_to_shape(&da, av.shape()));
            }
            if b.node().is_some() {
                let db = ew(g, av, |x, y| x * y);
                send(grads, b, tensor::reduce_to_shape(&db, bv.shape()));
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (a.value(nodes), b.value(nodes));
            if a.node().is_some() {
                let da = ew(g, bv, |x, y| x / y);
                send(grads, a, tensor::reduce_to_shape(&da, av.shape()));
            }
            if b.node().is_some() {
                let gq = ew(g, out, |x, y| x * y); // g * (a/b)
                let db = ew(&gq, bv, |x, y| -x / y); // -g*a/b^2
                send(grads, b, tensor::reduce_to_shape(&db, bv.shape()));
            }
        }
        Op::Neg(a) => send(grads, a, tensor::unary(g, |x| -x)),
        Op::Scale(a, c) => {
            let c = *c;
            send(grads, a, tensor::unary(g, |x| x * c));
        }
        Op::AddScalar(a) => send(grads, a, g.clone()),
        Op::Matmul(a, b) => {
            let (av, bv) = (a.value(nodes), b.value(nodes));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if a.node().is_some() {
                // dA = g . B^T
                let mut da = vec![0.0; m * k];
                tensor::gemm_strided(m, n, k, 1.0, g.data(), n as isize, 1, bv.data(), 1, n as isize, 0.0, &mut da);
                send(grads, a, Tensor::from_raw(da, vec![m, k]));
            }
            if b.node().is_some() {
                // dB = A^T . g
                let mut db = vec![0.0; k * n];
                tensor::gemm_strided(k, m, n, 1.0, av.data(), 1, k as isize, g.data(), n as isize, 1, 0.0, &mut db);
                send(grads, b, Tensor::from_raw(db, vec![k, n]));
            }
        }
        Op::Bmm(a, b) => {
            backprop_bmm(a, b, g, nodes, grads);
        }
        Op::Relu(a) => {
            let av = a.value(nodes);
            send(grads, a, ew(g, av, |x, y| if y > 0.0 { x } else { 0.0 }));
        }
        Op::Abs(a) => {
            let av = a.value(nodes);
            send(grads, a, ew(g, av, |x, y| x * sign0(y)));
        }
        Op::Exp(a) => send(grads, a, ew(g, out, |x, y| x * y)),
        Op::Log(a) => {
            let av = a.value(nodes);
            send(grads, a, ew(g, av, |x, y| x / y));
        }
        Op::Sqrt(a) => send(grads, a, ew(g, out, |x, y| x / (2.0 * y))),
        Op::Sin(a) => {
            let av = a.value(nodes);
            send(grads, a, ew(g, av, |x, y| x * y.cos()));
        }
        Op::Cos(a) => {
            let av = a.value(nodes);
            send(grads, a, ew(g, av, |x, y| -x * y.sin()));
        }
        Op::Sigmoid(a) => send(grads, a, ew(g, out, |x, y| x * y * (1.0 - y))),
        Op::Tanh(a) => send(grads, a, ew(g, out, |x, y| x * (1.0 - y * y))),
        Op::SumAll(a) => {
            let shape = a.value(nodes).shape().to_vec();
            send(grads, a, Tensor::full(&shape, g.item()));
        }
        Op::MeanAll(a) => {
            let shape = a.value(nodes).shape().to_vec();
            let n: usize = shape.iter().product();
            send(grads, a, Tensor::full(&shape, g.item() / n as f64));
        }
        Op::SumAxis(a, axis) => {
            let shape = a.value(nodes).shape().to_vec();
            send(grads, a, tensor::unsum_axis(g, &shape, *axis));
        }
        Op::MeanAxis(a, axis) => {
            let shape = a.value(nodes).shape().to_vec();
            let mid = shape[*axis] as f64;
            let scaled = tensor::unary(g, |x| x / mid);
            send(grads, a, tensor::unsum_axis(&scaled, &shape, *axis));
        }
        Op::Softmax(a) => {
            // ds = y * (g - sum_last(g*y))
            let inner: usize = *out.shape().last().unwrap();
            let outer = out.numel() / inner;
            let mut da = vec![0.0; out.numel()];
            for o in 0..outer {
                let y = &out.data()[o * inner..(o + 1) * inner];
                let gr = &g.data()[o * inner..(o + 1) * inner];
                let dot: f64 = y.iter().zip(gr).map(|(yy, gg)| yy * gg).sum();
                for i in 0..inner {
                    da[o * inner + i] = y[i] * (gr[i] - dot);
                }
            }
            send(grads, a, Tensor::from_raw(da, out.shape().to_vec()));
        }
        Op::LogSoftmax(a) => {
            // ds = g - exp(y) * sum_last(g)
            let inner: usize = *out.shape().last().unwrap();
            let outer = out.numel() / inner;
            let mut da = vec![0.0; out.numel()];
            for o in 0..outer {
                let y = &out.data()[o * inner..(o + 1) * inner];
                let gr = &g.data()[o * inner..(o + 1) * inner];
                let gsum: f64 = gr.iter().sum();
                for i in 0..inner {
                    da[o * inner + i] = gr[i] - y[i].exp() * gsum;
                }
            }
            send(grads, a, Tensor::from_raw(da, out.shape().to_vec()));
        }
        Op::Concat(parts, axis) => {
            let mut start = 0usize;
            for p in parts {
                let pshape = p.value(nodes).shape().to_vec();
                let span = pshape[*axis];
                if p.node().is_some() {
                    let ranges: Vec<(usize, usize)> = g
                        .shape()
                        .iter()
                        .enumerate()
                        .map(|(d, &e)| if d == *axis { (start, start + span) } else { (0, e) })
                        .collect();
                    let piece = tensor::slice(g, &ranges).expect("concat backward slice");
                    send(grads, p, piece);
                }
                start += span;
            }
        }
        Op::Slice(a, ranges) => {
            let shape = a.value(nodes).shape().to_vec();
            send(grads, a, tensor::unslice(g, &shape, ranges));
        }
        Op::Reshape(a) => {
            let shape = a.value(nodes).shape().to_vec();
            send(grads, a, g.reshaped(&shape).expect("reshape backward"));
        }
        Op::Permute(a, perm) => {
            let inv = tensor::invert_perm(perm);
            send(grads, a, tensor::permute(g, &inv).expect("permute backward"));
        }
        Op::GatherRows(a, idx) => {
            let shape = a.value(nodes).shape().to_vec();
            send(grads, a, tensor::scatter_add_rows(g, idx, &shape));
        }
        Op::L2Norm(a) => {
            let av = a.value(nodes);
            let norm = out.item();
            let gs = g.item();
            let da = if norm > 0.0 {
                tensor::unary(av, |x| gs * x / norm)
            } else {
                Tensor::zeros(av.shape())
            };
            send(grads, a, da);
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (a.value(nodes), b.value(nodes));
            let gs = g.item();
            let cosv = out.item();
            let na = l2(av.data());
            let nb = l2(bv.data());
            let denom = (na * nb).max(COS_EPS);
            if a.node().is_some() {
                let na2 = (na * na).max(COS_EPS);
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| gs * (y / denom - cosv * x / na2))
                    .collect();
                send(grads, a, Tensor::from_raw(da, av.shape().to_vec()));
            }
            if b.node().is_some() {
                let nb2 = (nb * nb).max(COS_EPS);
                let db: Vec<f64> = bv
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(y, x)| gs * (x / denom - cosv * y / nb2))
                    .collect();
                send(grads, b, Tensor::from_raw(db, bv.shape().to_vec()));
            }
        }
        Op::CosineRows(a, b) => {
            let (av, bv) = (a.value(nodes), b.value(nodes));
            let n = av.shape()[0];
            let d: usize = av.numel() / n;
            let mut da = vec![0.0; av.numel()];
            let mut db = vec![0.0; bv.numel()];
            for r in 0..n {
                let x = &av.data()[r * d..(r + 1) * d];
                let y = &bv.data()[r * d..(r + 1) * d];
                let gs = g.data()[r];
                let cosv = out.data()[r];
                let na = l2(x);
                let nb = l2(y);
                let denom = (na * nb).max(COS_EPS);
                let na2 = (na * na).max(COS_EPS);
                let nb2 = (nb * nb).max(COS_EPS);
                for i in 0..d {
                    da[r * d + i] = gs * (y[i] / denom - cosv * x[i] / na2);
                    db[r * d + i] = gs * (x[i] / denom - cosv * y[i] / nb2);
                }
            }
            if a.node().is_some() {
                send(grads, a, Tensor::from_raw(da, av.shape().to_vec()));
            }
            if b.node().is_some() {
                send(grads, b, Tensor::from_raw(db, bv.shape().to_vec()));
            }
        }
        Op::KnnAttention {
            q,
            k,
            v,
            idx,
            scale,
            weights,
        } => {
            let (qv, kv, vv) = (q.value(nodes), k.value(nodes), v.value(nodes));
            let n = qv.shape()[0];
            let d = qv.shape()[1];
            let kk = weights.shape()[1];
            let mut dq = vec![0.0; qv.numel()];
            let mut dk = vec![0.0; kv.numel()];
            let mut dv = vec![0.0; vv.numel()];
            let mut dw = vec![0.0; kk];
            for i in 0..n {
                let gi = &g.data()[i * d..(i + 1) * d];
                let qi = &qv.data()[i * d..(i + 1) * d];
                let wrow = &weights.data()[i * kk..(i + 1) * kk];
                // dw_j = g . v_j ; dv_j += w_j * g
                for j in 0..kk {
                    let src = idx[i * kk + j];
                    let vj = &vv.data()[src * d..(src + 1) * d];
                    let mut dot = 0.0;
                    for c in 0..d {
                        dot += gi[c] * vj[c];
                        dv[src * d + c] += wrow[j] * gi[c];
                    }
                    dw[j] = dot;
                }
                // softmax backward
                let wdot: f64 = wrow.iter().zip(dw.iter()).map(|(w, x)| w * x).sum();
                for j in 0..kk {
                    let ds = wrow[j] * (dw[j] - wdot) * scale;
                    let src = idx[i * kk + j];
                    let kj = &kv.data()[src * d..(src + 1) * d];
                    for c in 0..d {
                        dq[i * d + c] += ds * kj[c];
                        dk[src * d + c] += ds * qi[c];
                    }
                }
            }
            if q.node().is_some() {
                send(grads, q, Tensor::from_raw(dq, qv.shape().to_vec()));
            }
            if k.node().is_some() {
                send(grads, k, Tensor::from_raw(dk, kv.shape().to_vec()));
            }
            if v.node().is_some() {
                send(grads, v, Tensor::from_raw(dv, vv.shape().to_vec()));
            }
        }
        Op::AaToMat(a) => {
            let av = a.value(nodes);
            let batch = av.shape()[0];
            let mut da = vec![0.0; batch * 3];
            for bi in 0..batch {
                let v = &av.data()[bi * 3..bi * 3 + 3];
                let r = &out.data()[bi * 9..bi * 9 + 9];
                let gr = &g.data()[bi * 9..bi * 9 + 9];
                let dv = aa_to_mat_backward(v, r, gr);
                da[bi * 3..bi * 3 + 3].copy_from_slice(&dv);
            }
            send(grads, a, Tensor::from_raw(da, av.shape().to_vec()));
        }
    }
    Ok(())
}

fn backprop_bmm(a: &Input, b: &Input, g: &Tensor, nodes: &[Node], grads: &mut [Option<Tensor>]) {
    let (av, bv) = (a.value(nodes), b.value(nodes));
    let a3 = av.rank() == 3;
    let b3 = bv.rank() == 3;
    let (m, k) = if a3 {
        (av.shape()[1], av.shape()[2])
    } else {
        (av.shape()[0], av.shape()[1])
    };
    let n = if b3 { bv.shape()[2] } else { bv.shape()[1] };
    let batch = if g.rank() == 3 { g.shape()[0] } else { 1 };
    if a.node().is_some() {
        let mut da = vec![0.0; av.numel()];
        for i in 0..batch {
            let go = i * m * n;
            let bo = if b3 { i * k * n } else { 0 };
            let ao = if a3 { i * m * k } else { 0 };
            // dA_i (+)= g_i . B_i^T
            tensor::gemm_strided(
                m,
                n,
                k,
                1.0,
                &g.data()[go..],
                n as isize,
                1,
                &bv.data()[bo..],
                1,
                n as isize,
                if a3 { 0.0 } else { 1.0 },
                &mut da[ao..ao + m * k],
            );
        }
        send(grads, a, Tensor::from_raw(da, av.shape().to_vec()));
    }
    if b.node().is_some() {
        let mut db = vec![0.0; bv.numel()];
        for i in 0..batch {
            let go = i * m * n;
            let ao = if a3 { i * m * k } else { 0 };
            let bo = if b3 { i * k * n } else { 0 };
            // dB_i (+)= A_i^T . g_i
            tensor::gemm_strided(
                k,
                m,
                n,
                1.0,
                &av.data()[ao..],
                1,
                k as isize,
                &g.data()[go..],
                n as isize,
                1,
                if b3 { 0.0 } else { 1.0 },
                &mut db[bo..bo + k * n],
            );
        }
        send(grads, b, Tensor::from_raw(db, bv.shape().to_vec()));
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

const COS_EPS: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Rodrigues rotation and its adjoint
// ---------------------------------------------------------------------------

const AA_TAYLOR_EPS: f64 = 1e-8;

/// Rotation matrix (row-major 9) from an axis-angle 3-vector.
pub(crate) fn aa_to_mat_forward(v: &[f64]) -> [f64; 9] {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let theta = theta2.sqrt();
    if theta < AA_TAYLOR_EPS {
        // R = I + [v]x + 0.5 [v]x^2
        let (x, y, z) = (v[0], v[1], v[2]);
        return [
            1.0 + 0.5 * (x * x - theta2),
            -z + 0.5 * x * y,
            y + 0.5 * x * z,
            z + 0.5 * x * y,
            1.0 + 0.5 * (y * y - theta2),
            -x + 0.5 * y * z,
            -y + 0.5 * x * z,
            x + 0.5 * y * z,
            1.0 + 0.5 * (z * z - theta2),
        ];
    }
    let (s, c) = (theta.sin(), theta.cos());
    let a = s / theta;
    let b = (1.0 - c) / theta2;
    let (x, y, z) = (v[0], v[1], v[2]);
    [
        1.0 + b * (x * x - theta2),
        -a * z + b * x * y,
        a * y + b * x * z,
        a * z + b * x * y,
        1.0 + b * (y * y - theta2),
        -a * x + b * y * z,
        -a * y + b * x * z,
        a * x + b * y * z,
        1.0 + b * (z * z - theta2),
    ]
}

/// Adjoint of `aa_to_mat_forward`: dL/dv given dL/dR and the forward value R.
fn aa_to_mat_backward(v: &[f64], r: &[f64], gr: &[f64]) -> [f64; 3] {
    let theta2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let mut dv = [0.0; 3];
    if theta2.sqrt() < AA_TAYLOR_EPS {
        // dR/dv_i of the Taylor form: [e_i]x + 0.5 (e_i v^T + v e_i^T - 2 v_i I)
        for i in 0..3 {
            let mut dr = [0.0; 9];
            let mut e = [0.0; 3];
            e[i] = 1.0;
            add_skew(&mut dr, &e, 1.0);
            for m in 0..3 {
                dr[i * 3 + m] += 0.5 * v[m];
                dr[m * 3 + i] += 0.5 * v[m];
                dr[m * 3 + m] -= v[i];
            }
            dv[i] = dr.iter().zip(gr).map(|(d, g)| d * g).sum();
        }
        return dv;
    }
    // Gallego & Yezzi: dR/dv_i = (v_i [v]x + [ v x ((I - R) e_i) ]x) / theta^2 . R
    for i in 0..3 {
        // w = (I - R) e_i  (column i of I - R)
        let w = [
            (if i == 0 { 1.0 } else { 0.0 }) - r[i],
            (if i == 1 { 1.0 } else { 0.0 }) - r[3 + i],
            (if i == 2 { 1.0 } else { 0.0 }) - r[6 + i],
        ];
        let cx = [
            v[1] * w[2] - v[2] * w[1],
            v[2] * w[0] - v[0] * w[2],
            v[0] * w[1] - v[1] * w[0],
        ];
        // m = (v_i [v]x + [cx]x) / theta^2
        let mut mm = [0.0; 9];
        add_skew(&mut mm, v, v[i] / theta2);
        add_skew(&mut mm, &cx, 1.0 / theta2);
        // dR_i = m . R
        let mut dr = [0.0; 9];
        for rrow in 0..3 {
            for rcol in 0..3 {
                let mut acc = 0.0;
                for t in 0..3 {
                    acc += mm[rrow * 3 + t] * r[t * 3 + rcol];
                }
                dr[rrow * 3 + rcol] = acc;
            }
        }
        dv[i] = dr.iter().zip(gr).map(|(d, g)| d * g).sum();
    }
    dv
}

/// Accumulate `scale * [v]x` into a row-major 3x3 buffer.
fn add_skew(m: &mut [f64; 9], v: &[f64], scale: f64) {
    m[1] -= v[2] * scale;
    m[2] += v[1] * scale;
    m[3] += v[2] * scale;
    m[5] -= v[0] * scale;
    m[6] -= v[1] * scale;
    m[7] += v[0] * scale;
}

// ---------------------------------------------------------------------------
// Op builders
// ---------------------------------------------------------------------------

fn merge_tape(inputs: &[&Var]) -> Result<Option<Tape>> {
    let mut found: Option<Tape> = None;
    for v in inputs {
        if let Some(t) = &v.tape {
            match &found {
                None => found = Some(t.clone()),
                Some(f) => {
                    if !f.same_tape(t) {
                        return Err(Error::InvalidArgument(
                            "operands belong to different tapes".into(),
                        ));
                    }
                }
            }
        }
    }
    Ok(found)
}

fn record(inputs: &[&Var], value: Tensor, op: impl FnOnce() -> Op) -> Result<Var> {
    let tracked = inputs.iter().any(|v| v.node.is_some());
    if !tracked {
        return Ok(Var::constant(value));
    }
    let tape = merge_tape(inputs)?.expect("tracked input implies tape");
    {
        let inner = tape.inner.borrow();
        if inner.strict_finite && !value.is_finite() {
            return Err(Error::NonFinite("op output".into()));
        }
    }
    let mut inner = tape.inner.borrow_mut();
    let id = inner.nodes.len();
    inner.nodes.push(Node {
        value: value.clone(),
        op: op(),
    });
    Ok(Var {
        tape: Some(tape.clone()),
        node: Some(id),
        value,
    })
}

macro_rules! binary_ops {
    ($($name:ident => $opvariant:ident, $f:expr;)*) => {
        impl Var {
            $(
                pub fn $name(&self, other: &Var) -> Result<Var> {
                    let value = tensor::binary_broadcast(stringify!($name), &self.value, &other.value, $f)?;
                    let (a, b) = (self.input(), other.input());
                    record(&[self, other], value, move || Op::$opvariant(a, b))
                }
            )*
        }
    };
}

binary_ops! {
    add => Add, |x, y| x + y;
    sub => Sub, |x, y| x - y;
    mul => Mul, |x, y| x * y;
    div => Div, |x, y| x / y;
}

macro_rules! unary_ops {
    ($($name:ident => $opvariant:ident, $f:expr;)*) => {
        impl Var {
            $(
                pub fn $name(&self) -> Result<Var> {
                    let value = tensor::unary(&self.value, $f);
                    let a = self.input();
                    record(&[self], value, move || Op::$opvariant(a))
                }
            )*
        }
    };
}

unary_ops! {
    neg => Neg, |x: f64| -x;
    relu => Relu, |x: f64| x.max(0.0);
    abs => Abs, |x: f64| x.abs();
    exp => Exp, |x: f64| x.exp();
    log => Log, |x: f64| x.ln();
    sqrt => Sqrt, |x: f64| x.sqrt();
    sin => Sin, |x: f64| x.sin();
    cos => Cos, |x: f64| x.cos();
    sigmoid => Sigmoid, |x: f64| 1.0 / (1.0 + (-x).exp());
    tanh => Tanh, |x: f64| x.tanh();
}

impl Var {
    pub fn scale(&self, c: f64) -> Result<Var> {
        let value = tensor::unary(&self.value, |x| x * c);
        let a = self.input();
        record(&[self], value, move || Op::Scale(a, c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var> {
        let value = tensor::unary(&self.value, |x| x + c);
        let a = self.input();
        record(&[self], value, move || Op::AddScalar(a))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let value = tensor::matmul(&self.value, &other.value)?;
        let (a, b) = (self.input(), other.input());
        record(&[self, other], value, move || Op::Matmul(a, b))
    }

    pub fn bmm(&self, other: &Var) -> Result<Var> {
        let value = tensor::bmm(&self.value, &other.value)?;
        let (a, b) = (self.input(), other.input());
        record(&[self, other], value, move || Op::Bmm(a, b))
    }

    pub fn sum_all(&self) -> Result<Var> {
        let value = Tensor::scalar(self.value.data().iter().sum());
        let a = self.input();
        record(&[self], value, move || Op::SumAll(a))
    }

    pub fn mean_all(&self) -> Result<Var> {
        if self.value.numel() == 0 {
            return Err(Error::InvalidShape {
                op: "mean_all",
                shape: self.value.shape().to_vec(),
                reason: "empty tensor".into(),
            });
        }
        let n = self.value.numel() as f64;
        let value = Tensor::scalar(self.value.data().iter().sum::<f64>() / n);
        let a = self.input();
        record(&[self], value, move || Op::MeanAll(a))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let value = tensor::sum_axis(&self.value, axis)?;
        let a = self.input();
        record(&[self], value, move || Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let sum = tensor::sum_axis(&self.value, axis)?;
        let mid = self.value.shape()[axis] as f64;
        let value = tensor::unary(&sum, |x| x / mid);
        let a = self.input();
        record(&[self], value, move || Op::MeanAxis(a, axis))
    }

    pub fn softmax(&self) -> Result<Var> {
        let value = tensor::softmax(&self.value)?;
        let a = self.input();
        record(&[self], value, move || Op::Softmax(a))
    }

    pub fn log_softmax(&self) -> Result<Var> {
        let value = tensor::log_softmax(&self.value)?;
        let a = self.input();
        record(&[self], value, move || Op::LogSoftmax(a))
    }

    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &p.value).collect();
        let value = tensor::concat(&tensors, axis)?;
        let inputs: Vec<Input> = parts.iter().map(|p| p.input()).collect();
        record(parts, value, move || Op::Concat(inputs, axis))
    }

    pub fn slice(&self, ranges: &[(usize, usize)]) -> Result<Var> {
        let value = tensor::slice(&self.value, ranges)?;
        let a = self.input();
        let r = ranges.to_vec();
        record(&[self], value, move || Op::Slice(a, r))
    }

    /// Rows `[start, end)` of a rank>=1 tensor.
    pub fn rows(&self, start: usize, end: usize) -> Result<Var> {
        let mut ranges: Vec<(usize, usize)> =
            self.value.shape().iter().map(|&e| (0, e)).collect();
        if ranges.is_empty() {
            return Err(Error::InvalidShape {
                op: "rows",
                shape: vec![],
                reason: "rank 0".into(),
            });
        }
        ranges[0] = (start, end);
        self.slice(&ranges)
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn cols(&self, start: usize, end: usize) -> Result<Var> {
        if self.value.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "cols",
                shape: self.value.shape().to_vec(),
                reason: "rank must be 2".into(),
            });
        }
        self.slice(&[(0, self.value.shape()[0]), (start, end)])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value.reshaped(shape)?;
        let a = self.input();
        record(&[self], value, move || Op::Reshape(a))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let value = tensor::permute(&self.value, perm)?;
        let a = self.input();
        let p = perm.to_vec();
        record(&[self], value, move || Op::Permute(a, p))
    }

    /// 2-D transpose.
    pub fn transpose(&self) -> Result<Var> {
        self.permute(&[1, 0])
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(&self.value, idx)?;
        let a = self.input();
        let ix = Rc::new(idx.to_vec());
        record(&[self], value, move || Op::GatherRows(a, ix))
    }

    /// Rows where `mask` is true (row-level masked select).
    pub fn masked_select_rows(&self, mask: &[bool]) -> Result<Var> {
        if mask.len() != self.value.shape().first().copied().unwrap_or(0) {
            return Err(Error::InvalidShape {
                op: "masked_select_rows",
                shape: self.value.shape().to_vec(),
                reason: format!("mask length {}", mask.len()),
            });
        }
        let idx: Vec<usize> = mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect();
        self.gather_rows(&idx)
    }

    /// Euclidean norm of all entries (scalar output).
    pub fn l2_norm(&self) -> Result<Var> {
        let value = Tensor::scalar(l2(self.value.data()));
        let a = self.input();
        record(&[self], value, move || Op::L2Norm(a))
    }

    /// Cosine similarity of two equal-shape tensors, flattened (scalar output).
    pub fn cosine(&self, other: &Var) -> Result<Var> {
        if self.value.shape() != other.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "cosine",
                lhs: self.value.shape().to_vec(),
                rhs: other.value.shape().to_vec(),
            });
        }
        let na = l2(self.value.data());
        let nb = l2(other.value.data());
        let dot: f64 = self
            .value
            .data()
            .iter()
            .zip(other.value.data())
            .map(|(x, y)| x * y)
            .sum();
        let value = Tensor::scalar(dot / (na * nb).max(COS_EPS));
        let (a, b) = (self.input(), other.input());
        record(&[self, other], value, move || Op::Cosine(a, b))
    }

    /// Row-wise cosine similarity of two (n, d) tensors -> (n,).
    pub fn cosine_rows(&self, other: &Var) -> Result<Var> {
        if self.value.shape() != other.value.shape() || self.value.rank() < 2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_rows",
                lhs: self.value.shape().to_vec(),
                rhs: other.value.shape().to_vec(),
            });
        }
        let n = self.value.shape()[0];
        let d = self.value.numel() / n;
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            let x = &self.value.data()[r * d..(r + 1) * d];
            let y = &other.value.data()[r * d..(r + 1) * d];
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            out.push(dot / (l2(x) * l2(y)).max(COS_EPS));
        }
        let value = Tensor::from_raw(out, vec![n]);
        let (a, b) = (self.input(), other.input());
        record(&[self, other], value, move || Op::CosineRows(a, b))
    }

    /// Scaled dot-product attention over precomputed k-NN neighborhoods.
    ///
    /// `self` is the query matrix (n, d); `keys`/`values` are (m, d); `idx`
    /// holds n*k row indices into keys/values. Scores are `scale * q.k`.
    pub fn knn_attention(&self, keys: &Var, values: &Var, idx: &[usize], k: usize) -> Result<Var> {
        let qs = self.value.shape();
        let ks = keys.value.shape();
        let vs = values.value.shape();
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks != vs {
            return Err(Error::ShapeMismatch {
                op: "knn_attention",
                lhs: qs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        let n = qs[0];
        let d = qs[1];
        if idx.len() != n * k {
            return Err(Error::InvalidArgument(format!(
                "knn_attention index length {} != n*k = {}",
                idx.len(),
                n * k
            )));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut weights = vec![0.0; n * k];
        let mut out = vec![0.0; n * d];
        let qd = self.value.data();
        let kd = keys.value.data();
        let vd = values.value.data();
        let mut scores = vec![0.0; k];
        for i in 0..n {
            let qi = &qd[i * d..(i + 1) * d];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..k {
                let src = idx[i * k + j];
                if src >= ks[0] {
                    return Err(Error::InvalidArgument(format!(
                        "knn_attention index {src} out of range 0..{}",
                        ks[0]
                    )));
                }
                let kj = &kd[src * d..(src + 1) * d];
                let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                scores[j] = s;
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for j in 0..k {
                let e = (scores[j] - mx).exp();
                weights[i * k + j] = e;
                z += e;
            }
            for j in 0..k {
                weights[i * k + j] /= z;
                let w = weights[i * k + j];
                let src = idx[i * k + j];
                let vj = &vd[src * d..(src + 1) * d];
                for c in 0..d {
                    out[i * d + c] += w * vj[c];
                }
            }
        }
        let value = Tensor::from_raw(out, vec![n, d]);
        let weights = Tensor::from_raw(weights, vec![n, k]);
        let (q, kk_, v) = (self.input(), keys.input(), values.input());
        let ix = Rc::new(idx.to_vec());
        record(&[self, keys, values], value, move || Op::KnnAttention {
            q,
            k: kk_,
            v,
            idx: ix,
            scale,
            weights,
        })
    }

    /// Batched axis-angle (B, 3) -> rotation matrices (B, 3, 3) via Rodrigues.
    pub fn aa_to_mat(&self) -> Result<Var> {
        let s = self.value.shape();
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::InvalidShape {
                op: "aa_to_mat",
                shape: s.to_vec(),
                reason: "expected (B, 3)".into(),
            });
        }
        let batch = s[0];
        let mut out = vec![0.0; batch * 9];
        for b in 0..batch {
            let r = aa_to_mat_forward(&self.value.data()[b * 3..b * 3 + 3]);
            out[b * 9..b * 9 + 9].copy_from_slice(&r);
        }
        let value = Tensor::from_raw(out, vec![batch, 3, 3]);
        let a = self.input();
        record(&[self], value, move || Op::AaToMat(a))
    }
}
