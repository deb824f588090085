//! Tape-based reverse-mode automatic differentiation over `f64` tensors.
//!
//! A [`Tape`] records every tensor operation of a forward pass; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for each node that (transitively) depends on a trainable leaf. The op set
//! is the minimum needed by the coupling network and the flow: broadcasting
//! arithmetic, matrix products, a few pointwise nonlinearities, reductions,
//! shape surgery and fused softmax/layer-norm.
//!
//! All math is in 64-bit floats; reductions use ndarray's fixed iteration
//! order, so results are bit-reproducible for identical inputs.

use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn};
use std::cell::RefCell;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Isru(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice {
        input: Var,
        axis: usize,
        start: usize,
        end: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SoftmaxLast(Var),
    LayerNormLast {
        input: Var,
        inv_std: ArrayD<f64>,
    },
    /// Fused per-channel affine plus channel mixing on a `[B, T, N, 2]`
    /// window tensor, channels = (point group, coordinate).
    ChannelAffineMix {
        x: Var,
        scale: Var,
        bias: Var,
        w: Var,
        groups: usize,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `v`. Zero array if the
    /// node has no influence on the root.
    pub fn get(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.grads[v.0].take()
    }

    pub fn take_id(&mut self, id: usize) -> Option<ArrayD<f64>> {
        self.grads[id].take()
    }
}

pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_to(x: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if x.shape() == shape {
        x.clone()
    } else {
        x.broadcast(IxDyn(shape))
            .expect("broadcast_to: invalid shape")
            .to_owned()
    }
}

/// Elementwise combine with two-sided broadcasting, allocating only the
/// output array.
fn zip_broadcast(
    va: &ArrayD<f64>,
    vb: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    if va.shape() == vb.shape() {
        let mut out = ArrayD::<f64>::zeros(va.raw_dim());
        ndarray::Zip::from(&mut out)
            .and(va)
            .and(vb)
            .for_each(|o, &a, &b| *o = f(a, b));
        out
    } else {
        let shape = broadcast_shape(va.shape(), vb.shape());
        let ba = va.broadcast(IxDyn(&shape)).expect("broadcast lhs");
        let bb = vb.broadcast(IxDyn(&shape)).expect("broadcast rhs");
        let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
        ndarray::Zip::from(&mut out)
            .and(&ba)
            .and(&bb)
            .for_each(|o, &a, &b| *o = f(a, b));
        out
    }
}

/// Sum `grad` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> ArrayD<f64> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        *val.iter().next().unwrap()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn push(&self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A constant input: no gradient is tracked for it.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf: gradients are accumulated for it.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            (
                zip_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| x + y),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            (
                zip_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| x - y),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            (
                zip_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| x * y),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            (
                zip_broadcast(&nodes[a.0].value, &nodes[b.0].value, |x, y| x / y),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(out, Op::Div(a, b), ng)
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| -x);
        self.push(out, Op::Neg(a), self.ng(a))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x + c);
        self.push(out, Op::AddScalar(a), self.ng(a))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x * c);
        self.push(out, Op::MulScalar(a, c), self.ng(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let va = nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let vb = nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        let out = va.dot(&vb).into_dyn();
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `[b,m,k] x [b,k,n] -> [b,m,n]`
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let nodes = self.nodes.borrow();
        let va = nodes[a.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm lhs must be 3-d");
        let vb = nodes[b.0]
            .value
            .view()
            .into_dimensionality::<Ix3>()
            .expect("bmm rhs must be 3-d");
        assert_eq!(va.shape()[0], vb.shape()[0], "bmm batch mismatch");
        let (bs, m, n) = (va.shape()[0], va.shape()[1], vb.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
        for i in 0..bs {
            let prod = va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let ng = nodes[a.0].needs_grad || nodes[b.0].needs_grad;
        drop(nodes);
        self.push(out.into_dyn(), Op::BatchMatMul(a, b), ng)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(f64::exp);
        self.push(out, Op::Exp(a), self.ng(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(f64::ln);
        self.push(out, Op::Ln(a), self.ng(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(f64::sqrt);
        self.push(out, Op::Sqrt(a), self.ng(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(|x| x * x);
        self.push(out, Op::Square(a), self.ng(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(f64::tanh);
        self.push(out, Op::Tanh(a), self.ng(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(stable_sigmoid);
        self.push(out, Op::Sigmoid(a), self.ng(a))
    }

    pub fn softplus(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0].value.mapv(stable_softplus);
        self.push(out, Op::Softplus(a), self.ng(a))
    }

    /// Inverse-square-root unit, `x / sqrt(1 + x^2)`: a smooth, bounded
    /// activation an order of magnitude cheaper than tanh.
    pub fn isru(&self, a: Var) -> Var {
        let out = self.nodes.borrow()[a.0]
            .value
            .mapv(|x| x / (1.0 + x * x).sqrt());
        self.push(out, Op::Isru(a), self.ng(a))
    }

    /// Sum of all elements, returned as a 0-d tensor.
    pub fn sum_all(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(out, Op::SumAll(a), self.ng(a))
    }

    /// Sum over one axis (axis is removed).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let out = self.nodes.borrow()[a.0].value.sum_axis(Axis(axis));
        self.push(out, Op::SumAxis(a, axis), self.ng(a))
    }

    /// Mean over one axis (axis is removed).
    pub fn mean_axis(&self, a: Var, axis: usize) -> Var {
        let out = self.nodes.borrow()[a.0]
            .value
            .mean_axis(Axis(axis))
            .expect("mean over empty axis");
        self.push(out, Op::MeanAxis(a, axis), self.ng(a))
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let nodes = self.nodes.borrow();
        let views: Vec<_> = parts.iter().map(|v| nodes[v.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = parts.iter().any(|v| nodes[v.0].needs_grad);
        drop(nodes);
        self.push(out, Op::Concat(parts.to_vec(), axis), ng)
    }

    /// `input[.., start..end, ..]` along `axis`, materialized.
    pub fn slice(&self, a: Var, axis: usize, start: usize, end: usize) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
                .to_owned()
        };
        self.push(
            out,
            Op::Slice {
                input: a,
                axis,
                start,
                end,
            },
            self.ng(a),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            assert_eq!(
                v.len(),
                shape.iter().product::<usize>(),
                "reshape element count mismatch"
            );
            v.as_standard_layout()
                .into_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape failed")
        };
        self.push(out, Op::Reshape(a), self.ng(a))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.0]
                .value
                .view()
                .permuted_axes(IxDyn(perm))
                .as_standard_layout()
                .into_owned()
        };
        self.push(out, Op::Permute(a, perm.to_vec()), self.ng(a))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self, a: Var) -> Var {
        let out = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let last = v.ndim() - 1;
            let mut out = v.to_owned();
            for mut row in out.lanes_mut(Axis(last)) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            out
        };
        self.push(out, Op::SoftmaxLast(a), self.ng(a))
    }

    /// Normalization over the last axis: `(x - mean) / sqrt(var + eps)`,
    /// without the affine part (compose with mul/add for gain and bias).
    pub fn layer_norm_last(&self, a: Var, eps: f64) -> Var {
        let (out, inv_std) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[a.0].value;
            let last = v.ndim() - 1;
            let d = v.shape()[last] as f64;
            let mut out = v.to_owned();
            let mut inv_shape = v.shape().to_vec();
            inv_shape[last] = 1;
            let mut inv_std = ArrayD::<f64>::zeros(IxDyn(&inv_shape));
            for (mut row, inv) in out.lanes_mut(Axis(last)).into_iter().zip(inv_std.iter_mut()) {
                let mean = row.sum() / d;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
                let is = 1.0 / (var + eps).sqrt();
                for x in row.iter_mut() {
                    *x = (*x - mean) * is;
                }
                *inv = is;
            }
            (out, inv_std)
        };
        self.push(
            out,
            Op::LayerNormLast { input: a, inv_std },
            self.ng(a),
        )
    }

    /// Fused `y = (x .* scale + bias) @ W` over the channel axis of a
    /// `[B, T, N, 2]` tensor, where channel `c = group(n) * 2 + coord` and
    /// points split into `groups` contiguous groups. One read and one write
    /// of the window tensor instead of a reshape/permute round trip.
    pub fn channel_affine_mix(&self, x: Var, scale: Var, bias: Var, w: Var, groups: usize) -> Var {
        let (out, ng) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let sv = &nodes[scale.0].value;
            let bv = &nodes[bias.0].value;
            let wv = &nodes[w.0].value;
            let shape = xv.shape().to_vec();
            assert_eq!(shape.len(), 4, "channel_affine_mix expects [B,T,N,2]");
            let c = 2 * groups;
            assert_eq!(sv.len(), c);
            assert_eq!(wv.shape(), [c, c]);
            let (bn, tn, nn) = (shape[0], shape[1], shape[2]);
            let j = nn / groups;
            let x_std = xv.as_standard_layout();
            let xs = x_std.as_slice().unwrap();
            let ss = sv.as_slice().unwrap();
            let bs = bv.as_slice().unwrap();
            let ws = wv.as_slice().unwrap();
            let mut out = ArrayD::<f64>::zeros(IxDyn(&shape));
            let os = out.as_slice_mut().unwrap();
            let mut row = vec![0.0f64; c];
            for bt in 0..bn * tn {
                let base = bt * nn * 2;
                for jj in 0..j {
                    for g in 0..groups {
                        let p = base + (g * j + jj) * 2;
                        row[g * 2] = xs[p] * ss[g * 2] + bs[g * 2];
                        row[g * 2 + 1] = xs[p + 1] * ss[g * 2 + 1] + bs[g * 2 + 1];
                    }
                    for cc in 0..c {
                        let mut acc = 0.0;
                        for (rc, r) in row.iter().enumerate() {
                            acc += r * ws[rc * c + cc];
                        }
                        let g = cc / 2;
                        os[base + (g * j + jj) * 2 + (cc & 1)] = acc;
                    }
                }
            }
            let ng = nodes[x.0].needs_grad
                || nodes[scale.0].needs_grad
                || nodes[bias.0].needs_grad
                || nodes[w.0].needs_grad;
            (out, ng)
        };
        self.push(
            out,
            Op::ChannelAffineMix {
                x,
                scale,
                bias,
                w,
                groups,
            },
            ng,
        )
    }

    /// Backpropagate from `root` (any shape; seeded with ones).
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::ones(IxDyn(nodes[root.0].value.shape())));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, delta: ArrayD<f64>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, reduce_to_shape(g.clone(), nodes[a.0].value.shape()));
                    acc(*b, reduce_to_shape(g, nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    acc(*a, reduce_to_shape(g.clone(), nodes[a.0].value.shape()));
                    acc(*b, reduce_to_shape(g.mapv(|x| -x), nodes[b.0].value.shape()));
                }
                Op::Mul(a, b) => {
                    let da = zip_broadcast(&g, &nodes[b.0].value, |g, b| g * b);
                    acc(*a, reduce_to_shape(da, nodes[a.0].value.shape()));
                    let db = zip_broadcast(&g, &nodes[a.0].value, |g, a| g * a);
                    acc(*b, reduce_to_shape(db, nodes[b.0].value.shape()));
                }
                Op::Div(a, b) => {
                    // da = g / b; db = -g * a / b^2 = -(g/b) * out
                    let da = zip_broadcast(&g, &nodes[b.0].value, |g, b| g / b);
                    let db = zip_broadcast(&da, &node.value, |da, y| -da * y);
                    acc(*a, reduce_to_shape(da, nodes[a.0].value.shape()));
                    acc(*b, reduce_to_shape(db, nodes[b.0].value.shape()));
                }
                Op::Neg(a) => acc(*a, g.mapv(|x| -x)),
                Op::AddScalar(a) => acc(*a, g),
                Op::MulScalar(a, c) => acc(*a, g.mapv(|x| x * c)),
                Op::MatMul(a, b) => {
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let va = nodes[a.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let vb = nodes[b.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    acc(*a, g2.dot(&vb.t()).into_dyn());
                    acc(*b, va.t().dot(&g2).into_dyn());
                }
                Op::BatchMatMul(a, b) => {
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let va = nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let vb = nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
                    let bs = va.shape()[0];
                    let mut da = ndarray::Array3::<f64>::zeros(va.raw_dim());
                    let mut db = ndarray::Array3::<f64>::zeros(vb.raw_dim());
                    for k in 0..bs {
                        let gk = g3.index_axis(Axis(0), k);
                        da.index_axis_mut(Axis(0), k)
                            .assign(&gk.dot(&vb.index_axis(Axis(0), k).t()));
                        db.index_axis_mut(Axis(0), k)
                            .assign(&va.index_axis(Axis(0), k).t().dot(&gk));
                    }
                    acc(*a, da.into_dyn());
                    acc(*b, db.into_dyn());
                }
                Op::Exp(_) => {
                    let a = match &node.op {
                        Op::Exp(a) => *a,
                        _ => unreachable!(),
                    };
                    acc(a, &g * &node.value);
                }
                Op::Ln(a) => acc(*a, &g / &nodes[a.0].value),
                Op::Sqrt(a) => {
                    let da = &g * &node.value.mapv(|y| 0.5 / y);
                    acc(*a, da);
                }
                Op::Square(a) => {
                    let da = &g * &nodes[a.0].value.mapv(|x| 2.0 * x);
                    acc(*a, da);
                }
                Op::Tanh(a) => {
                    let da = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(*a, da);
                }
                Op::Sigmoid(a) => {
                    let da = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(*a, da);
                }
                Op::Softplus(a) => {
                    let da = &g * &nodes[a.0].value.mapv(stable_sigmoid);
                    acc(*a, da);
                }
                Op::Isru(a) => {
                    // dy/dx = (1 - y^2)^(3/2)
                    let da = zip_broadcast(&g, &node.value, |g, y| {
                        let w = 1.0 - y * y;
                        g * w * w.sqrt()
                    });
                    acc(*a, da);
                }
                Op::SumAll(a) => {
                    let gs = *g.iter().next().unwrap();
                    acc(
                        *a,
                        ArrayD::from_elem(IxDyn(nodes[a.0].value.shape()), gs),
                    );
                }
                Op::SumAxis(a, axis) => {
                    let expanded = g.insert_axis(Axis(*axis));
                    acc(
                        *a,
                        broadcast_to(&expanded, nodes[a.0].value.shape()),
                    );
                }
                Op::MeanAxis(a, axis) => {
                    let n = nodes[a.0].value.shape()[*axis] as f64;
                    let expanded = g.insert_axis(Axis(*axis));
                    let da = broadcast_to(&expanded, nodes[a.0].value.shape()).mapv(|x| x / n);
                    acc(*a, da);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let w = nodes[p.0].value.shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + w))
                            .to_owned();
                        acc(*p, piece);
                        offset += w;
                    }
                }
                Op::Slice {
                    input,
                    axis,
                    start,
                    end,
                } => {
                    let mut da = ArrayD::<f64>::zeros(IxDyn(nodes[input.0].value.shape()));
                    da.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*end))
                        .assign(&g);
                    acc(*input, da);
                }
                Op::Reshape(a) => {
                    let da = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(nodes[a.0].value.shape()))
                        .unwrap();
                    acc(*a, da);
                }
                Op::Permute(a, perm) => {
                    let mut inv = vec![0usize; perm.len()];
                    for (to, &from) in perm.iter().enumerate() {
                        inv[from] = to;
                    }
                    let da = g
                        .view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .into_owned();
                    acc(*a, da);
                }
                Op::SoftmaxLast(a) => {
                    let y = &node.value;
                    let last = y.ndim() - 1;
                    let gy = zip_broadcast(&g, y, |g, y| g * y);
                    let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                    let centered = zip_broadcast(&g, &s, |g, s| g - s);
                    let da = zip_broadcast(&centered, y, |c, y| c * y);
                    acc(*a, da);
                }
                Op::ChannelAffineMix {
                    x,
                    scale,
                    bias,
                    w,
                    groups,
                } => {
                    // y_row = (x_row .* s + b) W
                    // dx_row = (g_row W^T) .* s
                    // dW += pre_row^T g_row, ds += sum x_row .* (g_row W^T),
                    // db += sum g_row W^T
                    let groups = *groups;
                    let xv = &nodes[x.0].value;
                    let sv = &nodes[scale.0].value;
                    let bv = &nodes[bias.0].value;
                    let wv = &nodes[w.0].value;
                    let shape = xv.shape();
                    let c = 2 * groups;
                    let (bn, tn, nn) = (shape[0], shape[1], shape[2]);
                    let j = nn / groups;
                    let x_std = xv.as_standard_layout();
                    let xs = x_std.as_slice().unwrap();
                    let ss = sv.as_slice().unwrap();
                    let bs = bv.as_slice().unwrap();
                    let ws = wv.as_slice().unwrap();
                    let gsl = g.as_standard_layout();
                    let gs = gsl.as_slice().unwrap();
                    let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                    let dxs = dx.as_slice_mut().unwrap();
                    let mut dscale = vec![0.0f64; c];
                    let mut dbias = vec![0.0f64; c];
                    let mut dw = vec![0.0f64; c * c];
                    let mut xrow = vec![0.0f64; c];
                    let mut grow = vec![0.0f64; c];
                    let mut gwt = vec![0.0f64; c];
                    for bt in 0..bn * tn {
                        let base = bt * nn * 2;
                        for jj in 0..j {
                            for gg in 0..groups {
                                let p = base + (gg * j + jj) * 2;
                                xrow[gg * 2] = xs[p];
                                xrow[gg * 2 + 1] = xs[p + 1];
                                grow[gg * 2] = gs[p];
                                grow[gg * 2 + 1] = gs[p + 1];
                            }
                            for rc in 0..c {
                                let mut acc = 0.0;
                                for cc in 0..c {
                                    acc += grow[cc] * ws[rc * c + cc];
                                }
                                gwt[rc] = acc;
                            }
                            for cc in 0..c {
                                let pre = xrow[cc] * ss[cc] + bs[cc];
                                let gg = cc / 2;
                                dxs[base + (gg * j + jj) * 2 + (cc & 1)] = gwt[cc] * ss[cc];
                                dscale[cc] += xrow[cc] * gwt[cc];
                                dbias[cc] += gwt[cc];
                                for oc in 0..c {
                                    dw[cc * c + oc] += pre * grow[oc];
                                }
                            }
                        }
                    }
                    acc(*x, dx);
                    acc(
                        *scale,
                        ArrayD::from_shape_vec(IxDyn(&[c]), dscale).unwrap(),
                    );
                    acc(*bias, ArrayD::from_shape_vec(IxDyn(&[c]), dbias).unwrap());
                    acc(*w, ArrayD::from_shape_vec(IxDyn(&[c, c]), dw).unwrap());
                }
                Op::LayerNormLast { input, inv_std } => {
                    let xhat = &node.value;
                    let last = xhat.ndim() - 1;
                    let d = xhat.shape()[last] as f64;
                    let mean_g = g.sum_axis(Axis(last)).insert_axis(Axis(last)).mapv(|x| x / d);
                    let gx = zip_broadcast(&g, xhat, |g, x| g * x);
                    let mean_gx = gx
                        .sum_axis(Axis(last))
                        .insert_axis(Axis(last))
                        .mapv(|x| x / d);
                    let mut da = zip_broadcast(&g, &mean_g, |g, m| g - m);
                    let correction = zip_broadcast(xhat, &mean_gx, |x, m| x * m);
                    ndarray::Zip::from(&mut da)
                        .and(&correction)
                        .for_each(|d, &c| *d -= c);
                    let da = zip_broadcast(&da, inv_std, |d, i| d * i);
                    acc(*input, da);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    /// Central finite difference of `f` w.r.t. each element of leaf values.
    fn finite_diff(
        values: &[ArrayD<f64>],
        f: &dyn Fn(&Tape, &[Var]) -> Var,
        eps: f64,
    ) -> Vec<ArrayD<f64>> {
        let mut grads = Vec::new();
        for (i, base) in values.iter().enumerate() {
            let mut g = ArrayD::zeros(base.raw_dim());
            for idx in 0..base.len() {
                let eval = |delta: f64| {
                    let t = Tape::new();
                    let vars: Vec<Var> = values
                        .iter()
                        .enumerate()
                        .map(|(j, v)| {
                            let mut v = v.clone();
                            if j == i {
                                v.as_slice_mut().unwrap()[idx] += delta;
                            }
                            t.leaf(v)
                        })
                        .collect();
                    t.scalar_value(f(&t, &vars))
                };
                g.as_slice_mut().unwrap()[idx] = (eval(eps) - eval(-eps)) / (2.0 * eps);
            }
            grads.push(g);
        }
        grads
    }

    fn check(values: Vec<ArrayD<f64>>, f: impl Fn(&Tape, &[Var]) -> Var + 'static, tol: f64) {
        let t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.leaf(v.clone())).collect();
        let out = f(&t, &vars);
        let grads = t.backward(out);
        let numeric = finite_diff(&values, &f, 1e-6);
        for (i, v) in vars.iter().enumerate() {
            let a = grads.get(*v, values[i].shape());
            for (x, y) in a.iter().zip(numeric[i].iter()) {
                assert!(
                    (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())),
                    "grad mismatch analytic={x} numeric={y}"
                );
            }
        }
    }

    fn randn(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = crate::util::rng_from(seed, "autodiff-test");
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn arithmetic_with_broadcast() {
        check(
            vec![randn(&[3, 4], 1), randn(&[4], 2)],
            |t, v| {
                let s = t.add(v[0], v[1]);
                let m = t.mul(s, v[0]);
                let d = t.div(m, t.add_scalar(t.square(v[1]), 2.0));
                t.sum_all(d)
            },
            1e-6,
        );
    }

    #[test]
    fn matmul_grads() {
        check(
            vec![randn(&[3, 5], 3), randn(&[5, 2], 4)],
            |t, v| {
                let p = t.matmul(v[0], v[1]);
                t.sum_all(t.square(p))
            },
            1e-5,
        );
    }

    #[test]
    fn bmm_grads() {
        check(
            vec![randn(&[2, 3, 4], 5), randn(&[2, 4, 2], 6)],
            |t, v| {
                let p = t.bmm(v[0], v[1]);
                t.sum_all(t.tanh(p))
            },
            1e-5,
        );
    }

    #[test]
    fn pointwise_grads() {
        check(
            vec![randn(&[2, 3], 7)],
            |t, v| {
                let a = t.softplus(v[0]);
                let b = t.sigmoid(t.tanh(v[0]));
                let c = t.exp(t.mul_scalar(v[0], 0.3));
                let d = t.ln(t.add_scalar(t.square(v[0]), 1.5));
                let e = t.isru(v[0]);
                let s = t.add(t.add(a, b), t.add(t.add(c, d), e));
                t.sum_all(t.sqrt(t.add_scalar(t.square(s), 0.1)))
            },
            1e-5,
        );
    }

    #[test]
    fn reductions_and_shape_ops() {
        check(
            vec![randn(&[2, 3, 4], 8)],
            |t, v| {
                let m = t.mean_axis(v[0], 1);
                let s = t.sum_axis(v[0], 2);
                let r = t.reshape(v[0], &[4, 6]);
                let p = t.permute(r, &[1, 0]);
                let sl = t.slice(p, 0, 1, 5);
                let total = t.add(t.sum_all(t.square(m)), t.sum_all(t.square(s)));
                t.add(total, t.sum_all(t.square(sl)))
            },
            1e-5,
        );
    }

    #[test]
    fn concat_grads() {
        check(
            vec![randn(&[2, 3], 9), randn(&[2, 2], 10)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1);
                t.sum_all(t.square(c))
            },
            1e-6,
        );
    }

    #[test]
    fn softmax_grads() {
        check(
            vec![randn(&[3, 4], 11)],
            |t, v| {
                let s = t.softmax_last(v[0]);
                let w = t.constant(randn(&[3, 4], 12));
                t.sum_all(t.mul(s, w))
            },
            1e-5,
        );
    }

    #[test]
    fn layer_norm_grads() {
        check(
            vec![randn(&[2, 5], 13)],
            |t, v| {
                let n = t.layer_norm_last(v[0], 1e-5);
                let w = t.constant(randn(&[2, 5], 14));
                t.sum_all(t.mul(n, w))
            },
            1e-4,
        );
    }

    #[test]
    fn channel_affine_mix_matches_composed_ops_and_gradients() {
        // Reference: reshape/permute to channel rows, affine, matmul, back.
        let (bn, tn, nn, groups) = (2usize, 4usize, 6usize, 3usize);
        let c = 2 * groups;
        let j = nn / groups;
        let x = randn(&[bn, tn, nn, 2], 20);
        let s = randn(&[c], 21).mapv(|v| v + 2.0);
        let b = randn(&[c], 22);
        let w = randn(&[c, c], 23);
        let reference = |t: &Tape, v: &[Var]| -> Var {
            let rows = t.reshape(v[0], &[bn, tn, groups, j, 2]);
            let rows = t.permute(rows, &[0, 1, 3, 2, 4]);
            let rows = t.reshape(rows, &[bn * tn * j, c]);
            let rows = t.add(t.mul(rows, v[1]), v[2]);
            let rows = t.matmul(rows, v[3]);
            let y = t.reshape(rows, &[bn, tn, j, groups, 2]);
            let y = t.permute(y, &[0, 1, 3, 2, 4]);
            t.reshape(y, &[bn, tn, nn, 2])
        };
        let tape = Tape::new();
        let vars = [
            tape.leaf(x.clone()),
            tape.leaf(s.clone()),
            tape.leaf(b.clone()),
            tape.leaf(w.clone()),
        ];
        let fused = tape.channel_affine_mix(vars[0], vars[1], vars[2], vars[3], groups);
        let refv = reference(&tape, &vars);
        let fv = tape.value(fused);
        let rv = tape.value(refv);
        for (a, b) in fv.iter().zip(rv.iter()) {
            assert!((a - b).abs() < 1e-12, "fused {a} vs reference {b}");
        }
        // Gradient check against finite differences of the fused op.
        check(
            vec![x, s, b, w],
            move |t, v| {
                let y = t.channel_affine_mix(v[0], v[1], v[2], v[3], groups);
                let q = t.constant(randn(&[bn, tn, nn, 2], 24));
                t.sum_all(t.mul(t.square(y), q))
            },
            1e-5,
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let v = t.constant(randn(&[4, 7], 15));
        let s = t.softmax_last(v);
        let sums = t.value(t.sum_axis(s, 1));
        for x in sums.iter() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constants_do_not_accumulate_grads() {
        let t = Tape::new();
        let c = t.constant(randn(&[2, 2], 16));
        let w = t.leaf(randn(&[2, 2], 17));
        let out = t.sum_all(t.mul(c, w));
        let grads = t.backward(out);
        assert!(grads.grads[c.id()].is_none());
        assert!(grads.grads[w.id()].is_some());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // f(x) = sum(x*x + x) -> df/dx = 2x + 1
        let t = Tape::new();
        let x = t.leaf(randn(&[3], 18));
        let out = t.sum_all(t.add(t.mul(x, x), x));
        let grads = t.backward(out);
        let got = grads.get(x, &[3]);
        let want = t.value(x).mapv(|v| 2.0 * v + 1.0);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
