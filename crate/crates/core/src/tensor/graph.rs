//! Reverse-mode automatic differentiation on dynamically shaped f64 arrays.
//!
//! A [`Graph`] is a tape of operations built during a forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! gradients for every node that requires them. The tape is rebuilt per
//! forward pass; parameters live outside the graph (see `params`) and are
//! bound as leaves. All computation is sequential, so identical inputs produce
//! bit-identical outputs.

use std::cell::RefCell;

use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, IxDyn, Slice};

/// Dynamically shaped f64 array, the single value type flowing through graphs.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tx(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Tx, Tx),
    Sub(Tx, Tx),
    Mul(Tx, Tx),
    Div(Tx, Tx),
    Neg(Tx),
    Scale(Tx, f64),
    AddScalar(Tx),
    /// `[..., k] x [k, n]`, contracting the last axis of the lhs.
    MatMul(Tx, Tx),
    /// `[..., m, k] x [..., k, n]` with identical leading dims.
    BatMatMul(Tx, Tx),
    TransposeLast2(Tx),
    Permute(Tx, Vec<usize>),
    Reshape(Tx),
    Narrow(Tx, usize, usize, usize),
    Concat(Vec<Tx>, usize),
    Broadcast(Tx),
    SoftmaxLast(Tx),
    /// Layer normalization over the last axis with affine parameters.
    LayerNorm { x: Tx, gamma: Tx, beta: Tx },
    Gelu(Tx),
    Exp(Tx),
    Ln(Tx),
    Relu(Tx),
    ClampMin(Tx, f64),
    /// Euclidean norm over the last axis, kept as a trailing dim of 1.
    /// Gradient is defined as 0 where the norm is below `L2_GUARD`.
    L2NormLast(Tx),
    SumAxis(Tx, usize),
    MeanAxis(Tx, usize),
    SumAll(Tx),
    MeanAll(Tx),
}

/// Norm magnitudes below this are treated as exactly zero in backward passes.
pub const L2_GUARD: f64 = 1e-12;

struct Node {
    value: Arr,
    op: Op,
    needs_grad: bool,
    /// Cached intermediates for ops whose backward would otherwise recompute
    /// them (layer norm stores `[x_hat, inv_std]`).
    aux: Vec<Arr>,
}

/// Tape of operations recorded during a forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node handle.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, t: Tx) -> Option<&Arr> {
        self.grads.get(t.0).and_then(|g| g.as_ref())
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
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Sum `g` down to `shape`, undoing an implicit numpy-style broadcast.
fn reduce_to_shape(g: &Arr, shape: &[usize]) -> Arr {
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &d) in shape.iter().enumerate() {
        if d == 1 && out.shape()[i] > 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    out
}

fn to_standard(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

/// Matrix product contracting the last axis of `a` against rows of 2-D `w`.
fn matmul_last(a: &Arr, w: &Arr) -> Arr {
    let k = *a.shape().last().expect("matmul lhs must have rank >= 1");
    let n = w.shape()[1];
    assert_eq!(k, w.shape()[0], "matmul inner dims {k} vs {}", w.shape()[0]);
    let rows: usize = a.len() / k;
    let a2 = a.view().into_shape_with_order((rows, k)).unwrap();
    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let out = a2.dot(&w2);
    let mut shape: Vec<usize> = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

fn bmm(a: &Arr, b: &Arr) -> Arr {
    let ar = a.ndim();
    assert!(ar >= 2 && b.ndim() == ar, "bmm requires equal ranks >= 2");
    assert_eq!(&a.shape()[..ar - 2], &b.shape()[..ar - 2], "bmm leading dims");
    let (m, k) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (k2, n) = (b.shape()[ar - 2], b.shape()[ar - 1]);
    assert_eq!(k, k2, "bmm inner dims");
    let batch: usize = a.shape()[..ar - 2].iter().product();
    let a3 = a.view().into_shape_with_order((batch, m, k)).unwrap();
    let b3 = b.view().into_shape_with_order((batch, k, n)).unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[batch, m, n]));
    let mut o3 = out.view_mut().into_shape_with_order((batch, m, n)).unwrap();
    for i in 0..batch {
        let prod = a3.index_axis(Axis(0), i).dot(&b3.index_axis(Axis(0), i));
        o3.index_axis_mut(Axis(0), i).assign(&prod);
    }
    let mut shape: Vec<usize> = a.shape()[..ar - 2].to_vec();
    shape.push(m);
    shape.push(n);
    out.into_shape_with_order(IxDyn(&shape)).unwrap()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    /// Value of a node (cloned).
    pub fn value(&self, t: Tx) -> Arr {
        self.nodes.borrow()[t.0].value.clone()
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, t: Tx) -> f64 {
        let nodes = self.nodes.borrow();
        let v = &nodes[t.0].value;
        assert_eq!(v.len(), 1, "scalar() on node with {} elements", v.len());
        *v.iter().next().unwrap()
    }

    pub fn shape(&self, t: Tx) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    fn push(&self, value: Arr, op: Op, needs_grad: bool, aux: Vec<Arr>) -> Tx {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: to_standard(value), op, needs_grad, aux });
        Tx(nodes.len() - 1)
    }

    /// Constant leaf: gradients never flow into it.
    pub fn constant(&self, value: Arr) -> Tx {
        self.push(value, Op::Leaf, false, vec![])
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&self, value: Arr) -> Tx {
        self.push(value, Op::Leaf, true, vec![])
    }

    /// Re-enter a value as a constant, cutting the gradient path.
    pub fn detach(&self, t: Tx) -> Tx {
        let v = self.value(t);
        self.constant(v)
    }

    fn unary<F: FnOnce(&Arr) -> Arr>(&self, t: Tx, op: Op, f: F) -> Tx {
        let (v, needs) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[t.0].value), nodes[t.0].needs_grad)
        };
        self.push(v, op, needs, vec![])
    }

    fn binary<F: FnOnce(&Arr, &Arr) -> Arr>(&self, a: Tx, b: Tx, op: Op, f: F) -> Tx {
        let (v, needs) = {
            let nodes = self.nodes.borrow();
            let va = &nodes[a.0].value;
            let vb = &nodes[b.0].value;
            (f(va, vb), nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        self.push(v, op, needs, vec![])
    }

    fn broadcast_binary(&self, a: Tx, b: Tx, op: Op, f: impl Fn(f64, f64) -> f64) -> Tx {
        self.binary(a, b, op, |va, vb| {
            let shape = broadcast_shape(va.shape(), vb.shape());
            let ba = va.broadcast(IxDyn(&shape)).expect("broadcast lhs");
            let bb = vb.broadcast(IxDyn(&shape)).expect("broadcast rhs");
            let mut out = ba.to_owned();
            out.zip_mut_with(&bb, |x, &y| *x = f(*x, y));
            out
        })
    }

    pub fn add(&self, a: Tx, b: Tx) -> Tx {
        self.broadcast_binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&self, a: Tx, b: Tx) -> Tx {
        self.broadcast_binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&self, a: Tx, b: Tx) -> Tx {
        self.broadcast_binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&self, a: Tx, b: Tx) -> Tx {
        self.broadcast_binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn neg(&self, t: Tx) -> Tx {
        self.unary(t, Op::Neg(t), |v| v.mapv(|x| -x))
    }

    pub fn scale(&self, t: Tx, c: f64) -> Tx {
        self.unary(t, Op::Scale(t, c), |v| v.mapv(|x| x * c))
    }

    pub fn add_scalar(&self, t: Tx, c: f64) -> Tx {
        self.unary(t, Op::AddScalar(t), |v| v.mapv(|x| x + c))
    }

    /// `[..., k] x [k, n]` contracting the last axis of `a`.
    pub fn matmul(&self, a: Tx, w: Tx) -> Tx {
        self.binary(a, w, Op::MatMul(a, w), matmul_last)
    }

    /// Batched matmul over equal leading dims: `[..., m, k] x [..., k, n]`.
    pub fn batch_matmul(&self, a: Tx, b: Tx) -> Tx {
        self.binary(a, b, Op::BatMatMul(a, b), bmm)
    }

    pub fn transpose_last2(&self, t: Tx) -> Tx {
        self.unary(t, Op::TransposeLast2(t), |v| {
            let r = v.ndim();
            let mut x = v.clone();
            x.swap_axes(r - 2, r - 1);
            to_standard(x)
        })
    }

    pub fn permute(&self, t: Tx, axes: &[usize]) -> Tx {
        self.unary(t, Op::Permute(t, axes.to_vec()), |v| {
            to_standard(v.clone().permuted_axes(IxDyn(axes)))
        })
    }

    pub fn reshape(&self, t: Tx, shape: &[usize]) -> Tx {
        self.unary(t, Op::Reshape(t), |v| {
            v.clone().into_shape_with_order(IxDyn(shape)).expect("reshape size mismatch")
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, t: Tx, axis: usize, start: usize, len: usize) -> Tx {
        self.unary(t, Op::Narrow(t, axis, start, len), |v| {
            v.slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned()
        })
    }

    pub fn concat(&self, parts: &[Tx], axis: usize) -> Tx {
        assert!(!parts.is_empty(), "concat of zero parts");
        let (v, needs) = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayViewD<f64>> =
                parts.iter().map(|p| nodes[p.0].value.view()).collect();
            let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
            let needs = parts.iter().any(|p| nodes[p.0].needs_grad);
            (v, needs)
        };
        self.push(v, Op::Concat(parts.to_vec(), axis), needs, vec![])
    }

    pub fn broadcast_to(&self, t: Tx, shape: &[usize]) -> Tx {
        self.unary(t, Op::Broadcast(t), |v| {
            v.broadcast(IxDyn(shape)).expect("broadcast_to invalid shape").to_owned()
        })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self, t: Tx) -> Tx {
        self.unary(t, Op::SoftmaxLast(t), |v| {
            let mut out = v.clone();
            for mut row in out.rows_mut() {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|x| (x - m).exp());
                let s: f64 = row.sum();
                row.mapv_inplace(|x| x / s);
            }
            out
        })
    }

    /// Layer normalization over the last axis: `gamma * (x - mu) / sigma + beta`.
    pub fn layer_norm(&self, x: Tx, gamma: Tx, beta: Tx, eps: f64) -> Tx {
        let (y, xhat, invstd, needs) = {
            let nodes = self.nodes.borrow();
            let v = &nodes[x.0].value;
            let g = &nodes[gamma.0].value;
            let b = &nodes[beta.0].value;
            let d = *v.shape().last().expect("layer_norm input rank >= 1");
            assert_eq!(g.len(), d, "layer_norm gamma dim");
            assert_eq!(b.len(), d, "layer_norm beta dim");
            let rows = v.len() / d;
            let v2 = v.view().into_shape_with_order((rows, d)).unwrap();
            let mut xhat = ndarray::Array2::<f64>::zeros((rows, d));
            let mut invstd = ndarray::Array1::<f64>::zeros(rows);
            for (i, row) in v2.rows().into_iter().enumerate() {
                let mu = row.mean().unwrap();
                let var = row.iter().map(|&x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                invstd[i] = is;
                for (j, &x) in row.iter().enumerate() {
                    xhat[(i, j)] = (x - mu) * is;
                }
            }
            let g1 = g.view().into_shape_with_order(d).unwrap();
            let b1 = b.view().into_shape_with_order(d).unwrap();
            let y2 = &xhat * &g1 + &b1;
            let y = y2.into_shape_with_order(IxDyn(v.shape())).unwrap();
            let needs =
                nodes[x.0].needs_grad || nodes[gamma.0].needs_grad || nodes[beta.0].needs_grad;
            (y, xhat.into_dyn(), invstd.into_dyn(), needs)
        };
        self.push(y, Op::LayerNorm { x, gamma, beta }, needs, vec![xhat, invstd])
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&self, t: Tx) -> Tx {
        self.unary(t, Op::Gelu(t), |v| v.mapv(gelu_scalar))
    }

    pub fn exp(&self, t: Tx) -> Tx {
        self.unary(t, Op::Exp(t), |v| v.mapv(f64::exp))
    }

    pub fn ln(&self, t: Tx) -> Tx {
        self.unary(t, Op::Ln(t), |v| v.mapv(f64::ln))
    }

    pub fn relu(&self, t: Tx) -> Tx {
        self.unary(t, Op::Relu(t), |v| v.mapv(|x| x.max(0.0)))
    }

    pub fn clamp_min(&self, t: Tx, c: f64) -> Tx {
        self.unary(t, Op::ClampMin(t, c), |v| v.mapv(|x| x.max(c)))
    }

    /// L2 norm over the last axis, keeping it as a trailing dim of size 1.
    pub fn l2_norm_last(&self, t: Tx) -> Tx {
        self.unary(t, Op::L2NormLast(t), |v| {
            let last = v.ndim() - 1;
            v.map_axis(Axis(last), |row| row.iter().map(|&x| x * x).sum::<f64>().sqrt())
                .insert_axis(Axis(last))
        })
    }

    pub fn sum_axis(&self, t: Tx, axis: usize) -> Tx {
        self.unary(t, Op::SumAxis(t, axis), |v| v.sum_axis(Axis(axis)))
    }

    pub fn mean_axis(&self, t: Tx, axis: usize) -> Tx {
        self.unary(t, Op::MeanAxis(t, axis), |v| v.mean_axis(Axis(axis)).unwrap())
    }

    pub fn sum_all(&self, t: Tx) -> Tx {
        self.unary(t, Op::SumAll(t), |v| ArrayD::from_elem(IxDyn(&[]), v.sum()))
    }

    pub fn mean_all(&self, t: Tx) -> Tx {
        self.unary(t, Op::MeanAll(t), |v| {
            ArrayD::from_elem(IxDyn(&[]), v.sum() / v.len() as f64)
        })
    }

    /// Reverse pass from a scalar root. Returns gradients for all nodes with
    /// `needs_grad`, accumulated in reverse construction order.
    pub fn backward(&self, root: Tx) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Arr>> = vec![None; nodes.len()];
        grads[root.0] = Some(ArrayD::from_elem(nodes[root.0].value.raw_dim(), 1.0));

        for id in (0..=root.0).rev() {
            if !nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[id];
            let mut accum = |t: Tx, contrib: Arr| {
                if !nodes[t.0].needs_grad {
                    return;
                }
                match &mut grads[t.0] {
                    Some(existing) => *existing += &contrib,
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accum(*a, reduce_to_shape(&g, nodes[a.0].value.shape()));
                    accum(*b, reduce_to_shape(&g, nodes[b.0].value.shape()));
                }
                Op::Sub(a, b) => {
                    accum(*a, reduce_to_shape(&g, nodes[a.0].value.shape()));
                    accum(*b, reduce_to_shape(&g.mapv(|x| -x), nodes[b.0].value.shape()));
                }
                Op::Mul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let shape = broadcast_shape(va.shape(), vb.shape());
                    let bb = vb.broadcast(IxDyn(&shape)).unwrap();
                    let ba = va.broadcast(IxDyn(&shape)).unwrap();
                    accum(*a, reduce_to_shape(&(&g * &bb), va.shape()));
                    accum(*b, reduce_to_shape(&(&g * &ba), vb.shape()));
                }
                Op::Div(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let shape = broadcast_shape(va.shape(), vb.shape());
                    let bb = vb.broadcast(IxDyn(&shape)).unwrap().to_owned();
                    let ba = va.broadcast(IxDyn(&shape)).unwrap();
                    accum(*a, reduce_to_shape(&(&g / &bb), va.shape()));
                    let gb = &g * &ba / (&bb * &bb);
                    accum(*b, reduce_to_shape(&gb.mapv(|x| -x), vb.shape()));
                }
                Op::Neg(a) => accum(*a, g.mapv(|x| -x)),
                Op::Scale(a, c) => accum(*a, g.mapv(|x| x * c)),
                Op::AddScalar(a) => accum(*a, g),
                Op::MatMul(a, w) => {
                    let va = &nodes[a.0].value;
                    let vw = &nodes[w.0].value;
                    let k = *va.shape().last().unwrap();
                    let n = vw.shape()[1];
                    let rows = va.len() / k;
                    let a2 = va.view().into_shape_with_order((rows, k)).unwrap();
                    let w2 = vw.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let g2 = g.view().into_shape_with_order((rows, n)).unwrap();
                    let da = g2.dot(&w2.t()).into_shape_with_order(IxDyn(va.shape())).unwrap();
                    let dw = a2.t().dot(&g2).into_dyn();
                    accum(*a, da);
                    accum(*w, dw);
                }
                Op::BatMatMul(a, b) => {
                    let va = &nodes[a.0].value;
                    let vb = &nodes[b.0].value;
                    let r = va.ndim();
                    let (m, k) = (va.shape()[r - 2], va.shape()[r - 1]);
                    let n = vb.shape()[r - 1];
                    let batch: usize = va.shape()[..r - 2].iter().product();
                    let a3 = va.view().into_shape_with_order((batch, m, k)).unwrap();
                    let b3 = vb.view().into_shape_with_order((batch, k, n)).unwrap();
                    let g3 = g.view().into_shape_with_order((batch, m, n)).unwrap();
                    let mut da = ndarray::Array3::<f64>::zeros((batch, m, k));
                    let mut db = ndarray::Array3::<f64>::zeros((batch, k, n));
                    for i in 0..batch {
                        let gi = g3.index_axis(Axis(0), i);
                        da.index_axis_mut(Axis(0), i)
                            .assign(&gi.dot(&b3.index_axis(Axis(0), i).t()));
                        db.index_axis_mut(Axis(0), i)
                            .assign(&a3.index_axis(Axis(0), i).t().dot(&gi));
                    }
                    accum(*a, da.into_shape_with_order(IxDyn(va.shape())).unwrap());
                    accum(*b, db.into_shape_with_order(IxDyn(vb.shape())).unwrap());
                }
                Op::TransposeLast2(a) => {
                    let r = g.ndim();
                    let mut gt = g.clone();
                    gt.swap_axes(r - 2, r - 1);
                    accum(*a, to_standard(gt));
                }
                Op::Permute(a, axes) => {
                    let mut inv = vec![0usize; axes.len()];
                    for (i, &ax) in axes.iter().enumerate() {
                        inv[ax] = i;
                    }
                    accum(*a, to_standard(g.clone().permuted_axes(IxDyn(&inv))));
                }
                Op::Reshape(a) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    accum(*a, g.clone().into_shape_with_order(IxDyn(&shape)).unwrap());
                }
                Op::Narrow(a, axis, start, len) => {
                    let mut da = ArrayD::<f64>::zeros(nodes[a.0].value.raw_dim());
                    da.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + *len))
                        .assign(&g);
                    accum(*a, da);
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = nodes[p.0].value.shape()[*axis];
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(offset..offset + len))
                            .to_owned();
                        accum(*p, gp);
                        offset += len;
                    }
                }
                Op::Broadcast(a) => {
                    accum(*a, reduce_to_shape(&g, nodes[a.0].value.shape()));
                }
                Op::SoftmaxLast(a) => {
                    let y = &node.value;
                    let last = y.ndim() - 1;
                    let gy = &g * y;
                    let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                    let dx = y * &(&g - &s);
                    accum(*a, dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xhat = &node.aux[0]; // [rows, d]
                    let invstd = &node.aux[1]; // [rows]
                    let vg = &nodes[gamma.0].value;
                    let d = vg.len();
                    let rows = xhat.len() / d;
                    let g2 = g.view().into_shape_with_order((rows, d)).unwrap();
                    let xh2 = xhat.view().into_shape_with_order((rows, d)).unwrap();
                    let g1 = vg.view().into_shape_with_order(d).unwrap();
                    let dgamma = (&g2 * &xh2).sum_axis(Axis(0));
                    let dbeta = g2.sum_axis(Axis(0));
                    let dxhat = &g2 * &g1;
                    let m1 = dxhat.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    let m2 = (&dxhat * &xh2).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                    let is2 =
                        invstd.view().into_shape_with_order(rows).unwrap().insert_axis(Axis(1));
                    let dx = (&dxhat - &m1 - &(&xh2 * &m2)) * &is2;
                    let xshape = nodes[x.0].value.shape().to_vec();
                    accum(*x, dx.into_shape_with_order(IxDyn(&xshape)).unwrap());
                    accum(*gamma, dgamma.into_dyn().into_shape_with_order(vg.shape()).unwrap());
                    accum(
                        *beta,
                        dbeta
                            .into_dyn()
                            .into_shape_with_order(nodes[beta.0].value.shape())
                            .unwrap(),
                    );
                }
                Op::Gelu(a) => {
                    let dx = nodes[a.0].value.mapv(gelu_grad_scalar);
                    accum(*a, &g * &dx);
                }
                Op::Exp(a) => accum(*a, &g * &node.value),
                Op::Ln(a) => accum(*a, &g / &nodes[a.0].value),
                Op::Relu(a) => {
                    let mask = nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    accum(*a, &g * &mask);
                }
                Op::ClampMin(a, c) => {
                    let c = *c;
                    let mask = nodes[a.0].value.mapv(|x| if x > c { 1.0 } else { 0.0 });
                    accum(*a, &g * &mask);
                }
                Op::L2NormLast(a) => {
                    let x = &nodes[a.0].value;
                    let y = &node.value; // [..., 1]
                    let safe = y.mapv(|n| if n < L2_GUARD { 0.0 } else { 1.0 / n });
                    let dx = x * &(&g * &safe);
                    accum(*a, dx);
                }
                Op::SumAxis(a, axis) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    let gx = g.clone().insert_axis(Axis(*axis));
                    accum(*a, gx.broadcast(IxDyn(&shape)).unwrap().to_owned());
                }
                Op::MeanAxis(a, axis) => {
                    let shape = nodes[a.0].value.shape().to_vec();
                    let n = shape[*axis] as f64;
                    let gx = g.mapv(|x| x / n).insert_axis(Axis(*axis));
                    accum(*a, gx.broadcast(IxDyn(&shape)).unwrap().to_owned());
                }
                Op::SumAll(a) => {
                    let shape = nodes[a.0].value.raw_dim();
                    let s = *g.iter().next().unwrap();
                    accum(*a, ArrayD::from_elem(shape, s));
                }
                Op::MeanAll(a) => {
                    let shape = nodes[a.0].value.raw_dim();
                    let n = nodes[a.0].value.len() as f64;
                    let s = *g.iter().next().unwrap() / n;
                    accum(*a, ArrayD::from_elem(shape, s));
                }
            }
        }
        Gradients { grads }
    }
}

/// Row-wise maximum of the last axis with the diagonal excluded, used for the
/// detached shift constant in the stabilized contrastive loss. Pure value
/// computation, not recorded on any tape.
pub fn rowmax_offdiag(sims: &Arr) -> Arr {
    assert_eq!(sims.ndim(), 2, "rowmax_offdiag expects a square matrix");
    let n = sims.shape()[0];
    assert_eq!(n, sims.shape()[1], "rowmax_offdiag expects a square matrix");
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, 1]));
    for i in 0..n {
        let mut m = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                m = m.max(sims[[i, j]]);
            }
        }
        out[[i, 0]] = m;
    }
    out
}
