//! Dense row-major `f64` tensors with tape-free reverse-mode differentiation.
//!
//! Every operation records its inputs in the output node when at least one
//! input requires a gradient; [`Tensor::backward`] walks that graph in reverse
//! topological order from a scalar root. Operations whose inputs are all
//! constants produce plain leaves, so evaluation without gradients keeps no
//! graph alive.

mod adam;
mod checkpoint;
mod nn;

use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, TensorEntry};
pub use nn::{FinalActivation, HiddenActivation, Linear, Mlp, MlpSpec};

/// Pointwise nonlinearity applied by [`Tensor::activate`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Identity,
    Silu,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    MatMul(Tensor, Tensor),
    SumAll(Tensor),
    SumAxis(Tensor, usize),
    Square(Tensor),
    Sqrt(Tensor),
    Activate(Tensor, Unary),
    Concat(Vec<Tensor>, usize),
    IndexSelect(Tensor, Rc<[usize]>),
    IndexAdd(Tensor, Rc<[usize]>),
    Broadcast(Tensor),
    Reshape(Tensor),
}

impl Op {
    fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![a, b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumAll(a)
            | Op::SumAxis(a, _)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Activate(a, _)
            | Op::IndexSelect(a, _)
            | Op::IndexAdd(a, _)
            | Op::Broadcast(a)
            | Op::Reshape(a) => vec![a],
            Op::Concat(xs, _) => xs.iter().collect(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` without recording operations, so results are plain constants.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            NO_GRAD.with(|c| c.set(self.0));
        }
    }
    let _restore = Restore(NO_GRAD.with(|c| c.replace(true)));
    f()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad =
            !NO_GRAD.with(Cell::get) && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor(Rc::new(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        })))
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// Trainable leaf; gradients accumulate into it on every backward pass.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(shape.to_vec(), vec![0.0; numel(shape)], false).expect("consistent shape")
    }

    pub fn scalar(value: f64) -> Tensor {
        Self::leaf(vec![1], vec![value], false).expect("consistent shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.0.grad.borrow().is_some()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Overwrites the values in place. Only meaningful for leaves.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        self.0.data.borrow_mut().copy_from_slice(values);
        Ok(())
    }

    pub(crate) fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.data.borrow_mut());
    }

    /// Copy of the values cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.shape().to_vec(), self.to_vec(), false).expect("consistent shape")
    }

    fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }

    // ---------------------------------------------------------------------
    // elementwise

    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let (a, b) = if self.shape() == other.shape() {
            (self.clone(), other.clone())
        } else {
            let shape = broadcast_shape(self.shape(), other.shape()).ok_or_else(|| Error::Shape {
                op: name,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            })?;
            (self.broadcast_to(&shape)?, other.broadcast_to(&shape)?)
        };
        let data = {
            let (x, y) = (a.data(), b.data());
            x.iter().zip(y.iter()).map(|(&p, &q)| f(p, q)).collect()
        };
        Ok(Self::build(a.shape().to_vec(), data, op(a, b)))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * c).collect();
        Self::build(self.shape().to_vec(), data, Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + c).collect();
        Self::build(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn square(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x * x).collect();
        Self::build(self.shape().to_vec(), data, Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.sqrt()).collect();
        Self::build(self.shape().to_vec(), data, Op::Sqrt(self.clone()))
    }

    pub fn activate(&self, kind: Unary) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| match kind {
                Unary::Identity => x,
                Unary::Silu => x * sigmoid(x),
                Unary::Relu => x.max(0.0),
                Unary::Tanh => x.tanh(),
                Unary::Sigmoid => sigmoid(x),
            })
            .collect();
        Self::build(self.shape().to_vec(), data, Op::Activate(self.clone(), kind))
    }

    pub fn silu(&self) -> Tensor {
        self.activate(Unary::Silu)
    }

    // ---------------------------------------------------------------------
    // linear algebra and reductions

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), (k, 1), &other.data(), (n, 1), &mut out);
        Ok(Self::build(vec![m, n], out, Op::MatMul(self.clone(), other.clone())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Self::build(vec![1], vec![s], Op::SumAll(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums out `axis`; with `keepdim` the axis stays with size 1.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "sum_axis",
                lhs: shape.to_vec(),
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..len {
                    let src = &x[(o * len + a) * inner..(o * len + a + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        let mut out_shape = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Ok(Self::build(out_shape, out, Op::SumAxis(self.clone(), axis)))
    }

    /// Euclidean norm of all entries.
    pub fn norm(&self) -> Tensor {
        self.square().sum().sqrt()
    }

    /// Euclidean norm along `axis`.
    pub fn norm_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        Ok(self.square().sum_axis(axis, keepdim)?.sqrt())
    }

    // ---------------------------------------------------------------------
    // structural

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Self::build(
            shape.to_vec(),
            self.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base.to_vec(),
                rhs: vec![axis],
            });
        }
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = split_axis(base, axis);
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let views: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (p, v) in parts.iter().zip(&views) {
                let chunk = p.shape()[axis] * inner;
                out.extend_from_slice(&v[o * chunk..(o + 1) * chunk]);
            }
        }
        drop(views);
        let mut shape = base.to_vec();
        shape[axis] = total;
        Ok(Self::build(shape, out, Op::Concat(parts.to_vec(), axis)))
    }

    /// Gathers rows (axis 0) by index.
    pub fn index_select(&self, indices: &Rc<[usize]>) -> Result<Tensor> {
        let shape = self.shape();
        let rows = shape[0];
        let row: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: shape.to_vec(),
                rhs: vec![bad],
            });
        }
        let x = self.data();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices.iter() {
            out.extend_from_slice(&x[i * row..(i + 1) * row]);
        }
        drop(x);
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        Ok(Self::build(
            out_shape,
            out,
            Op::IndexSelect(self.clone(), indices.clone()),
        ))
    }

    /// Scatter-add: row `r` of `self` is added into output row `indices[r]`;
    /// the output has `n_rows` rows.
    pub fn index_add(&self, indices: &Rc<[usize]>, n_rows: usize) -> Result<Tensor> {
        let shape = self.shape();
        if shape[0] != indices.len() || indices.iter().any(|&i| i >= n_rows) {
            return Err(Error::Shape {
                op: "index_add",
                lhs: shape.to_vec(),
                rhs: vec![indices.len(), n_rows],
            });
        }
        let row: usize = shape[1..].iter().product();
        let mut out = vec![0.0; n_rows * row];
        {
            let x = self.data();
            for (r, &i) in indices.iter().enumerate() {
                let dst = &mut out[i * row..(i + 1) * row];
                for (d, s) in dst.iter_mut().zip(&x[r * row..(r + 1) * row]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = n_rows;
        Ok(Self::build(
            out_shape,
            out,
            Op::IndexAdd(self.clone(), indices.clone()),
        ))
    }

    /// Numpy-style broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = BroadcastMap::new(self.shape(), shape).ok_or_else(|| Error::Shape {
            op: "broadcast_to",
            lhs: self.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        let x = self.data();
        let mut out = Vec::with_capacity(numel(shape));
        map.for_each(|src| out.push(x[src]));
        drop(x);
        Ok(Self::build(shape.to_vec(), out, Op::Broadcast(self.clone())))
    }

    // ---------------------------------------------------------------------
    // reverse pass

    /// Populates `grad` on every gradient-tracking tensor reachable from this
    /// scalar root. Gradients accumulate into leaves across calls.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: HashMap<*const Node, Vec<f64>> = HashMap::new();
        grads.insert(self.key(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.key()) else {
                continue;
            };
            t.propagate(&g, &mut grads);
            let mut slot = t.0.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Post-order over gradient-tracking nodes: parents precede children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut seen: HashSet<*const Node> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !seen.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }

    fn propagate(&self, g: &[f64], grads: &mut HashMap<*const Node, Vec<f64>>) {
        let mut acc = |t: &Tensor, f: &mut dyn FnMut(&mut [f64])| {
            if t.requires_grad() {
                let slot = grads
                    .entry(t.key())
                    .or_insert_with(|| vec![0.0; t.numel()]);
                f(slot);
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                if a.same_node(b) {
                    let x = a.data();
                    acc(a, &mut |ga| {
                        for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x.iter()) {
                            *d += 2.0 * gi * xi;
                        }
                    });
                } else {
                    let (x, y) = (a.data(), b.data());
                    acc(a, &mut |ga| {
                        for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                            *d += gi * yi;
                        }
                    });
                    acc(b, &mut |gb| {
                        for ((d, &gi), &xi) in gb.iter_mut().zip(g).zip(x.iter()) {
                            *d += gi * xi;
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (a.data(), b.data());
                acc(a, &mut |ga| {
                    for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi / yi;
                    }
                });
                acc(b, &mut |gb| {
                    for (((d, &gi), &xi), &yi) in gb.iter_mut().zip(g).zip(x.iter()).zip(y.iter()) {
                        *d -= gi * xi / (yi * yi);
                    }
                });
            }
            Op::Scale(a, c) => acc(a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(d, &gi)| *d += c * gi)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => acc(a, &mut |ga| add_into(ga, g)),
            Op::MatMul(a, b) => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let (x, y) = (a.data(), b.data());
                // dA = G * B^T, dB = A^T * G
                acc(a, &mut |ga| gemm_acc(m, n, k, g, (n, 1), &y, (1, n), ga));
                acc(b, &mut |gb| gemm_acc(k, m, n, &x, (1, k), g, (n, 1), gb));
            }
            Op::SumAll(a) => acc(a, &mut |ga| ga.iter_mut().for_each(|d| *d += g[0])),
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(a.shape(), *axis);
                acc(a, &mut |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            add_into(dst, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Square(a) => {
                let x = a.data();
                acc(a, &mut |ga| {
                    for ((d, &gi), &xi) in ga.iter_mut().zip(g).zip(x.iter()) {
                        *d += 2.0 * xi * gi;
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = self.data();
                acc(a, &mut |ga| {
                    for ((d, &gi), &yi) in ga.iter_mut().zip(g).zip(y.iter()) {
                        *d += gi / (2.0 * yi);
                    }
                });
            }
            Op::Activate(a, kind) => {
                let (x, y) = (a.data(), self.data());
                acc(a, &mut |ga| {
                    for (((d, &gi), &xi), &yi) in ga.iter_mut().zip(g).zip(x.iter()).zip(y.iter()) {
                        let slope = match kind {
                            Unary::Identity => 1.0,
                            Unary::Silu => {
                                let s = sigmoid(xi);
                                s * (1.0 + xi * (1.0 - s))
                            }
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                        };
                        *d += gi * slope;
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(self.shape(), *axis);
                let total = self.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = p.shape()[*axis] * inner;
                    acc(p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::IndexSelect(a, idx) => {
                let row: usize = a.shape()[1..].iter().product();
                acc(a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[i * row..(i + 1) * row], &g[r * row..(r + 1) * row]);
                    }
                });
            }
            Op::IndexAdd(a, idx) => {
                let row: usize = a.shape()[1..].iter().product();
                acc(a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut ga[r * row..(r + 1) * row], &g[i * row..(i + 1) * row]);
                    }
                });
            }
            Op::Broadcast(a) => {
                let map = BroadcastMap::new(a.shape(), self.shape()).expect("validated on forward");
                acc(a, &mut |ga| {
                    let mut k = 0;
                    map.for_each(|src| {
                        ga[src] += g[k];
                        k += 1;
                    });
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// (outer, axis length, inner) for a row-major shape.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    c.iter_mut().for_each(|x| *x = 0.0);
    gemm_acc(m, k, n, a, (rsa, csa), b, (rsb, csb), c);
}

/// `c += a * b` with `a: m x k`, `b: k x n`, `c: m x n` row-major; operand
/// strides allow transposed views without copies.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    debug_assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: the debug assertions above spell out the extents; every caller
    // passes buffers whose shapes were validated against (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Source offsets for every element of a broadcast output.
struct BroadcastMap {
    out_shape: Vec<usize>,
    strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], dst: &[usize]) -> Option<BroadcastMap> {
        if src.len() > dst.len() {
            return None;
        }
        let pad = dst.len() - src.len();
        let mut strides = vec![0; dst.len()];
        let mut stride = 1;
        for i in (0..src.len()).rev() {
            let (s, d) = (src[i], dst[i + pad]);
            if s == d {
                strides[i + pad] = stride;
            } else if s != 1 {
                return None;
            }
            stride *= s;
        }
        Some(BroadcastMap {
            out_shape: dst.to_vec(),
            strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize)) {
        let total = numel(&self.out_shape);
        if total == 0 {
            return;
        }
        let rank = self.out_shape.len();
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..total {
            f(src);
            for d in (0..rank).rev() {
                idx[d] += 1;
                src += self.strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                src -= self.strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn p(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::parameter(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_by_hand() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.to_vec(), vec![3.0, 7.0]);
    }

    #[test]
    fn sum_of_zeros_is_zero() {
        for shape in [vec![1], vec![3, 4], vec![2, 3, 5]] {
            assert_eq!(Tensor::zeros(&shape).sum().item(), 0.0);
        }
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let x = p(&[3], &[1.0, 2.0, 3.0]);
        x.square().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_scaled_input() {
        let x = p(&[1], &[2.0]);
        x.scale(3.0).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn silu_slope_at_zero() {
        let x = p(&[1], &[0.0]);
        x.silu().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = p(&[2], &[1.0, 2.0]);
        assert!(matches!(
            x.square().backward(),
            Err(Error::NonScalarRoot(s)) if s == vec![2]
        ));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 3], &[0.0; 6]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = t(&[4], &[0.0; 4]);
        assert!(a.add(&c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let x = p(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = p(&[3], &[10.0, 20.0, 30.0]);
        let y = x.add(&b).unwrap();
        assert_eq!(y.to_vec(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        y.sum().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn column_broadcast() {
        let x = t(&[2, 1], &[1.0, 2.0]);
        let y = x.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn sum_axis_and_concat() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(x.sum_axis(1, false).unwrap().to_vec(), vec![6.0, 15.0]);
        assert_eq!(x.sum_axis(0, true).unwrap().shape(), &[1, 3]);
        let y = t(&[2, 1], &[7.0, 8.0]);
        let c = Tensor::concat(&[x, y], 1).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0, 7.0, 4.0, 5.0, 6.0, 8.0]);
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let idx: Rc<[usize]> = Rc::from(vec![2usize, 0, 2]);
        let x = p(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = x.index_select(&idx).unwrap();
        assert_eq!(g.to_vec(), vec![5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        g.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);

        let s = t(&[3, 1], &[1.0, 2.0, 3.0]).index_add(&idx, 4).unwrap();
        assert_eq!(s.to_vec(), vec![2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn constants_do_not_keep_graph() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = a.square().sum();
        assert!(!b.requires_grad());
        b.backward().unwrap();
        assert!(a.grad().is_none());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let x = p(&[1], &[3.0]);
        let y = x.mul(&x).unwrap().add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn no_grad_records_nothing() {
        let x = p(&[2], &[1.0, 2.0]);
        let y = no_grad(|| x.square().sum());
        assert!(!y.requires_grad());
        assert!(x.square().sum().requires_grad());
    }
}
