//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and enough of
//! its inputs (by [`Var`] handle) to evaluate the backward rule. Nodes are
//! appended in execution order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape is meant to live for one training step:
//!
//! ```
//! use banet::tape::Tape;
//! use banet::tensor::{Shape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

use crate::error::{Error, Result};
use crate::nn::activation;
use crate::nn::conv::{self, ConvGeometry};
use crate::nn::norm;
use crate::supervision::loss;
use crate::tensor::{Real, Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddScalar { a: Var },
    MulScalar { a: Var, c: T },
    Concat { a: Var, b: Var },
    SliceChannels { a: Var, start: usize },
    Sum { a: Var },
    Conv3d { x: Var, w: Var, b: Var, geom: ConvGeometry },
    ConvTranspose3d { x: Var, w: Var, b: Var },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: Vec<norm::SliceStats> },
    LeakyRelu { x: Var, slope: T },
    Softmax { x: Var },
    DiceCe { p: Var, target: Var, eps: f64 },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddScalar { .. } => "add_scalar",
            Op::MulScalar { .. } => "mul_scalar",
            Op::Concat { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Sum { .. } => "sum",
            Op::Conv3d { .. } => "conv3d",
            Op::ConvTranspose3d { .. } => "transposed_conv3d",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Softmax { .. } => "softmax_channels",
            Op::DiceCe { .. } => "dice_ce_loss",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph plus, after [`Tape::backward`], the
/// gradients of every leaf that requires them.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    /// Drops every node so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Name of the first recorded operation whose output holds a NaN or
    /// infinity, in execution order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.nodes
            .iter()
            .find(|n| !n.value.all_finite())
            .map(|n| n.op.name())
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || (sb.channels() == 1 && sa.with_channels(1) == sb) {
            Ok(())
        } else {
            Err(Error::shape(format!("{what}: {sa} with {sb}")))
        }
    }

    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        self.check_broadcast(a, b, if mul { "mul" } else { "add" })?;
        let va = self.value(a);
        let vb = self.value(b);
        let shape = va.shape();
        let mut out = Vec::with_capacity(va.len());
        if va.shape() == vb.shape() {
            for (&x, &y) in va.data().iter().zip(vb.data()) {
                out.push(if mul { x * y } else { x + y });
            }
        } else {
            let (n, c, v) = (shape.batch(), shape.channels(), shape.voxels());
            for ni in 0..n {
                let bp = vb.plane(ni, 0);
                for ci in 0..c {
                    for (&x, &y) in va.plane(ni, ci).iter().zip(bp) {
                        out.push(if mul { x * y } else { x + y });
                    }
                }
            }
            debug_assert_eq!(out.len(), n * c * v);
        }
        let value = Tensor::from_vec(shape, out)?;
        let op = if mul { Op::Mul { a, b } } else { Op::Add { a, b } };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; `b` may have one channel and is then broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product; `b` may have one channel and is then broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar { a }, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MulScalar { a, c }, rg)
    }

    /// Concatenates along channels, `a` first.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.batch() != sb.batch() || sa.spatial() != sb.spatial() {
            return Err(Error::shape(format!("concat_channels: {sa} with {sb}")));
        }
        let (ca, cb) = (sa.channels(), sb.channels());
        let shape = sa.with_channels(ca + cb);
        let mut out = Vec::with_capacity(shape.numel());
        let (va, vb) = (self.value(a), self.value(b));
        for n in 0..sa.batch() {
            for c in 0..ca {
                out.extend_from_slice(va.plane(n, c));
            }
            for c in 0..cb {
                out.extend_from_slice(vb.plane(n, c));
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if start + len > sa.channels() {
            return Err(Error::shape(format!(
                "slice_channels: {start}..{} of {sa}",
                start + len
            )));
        }
        let shape = sa.with_channels(len);
        let va = self.value(a);
        let mut out = Vec::with_capacity(shape.numel());
        for n in 0..sa.batch() {
            for c in start..start + len {
                out.extend_from_slice(va.plane(n, c));
            }
        }
        let value = Tensor::from_vec(shape, out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::SliceChannels { a, start }, rg))
    }

    /// Sum of all elements as a `(1,1,1,1,1)` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(T::of(s)), Op::Sum { a }, rg)
    }

    /// Propagates d`loss`/d(leaf) into every reachable leaf that requires a
    /// gradient. Can be called once per recorded forward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Tape(
                "backward already ran on this tape; reset it first".into(),
            ));
        }
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got {shape}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Tape(
                "loss does not depend on any trainable leaf".into(),
            ));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let need = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if need(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if need(*b) {
                    let gb = reduce_to(g, self.shape(*b));
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if need(*a) {
                    let ga = broadcast_mul(g, vb);
                    accumulate(grads, *a, ga);
                }
                if need(*b) {
                    let full = elementwise(g, va, |x, y| x * y);
                    accumulate(grads, *b, reduce_to(&full, vb.shape()));
                }
            }
            Op::AddScalar { a } => accumulate(grads, *a, g.clone()),
            Op::MulScalar { a, c } => {
                let c = *c;
                accumulate(grads, *a, g.map(|x| x * c));
            }
            Op::Concat { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (ca, cb) = (sa.channels(), sb.channels());
                let mut ga = Vec::with_capacity(sa.numel());
                let mut gb = Vec::with_capacity(sb.numel());
                for n in 0..sa.batch() {
                    for c in 0..ca {
                        ga.extend_from_slice(g.plane(n, c));
                    }
                    for c in ca..ca + cb {
                        gb.extend_from_slice(g.plane(n, c));
                    }
                }
                if need(*a) {
                    accumulate(grads, *a, Tensor::from_vec(sa, ga).expect("concat split"));
                }
                if need(*b) {
                    accumulate(grads, *b, Tensor::from_vec(sb, gb).expect("concat split"));
                }
            }
            Op::SliceChannels { a, start } => {
                let sa = self.shape(*a);
                let len = g.shape().channels();
                let mut ga = Tensor::zeros(sa);
                let v = sa.voxels();
                for n in 0..sa.batch() {
                    for c in 0..len {
                        let dst = (n * sa.channels() + start + c) * v;
                        ga.data_mut()[dst..dst + v].copy_from_slice(g.plane(n, c));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum { a } => {
                let s = self.shape(*a);
                accumulate(grads, *a, Tensor::full(s, g.item()));
            }
            Op::Conv3d { x, w, b, geom } => {
                let r = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    *geom,
                    g,
                    need(*x),
                    need(*w) || need(*b),
                );
                if let Some(gx) = r.input {
                    accumulate(grads, *x, gx);
                }
                if need(*w) {
                    accumulate(grads, *w, r.weight.expect("weight grad"));
                }
                if need(*b) {
                    accumulate(grads, *b, r.bias.expect("bias grad"));
                }
            }
            Op::ConvTranspose3d { x, w, b } => {
                let r = conv::conv_transpose3d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    need(*x),
                    need(*w) || need(*b),
                );
                if let Some(gx) = r.input {
                    accumulate(grads, *x, gx);
                }
                if need(*w) {
                    accumulate(grads, *w, r.weight.expect("weight grad"));
                }
                if need(*b) {
                    accumulate(grads, *b, r.bias.expect("bias grad"));
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let (gx, gg, gb) =
                    norm::instance_norm_backward(self.value(*x), self.value(*gamma), stats, g);
                if need(*x) {
                    accumulate(grads, *x, gx);
                }
                if need(*gamma) {
                    accumulate(grads, *gamma, gg);
                }
                if need(*beta) {
                    accumulate(grads, *beta, gb);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let gx = activation::leaky_relu_backward(self.value(*x), *slope, g);
                accumulate(grads, *x, gx);
            }
            Op::Softmax { x: xv } => {
                let gx = activation::softmax_backward(&node.value, g);
                accumulate(grads, *xv, gx);
            }
            Op::DiceCe { p, target, eps } => {
                let gp = loss::dice_ce_backward(self.value(*p), self.value(*target), *eps, g.item());
                accumulate(grads, *p, gp);
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(a.shape(), data).expect("same shape")
    } else {
        broadcast_apply(a, b, f)
    }
}

/// `g ⊙ b` where `b` may be channel-broadcast over `g`.
fn broadcast_mul<T: Real>(g: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    elementwise(g, b, |x, y| x * y)
}

fn broadcast_apply<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let s = a.shape();
    let mut out = Vec::with_capacity(s.numel());
    for n in 0..s.batch() {
        let bp = b.plane(n, 0);
        for c in 0..s.channels() {
            out.extend(a.plane(n, c).iter().zip(bp).map(|(&x, &y)| f(x, y)));
        }
    }
    Tensor::from_vec(s, out).expect("broadcast shape")
}

/// Sums `g` over the channel axis when `target` is the broadcast shape.
fn reduce_to<T: Real>(g: &Tensor<T>, target: Shape) -> Tensor<T> {
    if g.shape() == target {
        return g.clone();
    }
    let s = g.shape();
    let v = s.voxels();
    let mut out = vec![0.0f64; target.numel()];
    for n in 0..s.batch() {
        let dst = &mut out[n * v..(n + 1) * v];
        for c in 0..s.channels() {
            for (d, &x) in dst.iter_mut().zip(g.plane(n, c)) {
                *d += x.f64();
            }
        }
    }
    Tensor::from_vec(target, out.into_iter().map(T::of).collect()).expect("reduce shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, random_tensor};

    fn s(n: usize, c: usize, d: usize) -> Shape {
        Shape::new(n, c, d, d, d)
    }

    #[test]
    fn mul_by_zeros_annihilates_value_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(random_tensor(s(1, 2, 2), 1));
        let z = tape.constant(Tensor::zeros(s(1, 2, 2)));
        let y = tape.mul(x, z).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn add_zeros_is_bitwise_identity() {
        let mut tape = Tape::<f32>::new();
        let xt = random_tensor::<f32>(s(1, 3, 2), 2);
        let x = tape.leaf(xt.clone());
        let z = tape.constant(Tensor::zeros(s(1, 3, 2)));
        let y = tape.add(x, z).unwrap();
        assert_eq!(tape.value(y), &xt);
    }

    #[test]
    fn incompatible_shapes_are_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(s(1, 3, 2)));
        let b = tape.leaf(Tensor::zeros(s(1, 2, 2)));
        assert!(tape.add(a, b).is_err());
        // only the right operand may broadcast
        let c = tape.leaf(Tensor::zeros(s(1, 1, 2)));
        assert!(tape.mul(c, a).is_err());
        assert!(tape.mul(a, c).is_ok());
    }

    #[test]
    fn broadcast_mul_gradient_matches_finite_differences() {
        let a = random_tensor::<f64>(Shape::new(1, 3, 2, 2, 2), 3);
        let b = random_tensor::<f64>(Shape::new(1, 1, 2, 2, 2), 4);
        let report = check_gradients(&[a, b], 1e-3, |tape, v| {
            let y = tape.mul(v[0], v[1])?;
            let w = tape.constant(random_tensor(Shape::new(1, 3, 2, 2, 2), 5));
            let y = tape.mul(y, w)?;
            Ok(tape.sum(y))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    #[test]
    fn broadcast_gradient_is_channel_sum() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(random_tensor(Shape::new(1, 3, 2, 2, 2), 6));
        let b = tape.leaf(random_tensor(Shape::new(1, 1, 2, 2, 2), 7));
        let y = tape.mul(a, b).unwrap();
        let l = tape.sum(y);
        tape.backward(l).unwrap();
        let av = tape.value(a).clone();
        let gb = tape.grad(b).unwrap();
        for v in 0..8 {
            let expect: f64 = (0..3).map(|c| av.plane(0, c)[v]).sum();
            assert!((gb.data()[v] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_shapes_and_gradient_split() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(random_tensor(Shape::new(1, 2, 2, 2, 2), 8));
        let b = tape.leaf(random_tensor(Shape::new(1, 3, 2, 2, 2), 9));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.shape(c), Shape::new(1, 5, 2, 2, 2));
        assert_eq!(&tape.value(c).data()[..16], tape.value(a).data());
        let l = tape.sum(c);
        tape.backward(l).unwrap();
        assert!(tape.grad(a).unwrap().data().iter().all(|&g| g == 1.0));
        assert!(tape.grad(b).unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn concat_with_empty_channel_tensor_is_identity() {
        let mut tape = Tape::<f32>::new();
        let xt = random_tensor::<f32>(Shape::new(2, 2, 2, 2, 2), 10);
        let x = tape.leaf(xt.clone());
        let e = tape.constant(Tensor::zeros(Shape::new(2, 0, 2, 2, 2)));
        let c = tape.concat_channels(x, e).unwrap();
        assert_eq!(tape.value(c), &xt);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(Shape::new(1, 2, 2, 2, 2)));
        let b = tape.leaf(Tensor::zeros(Shape::new(1, 2, 4, 2, 2)));
        assert!(tape.concat_channels(a, b).is_err());
    }

    #[test]
    fn sum_and_square_gradients() {
        let xt = random_tensor::<f64>(s(1, 2, 2), 11);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(xt.clone());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(tape.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        tape.reset();
        let x = tape.leaf(xt.clone());
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        for (g, v) in tape.grad(x).unwrap().data().iter().zip(xt.data()) {
            assert_eq!(*g, 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::ones(s(1, 1, 2)));
        assert!(tape.backward(x).is_err());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::Tape(_))));
    }

    #[test]
    fn fresh_tape_replay_is_bitwise_identical() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(random_tensor(Shape::new(1, 3, 2, 2, 2), 12));
            let b = tape.leaf(random_tensor(Shape::new(1, 1, 2, 2, 2), 13));
            let y = tape.mul(a, b).unwrap();
            let y2 = tape.mul(y, a).unwrap();
            let l = tape.sum(y2);
            tape.backward(l).unwrap();
            (tape.grad(a).unwrap().clone(), tape.grad(b).unwrap().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn first_non_finite_names_the_op() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(s(1, 1, 1), f32::MAX));
        let y = tape.mul_scalar(x, 10.0);
        let _ = tape.add_scalar(y, 1.0);
        assert_eq!(tape.first_non_finite(), Some("mul_scalar"));
    }
}
