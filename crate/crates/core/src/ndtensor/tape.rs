//! Reverse-mode tape.
//!
//! A [`Tape`] is an append-only list of nodes. Each op evaluates eagerly,
//! stores its output value and records which nodes it read. Because nodes can
//! only reference earlier nodes, the list is already in topological order and
//! [`Tape::backward`] simply walks it in reverse.

use std::fmt;

use crate::error::{Error, Result};

use super::conv::{self, ConvGeometry, Padding};
use super::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Fused operation implemented outside this module (warping, loss kernels).
///
/// The caller computes the forward value itself and hands it to
/// [`Tape::custom`]; the op only has to supply the vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, given the upstream gradient of the
    /// output. `None` means "no contribution"; `needs_grad[i]` is false for
    /// inputs that are constants, and the op may return `None` for those.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        needs_grad: &[bool],
        output: &Tensor<T>,
        grad_output: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat(Var, Var),
    Conv {
        input: Var,
        kernel: Var,
        geometry: ConvGeometry,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    LeakyRelu {
        input: Var,
        alpha: T,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scalar_mul",
            Op::Square(..) => "square",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Concat(..) => "concat_channels",
            Op::Conv { .. } => "conv_nd",
            Op::AddBias { .. } => "add_bias",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Upsample { .. } => "upsample_nearest",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Concat(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Square(a) | Op::Sum(a) | Op::Mean(a) => vec![*a],
            Op::Conv { input, kernel, .. } => vec![*input, *kernel],
            Op::AddBias { input, bias } => vec![*input, *bias],
            Op::LeakyRelu { input, .. } | Op::Upsample { input, .. } => vec![*input],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Recorded computation. Single owner; build a fresh tape per training step.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.signature()).finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
///
/// Only leaves keep their gradient; intermediate gradients are released as
/// soon as they have been propagated.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<T> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("shapes checked")
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = match &op {
            Op::Leaf => false,
            op => op.inputs().iter().any(|v| self.nodes[v.0].tracked),
        };
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Op names and output shapes in recording order.
    pub fn signature(&self) -> Vec<(&'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .map(|n| (n.op.name(), n.value.shape().to_vec()))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("mul", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s: T = x.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::of(x.len() as f64));
        self.push(out, Op::Mean(a))
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() < 2 || x.spatial() != y.spatial() {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let mut shape = x.shape().to_vec();
        shape[0] += y.channels();
        let mut data = Vec::with_capacity(x.len() + y.len());
        data.extend_from_slice(x.data());
        data.extend_from_slice(y.data());
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    /// Convolution of `[C_in, spatial]` input with `[C_out, C_in, k...]` kernels.
    pub fn conv_nd(&mut self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(kernel));
        let geometry = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
        let data = conv::forward(&geometry, x.data(), w.data());
        let out = Tensor::new(geometry.output_shape(), data)?;
        Ok(self.push(
            out,
            Op::Conv {
                input,
                kernel,
                geometry,
            },
        ))
    }

    /// Adds a per-channel bias `[C]` to a `[C, spatial]` tensor.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        if b.shape() != [x.channels()] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: x.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
        let vol = x.len() / x.channels();
        let mut out = x.clone();
        for (chunk, &bv) in out.data_mut().chunks_mut(vol).zip(b.data()) {
            for v in chunk {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { input, bias }))
    }

    /// `max(x, alpha * x)` elementwise; the derivative at exactly zero is `alpha`.
    pub fn leaky_relu(&mut self, input: Var, alpha: T) -> Result<Var> {
        if !(alpha > T::zero() && alpha < T::one()) {
            return Err(Error::invalid(
                "leaky_relu",
                format!("alpha must lie in (0, 1), got {alpha}"),
            ));
        }
        let out = self.value(input).map(|x| if x > T::zero() { x } else { alpha * x });
        Ok(self.push(out, Op::LeakyRelu { input, alpha }))
    }

    /// Nearest-neighbour upsampling of every spatial axis by `factor`.
    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor < 2 {
            return Err(Error::invalid(
                "upsample_nearest",
                format!("factor must be at least 2, got {factor}"),
            ));
        }
        let x = self.value(input);
        let out = upsample_forward(x, factor);
        Ok(self.push(out, Op::Upsample { input, factor }))
    }

    /// Records an externally computed op.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Propagates `d loss / d node` back to every tracked leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !root.tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(root.value.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            for (var, contribution) in self.vjp(node, &g) {
                if !self.nodes[var.0].tracked {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let v = |var: Var| &self.nodes[var.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, v(*b), |p, q| p * q)),
                (*b, zip_map(g, v(*a), |p, q| p * q)),
            ],
            Op::Scale(a, s) => {
                let s = *s;
                vec![(*a, g.map(|x| x * s))]
            }
            Op::Square(a) => {
                let two = T::of(2.0);
                vec![(*a, zip_map(g, v(*a), |p, q| two * p * q))]
            }
            Op::Sum(a) => {
                let gs = g.data()[0];
                vec![(*a, Tensor::full(v(*a).shape(), gs))]
            }
            Op::Mean(a) => {
                let x = v(*a);
                let gs = g.data()[0] / T::of(x.len() as f64);
                vec![(*a, Tensor::full(x.shape(), gs))]
            }
            Op::Concat(a, b) => {
                let split = v(*a).len();
                let ga = Tensor::new(v(*a).shape().to_vec(), g.data()[..split].to_vec());
                let gb = Tensor::new(v(*b).shape().to_vec(), g.data()[split..].to_vec());
                vec![(*a, ga.expect("split")), (*b, gb.expect("split"))]
            }
            Op::Conv {
                input,
                kernel,
                geometry,
            } => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[input.0].tracked {
                    let dx = conv::backward_input(geometry, v(*kernel).data(), g.data());
                    out.push((*input, Tensor::new(v(*input).shape().to_vec(), dx).expect("conv dx")));
                }
                if self.nodes[kernel.0].tracked {
                    let dw = conv::backward_kernel(geometry, v(*input).data(), g.data());
                    out.push((*kernel, Tensor::new(v(*kernel).shape().to_vec(), dw).expect("conv dw")));
                }
                out
            }
            Op::AddBias { input, bias } => {
                let channels = v(*bias).len();
                let vol = g.len() / channels;
                let db: Vec<T> = g.data().chunks(vol).map(|c| c.iter().copied().sum()).collect();
                vec![
                    (*input, g.clone()),
                    (*bias, Tensor::new(vec![channels], db).expect("bias")),
                ]
            }
            Op::LeakyRelu { input, alpha } => {
                let alpha = *alpha;
                vec![(
                    *input,
                    zip_map(g, v(*input), |gv, x| if x > T::zero() { gv } else { alpha * gv }),
                )]
            }
            Op::Upsample { input, factor } => {
                vec![(*input, upsample_backward(v(*input).shape(), g, *factor))]
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| v(i)).collect();
                let needs: Vec<bool> = inputs.iter().map(|i| self.nodes[i.0].tracked).collect();
                inputs
                    .iter()
                    .zip(op.backward(&values, &needs, &node.value, g))
                    .filter_map(|(&var, grad)| grad.map(|t| (var, t)))
                    .collect()
            }
        }
    }
}

fn upsample_index(shape: &[usize], factor: usize) -> (Vec<usize>, impl Fn(&[usize]) -> usize + '_) {
    let mut out_shape = shape.to_vec();
    for e in &mut out_shape[1..] {
        *e *= factor;
    }
    let source = move |idx: &[usize]| {
        // idx is an output multi-index; map each spatial coordinate back.
        let mut flat = idx[0];
        for (a, &i) in idx.iter().enumerate().skip(1) {
            flat = flat * shape[a] + i / factor;
        }
        flat
    };
    (out_shape, source)
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..n {
        f(flat, &idx);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn upsample_forward<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (out_shape, source) = upsample_index(x.shape(), factor);
    let mut data = vec![T::zero(); out_shape.iter().product()];
    for_each_index(&out_shape, |flat, idx| data[flat] = x.data()[source(idx)]);
    Tensor::new(out_shape, data).expect("upsample shape")
}

fn upsample_backward<T: Scalar>(shape: &[usize], g: &Tensor<T>, factor: usize) -> Tensor<T> {
    let (out_shape, source) = upsample_index(shape, factor);
    let mut dx = Tensor::zeros(shape);
    for_each_index(&out_shape, |flat, idx| dx.data_mut()[source(idx)] += g.data()[flat]);
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 3, 3]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv_nd(x, k, 1, Padding::Same).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn box_kernel_counts_receptive_field() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[1, 3, 3]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv_nd(x, k, 1, Padding::Same).unwrap();
        let out = tape.value(y).data();
        assert_eq!(out[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(out[corner], 4.0);
        }
        assert_eq!(out[1], 6.0);
    }

    #[test]
    fn zero_kernel_annihilates() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::from_fn(&[2, 4, 5], |i| i as f64 - 7.0));
        let k = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let y = tape.conv_nd(x, k, 2, Padding::Same).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::ones(&[2, 4, 4]));
        let k = tape.constant(Tensor::ones(&[1, 3, 3, 3]));
        let err = tape.conv_nd(x, k, 1, Padding::Same).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 4, 4]") && msg.contains("[1, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn leaky_relu_values() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[2.0, -2.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, -0.4, 0.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.2, 0.2]);
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1, 1, 1], &[5.0]));
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 5.0));
        assert!(tape.upsample_nearest(x, 1).is_err());

        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::from_fn(&[2, 2, 3], |i| i as f64));
        let y = tape.upsample_nearest(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 6]);
        assert_eq!(tape.value(y).data()[6 + 2], 1.0);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn reductions_and_concat() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mean(x);
        assert_eq!(tape.value(m).item().unwrap(), 2.0);

        let a = tape.constant(Tensor::<f64>::zeros(&[2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[3, 4, 4]));
        let c = tape.concat_channels(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[5, 4, 4]);
        let bad = tape.constant(Tensor::ones(&[3, 4, 5]));
        assert!(tape.concat_channels(a, bad).is_err());
        assert!(tape.add(a, b).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, -2.0]));
        let sq = tape.square(x);
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f32>::from_fn(&[2, 3, 3], |i| i as f32 * 0.1));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::<f64>::ones(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn detached_values_are_constants() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 3.0]));
        let d = tape.detach(x);
        let y = tape.mul(x, d).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // d(x * const)/dx = const
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 3.0]);
        assert!(g.get(d).is_none());
    }

    #[test]
    fn shared_leaf_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn bias_gradient_sums_each_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::<f64>::zeros(&[2, 2, 2]));
        let b = tape.param(t(&[2], &[1.0, -1.0]));
        let y = tape.add_bias(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0]);
    }
}
