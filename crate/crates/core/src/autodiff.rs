//! Reverse-mode automatic differentiation over [`Tensor4`] values.
//!
//! A [`Tape`] records one forward pass as an append-only list of nodes.
//! Inputs of a node always have smaller ids than the node itself, so the
//! id order is a topological order and `backward` simply walks it in
//! reverse. One training step owns one tape.

use std::fmt;

use crate::error::{AlfError, Result};
use crate::ops;
use crate::tensor::{Activation, ConvGeometry, Layout, Real, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a user-registered op: maps the upstream gradient and
/// the input values to one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&Tensor4<T>, &[&Tensor4<T>]) -> Vec<Tensor4<T>>>;

enum Op<T: Real> {
    Leaf,
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    ChannelMatmul { x: Var, m: Var },
    ScaleChannels { x: Var, scale: Vec<T> },
    Activation { x: Var, kind: Activation },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: T },
    Sum { x: Var },
    Mse { a: Var, b: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Reshape { x: Var },
    GlobalAvgPool { x: Var },
    AddChannelBias { x: Var, bias: Var },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

impl<T: Real> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelMatmul { .. } => "channel_matmul",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::Activation { .. } => "activation",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mse { .. } => "mse",
            Op::SoftmaxXent { .. } => "softmax_xent",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::AddChannelBias { .. } => "add_channel_bias",
            Op::Custom { .. } => "custom",
        };
        f.write_str(name)
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor4<T>,
    op: Op<T>,
    trainable: bool,
}

#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor4<T>>>,
    dims: Vec<[usize; 4]>,
    layouts: Vec<Layout>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` does
    /// not reach the loss.
    pub fn get(&self, v: Var) -> Tensor4<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor4::zeros(self.dims[v.0], self.layouts[v.0]),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take(&mut self, v: Var) -> Tensor4<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor4::zeros(self.dims[v.0], self.layouts[v.0]),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1×1×1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Constant input (not trainable).
    pub fn constant(&mut self, value: Tensor4<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable parameter leaf.
    pub fn param(&mut self, value: Tensor4<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].trainable = true;
        v
    }

    pub fn parameters(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].trainable)
            .map(Var)
            .collect()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, geom: ConvGeometry) -> Result<Var> {
        let out = ops::conv2d_fast(self.value(x), self.value(w), &geom)?;
        Ok(self.push(out, Op::Conv2d { x, w, geom }))
    }

    /// Trailing-axis contraction with a `1×1×C×D` matrix (point-wise conv,
    /// filter encoding and decoding all reduce to this).
    pub fn channel_matmul(&mut self, x: Var, m: Var) -> Result<Var> {
        let out = ops::channel_matmul(self.value(x), self.value(m))?;
        Ok(self.push(out, Op::ChannelMatmul { x, m }))
    }

    /// Multiplies channel `c` by the constant `scale[c]`.
    pub fn scale_channels(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let out = ops::scale_channels(self.value(x), &scale)?;
        Ok(self.push(out, Op::ScaleChannels { x, scale }))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        if kind == Activation::Identity {
            return x;
        }
        let out = ops::activation(self.value(x), kind);
        self.push(out, Op::Activation { x, kind })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale { x, k })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = T::from_f64(self.value(x).sum_f64());
        self.push(Tensor4::scalar(s), Op::Sum { x })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(AlfError::shape(format!("mse of {:?} and {:?}", va.dims(), vb.dims())));
        }
        let n = va.len().max(1) as f64;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| {
                let d = x.as_f64() - y.as_f64();
                d * d
            })
            .sum();
        Ok(self.push(Tensor4::scalar(T::from_f64(s / n)), Op::Mse { a, b }))
    }

    /// Mean softmax cross-entropy of `[N,1,1,K]` logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor4::scalar(T::from_f64(loss)),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: [usize; 4]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let out = ops::global_avg_pool(self.value(x));
        self.push(out, Op::GlobalAvgPool { x })
    }

    /// Adds a `1×1×1×C` bias to every channel of `x`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let b = self.value(bias);
        let c = self.value(x).channels();
        if b.len() != c {
            return Err(AlfError::shape(format!("bias of {} for {c} channels", b.len())));
        }
        let bias_data = b.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_exact_mut(c.max(1)) {
            for (v, &bv) in row.iter_mut().zip(&bias_data) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::AddChannelBias { x, bias }))
    }

    /// Registers an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor4<T>, backward: CustomBackward<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
        )
    }

    /// Propagates `d loss / d node` to every node reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_dims = self.value(loss).dims();
        if loss_dims != [1, 1, 1, 1] {
            return Err(AlfError::NonScalarLoss(loss_dims));
        }
        let mut grads: Vec<Option<Tensor4<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor4::scalar(T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            for (input, contribution) in self.input_grads(&node.op, &g, id)? {
                assert!(input.0 < id, "tape is not topologically ordered");
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
            layouts: self.nodes.iter().map(|n| n.value.layout()).collect(),
        })
    }

    fn input_grads(&self, op: &Op<T>, g: &Tensor4<T>, id: usize) -> Result<Vec<(Var, Tensor4<T>)>> {
        let out = match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                vec![
                    (*x, ops::conv2d_backward_input(g, wv, geom, xv.dims())?),
                    (*w, ops::conv2d_backward_weights(xv, g, geom)?),
                ]
            }
            Op::ChannelMatmul { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let [_, _, c, d] = mv.dims();
                let rows = xv.rows();
                let gx = ops::gemm_nt(rows, d, c, g.data(), mv.data());
                let gm = ops::gemm_tn(rows, c, d, xv.data(), g.data());
                vec![
                    (*x, Tensor4::from_vec(xv.dims(), gx, xv.layout())?),
                    (*m, Tensor4::from_vec(mv.dims(), gm, mv.layout())?),
                ]
            }
            Op::ScaleChannels { x, scale } => vec![(*x, ops::scale_channels(g, scale)?)],
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let gx = match kind {
                    Activation::Identity => g.clone(),
                    Activation::Relu => g.zip_map(xv, |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
                };
                vec![(*x, gx)]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub { a, b } => vec![(*a, g.clone()), (*b, g.scale(-T::one()))],
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                vec![
                    (*a, g.zip_map(bv, |gv, y| gv * y)?),
                    (*b, g.zip_map(av, |gv, x| gv * x)?),
                ]
            }
            Op::Scale { x, k } => vec![(*x, g.scale(*k))],
            Op::Sum { x } => {
                let xv = self.value(*x);
                vec![(*x, Tensor4::filled(xv.dims(), g.data()[0], xv.layout()))]
            }
            Op::Mse { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = T::from_f64(2.0 / av.len().max(1) as f64) * g.data()[0];
                let ga = av.zip_map(bv, |x, y| k * (x - y))?;
                let gb = ga.scale(-T::one());
                vec![(*a, ga), (*b, gb)]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let lv = self.value(*logits);
                let k = lv.channels();
                let n = labels.len() as f64;
                let up = g.data()[0].as_f64();
                let mut data: Vec<T> = Vec::with_capacity(probs.len());
                for (b, &l) in labels.iter().enumerate() {
                    for j in 0..k {
                        let p = probs[b * k + j] - if j == l { 1.0 } else { 0.0 };
                        data.push(T::from_f64(up * p / n));
                    }
                }
                vec![(*logits, Tensor4::from_vec(lv.dims(), data, lv.layout())?)]
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                vec![(*x, g.reshape(xv.dims())?.with_layout(xv.layout()))]
            }
            Op::GlobalAvgPool { x } => {
                vec![(*x, ops::global_avg_pool_backward(g, self.value(*x).dims()))]
            }
            Op::AddChannelBias { x, bias } => {
                let bv = self.value(*bias);
                let c = bv.len();
                let mut acc = vec![0.0f64; c];
                for row in g.data().chunks_exact(c.max(1)) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a += v.as_f64();
                    }
                }
                let gb = Tensor4::from_vec(bv.dims(), acc.into_iter().map(T::from_f64).collect(), bv.layout())?;
                vec![(*x, g.clone()), (*bias, gb)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor4<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(g, &values);
                if gs.len() != inputs.len() {
                    return Err(AlfError::shape(format!(
                        "custom op at node {id} returned {} gradients for {} inputs",
                        gs.len(),
                        inputs.len()
                    )));
                }
                inputs.iter().copied().zip(gs).collect()
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Real>(slot: &mut Option<Tensor4<T>>, g: Tensor4<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.dims() != g.dims() {
                return Err(AlfError::shape(format!(
                    "gradient {:?} accumulated into {:?}",
                    g.dims(),
                    acc.dims()
                )));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(data: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, data.len()], data.to_vec(), Layout::Nhwc).unwrap()
    }

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::new();
        let x = tape.constant(vec_t(&[1.0, -2.0, 3.5]));
        let w = tape.param(vec_t(&[0.3, 0.1, -0.7]));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let w = tape.param(vec_t(&[1.0, 2.0]));
        let unused = tape.param(vec_t(&[5.0, 6.0, 7.0]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert!(!g.reached(unused));
        assert_eq!(g.get(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(vec_t(&[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(AlfError::NonScalarLoss(_))));
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(w*w) uses w twice
        let mut tape = Tape::new();
        let w = tape.param(vec_t(&[3.0, -1.0]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).data(), &[6.0, -2.0]);
    }

    #[test]
    fn identity_activation_records_nothing() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec_t(&[1.0]));
        let y = tape.activation(x, Activation::Identity);
        assert_eq!(x, y);
        assert_eq!(tape.len(), 1);
    }

    #[test]
    fn custom_op_arity_checked() {
        let mut tape = Tape::new();
        let w = tape.param(vec_t(&[1.0]));
        let y = tape.custom(&[w], vec_t(&[1.0]), Box::new(|_, _| Vec::new()));
        let loss = tape.sum(y);
        assert!(tape.backward(loss).is_err());
    }
}
