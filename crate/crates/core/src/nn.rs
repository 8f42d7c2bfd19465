//! Minimal dense networks with hand-written backpropagation.
//!
//! Batches are row-major `(batch, features)` matrices, so every layer is a
//! single matrix product (gemm for f32/f64).

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::Tensor;
use crate::error::{Error, Result};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    /// Exponential-linear with unit scale.
    Elu,
}

/// `tanh` through one `exp`; the libm routine is several times slower.
/// Absolute error stays at rounding level.
#[inline]
fn fast_tanh<T: Scalar>(z: T) -> T {
    let two = T::lit(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

impl Activation {
    fn apply_inplace<T: Scalar>(self, z: &mut Array2<T>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => z.mapv_inplace(|v| v.max(T::zero())),
            Activation::Tanh => z.mapv_inplace(fast_tanh),
            Activation::Elu => z.mapv_inplace(|v| if v > T::zero() { v } else { v.exp_m1() }),
        }
    }

    /// Derivative at pre-activation `z` with output `y`.
    #[inline]
    fn derivative<T: Scalar>(self, z: T, y: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
            Activation::Elu => {
                if z > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            }
        }
    }
}

/// Affine layer followed by an elementwise activation. `weight` is
/// `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<Dense<T>>,
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `inputs[l]` is the input of layer `l`.
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
    pub output: Array2<T>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn add_assign(&mut self, other: &Self) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w += ow;
            *b += ob;
        }
    }

    /// Flat view in the same order as [`Mlp::param`].
    pub fn get(&self, mut i: usize) -> T {
        for (w, b) in &self.layers {
            if i < w.len() {
                return w[[i / w.ncols(), i % w.ncols()]];
            }
            i -= w.len();
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("gradient index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }
}

impl<T: Scalar> Mlp<T> {
    /// Layers are `(width, activation)` in order; weights and biases are
    /// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, spec: &[(usize, Activation)], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(spec.len());
        let mut fan_in = input_dim;
        for &(width, activation) in spec {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let weight = Array2::from_shape_fn((width, fan_in), |_| T::lit(rng.gen_range(-bound..bound)));
            let bias = Array1::from_shape_fn(width, |_| T::lit(rng.gen_range(-bound..bound)));
            layers.push(Dense { weight, bias, activation });
            fan_in = width;
        }
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense<T>>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[1].weight.ncols() != pair[0].weight.nrows() {
                return Err(Error::DimensionMismatch("consecutive layer widths disagree".into()));
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.nrows() {
                return Err(Error::DimensionMismatch("bias length disagrees with weight".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.nrows())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weight.nrows()).collect()
    }

    pub fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    fn check_input(&self, x: &ArrayView2<T>) {
        assert_eq!(x.ncols(), self.input_dim(), "network input width mismatch");
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        self.check_input(&x);
        let mut h: Option<Array2<T>> = None;
        for layer in &self.layers {
            let input = h.as_ref().map_or(x.view(), |a| a.view());
            let mut z = input.dot(&layer.weight.t());
            z += &layer.bias;
            layer.activation.apply_inplace(&mut z);
            h = Some(z);
        }
        h.unwrap_or_else(|| x.to_owned())
    }

    pub fn forward_trace(&self, x: ArrayView2<T>) -> Trace<T> {
        self.check_input(&x);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for layer in &self.layers {
            let mut z = h.dot(&layer.weight.t());
            z += &layer.bias;
            let mut y = z.clone();
            layer.activation.apply_inplace(&mut y);
            inputs.push(h);
            pre.push(z);
            h = y;
        }
        Trace { inputs, pre, output: h }
    }

    /// Backpropagates `grad_out` (d loss / d output). Returns parameter
    /// gradients and, if requested, d loss / d input.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        grad_out: ArrayView2<T>,
        want_input_grad: bool,
    ) -> (Gradients<T>, Option<Array2<T>>) {
        let (grads, input) = self.backprop(trace, grad_out, true, want_input_grad);
        (grads.expect("requested"), input)
    }

    /// d loss / d input only; parameter gradients are not formed.
    pub fn input_gradient(&self, trace: &Trace<T>, grad_out: ArrayView2<T>) -> Array2<T> {
        self.backprop(trace, grad_out, false, true).1.expect("requested")
    }

    fn backprop(
        &self,
        trace: &Trace<T>,
        grad_out: ArrayView2<T>,
        want_params: bool,
        want_input: bool,
    ) -> (Option<Gradients<T>>, Option<Array2<T>>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut upstream = grad_out.to_owned();
        let mut input_grad = None;
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let act = layer.activation;
            // delta = upstream * act'(z)
            let out = if l + 1 == n { &trace.output } else { &trace.inputs[l + 1] };
            Zip::from(&mut upstream)
                .and(&trace.pre[l])
                .and(out)
                .for_each(|g, &z, &y| *g *= act.derivative(z, y));
            if want_params {
                let dw = upstream.t().dot(&trace.inputs[l]);
                let db = upstream.sum_axis(Axis(0));
                grads.push((dw, db));
            }
            if l > 0 || want_input {
                let next = upstream.dot(&layer.weight);
                if l == 0 {
                    input_grad = Some(next);
                    break;
                }
                upstream = next;
            }
        }
        grads.reverse();
        (want_params.then_some(Gradients { layers: grads }), input_grad)
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|l| (Array2::zeros(l.weight.raw_dim()), Array1::zeros(l.bias.len())))
                .collect(),
        }
    }

    /// `self <- (1 - tau) self + tau online`, elementwise.
    pub fn soft_update_from(&mut self, online: &Self, tau: T) {
        let keep = T::one() - tau;
        for (t, o) in self.layers.iter_mut().zip(&online.layers) {
            Zip::from(&mut t.weight).and(&o.weight).for_each(|a, &b| *a = keep * *a + tau * b);
            Zip::from(&mut t.bias).and(&o.bias).for_each(|a, &b| *a = keep * *a + tau * b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn locate(&self, mut i: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (li, l) in self.layers.iter().enumerate() {
            if i < l.weight.len() {
                let cols = l.weight.ncols();
                return (li, Some((i / cols, i % cols)), 0);
            }
            i -= l.weight.len();
            if i < l.bias.len() {
                return (li, None, i);
            }
            i -= l.bias.len();
        }
        panic!("parameter index out of range")
    }

    /// Flat parameter access: per layer, row-major weights then biases.
    pub fn param(&self, i: usize) -> T {
        match self.locate(i) {
            (l, Some((r, c)), _) => self.layers[l].weight[[r, c]],
            (l, None, b) => self.layers[l].bias[b],
        }
    }

    pub fn set_param(&mut self, i: usize, v: T) {
        match self.locate(i) {
            (l, Some((r, c)), _) => self.layers[l].weight[[r, c]] = v,
            (l, None, b) => self.layers[l].bias[b] = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        let mut m = T::zero();
        for (a, b) in self.layers.iter().zip(&other.layers) {
            for (x, y) in a.weight.iter().zip(b.weight.iter()).chain(a.bias.iter().zip(b.bias.iter())) {
                m = m.max((*x - *y).abs());
            }
        }
        m
    }

    /// Exports `prefix.{l}.weight` / `prefix.{l}.bias` tensors.
    pub fn to_tensors(&self, prefix: &str) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push(Tensor::from_values(
                format!("{prefix}.{i}.weight"),
                vec![l.weight.nrows(), l.weight.ncols()],
                l.weight.iter().copied(),
            ));
            out.push(Tensor::from_values(
                format!("{prefix}.{i}.bias"),
                vec![l.bias.len()],
                l.bias.iter().copied(),
            ));
        }
        out
    }

    pub fn from_tensors(prefix: &str, tensors: &[Tensor], activations: &[Activation]) -> Result<Self> {
        let find = |name: String| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::format(format!("missing tensor {name}")))
        };
        let mut layers = Vec::new();
        for (i, &activation) in activations.iter().enumerate() {
            let w = find(format!("{prefix}.{i}.weight"))?;
            let b = find(format!("{prefix}.{i}.bias"))?;
            if w.shape.len() != 2 || b.shape.len() != 1 {
                return Err(Error::format(format!("bad tensor rank in {prefix}.{i}")));
            }
            let weight = Array2::from_shape_vec((w.shape[0], w.shape[1]), w.values())
                .map_err(|e| Error::format(e.to_string()))?;
            let bias = Array1::from(b.values());
            layers.push(Dense { weight, bias, activation });
        }
        Self::from_layers(layers)
    }
}

/// Adaptive-moment optimizer state for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: T,
    beta1: T,
    beta2: T,
    eps: T,
    step: i32,
    m: Gradients<T>,
    v: Gradients<T>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(net: &Mlp<T>, learning_rate: T) -> Self {
        Self {
            learning_rate,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: net.zero_gradients(),
            v: net.zero_gradients(),
        }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let lr = self.learning_rate;
        let eps = self.eps;
        let update = |p: &mut T, m: &mut T, v: &mut T, g: T| {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (li, layer) in net.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            Zip::from(&mut layer.weight)
                .and(mw)
                .and(vw)
                .and(gw)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut layer.bias)
                .and(mb)
                .and(vb)
                .and(gb)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}
