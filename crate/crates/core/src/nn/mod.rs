//! A compact CPU convolutional-network engine.
//!
//! Activations are NCHW `Array4<f32>`; dense layers see `(n, features, 1, 1)`.
//! Each layer caches what its backward pass needs during a forward call made
//! with [`Ctx::keep`] set, and accumulates parameter gradients into its
//! [`Param`]s. Convolutions lower to matrix products through im2col.

mod blocks;
mod conv;
mod layers;
mod norm;
mod optim;

pub use blocks::{Residual, SqueezeExcite};
pub use conv::Conv2d;
pub use layers::{Dropout, Flatten, GlobalAvgPool, Linear, MaxPool2d, Normalize, Relu, Silu};
pub use norm::BatchNorm2d;
pub use optim::Adam;

use ndarray::{Array4, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// A tensor of weights or statistics together with its gradient.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: ArrayD<f32>,
    pub grad: ArrayD<f32>,
    /// Buffers such as running statistics are stored but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn new(value: ArrayD<f32>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(value: ArrayD<f32>) -> Self {
        Param {
            grad: ArrayD::zeros(IxDyn(&[0])),
            value,
            trainable: false,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    /// He-normal initialization with the given fan-in.
    pub fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f32).sqrt();
        let dist = Normal::new(0.0f32, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn uniform(shape: &[usize], bound: f32, rng: &mut ChaCha8Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("bound");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        Param::new(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Per-call forward state.
pub struct Ctx<'a> {
    /// Training behaviour: batch statistics in normalization, active dropout.
    pub train: bool,
    /// Keep activations for a subsequent backward pass.
    pub keep: bool,
    pub rng: &'a mut ChaCha8Rng,
}

impl<'a> Ctx<'a> {
    pub fn train(rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            train: true,
            keep: true,
            rng,
        }
    }

    pub fn eval(rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            train: false,
            keep: false,
            rng,
        }
    }

    /// Evaluation behaviour with activations kept, for gradient probes.
    pub fn probe(rng: &'a mut ChaCha8Rng) -> Self {
        Ctx {
            train: false,
            keep: true,
            rng,
        }
    }
}

pub type ParamVisitor<'v> = dyn FnMut(&str, &mut Param) + 'v;

pub trait Layer: Send + Sync {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32>;

    /// Propagates `grad` (same shape as the last output) to the input and
    /// accumulates parameter gradients.
    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32>;

    /// Output `(channels, height, width)` for an input of that shape.
    fn output_shape(&self, input: [usize; 3]) -> [usize; 3];

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_>) {}

    /// Drops cached activations.
    fn clear(&mut self) {}
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Layers applied in order. Children are addressed by their names in
/// parameter paths.
#[derive(Default)]
pub struct Sequential {
    layers: Vec<(String, Box<dyn Layer>)>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential::default()
    }

    pub fn push(&mut self, name: impl Into<String>, layer: impl Layer + 'static) -> &mut Self {
        self.layers.push((name.into(), Box::new(layer)));
        self
    }

    pub fn push_boxed(&mut self, name: impl Into<String>, layer: Box<dyn Layer>) -> &mut Self {
        self.layers.push((name.into(), layer));
        self
    }

    pub fn with(mut self, name: impl Into<String>, layer: impl Layer + 'static) -> Self {
        self.push(name, layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, mut x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        for (_, l) in &mut self.layers {
            x = l.forward(x, ctx);
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        for (_, l) in self.layers.iter_mut().rev() {
            grad = l.backward(grad);
        }
        grad
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.layers.iter().fold(input, |s, (_, l)| l.output_shape(s))
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (name, l) in &mut self.layers {
            l.visit_params(&join(prefix, name), f);
        }
    }

    fn clear(&mut self) {
        for (_, l) in &mut self.layers {
            l.clear();
        }
    }
}

/// Collects `(path, trainable, element count)` for every parameter.
pub fn param_summary(layer: &mut dyn Layer) -> Vec<(String, bool, usize)> {
    let mut out = Vec::new();
    layer.visit_params("", &mut |name, p| out.push((name.to_string(), p.trainable, p.len())));
    out
}
