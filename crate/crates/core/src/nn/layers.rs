use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{join, Ctx, Layer, Param, ParamVisitor};

/// `max(v, 0)` that lets NaN through.
pub(crate) fn relu(v: f32) -> f32 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

#[derive(Default)]
pub struct Relu {
    cap: Option<f32>,
    output: Option<Array4<f32>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    /// `min(max(x, 0), cap)`; `capped(6.0)` is ReLU6.
    pub fn capped(cap: f32) -> Self {
        Relu {
            cap: Some(cap),
            output: None,
        }
    }
}

impl Layer for Relu {
    fn forward(&mut self, mut x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        match self.cap {
            Some(cap) => x.mapv_inplace(|v| v.clamp(0.0, cap)),
            None => x.mapv_inplace(relu),
        }
        if ctx.keep {
            self.output = Some(x.clone());
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        let y = self.output.take().expect("relu backward without forward");
        let cap = self.cap.unwrap_or(f32::INFINITY);
        Zip::from(&mut grad).and(&y).for_each(|g, &v| {
            if v <= 0.0 || v >= cap {
                *g = 0.0
            }
        });
        grad
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn clear(&mut self) {
        self.output = None;
    }
}

/// `x * sigmoid(x)`.
#[derive(Default)]
pub struct Silu {
    input: Option<Array4<f32>>,
}

impl Silu {
    pub fn new() -> Self {
        Silu::default()
    }
}

pub(crate) fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl Layer for Silu {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let y = x.mapv(|v| v * sigmoid(v));
        if ctx.keep {
            self.input = Some(x);
        }
        y
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("silu backward without forward");
        Zip::from(&mut grad).and(&x).for_each(|g, &v| {
            let s = sigmoid(v);
            *g *= s * (1.0 + v * (1.0 - s));
        });
        grad
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn clear(&mut self) {
        self.input = None;
    }
}

/// Max pooling with a square window; padding cells never win.
pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    padding: usize,
    argmax: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            argmax: None,
        }
    }

    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let (oh, ow) = (self.out_len(h), self.out_len(w));
        let mut y = Array4::<f32>::zeros((n, c, oh, ow));
        let mut arg = if ctx.keep {
            vec![0u32; n * c * oh * ow]
        } else {
            Vec::new()
        };
        let xs = x.as_slice().unwrap();
        let ys = y.as_slice_mut().unwrap();
        let p = self.padding as isize;
        for plane in 0..n * c {
            let src = &xs[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0usize;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if src[i] > best || src[i].is_nan() {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = plane * oh * ow + oy * ow + ox;
                    ys[o] = best;
                    if ctx.keep {
                        arg[o] = (plane * h * w + best_i) as u32;
                    }
                }
            }
        }
        if ctx.keep {
            self.argmax = Some((arg, [n, c, h, w]));
        }
        y
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let (arg, [n, c, h, w]) = self.argmax.take().expect("maxpool backward without forward");
        let mut dx = Array4::<f32>::zeros((n, c, h, w));
        let d = dx.as_slice_mut().unwrap();
        for (g, &i) in grad.iter().zip(&arg) {
            d[i as usize] += g;
        }
        dx
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c, self.out_len(h), self.out_len(w)]
    }

    fn clear(&mut self) {
        self.argmax = None;
    }
}

/// Spatial mean per channel: `(n, c, h, w)` to `(n, c, 1, 1)`.
#[derive(Default)]
pub struct GlobalAvgPool {
    hw: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool::default()
    }
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let m = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, h * w))
            .expect("contiguous")
            .mean_axis(Axis(2))
            .expect("non-empty");
        if ctx.keep {
            self.hw = Some((h, w));
        }
        m.into_shape_with_order((n, c, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let (h, w) = self.hw.take().expect("pool backward without forward");
        let (n, c, _, _) = grad.dim();
        let scale = 1.0 / (h * w) as f32;
        Array4::from_shape_fn((n, c, h, w), |(b, ch, _, _)| grad[[b, ch, 0, 0]] * scale)
    }

    fn output_shape(&self, [c, _, _]: [usize; 3]) -> [usize; 3] {
        [c, 1, 1]
    }
}

/// `(n, c, h, w)` to `(n, c·h·w, 1, 1)`.
#[derive(Default)]
pub struct Flatten {
    shape: Option<(usize, usize, usize, usize)>,
}

impl Flatten {
    pub fn new() -> Self {
        Flatten::default()
    }
}

impl Layer for Flatten {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let dim = x.dim();
        if ctx.keep {
            self.shape = Some(dim);
        }
        let (n, c, h, w) = dim;
        x.as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c * h * w, 1, 1))
            .unwrap()
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let dim = self.shape.take().expect("flatten backward without forward");
        grad.as_standard_layout()
            .into_owned()
            .into_shape_with_order(dim)
            .unwrap()
    }

    fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        [c * h * w, 1, 1]
    }
}

/// Fully connected layer over `(n, in, 1, 1)`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    in_features: usize,
    out_features: usize,
    input: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_features as f32).sqrt();
        Linear {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
            in_features,
            out_features,
            input: None,
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_features, self.in_features))
            .unwrap()
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let n = x.dim().0;
        let x2 = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.in_features))
            .expect("linear input width");
        let mut y = Array2::<f32>::zeros((n, self.out_features));
        for mut row in y.outer_iter_mut() {
            row.assign(&self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap());
        }
        general_mat_mul(1.0, &x2, &self.weight_matrix().t(), 1.0, &mut y);
        if ctx.keep {
            self.input = Some(x2);
        }
        y.into_shape_with_order((n, self.out_features, 1, 1)).unwrap()
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("linear backward without forward");
        let n = x.nrows();
        let g = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, self.out_features))
            .unwrap();
        {
            let mut dw = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((self.out_features, self.in_features))
                .unwrap();
            general_mat_mul(1.0, &g.t(), &x, 1.0, &mut dw);
        }
        let db = g.sum_axis(Axis(0));
        self.bias.grad.zip_mut_with(&db.into_dyn(), |a, b| *a += b);
        let dx = g.dot(&self.weight_matrix());
        dx.into_shape_with_order((n, self.in_features, 1, 1)).unwrap()
    }

    fn output_shape(&self, _: [usize; 3]) -> [usize; 3] {
        [self.out_features, 1, 1]
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }

    fn clear(&mut self) {
        self.input = None;
    }
}

/// Inverted dropout: active only in training, scaled by `1 / (1 - rate)`.
pub struct Dropout {
    rate: f32,
    mask: Option<Array4<f32>>,
}

impl Dropout {
    pub fn new(rate: f32) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate in [0, 1)");
        Dropout { rate, mask: None }
    }

    pub fn rate(&self) -> f32 {
        self.rate
    }
}

impl Layer for Dropout {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        if !ctx.train || self.rate == 0.0 {
            self.mask = None;
            return x;
        }
        let keep = 1.0 - self.rate;
        let mask = x.mapv(|_| {
            if ctx.rng.random::<f32>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let y = &x * &mask;
        if ctx.keep {
            self.mask = Some(mask);
        }
        y
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        match self.mask.take() {
            Some(m) => grad * m,
            None => grad,
        }
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn clear(&mut self) {
        self.mask = None;
    }
}

/// Fixed per-channel `(x - mean) / std`.
pub struct Normalize {
    mean: [f32; 3],
    std: [f32; 3],
}

impl Normalize {
    pub fn new(mean: [f32; 3], std: [f32; 3]) -> Self {
        Normalize { mean, std }
    }
}

impl Layer for Normalize {
    fn forward(&mut self, mut x: Array4<f32>, _ctx: &mut Ctx<'_>) -> Array4<f32> {
        for mut img in x.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                let (m, s) = (self.mean[c], self.std[c]);
                plane.mapv_inplace(|v| (v - m) / s);
            }
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        for mut img in grad.outer_iter_mut() {
            for (c, mut plane) in img.outer_iter_mut().enumerate() {
                let s = self.std[c];
                plane.mapv_inplace(|v| v / s);
            }
        }
        grad
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::nn::gradcheck;

    #[test]
    fn activation_and_pool_gradients() {
        // keep inputs away from relu's kink
        let x = gradcheck::random((2, 3, 5, 5), 1).mapv(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        gradcheck::check(&mut Relu::new(), x.clone(), true, 1e-2);
        let mut r = Relu::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = r.forward(Array4::from_elem((1, 1, 1, 2), f32::NAN), &mut Ctx::eval(&mut rng));
        assert!(y.iter().all(|v| v.is_nan()));
        let x6 = x
            .mapv(|v| v * 8.0)
            .mapv(|v| if (v - 6.0).abs() < 0.1 { v + 0.3 } else { v });
        gradcheck::check(&mut Relu::capped(6.0), x6, true, 1e-2);
        gradcheck::check(&mut Silu::new(), x.clone(), true, 1e-2);
        gradcheck::check(&mut MaxPool2d::new(2, 2, 0), x.clone(), true, 1e-2);
        gradcheck::check(&mut MaxPool2d::new(3, 2, 1), x.clone(), true, 1e-2);
        gradcheck::check(&mut GlobalAvgPool::new(), x.clone(), true, 1e-2);
        gradcheck::check(&mut Flatten::new(), x.clone(), true, 1e-2);
        gradcheck::check(&mut Normalize::new([0.1, 0.2, 0.3], [0.5, 2.0, 1.5]), x, true, 1e-2);
    }

    #[test]
    fn linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(12, 5, &mut rng);
        gradcheck::check(&mut lin, gradcheck::random((3, 12, 1, 1), 2), true, 1e-2);
    }

    #[test]
    fn dropout_train_and_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut d = Dropout::new(0.5);
        let x = Array4::<f32>::ones((4, 100, 1, 1));
        let e = d.forward(x.clone(), &mut Ctx::eval(&mut rng));
        assert_eq!(e, x);
        let t = d.forward(x.clone(), &mut Ctx::train(&mut rng));
        let zeros = t.iter().filter(|v| **v == 0.0).count();
        assert!(zeros > 120 && zeros < 280, "{zeros}");
        assert!(t.iter().all(|v| *v == 0.0 || *v == 2.0));
        gradcheck::check(&mut d, gradcheck::random((2, 10, 1, 1), 4), true, 1e-2);
    }

    #[test]
    fn shapes() {
        assert_eq!(MaxPool2d::new(3, 2, 1).output_shape([8, 112, 112]), [8, 56, 56]);
        assert_eq!(Flatten::new().output_shape([4, 7, 7]), [196, 1, 1]);
    }
}
