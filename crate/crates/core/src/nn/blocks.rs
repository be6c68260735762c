use ndarray::{Array4, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use super::layers::{relu, sigmoid};
use super::{join, Conv2d, Ctx, Layer, ParamVisitor, Sequential, Silu};

/// `post(main(x) + shortcut(x))`, where a missing shortcut is the identity
/// and `post` is an optional rectifier.
pub struct Residual {
    main: Sequential,
    shortcut: Option<Sequential>,
    post_relu: bool,
    output: Option<Array4<f32>>,
}

impl Residual {
    pub fn new(main: Sequential, shortcut: Option<Sequential>, post_relu: bool) -> Self {
        Residual {
            main,
            shortcut,
            post_relu,
            output: None,
        }
    }
}

impl Layer for Residual {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let skip = match &mut self.shortcut {
            Some(s) => s.forward(x.clone(), ctx),
            None => x.clone(),
        };
        let mut y = self.main.forward(x, ctx);
        y += &skip;
        if self.post_relu {
            y.mapv_inplace(relu);
            if ctx.keep {
                self.output = Some(y.clone());
            }
        }
        y
    }

    fn backward(&mut self, mut grad: Array4<f32>) -> Array4<f32> {
        if self.post_relu {
            let y = self.output.take().expect("residual backward without forward");
            Zip::from(&mut grad).and(&y).for_each(|g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let skip = match &mut self.shortcut {
            Some(s) => s.backward(grad.clone()),
            None => grad.clone(),
        };
        let mut dx = self.main.backward(grad);
        dx += &skip;
        dx
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        self.main.output_shape(input)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.main.visit_params(&join(prefix, "main"), f);
        if let Some(s) = &mut self.shortcut {
            s.visit_params(&join(prefix, "shortcut"), f);
        }
    }

    fn clear(&mut self) {
        self.output = None;
        self.main.clear();
        if let Some(s) = &mut self.shortcut {
            s.clear();
        }
    }
}

/// Channel gating: `x * sigmoid(expand(silu(reduce(mean_hw(x)))))`.
pub struct SqueezeExcite {
    reduce: Conv2d,
    act: Silu,
    expand: Conv2d,
    cache: Option<(Array4<f32>, Array4<f32>)>,
}

impl SqueezeExcite {
    pub fn new(channels: usize, squeezed: usize, rng: &mut ChaCha8Rng) -> Self {
        SqueezeExcite {
            reduce: Conv2d::new(channels, squeezed, 1, 1, 0, 1, true, rng),
            act: Silu::new(),
            expand: Conv2d::new(squeezed, channels, 1, 1, 0, 1, true, rng),
            cache: None,
        }
    }
}

impl Layer for SqueezeExcite {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let pooled = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, c, h * w))
            .unwrap()
            .mean_axis(Axis(2))
            .unwrap()
            .into_shape_with_order((n, c, 1, 1))
            .unwrap();
        let z = self.reduce.forward(pooled, ctx);
        let z = self.act.forward(z, ctx);
        let gate = self.expand.forward(z, ctx).mapv(sigmoid);
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let s = gate[[b, ch, 0, 0]];
                y.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * s);
            }
        }
        if ctx.keep {
            self.cache = Some((x, gate));
        }
        y
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let (x, gate) = self.cache.take().expect("squeeze-excite backward without forward");
        let (n, c, h, w) = x.dim();
        let mut dx = grad.clone();
        let mut dgate = Array4::<f32>::zeros((n, c, 1, 1));
        for b in 0..n {
            for ch in 0..c {
                let s = gate[[b, ch, 0, 0]];
                let gplane = grad.index_axis(Axis(0), b);
                let gplane = gplane.index_axis(Axis(0), ch);
                let xplane = x.index_axis(Axis(0), b);
                let xplane = xplane.index_axis(Axis(0), ch);
                let dot: f32 = gplane.iter().zip(xplane.iter()).map(|(g, v)| g * v).sum();
                dgate[[b, ch, 0, 0]] = dot * s * (1.0 - s);
                dx.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * s);
            }
        }
        let dz = self.expand.backward(dgate);
        let dz = self.act.backward(dz);
        let dpool = self.reduce.backward(dz);
        let scale = 1.0 / (h * w) as f32;
        for b in 0..n {
            for ch in 0..c {
                let d = dpool[[b, ch, 0, 0]] * scale;
                dx.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + d);
            }
        }
        dx
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        self.reduce.visit_params(&join(prefix, "reduce"), f);
        self.expand.visit_params(&join(prefix, "expand"), f);
    }

    fn clear(&mut self) {
        self.cache = None;
        self.reduce.clear();
        self.act.clear();
        self.expand.clear();
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::nn::{gradcheck, BatchNorm2d, Relu};

    #[test]
    fn residual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let main = Sequential::new()
            .with("conv1", Conv2d::same(3, 4, 3, 2, &mut rng))
            .with("bn1", BatchNorm2d::new(4))
            .with("relu", Relu::new())
            .with("conv2", Conv2d::same(4, 4, 1, 1, &mut rng));
        let short = Sequential::new().with("conv", Conv2d::new(3, 4, 1, 2, 0, 1, false, &mut rng));
        let mut block = Residual::new(main, Some(short), true);
        gradcheck::check_with_step(&mut block, gradcheck::random((4, 3, 8, 8), 3), true, 3e-2, 1e-3);

        let main = Sequential::new().with("conv", Conv2d::same(3, 3, 3, 1, &mut rng));
        let mut ident = Residual::new(main, None, false);
        gradcheck::check(&mut ident, gradcheck::random((2, 3, 5, 5), 4), true, 2e-2);
    }

    #[test]
    fn squeeze_excite_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut se = SqueezeExcite::new(6, 2, &mut rng);
        gradcheck::check(&mut se, gradcheck::random((2, 6, 4, 4), 5), true, 2e-2);
    }
}
