use ndarray::{ArrayD, Zip};

use super::{Layer, Param};

/// Adam with bias correction. State is matched to parameters by visiting
/// order, which is fixed for a given network.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(ArrayD<f32>, ArrayD<f32>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, net: &mut dyn Layer) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = (self.lr * c2.sqrt() / c1) as f32;
        let (b1, b2, eps) = (self.beta1 as f32, self.beta2 as f32, (self.eps * c2.sqrt()) as f32);
        let moments = &mut self.moments;
        let mut i = 0;
        net.visit_params("", &mut |_, p: &mut Param| {
            if !p.trainable {
                return;
            }
            if moments.len() <= i {
                moments.push((ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            }
            let (m, v) = &mut moments[i];
            Zip::from(&mut p.value)
                .and(&mut p.grad)
                .and(m)
                .and(v)
                .for_each(|w, g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * *g;
                    *v = b2 * *v + (1.0 - b2) * *g * *g;
                    *w -= step_size * *m / (v.sqrt() + eps);
                    *g = 0.0;
                });
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{Ctx, Linear};

    #[test]
    fn first_step_moves_by_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new(2, 1, &mut rng);
        let before = lin.weight.value.clone();
        lin.forward(Array4::ones((1, 2, 1, 1)), &mut Ctx::train(&mut rng));
        lin.backward(Array4::ones((1, 1, 1, 1)));
        let mut adam = Adam::new(0.01);
        adam.step(&mut lin);
        // the bias-corrected first step is lr * sign(g)
        for (a, b) in lin.weight.value.iter().zip(before.iter()) {
            assert!((b - a - 0.01).abs() < 1e-6);
        }
        assert!(lin.weight.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn minimizes_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::new(3, 1, &mut rng);
        let mut adam = Adam::new(0.05);
        let x = Array4::from_shape_vec((1, 3, 1, 1), vec![1.0, -2.0, 0.5]).unwrap();
        for _ in 0..400 {
            let y = lin.forward(x.clone(), &mut Ctx::train(&mut rng));
            let err = y[[0, 0, 0, 0]] - 3.0;
            lin.backward(Array4::from_elem((1, 1, 1, 1), 2.0 * err));
            adam.step(&mut lin);
        }
        let y = lin.forward(x, &mut Ctx::eval(&mut rng));
        assert!((y[[0, 0, 0, 0]] - 3.0).abs() < 1e-2);
    }
}
