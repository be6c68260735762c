use ndarray::{Array1, Array4, ArrayD, IxDyn};

use super::{join, Ctx, Layer, Param, ParamVisitor};

/// Batch normalization over `(n, h, w)` per channel, with running
/// statistics (momentum 0.1, unbiased variance) used at evaluation.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    channels: usize,
    momentum: f32,
    eps: f32,
    cache: Option<Cache>,
}

struct Cache {
    xhat: Array4<f32>,
    inv_std: Array1<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: Param::buffer(ArrayD::zeros(IxDyn(&[channels]))),
            running_var: Param::buffer(ArrayD::ones(IxDyn(&[channels]))),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }
}

impl Layer for BatchNorm2d {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let mut x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batchnorm channels");
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut inv_std = Array1::<f32>::zeros(c);
        let batch_stats = ctx.train;
        let xs = x.as_slice_mut().unwrap();
        for ch in 0..c {
            let (mean, var) = if batch_stats {
                let mut sum = 0.0f64;
                let mut sq = 0.0f64;
                for b in 0..n {
                    for &v in &xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                        sum += v as f64;
                        sq += v as f64 * v as f64;
                    }
                }
                let mean = sum / count;
                let var = (sq / count - mean * mean).max(0.0);
                let rm = &mut self.running_mean.value[ch];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * mean as f32;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let rv = &mut self.running_var.value[ch];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * unbiased as f32;
                (mean as f32, var as f32)
            } else {
                (self.running_mean.value[ch], self.running_var.value[ch])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, bta) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                for v in &mut xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = (*v - mean) * is;
                }
            }
            if ctx.keep {
                continue;
            }
            for b in 0..n {
                for v in &mut xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = *v * g + bta;
                }
            }
        }
        if !ctx.keep {
            return x;
        }
        let xhat = x.clone();
        let xs = x.as_slice_mut().unwrap();
        for ch in 0..c {
            let (g, bta) = (self.gamma.value[ch], self.beta.value[ch]);
            for b in 0..n {
                for v in &mut xs[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                    *v = *v * g + bta;
                }
            }
        }
        self.cache = Some(Cache {
            xhat,
            inv_std,
            batch_stats,
        });
        x
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let Cache {
            xhat,
            inv_std,
            batch_stats,
        } = self.cache.take().expect("batchnorm backward without forward");
        let mut g = grad.as_standard_layout().into_owned();
        let (n, c, h, w) = g.dim();
        let plane = h * w;
        let count = (n * plane) as f32;
        let xh = xhat.as_slice().unwrap();
        let gs = g.as_slice_mut().unwrap();
        for ch in 0..c {
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (gv, xv) in gs[r.clone()].iter().zip(&xh[r]) {
                    sum_g += *gv as f64;
                    sum_gx += (*gv * *xv) as f64;
                }
            }
            self.gamma.grad[ch] += sum_gx as f32;
            self.beta.grad[ch] += sum_g as f32;
            let scale = self.gamma.value[ch] * inv_std[ch];
            let (mg, mgx) = ((sum_g as f32) / count, (sum_gx as f32) / count);
            for b in 0..n {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for (gv, xv) in gs[r.clone()].iter_mut().zip(&xh[r]) {
                    *gv = if batch_stats {
                        scale * (*gv - mg - xv * mgx)
                    } else {
                        scale * *gv
                    };
                }
            }
        }
        g
    }

    fn output_shape(&self, input: [usize; 3]) -> [usize; 3] {
        input
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }

    fn clear(&mut self) {
        self.cache = None;
    }
}
