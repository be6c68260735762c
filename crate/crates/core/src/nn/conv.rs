use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayViewMut2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{join, Ctx, Layer, Param, ParamVisitor};

/// 2-D convolution with square kernels, zero padding and channel groups.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    /// The first layer of a network has no use for an input gradient.
    pub input_grad: bool,
    input: Option<Array4<f32>>,
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(groups > 0 && in_channels.is_multiple_of(groups) && out_channels.is_multiple_of(groups));
        let cg = in_channels / groups;
        let fan_in = cg * kernel * kernel;
        Conv2d {
            weight: Param::he_normal(&[out_channels, cg, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            input_grad: true,
            input: None,
        }
    }

    /// `kernel`×`kernel`, padding `kernel / 2`, one group, no bias.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d::new(in_channels, out_channels, kernel, stride, kernel / 2, 1, false, rng)
    }

    pub fn depthwise(channels: usize, kernel: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv2d::new(channels, channels, kernel, stride, kernel / 2, channels, false, rng)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let span = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        Geometry {
            h,
            w,
            oh: span(h),
            ow: span(w),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unfolds channels `c0..c0 + cols.nrows() / k²` of one image.
    fn im2col(&self, img: &[f32], c0: usize, g: &Geometry, cols: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = g.h * g.w;
        let ohw = g.oh * g.ow;
        let channels = cols.len() / (ohw * k * k);
        for c in 0..channels {
            let src = &img[(c0 + c) * plane..(c0 + c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p;
                        let out = &mut row[oy * g.ow..(oy + 1) * g.ow];
                        if iy < 0 || iy >= g.h as isize {
                            out.fill(0.0);
                            continue;
                        }
                        let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *o = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], c0: usize, g: &Geometry, img: &mut [f32]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = g.h * g.w;
        let ohw = g.oh * g.ow;
        let channels = cols.len() / (ohw * k * k);
        for c in 0..channels {
            let dst = &mut img[(c0 + c) * plane..(c0 + c + 1) * plane];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * ohw..][..ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for (ox, v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < g.w as isize {
                                line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    fn weight_matrix(&self) -> ArrayView2<'_, f32> {
        let cols = self.in_channels / self.groups * self.kernel * self.kernel;
        self.weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, cols))
            .expect("contiguous weight")
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: Array4<f32>, ctx: &mut Ctx<'_>) -> Array4<f32> {
        let x = x.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let g = self.geometry(h, w);
        let ohw = g.oh * g.ow;
        let cg = c / self.groups;
        let og = self.out_channels / self.groups;
        let kk = self.kernel * self.kernel;
        let wm = self.weight_matrix();
        let mut y = Array4::<f32>::zeros((n, self.out_channels, g.oh, g.ow));
        let mut cols = Array2::<f32>::zeros((cg * kk, ohw));
        let xs = x.as_slice().expect("standard layout");
        for b in 0..n {
            let img = &xs[b * c * h * w..(b + 1) * c * h * w];
            let mut yb = y.index_axis_mut(Axis(0), b);
            let mut ym = yb
                .view_mut()
                .into_shape_with_order((self.out_channels, ohw))
                .expect("contiguous output");
            for grp in 0..self.groups {
                let wg = wm.slice(s![grp * og..(grp + 1) * og, ..]);
                let mut yg = ym.slice_mut(s![grp * og..(grp + 1) * og, ..]);
                if self.is_pointwise() {
                    let xg = ArrayView2::from_shape((cg, ohw), &img[grp * cg * ohw..(grp + 1) * cg * ohw])
                        .expect("pointwise view");
                    general_mat_mul(1.0, &wg, &xg, 0.0, &mut yg);
                } else {
                    self.im2col(img, grp * cg, &g, cols.as_slice_mut().unwrap());
                    general_mat_mul(1.0, &wg, &cols, 0.0, &mut yg);
                }
            }
            if let Some(bias) = &self.bias {
                for (o, mut plane) in ym.outer_iter_mut().enumerate() {
                    let bv = bias.value[o];
                    plane.mapv_inplace(|v| v + bv);
                }
            }
        }
        if ctx.keep {
            self.input = Some(x);
        }
        y
    }

    fn backward(&mut self, grad: Array4<f32>) -> Array4<f32> {
        let x = self.input.take().expect("conv backward without cached forward");
        let grad = grad.as_standard_layout().into_owned();
        let (n, c, h, w) = x.dim();
        let g = self.geometry(h, w);
        let ohw = g.oh * g.ow;
        let cg = c / self.groups;
        let og = self.out_channels / self.groups;
        let kk = self.kernel * self.kernel;
        let mut dx = Array4::<f32>::zeros(if self.input_grad { (n, c, h, w) } else { (0, c, h, w) });
        let mut cols = Array2::<f32>::zeros((cg * kk, ohw));
        let mut dcols = Array2::<f32>::zeros((cg * kk, ohw));
        let xs = x.as_slice().unwrap();
        let gs = grad.as_slice().unwrap();
        let wcols = cg * kk;
        let wm = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, wcols))
            .unwrap()
            .to_owned();
        let mut wgrad = std::mem::replace(&mut self.weight.grad, ndarray::ArrayD::zeros(ndarray::IxDyn(&[0])));
        let mut bgrad = self
            .bias
            .as_mut()
            .map(|b| std::mem::replace(&mut b.grad, ndarray::ArrayD::zeros(ndarray::IxDyn(&[0]))));
        let mut dw = ArrayViewMut2::from_shape((self.out_channels, wcols), wgrad.as_slice_mut().unwrap())
            .expect("weight grad view");
        for b in 0..n {
            let img = &xs[b * c * h * w..(b + 1) * c * h * w];
            let gb = ArrayView2::from_shape(
                (self.out_channels, ohw),
                &gs[b * self.out_channels * ohw..(b + 1) * self.out_channels * ohw],
            )
            .unwrap();
            if let Some(bg) = &mut bgrad {
                for (o, row) in gb.outer_iter().enumerate() {
                    bg[o] += row.sum();
                }
            }
            for grp in 0..self.groups {
                let gg = gb.slice(s![grp * og..(grp + 1) * og, ..]);
                let mut dwg = dw.slice_mut(s![grp * og..(grp + 1) * og, ..]);
                if self.is_pointwise() {
                    let xg = ArrayView2::from_shape((cg, ohw), &img[grp * cg * ohw..(grp + 1) * cg * ohw]).unwrap();
                    general_mat_mul(1.0, &gg, &xg.t(), 1.0, &mut dwg);
                } else {
                    self.im2col(img, grp * cg, &g, cols.as_slice_mut().unwrap());
                    general_mat_mul(1.0, &gg, &cols.t(), 1.0, &mut dwg);
                }
                if self.input_grad {
                    let wg = wm.slice(s![grp * og..(grp + 1) * og, ..]);
                    let dxs = dx.as_slice_mut().unwrap();
                    let dimg = &mut dxs[b * c * h * w..(b + 1) * c * h * w];
                    if self.is_pointwise() {
                        let mut dxg =
                            ArrayViewMut2::from_shape((cg, ohw), &mut dimg[grp * cg * ohw..(grp + 1) * cg * ohw])
                                .unwrap();
                        general_mat_mul(1.0, &wg.t(), &gg, 1.0, &mut dxg);
                    } else {
                        general_mat_mul(1.0, &wg.t(), &gg, 0.0, &mut dcols);
                        self.col2im(dcols.as_slice().unwrap(), grp * cg, &g, dimg);
                    }
                }
            }
        }
        self.weight.grad = wgrad;
        if let (Some(b), Some(g)) = (&mut self.bias, bgrad) {
            b.grad = g;
        }
        dx
    }

    fn output_shape(&self, [_, h, w]: [usize; 3]) -> [usize; 3] {
        let g = self.geometry(h, w);
        [self.out_channels, g.oh, g.ow]
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    fn clear(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::nn::gradcheck;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(1)
    }

    #[test]
    fn matches_direct_convolution() {
        let mut r = rng();
        let mut conv = Conv2d::new(3, 4, 3, 2, 1, 1, true, &mut r);
        conv.bias.as_mut().unwrap().value.fill(0.5);
        let x = gradcheck::random((2, 3, 7, 6), 4);
        let y = conv.forward(x.clone(), &mut Ctx::eval(&mut r));
        assert_eq!(y.dim(), (2, 4, 4, 3));
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..4 {
                    for ox in 0..3 {
                        let mut acc = 0.5f32;
                        for c in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                        acc += conv.weight.value[[o, c, ky, kx]] * x[[b, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((acc - y[[b, o, oy, ox]]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn gradients_dense() {
        let mut conv = Conv2d::new(3, 5, 3, 1, 1, 1, true, &mut rng());
        gradcheck::check(&mut conv, gradcheck::random((2, 3, 6, 5), 8), true, 2e-2);
    }

    #[test]
    fn gradients_strided_grouped_pointwise() {
        let mut conv = Conv2d::new(4, 4, 3, 2, 1, 2, false, &mut rng());
        gradcheck::check(&mut conv, gradcheck::random((2, 4, 7, 7), 9), true, 2e-2);
        let mut dw = Conv2d::depthwise(3, 5, 1, &mut rng());
        gradcheck::check(&mut dw, gradcheck::random((1, 3, 6, 6), 10), true, 2e-2);
        let mut pw = Conv2d::new(3, 6, 1, 1, 0, 1, true, &mut rng());
        gradcheck::check(&mut pw, gradcheck::random((2, 3, 4, 4), 11), true, 2e-2);
        let mut patch = Conv2d::new(3, 2, 4, 4, 0, 1, false, &mut rng());
        gradcheck::check(&mut patch, gradcheck::random((1, 3, 8, 8), 12), true, 2e-2);
    }
}
