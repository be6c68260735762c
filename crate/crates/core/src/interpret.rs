//! Gradient-weighted class activation maps over the last convolutional
//! feature map, with PNG overlays.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{preprocess_eval, OUTPUT_SIZE};
use crate::data::SampleSource;
use crate::imaging::Image;
use crate::label::ClassLabel;
use crate::models::{batch_tensor, Model};
use crate::nn::{Ctx, Layer};
use crate::render::{colormap, write_png};
use crate::{Error, Result};

/// Weight of the colour-mapped heatmap in an overlay.
pub const OVERLAY_ALPHA: f32 = 0.4;

/// Why a heatmap carries no spatial information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degeneracy {
    /// The rectified map is zero everywhere; every value is 0.
    ZeroMap,
    /// The rectified map is a positive constant; every value is 1.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `224 × 224`, indexed `[row, column]`, in `[0, 1]`.
    pub values: Array2<f64>,
    /// The rectified map at feature resolution, before resizing.
    pub raw: Array2<f64>,
    pub target_class: ClassLabel,
    pub source_layer: String,
    pub flag: Option<Degeneracy>,
}

/// A network split at its last convolutional feature map.
pub trait CamModel {
    fn source_layer(&self) -> String;

    /// Feature map `(1, K, h, w)` and logits for a single-image batch,
    /// keeping whatever [`CamModel::feature_gradient`] needs.
    fn forward_split(&mut self, x: Array4<f32>) -> (Array4<f32>, Vec<f64>);

    /// Gradient of the logits, weighted by `grad`, with respect to the
    /// feature map of the preceding [`CamModel::forward_split`] call.
    fn feature_gradient(&mut self, grad: &[f64]) -> Array4<f32>;
}

impl CamModel for Model {
    fn source_layer(&self) -> String {
        let [c, h, w] = self.feature_shape();
        format!("{}/backbone_output[{c}x{h}x{w}]", self.spec().backbone)
    }

    fn forward_split(&mut self, x: Array4<f32>) -> (Array4<f32>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut eval = Ctx::eval(&mut rng);
        let features = self.features(x, &mut eval);
        let mut probe = Ctx::probe(eval.rng);
        let logits = self.head_forward(features.clone(), &mut probe);
        (features, logits.iter().map(|&v| v as f64).collect())
    }

    fn feature_gradient(&mut self, grad: &[f64]) -> Array4<f32> {
        let g = Array2::from_shape_fn((1, grad.len()), |(_, j)| grad[j] as f32);
        let out = self.head_backward(g);
        self.visit_params("", &mut |_, p| p.zero_grad());
        self.clear();
        out
    }
}

/// `relu(Σ_k α_k A^k)` with `α_k` the spatial mean of `∂y/∂A^k`.
pub fn weighted_activation(features: ArrayView3<f32>, grads: ArrayView3<f32>) -> Array2<f64> {
    let (k, h, w) = features.dim();
    let mut raw = Array2::<f64>::zeros((h, w));
    for c in 0..k {
        let alpha = grads.index_axis(Axis(0), c).iter().map(|&g| g as f64).sum::<f64>() / (h * w) as f64;
        if alpha == 0.0 {
            continue;
        }
        raw.zip_mut_with(&features.index_axis(Axis(0), c), |r, &a| *r += alpha * a as f64);
    }
    raw.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
    raw
}

/// Bilinear resize with half-pixel centres and clamped borders.
pub fn upsample(map: &Array2<f64>, height: usize, width: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let taps = |out: usize, len: usize, n: usize| {
        let pos = ((out as f64 + 0.5) * len as f64 / n as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = pos.floor() as usize;
        (i0, (i0 + 1).min(len - 1), pos - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| taps(x, w, width)).collect();
    Array2::from_shape_fn((height, width), |(y, x)| {
        let (y0, y1, ty) = taps(y, h, height);
        let (x0, x1, tx) = xs[x];
        let top = map[[y0, x0]] + tx * (map[[y0, x1]] - map[[y0, x0]]);
        let bottom = map[[y1, x0]] + tx * (map[[y1, x1]] - map[[y1, x0]]);
        top + ty * (bottom - top)
    })
}

impl Heatmap {
    /// Resizes a rectified map to the model input and min-max normalizes it.
    pub fn from_raw(raw: Array2<f64>, target_class: ClassLabel, source_layer: String) -> Self {
        let big = upsample(&raw, OUTPUT_SIZE, OUTPUT_SIZE);
        let lo = big.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = big.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (values, flag) = if hi <= 0.0 {
            (Array2::zeros(big.dim()), Some(Degeneracy::ZeroMap))
        } else if hi - lo <= hi * 1e-12 {
            (Array2::ones(big.dim()), Some(Degeneracy::Uniform))
        } else {
            (big.mapv(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)), None)
        };
        Heatmap {
            values,
            raw,
            target_class,
            source_layer,
            flag,
        }
    }

    /// Mean value inside and outside the half-open pixel rectangle
    /// `[x0, x1) × [y0, y1)` in heatmap coordinates.
    pub fn mean_inside_outside(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> (f64, f64) {
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0, 0usize, 0.0, 0usize);
        for ((y, x), &v) in self.values.indexed_iter() {
            if (x0..x1).contains(&x) && (y0..y1).contains(&y) {
                inside += v;
                n_in += 1;
            } else {
                outside += v;
                n_out += 1;
            }
        }
        (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64)
    }
}

/// GradCAM for `target` on an image of any size; the image is resized to
/// the model input first.
pub fn gradcam<M: CamModel + ?Sized>(model: &mut M, image: &Image, target: ClassLabel) -> Result<Heatmap> {
    let frame = preprocess_eval(image);
    let (features, logits) = model.forward_split(batch_tensor(&[frame]));
    if features.shape()[2] == 0 || features.shape()[3] == 0 {
        return Err(Error::invalid("model has no spatial feature map"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite logits in gradcam"));
    }
    let mut onehot = vec![0.0; logits.len()];
    onehot[target.index()] = 1.0;
    let grads = model.feature_gradient(&onehot);
    let raw = weighted_activation(features.index_axis(Axis(0), 0), grads.index_axis(Axis(0), 0));
    Ok(Heatmap::from_raw(raw, target, model.source_layer()))
}

/// Path of the grayscale sidecar written next to an overlay.
pub fn sidecar_path(overlay: &Path) -> PathBuf {
    let stem = overlay.file_stem().and_then(|s| s.to_str()).unwrap_or("heatmap");
    overlay.with_file_name(format!("{stem}_heatmap.png"))
}

/// The model-resolution image blended with the colour-mapped heatmap.
pub fn overlay_image(image: &Image, heatmap: &Heatmap) -> Vec<u8> {
    let frame = preprocess_eval(image);
    let mut out = Vec::with_capacity(OUTPUT_SIZE * OUTPUT_SIZE * 3);
    for y in 0..OUTPUT_SIZE {
        for x in 0..OUTPUT_SIZE {
            let base = frame.pixel(x, y);
            let heat = colormap(heatmap.values[[y, x]] as f32);
            for c in 0..3 {
                let v = (1.0 - OVERLAY_ALPHA) * base[c].clamp(0.0, 1.0) * 255.0 + OVERLAY_ALPHA * heat[c] as f32;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Writes the overlay PNG at `path` and the heatmap as 8-bit grayscale
/// beside it.
pub fn overlay(image: &Image, heatmap: &Heatmap, path: &Path) -> Result<()> {
    let text = [
        ("target_class", heatmap.target_class.to_string()),
        ("source_layer", heatmap.source_layer.clone()),
    ];
    write_png(
        path,
        OUTPUT_SIZE,
        OUTPUT_SIZE,
        png::ColorType::Rgb,
        &overlay_image(image, heatmap),
        &text,
    )?;
    let gray: Vec<u8> = heatmap.values.iter().map(|&v| (v * 255.0).round() as u8).collect();
    write_png(
        &sidecar_path(path),
        OUTPUT_SIZE,
        OUTPUT_SIZE,
        png::ColorType::Grayscale,
        &gray,
        &text,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CamRecord {
    pub image_id: String,
    pub true_class: ClassLabel,
    pub predicted_class: ClassLabel,
    pub target_class: ClassLabel,
    pub overlay: PathBuf,
    pub flag: Option<Degeneracy>,
}

/// Overlays for every sample as `<image_id>_<class>.png`, targeting the
/// predicted class unless `target` is given.
pub fn gradcam_batch(
    model: &mut Model,
    samples: &dyn SampleSource,
    target: Option<ClassLabel>,
    out_dir: &Path,
) -> Result<Vec<CamRecord>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let image = samples.original(i)?;
        let predicted = ClassLabel::from_index(model.predict(&[preprocess_eval(&image)])?[0].argmax())
            .expect("argmax is a class index");
        let class = target.unwrap_or(predicted);
        let heatmap = gradcam(model, &image, class)?;
        let path = out_dir.join(format!("{}_{}.png", samples.id(i), class));
        overlay(&image, &heatmap, &path)?;
        records.push(CamRecord {
            image_id: samples.id(i).to_string(),
            true_class: samples.label(i),
            predicted_class: predicted,
            target_class: class,
            overlay: path,
            flag: heatmap.flag,
        });
    }
    let index = out_dir.join("gradcam.json");
    std::fs::write(&index, serde_json::to_string_pretty(&records)?).map_err(|e| Error::io(&index, e))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};
    use crate::render::read_png;
    use ndarray::{array, Array3};

    /// One-channel 2×2 feature map fixed by hand, followed by global
    /// average pooling and a linear layer.
    struct HandModel {
        features: Array3<f32>,
        weights: Vec<f64>,
    }

    impl CamModel for HandModel {
        fn source_layer(&self) -> String {
            "hand".into()
        }

        fn forward_split(&mut self, _x: Array4<f32>) -> (Array4<f32>, Vec<f64>) {
            let mean = self.features.iter().map(|&v| v as f64).sum::<f64>() / 4.0;
            let f = self.features.clone().insert_axis(Axis(0));
            (f, self.weights.iter().map(|w| w * mean).collect())
        }

        fn feature_gradient(&mut self, grad: &[f64]) -> Array4<f32> {
            let g: f64 = grad.iter().zip(&self.weights).map(|(a, w)| a * w).sum();
            Array4::from_elem((1, 1, 2, 2), (g / 4.0) as f32)
        }
    }

    fn hand(w: f64) -> HandModel {
        let mut weights = vec![0.0; 7];
        weights[ClassLabel::Mel.index()] = w;
        HandModel {
            features: array![[[1.0, 2.0], [3.0, 4.0]]],
            weights,
        }
    }

    #[test]
    fn hand_model_closed_form() {
        let img = Image::filled(10, 10, [0.5; 3]);
        let h = gradcam(&mut hand(2.0), &img, ClassLabel::Mel).unwrap();
        // α = 2/4, raw = α·A
        assert_eq!(h.raw, array![[0.5, 1.0], [1.5, 2.0]]);
        assert_eq!(h.flag, None);
        // raw is affine in position, 0.5 + 0.5·sx + sy, so bilinear resizing
        // reproduces it exactly at source coordinate s = (i + 0.5)/112 - 0.5
        // clamped to [0, 1]; min-max then gives (sx + 2·sy) / 3.
        let coord = |i: usize| ((i as f64 + 0.5) / 112.0 - 0.5).clamp(0.0, 1.0);
        for &(y, x) in &[(0, 0), (223, 223), (0, 223), (100, 37), (112, 112), (57, 190)] {
            let expect = (coord(x) + 2.0 * coord(y)) / 3.0;
            assert!((h.values[[y, x]] - expect).abs() < 1e-6, "({y},{x})");
        }
    }

    #[test]
    fn negative_evidence_is_rectified_away() {
        let img = Image::filled(10, 10, [0.5; 3]);
        let h = gradcam(&mut hand(-1.0), &img, ClassLabel::Mel).unwrap();
        assert!(h.raw.iter().all(|&v| v == 0.0));
        assert_eq!(h.flag, Some(Degeneracy::ZeroMap));
        assert!(h.values.iter().all(|&v| v == 0.0));
        let other = gradcam(&mut hand(1.0), &img, ClassLabel::Nv).unwrap();
        assert_eq!(other.flag, Some(Degeneracy::ZeroMap));
    }

    #[test]
    fn constant_features_are_flagged_uniform() {
        let mut m = hand(1.0);
        m.features.fill(3.0);
        let h = gradcam(&mut m, &Image::filled(4, 4, [0.1; 3]), ClassLabel::Mel).unwrap();
        assert_eq!(h.flag, Some(Degeneracy::Uniform));
        assert!(h.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn real_backbone_contract_and_no_gradient_leak() {
        let mut model = build_model(&ModelSpec::tiny()).unwrap();
        let img = Image::from_fn(60, 45, |x, y| [(x % 7) as f32 / 7.0, (y % 5) as f32 / 5.0, 0.3]);
        for class in ClassLabel::ALL {
            let h = gradcam(&mut model, &img, class).unwrap();
            assert_eq!(h.values.dim(), (224, 224));
            assert_eq!(h.raw.dim(), (7, 7));
            assert!(h.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(h.raw.iter().all(|&v| v >= 0.0));
            if h.flag.is_none() {
                assert_eq!(h.values.iter().copied().fold(0.0, f64::max), 1.0);
            }
        }
        let mut grads = 0.0;
        model.visit_params("", &mut |_, p| {
            grads += p.grad.iter().map(|g| g.abs() as f64).sum::<f64>()
        });
        assert_eq!(grads, 0.0);
        let a = gradcam(&mut model, &img, ClassLabel::Bcc).unwrap();
        let b = gradcam(&mut model, &img, ClassLabel::Bcc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn overlay_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(30, 20, |x, _| [x as f32 / 30.0, 0.2, 0.7]);
        let h = gradcam(&mut hand(1.0), &img, ClassLabel::Mel).unwrap();
        let path = dir.path().join("x_mel.png");
        overlay(&img, &h, &path).unwrap();
        let rgb = read_png(&path).unwrap();
        assert_eq!((rgb.width, rgb.height, rgb.channels), (224, 224, 3));
        let gray = read_png(&sidecar_path(&path)).unwrap();
        assert_eq!(gray.channels, 1);
        for (v, &g) in h.values.iter().zip(&gray.data) {
            assert!((v - g as f64 / 255.0).abs() <= 0.5 / 255.0 + 1e-12);
        }

        let zero = gradcam(&mut hand(-1.0), &img, ClassLabel::Mel).unwrap();
        let blended = overlay_image(&img, &zero);
        let frame = preprocess_eval(&img);
        let c0 = colormap(0.0);
        for (i, px) in blended.chunks(3).enumerate() {
            let base = frame.pixel(i % 224, i / 224);
            for c in 0..3 {
                let e = (0.6 * base[c] * 255.0 + 0.4 * c0[c] as f32).round();
                assert_eq!(px[c] as f32, e);
            }
        }
        assert_eq!(blended, overlay_image(&img, &zero));
    }
}
