//! Seeded transform pipelines: evaluation preprocessing, training
//! augmentation and test-time augmentation variants.
//!
//! Training order: rotation, horizontal/vertical flips, area crop, cutout,
//! final resize. The random steps work in a frame whose shorter side is
//! [`WORK_SHORT_SIDE`] pixels so cutout sizes are independent of the source
//! resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::seed;

pub const OUTPUT_SIZE: usize = 224;
pub const WORK_SHORT_SIDE: usize = 256;
pub const DEFAULT_TTA_N: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformSpec {
    pub rotate: bool,
    pub max_degrees: f32,
    pub hflip: bool,
    pub vflip: bool,
    /// Probability of each flip.
    pub flip_p: f64,
    pub crop: bool,
    /// Crop area as a fraction of the frame, aspect ratio preserved.
    pub crop_scale: (f64, f64),
    pub cutout: bool,
    pub cutout_side: usize,
    pub cutout_count: usize,
    pub output_size: (usize, usize),
}

impl Default for TransformSpec {
    fn default() -> Self {
        TransformSpec {
            rotate: true,
            max_degrees: 180.0,
            hflip: true,
            vflip: true,
            flip_p: 0.5,
            crop: true,
            crop_scale: (0.8, 1.0),
            cutout: true,
            cutout_side: 32,
            cutout_count: 1,
            output_size: (OUTPUT_SIZE, OUTPUT_SIZE),
        }
    }
}

impl TransformSpec {
    /// Every toggle off.
    pub fn identity() -> Self {
        TransformSpec {
            rotate: false,
            hflip: false,
            vflip: false,
            crop: false,
            cutout: false,
            ..Default::default()
        }
    }

    /// Flips and rotation only; used for test-time augmentation.
    pub fn light_tta() -> Self {
        TransformSpec {
            crop: false,
            cutout: false,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.rotate || self.hflip || self.vflip || self.crop || self.cutout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.output_size != (OUTPUT_SIZE, OUTPUT_SIZE) {
            return Err(Error::Config(format!(
                "output_size must be {OUTPUT_SIZE}x{OUTPUT_SIZE}, got {:?}",
                self.output_size
            )));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_p) {
            return Err(Error::Config(format!("flip_p must lie in [0, 1], got {}", self.flip_p)));
        }
        if !(self.max_degrees >= 0.0 && self.max_degrees.is_finite()) {
            return Err(Error::Config("max_degrees must be finite and non-negative".into()));
        }
        if self.cutout && (self.cutout_side == 0 || self.cutout_side >= OUTPUT_SIZE) {
            return Err(Error::Config(format!(
                "cutout_side must lie in [1, {OUTPUT_SIZE}), got {}",
                self.cutout_side
            )));
        }
        Ok(())
    }
}

pub fn preprocess_eval(img: &Image) -> Image {
    img.resize(OUTPUT_SIZE, OUTPUT_SIZE)
}

fn to_work_frame(img: &Image) -> Image {
    let short = img.width().min(img.height()) as f64;
    let scale = WORK_SHORT_SIDE as f64 / short;
    let w = ((img.width() as f64 * scale).round() as usize).max(WORK_SHORT_SIDE);
    let h = ((img.height() as f64 * scale).round() as usize).max(WORK_SHORT_SIDE);
    img.resize(w, h)
}

/// A zeroed square as `(x, y, side)`.
pub type Hole = (usize, usize, usize);

/// Applies the random steps of `spec` and returns the pre-resize frame
/// together with the cutout squares that were zeroed.
pub fn augment_frame(img: &Image, spec: &TransformSpec, seed: u64) -> Result<(Image, Vec<Hole>)> {
    spec.validate()?;
    let mut rng = seed::rng(seed);
    let mut frame = to_work_frame(img);
    if spec.rotate {
        let deg = rng.random_range(-spec.max_degrees..=spec.max_degrees);
        frame = frame.rotate(deg);
    }
    if spec.hflip && rng.random_bool(spec.flip_p) {
        frame = frame.hflip();
    }
    if spec.vflip && rng.random_bool(spec.flip_p) {
        frame = frame.vflip();
    }
    if spec.crop {
        let scale = rng.random_range(spec.crop_scale.0..=spec.crop_scale.1).sqrt();
        let w = ((frame.width() as f64 * scale).round() as usize).clamp(1, frame.width());
        let h = ((frame.height() as f64 * scale).round() as usize).clamp(1, frame.height());
        let x0 = rng.random_range(0..=frame.width() - w);
        let y0 = rng.random_range(0..=frame.height() - h);
        frame = frame.crop(x0, y0, w, h)?;
    }
    let mut holes = Vec::new();
    if spec.cutout {
        let side = spec.cutout_side;
        if side > frame.width() || side > frame.height() {
            return Err(Error::Config(format!(
                "cutout side {side} exceeds the {}x{} frame",
                frame.width(),
                frame.height()
            )));
        }
        for _ in 0..spec.cutout_count {
            let x0 = rng.random_range(0..=frame.width() - side);
            let y0 = rng.random_range(0..=frame.height() - side);
            frame.zero_square(x0, y0, side);
            holes.push((x0, y0, side));
        }
    }
    Ok((frame, holes))
}

/// Random training augmentation, deterministic in `(img, spec, seed)`.
pub fn augment_train(img: &Image, spec: &TransformSpec, seed: u64) -> Result<Image> {
    if spec.is_identity() {
        spec.validate()?;
        return Ok(preprocess_eval(img));
    }
    let (frame, _) = augment_frame(img, spec, seed)?;
    Ok(frame.resize(OUTPUT_SIZE, OUTPUT_SIZE))
}

/// `n` test-time variants: the plain evaluation image first, then light
/// augmentations seeded from `seed`.
pub fn tta_variants(img: &Image, n: usize, seed: u64) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::invalid("tta_variants needs n >= 1"));
    }
    let spec = TransformSpec::light_tta();
    let mut out = Vec::with_capacity(n);
    out.push(preprocess_eval(img));
    for i in 1..n {
        out.push(augment_train(img, &spec, seed::derive_seed(seed, &[i as u64]))?);
    }
    Ok(out)
}
