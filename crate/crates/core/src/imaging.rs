//! RGB float images and the resampling primitives used by the pipelines.

use std::path::Path;

use crate::error::{Error, Result};

/// An RGB image with values in `[0, 1]`, stored row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image has a zero dimension"));
        }
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "pixel buffer of {} values does not match {width}x{height}x3",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Image { width, height, data }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Planar copy (channel, row, column), the layout networks consume.
    pub fn to_chw(&self) -> Vec<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0.0; plane * 3];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            out[i] = px[0];
            out[plane + i] = px[1];
            out[2 * plane + i] = px[2];
        }
        out
    }

    pub fn open(path: &Path) -> Result<Self> {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let img = image::open(path).map_err(|e| Error::Image {
            image_id: id,
            message: format!("{}: {e}", path.display()),
        })?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Image::new(w as usize, h as usize, rgb.into_raw())
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size")
    }

    /// Bilinear resampling with half-pixel centres and clamped borders.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        let xs: Vec<(usize, usize, f32)> = (0..width)
            .map(|x| axis_taps((x as f32 + 0.5) * sx - 0.5, self.width))
            .collect();
        let mut out = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let (y0, y1, ty) = axis_taps((y as f32 + 0.5) * sy - 0.5, self.height);
            for &(x0, x1, tx) in &xs {
                let a = self.pixel(x0, y0);
                let b = self.pixel(x1, y0);
                let c = self.pixel(x0, y1);
                let d = self.pixel(x1, y1);
                for ch in 0..3 {
                    let top = lerp(a[ch], b[ch], tx);
                    let bottom = lerp(c[ch], d[ch], tx);
                    out.push(lerp(top, bottom, ty));
                }
            }
        }
        Image {
            width,
            height,
            data: out,
        }
    }

    /// Samples at a fractional position with bilinear weights; coordinates
    /// outside the image are mirrored back inside.
    pub fn sample_reflect(&self, x: f32, y: f32) -> [f32; 3] {
        let x = reflect(x, (self.width - 1) as f32);
        let y = reflect(y, (self.height - 1) as f32);
        let (x0, x1, tx) = axis_taps(x, self.width);
        let (y0, y1, ty) = axis_taps(y, self.height);
        let a = self.pixel(x0, y0);
        let b = self.pixel(x1, y0);
        let c = self.pixel(x0, y1);
        let d = self.pixel(x1, y1);
        std::array::from_fn(|ch| lerp(lerp(a[ch], b[ch], tx), lerp(c[ch], d[ch], tx), ty))
    }

    /// Rotation about the image centre by `degrees` (counter-clockwise),
    /// keeping the frame size. Exposed corners are filled by reflection.
    pub fn rotate(&self, degrees: f32) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f32 - 1.0) / 2.0;
        let cy = (self.height as f32 - 1.0) / 2.0;
        Image::from_fn(self.width, self.height, |x, y| {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            // inverse rotation maps output pixel to source
            let sx = c * dx - s * dy + cx;
            let sy = s * dx + c * dy + cy;
            self.sample_reflect(sx, sy)
        })
    }

    pub fn hflip(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    pub fn vflip(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(x, self.height - 1 - y))
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x0 + width > self.width || y0 + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        Ok(Image::from_fn(width, height, |x, y| self.pixel(x0 + x, y0 + y)))
    }

    /// Sets a `side`×`side` square to zero.
    pub fn zero_square(&mut self, x0: usize, y0: usize, side: usize) {
        for y in y0..(y0 + side).min(self.height) {
            for x in x0..(x0 + side).min(self.width) {
                self.set_pixel(x, y, [0.0; 3]);
            }
        }
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    // clamped so rounding never leaves the [a, b] hull
    let v = a + t * (b - a);
    if a <= b {
        v.clamp(a, b)
    } else {
        v.clamp(b, a)
    }
}

#[inline]
fn axis_taps(pos: f32, len: usize) -> (usize, usize, f32) {
    let pos = pos.clamp(0.0, (len - 1) as f32);
    let i0 = pos.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, pos - i0 as f32)
}

fn reflect(v: f32, max: f32) -> f32 {
    if max <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    let m = v.abs() % period;
    if m > max {
        period - m
    } else {
        m
    }
}

impl AsRef<Image> for Image {
    fn as_ref(&self) -> &Image {
        self
    }
}
