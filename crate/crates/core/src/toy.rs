//! A synthetic seven-class dataset in the on-disk layout of the real one:
//! each class is a coloured shape on a noisy skin-tone background, some
//! lesions are photographed twice, and every object's bounding box is
//! recorded for localization checks.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Image;
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::seed::rng_for;
use crate::{Error, Result};

pub const METADATA_FILE: &str = "metadata.csv";
pub const BOXES_FILE: &str = "toy_boxes.csv";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    pub lesions_per_class: usize,
    /// Lesions per class that get a second image.
    pub duplicates_per_class: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            lesions_per_class: 70,
            duplicates_per_class: 30,
            width: 96,
            height: 72,
            seed: 0,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.lesions_per_class == 0 {
            return Err(Error::Config("lesions_per_class must be positive".into()));
        }
        if self.duplicates_per_class > self.lesions_per_class {
            return Err(Error::Config("duplicates_per_class exceeds lesions_per_class".into()));
        }
        if self.width < 32 || self.height < 32 {
            return Err(Error::Config("toy images must be at least 32×32".into()));
        }
        Ok(())
    }

    pub fn n_images(&self) -> usize {
        NUM_CLASSES * (self.lesions_per_class + self.duplicates_per_class)
    }
}

/// Object bounding box in source pixels, half-open: `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    /// The box after stretching a `width × height` image to `size × size`.
    pub fn scaled(&self, width: usize, height: usize, size: usize) -> BoundingBox {
        let sx = size as f64 / width as f64;
        let sy = size as f64 / height as f64;
        BoundingBox {
            x0: (self.x0 as f64 * sx).floor() as usize,
            y0: (self.y0 as f64 * sy).floor() as usize,
            x1: ((self.x1 as f64 * sx).ceil() as usize).min(size),
            y1: ((self.y1 as f64 * sy).ceil() as usize).min(size),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub root: PathBuf,
    pub metadata_path: PathBuf,
    pub images_root: PathBuf,
    pub boxes: BTreeMap<String, BoundingBox>,
}

fn colour(class: ClassLabel) -> [f32; 3] {
    match class {
        ClassLabel::Akiec => [0.95, 0.55, 0.05],
        ClassLabel::Bcc => [0.15, 0.25, 0.90],
        ClassLabel::Bkl => [0.45, 0.25, 0.10],
        ClassLabel::Df => [0.10, 0.70, 0.20],
        ClassLabel::Mel => [0.05, 0.03, 0.08],
        ClassLabel::Nv => [0.65, 0.15, 0.70],
        ClassLabel::Vasc => [0.90, 0.05, 0.15],
    }
}

/// Whether the offset `(dx, dy)` from the centre lies inside the class
/// shape of radius `r`.
fn inside(class: ClassLabel, dx: f32, dy: f32, r: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match class {
        ClassLabel::Akiec => ax <= r && ay <= r,
        ClassLabel::Bcc => dy <= r && dy >= -r && ax <= (dy + r) / 2.0,
        ClassLabel::Bkl => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= 0.55 * r
        }
        ClassLabel::Df => (ax <= r && ay <= 0.3 * r) || (ay <= r && ax <= 0.3 * r),
        ClassLabel::Mel => dx * dx + dy * dy <= r * r,
        ClassLabel::Nv => (dx / r).powi(2) + (dy / (0.55 * r)).powi(2) <= 1.0,
        ClassLabel::Vasc => ax + ay <= r,
    }
}

/// One toy image of `class` and the box around its object.
pub fn render_sample(class: ClassLabel, width: usize, height: usize, rng: &mut impl Rng) -> (Image, BoundingBox) {
    let tint: f32 = rng.random_range(-0.06..0.06);
    let skin = [0.87 + tint, 0.68 + tint, 0.58 + tint];
    let r = rng.random_range(0.16..0.24) * height as f32;
    let margin = r.ceil() + 2.0;
    let cx = rng.random_range(margin..width as f32 - margin);
    let cy = rng.random_range(margin..height as f32 - margin);
    let fill = colour(class).map(|c| (c + rng.random_range(-0.05..0.05f32)).clamp(0.0, 1.0));
    let mut img = Image::filled(width, height, skin);
    let (mut x0, mut y0, mut x1, mut y1) = (width, height, 0, 0);
    for y in 0..height {
        for x in 0..width {
            let noise: f32 = rng.random_range(-0.05..0.05);
            let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
            let px = if inside(class, dx, dy, r) {
                (x0, y0, x1, y1) = (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1));
                fill
            } else {
                skin
            };
            img.set_pixel(x, y, px.map(|c| (c + noise).clamp(0.0, 1.0)));
        }
    }
    (img, BoundingBox { x0, y0, x1, y1 })
}

fn write_jpeg(img: &Image, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = image::codecs::jpeg::JpegEncoder::new_with_quality(std::io::BufWriter::new(file), 95);
    enc.encode_image(&img.to_rgb8()).map_err(|e| Error::Image {
        image_id: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Writes `metadata.csv`, `toy_boxes.csv` and `images/*.jpg` under `root`.
pub fn generate_toy(root: &Path, spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let images_root = root.join(IMAGES_DIR);
    std::fs::create_dir_all(&images_root).map_err(|e| Error::io(&images_root, e))?;

    let mut order = vec![];
    for class in ClassLabel::ALL {
        for l in 0..spec.lesions_per_class {
            order.push((class, l, 0));
            if l < spec.duplicates_per_class {
                order.push((class, l, 1));
            }
        }
    }
    order.shuffle(&mut rng_for(spec.seed, &[0]));

    let mut rows = vec![];
    let mut boxes = BTreeMap::new();
    for (n, &(class, l, shot)) in order.iter().enumerate() {
        let lesion_id = format!("HAM_{:07}", class.index() * 10_000 + l);
        let image_id = format!("ISIC_{:07}", n + 1);
        let mut rng = rng_for(spec.seed, &[1, class.index() as u64, l as u64, shot]);
        let (img, bbox) = render_sample(class, spec.width, spec.height, &mut rng);
        write_jpeg(&img, &images_root.join(format!("{image_id}.jpg")))?;
        let sex = if rng.random_bool(0.5) { "male" } else { "female" };
        let age = 5 * rng.random_range(4..17u32);
        rows.push(format!("{lesion_id},{image_id},{class},histo,{age}.0,{sex},back"));
        boxes.insert(image_id, bbox);
    }

    let metadata_path = root.join(METADATA_FILE);
    let mut meta = String::from("lesion_id,image_id,dx,dx_type,age,sex,localization\n");
    for r in &rows {
        meta.push_str(r);
        meta.push('\n');
    }
    std::fs::write(&metadata_path, meta).map_err(|e| Error::io(&metadata_path, e))?;
    save_boxes(&root.join(BOXES_FILE), &boxes)?;
    Ok(ToyDataset {
        root: root.to_path_buf(),
        metadata_path,
        images_root,
        boxes,
    })
}

pub fn save_boxes(path: &Path, boxes: &BTreeMap<String, BoundingBox>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut body = String::from("image_id,x0,y0,x1,y1\n");
    for (id, b) in boxes {
        body.push_str(&format!("{id},{},{},{},{}\n", b.x0, b.y0, b.x1, b.y1));
    }
    out.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_boxes(path: &Path) -> Result<BTreeMap<String, BoundingBox>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Catalog {
        row: 0,
        message: format!("{}: {e}", path.display()),
    })?;
    let mut out = BTreeMap::new();
    for (i, row) in rdr.deserialize::<(String, usize, usize, usize, usize)>().enumerate() {
        let (id, x0, y0, x1, y1) = row.map_err(|e| Error::Catalog {
            row: i + 2,
            message: e.to_string(),
        })?;
        out.insert(id, BoundingBox { x0, y0, x1, y1 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{distinct_lesions, load_catalog};

    #[test]
    fn layout_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySpec {
            lesions_per_class: 4,
            duplicates_per_class: 2,
            ..ToySpec::default()
        };
        let toy = generate_toy(dir.path(), &spec).unwrap();
        let records = load_catalog(&toy.metadata_path, &toy.images_root).unwrap();
        assert_eq!(records.len(), spec.n_images());
        assert_eq!(distinct_lesions(&records), 28);
        for class in ClassLabel::ALL {
            assert_eq!(records.iter().filter(|r| r.label == class).count(), 6);
        }
        assert_eq!(load_boxes(&dir.path().join(BOXES_FILE)).unwrap(), toy.boxes);
        let img = Image::open(&records[0].image_path).unwrap();
        assert_eq!((img.width(), img.height()), (96, 72));
    }

    #[test]
    fn boxes_cover_the_object() {
        let mut rng = rng_for(3, &[]);
        for class in ClassLabel::ALL {
            let (img, b) = render_sample(class, 96, 72, &mut rng);
            assert!(b.x0 < b.x1 && b.y0 < b.y1 && b.x1 <= 96 && b.y1 <= 72);
            let c = colour(class);
            let far = |p: [f32; 3]| (0..3).map(|k| (p[k] - c[k]).abs()).sum::<f32>() < 0.35;
            let mut hits = 0;
            for y in 0..72 {
                for x in 0..96 {
                    if far(img.pixel(x, y)) {
                        hits += 1;
                        assert!((b.x0..b.x1).contains(&x) && (b.y0..b.y1).contains(&y));
                    }
                }
            }
            assert!(hits > 20, "{class}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = ToySpec {
            lesions_per_class: 2,
            duplicates_per_class: 1,
            ..ToySpec::default()
        };
        generate_toy(a.path(), &spec).unwrap();
        generate_toy(b.path(), &spec).unwrap();
        let read = |p: &Path| std::fs::read(p).unwrap();
        assert_eq!(read(&a.path().join(METADATA_FILE)), read(&b.path().join(METADATA_FILE)));
        assert_eq!(
            read(&a.path().join("images/ISIC_0000003.jpg")),
            read(&b.path().join("images/ISIC_0000003.jpg"))
        );
    }

    #[test]
    fn scaled_box() {
        let b = BoundingBox {
            x0: 10,
            y0: 9,
            x1: 20,
            y1: 18,
        };
        assert_eq!(
            b.scaled(96, 72, 224),
            BoundingBox {
                x0: 23,
                y0: 28,
                x1: 47,
                y1: 56
            }
        );
    }
}
