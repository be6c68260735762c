//! Sample access for training and evaluation: decoded-image caching, the
//! [`SampleSource`] abstraction and parallel batch assembly.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::augment::{augment_train, preprocess_eval, TransformSpec};
use crate::catalog::LesionRecord;
use crate::imaging::Image;
use crate::label::ClassLabel;
use crate::Result;

/// Decodes images on first use and keeps them while the byte budget lasts.
/// Evaluation frames (resized to the model input) are cached separately
/// under the same budget.
pub struct ImageStore {
    budget: usize,
    used: AtomicUsize,
    raw: Mutex<HashMap<PathBuf, Arc<Image>>>,
    eval: Mutex<HashMap<PathBuf, Arc<Image>>>,
}

impl Default for ImageStore {
    fn default() -> Self {
        ImageStore::with_budget(1 << 30)
    }
}

impl ImageStore {
    pub fn with_budget(bytes: usize) -> Self {
        ImageStore {
            budget: bytes,
            used: AtomicUsize::new(0),
            raw: Mutex::new(HashMap::new()),
            eval: Mutex::new(HashMap::new()),
        }
    }

    fn admit(&self, img: &Image) -> bool {
        let size = img.width() * img.height() * 3 * std::mem::size_of::<f32>();
        self.used
            .fetch_update(Ordering::Relaxed, Ordering::Relaxed, |u| {
                (u + size <= self.budget).then_some(u + size)
            })
            .is_ok()
    }

    fn cached(
        &self,
        map: &Mutex<HashMap<PathBuf, Arc<Image>>>,
        path: &PathBuf,
        make: impl FnOnce() -> Result<Image>,
    ) -> Result<Arc<Image>> {
        if let Some(img) = map.lock().unwrap().get(path) {
            return Ok(img.clone());
        }
        let img = Arc::new(make()?);
        if self.admit(&img) {
            map.lock().unwrap().insert(path.clone(), img.clone());
        }
        Ok(img)
    }

    pub fn raw(&self, rec: &LesionRecord) -> Result<Arc<Image>> {
        self.cached(&self.raw, &rec.image_path, || Image::open(&rec.image_path))
    }

    pub fn eval_frame(&self, rec: &LesionRecord) -> Result<Arc<Image>> {
        self.cached(&self.eval, &rec.image_path, || Ok(preprocess_eval(&*self.raw(rec)?)))
    }
}

/// An indexed, labelled collection of images.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn id(&self, i: usize) -> &str;

    fn label(&self, i: usize) -> ClassLabel;

    /// The model input for evaluation.
    fn eval_input(&self, i: usize) -> Result<Arc<Image>>;

    /// A training input drawn from `spec` under `seed`.
    fn augmented(&self, i: usize, spec: &TransformSpec, seed: u64) -> Result<Arc<Image>>;

    /// The unprocessed image, for test-time augmentation and overlays.
    fn original(&self, i: usize) -> Result<Arc<Image>>;

    fn labels(&self) -> Vec<ClassLabel> {
        (0..self.len()).map(|i| self.label(i)).collect()
    }
}

/// Catalog records backed by an [`ImageStore`].
pub struct RecordSamples<'a> {
    pub records: Vec<LesionRecord>,
    store: &'a ImageStore,
}

impl<'a> RecordSamples<'a> {
    pub fn new(records: Vec<LesionRecord>, store: &'a ImageStore) -> Self {
        RecordSamples { records, store }
    }

    pub fn from_refs(records: &[&LesionRecord], store: &'a ImageStore) -> Self {
        RecordSamples::new(records.iter().map(|r| (*r).clone()).collect(), store)
    }
}

impl SampleSource for RecordSamples<'_> {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.records[i].image_id
    }

    fn label(&self, i: usize) -> ClassLabel {
        self.records[i].label
    }

    fn eval_input(&self, i: usize) -> Result<Arc<Image>> {
        self.store.eval_frame(&self.records[i])
    }

    fn augmented(&self, i: usize, spec: &TransformSpec, seed: u64) -> Result<Arc<Image>> {
        if spec.is_identity() {
            return self.eval_input(i);
        }
        let raw = self.store.raw(&self.records[i])?;
        Ok(Arc::new(augment_train(&raw, spec, seed)?))
    }

    fn original(&self, i: usize) -> Result<Arc<Image>> {
        self.store.raw(&self.records[i])
    }
}

/// Images already at model resolution, used as-is by every accessor.
pub struct MemorySamples {
    pub items: Vec<(String, ClassLabel, Arc<Image>)>,
}

impl SampleSource for MemorySamples {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, i: usize) -> &str {
        &self.items[i].0
    }

    fn label(&self, i: usize) -> ClassLabel {
        self.items[i].1
    }

    fn eval_input(&self, i: usize) -> Result<Arc<Image>> {
        Ok(self.items[i].2.clone())
    }

    fn augmented(&self, i: usize, _spec: &TransformSpec, _seed: u64) -> Result<Arc<Image>> {
        self.eval_input(i)
    }

    fn original(&self, i: usize) -> Result<Arc<Image>> {
        self.eval_input(i)
    }
}

pub fn worker_count(requested: usize) -> usize {
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    }
}

/// Applies `load` to every index on up to `workers` threads and returns the
/// results in index order. The first failure by index wins.
pub fn load_parallel<T: Send>(
    indices: &[usize],
    workers: usize,
    load: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let workers = workers.clamp(1, indices.len().max(1));
    if workers == 1 {
        return indices.iter().map(|&i| load(i)).collect();
    }
    let chunk = indices.len().div_ceil(workers);
    let parts: Vec<Vec<Result<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = indices
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(|&i| load(i)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("loader thread panicked"))
            .collect()
    });
    parts.into_iter().flatten().collect()
}
