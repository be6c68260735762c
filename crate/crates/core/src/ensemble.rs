//! Probability averaging across fold models, with optional test-time
//! augmentation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::tta_variants;
use crate::data::{load_parallel, worker_count, SampleSource};
use crate::evaluator::{evaluate, MetricsReport};
use crate::imaging::Image;
use crate::label::NUM_CLASSES;
use crate::losses::ProbabilityVector;
use crate::models::{load_checkpoint, Model};
use crate::seed::{derive_seed, hash_str};
use crate::trainer::predict_source;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub checkpoint_paths: Vec<PathBuf>,
    /// Variants per image; 1 disables test-time augmentation.
    pub tta_n: usize,
    pub tta_seed: u64,
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.checkpoint_paths.is_empty() {
            return Err(Error::Config("an ensemble needs at least one checkpoint".into()));
        }
        if self.tta_n == 0 {
            return Err(Error::Config("tta_n must be at least 1".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Sum by recursive halving; rounding error grows with `log n` and the
/// result barely depends on input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Elementwise arithmetic mean.
pub fn average_probabilities(vectors: &[ProbabilityVector]) -> Result<ProbabilityVector> {
    if vectors.is_empty() {
        return Err(Error::invalid("cannot average zero probability vectors"));
    }
    let n = vectors.len() as f64;
    let mut column = Vec::with_capacity(vectors.len());
    let mut out = [0.0; NUM_CLASSES];
    for (c, slot) in out.iter_mut().enumerate() {
        column.clear();
        column.extend(vectors.iter().map(|v| v.as_array()[c]));
        let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        *slot = (pairwise_sum(&column) / n).clamp(lo, hi);
    }
    ProbabilityVector::new(out)
}

pub struct Ensemble {
    models: Vec<Model>,
    tta_n: usize,
    tta_seed: u64,
}

impl Ensemble {
    pub fn load(spec: &EnsembleSpec) -> Result<Self> {
        spec.validate()?;
        let models = spec
            .checkpoint_paths
            .iter()
            .map(|p| load_checkpoint(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ensemble::from_models(models, spec.tta_n, spec.tta_seed))
    }

    pub fn from_models(models: Vec<Model>, tta_n: usize, tta_seed: u64) -> Self {
        assert!(!models.is_empty() && tta_n >= 1);
        Ensemble {
            models,
            tta_n,
            tta_seed,
        }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// Mean over every model and, when `tta_n > 1`, every variant.
    pub fn predict(&mut self, image: &Image) -> Result<ProbabilityVector> {
        self.predict_seeded(image, self.tta_seed, self.tta_n)
    }

    fn predict_seeded(&mut self, image: &Image, seed: u64, tta_n: usize) -> Result<ProbabilityVector> {
        let variants = tta_variants(image, tta_n, seed)?;
        let mut all = Vec::with_capacity(self.models.len() * variants.len());
        for m in &mut self.models {
            all.extend(m.predict(&variants)?);
        }
        average_probabilities(&all)
    }

    /// Plain-ensemble probabilities for every sample.
    pub fn predict_plain(
        &mut self,
        src: &dyn SampleSource,
        batch: usize,
        workers: usize,
    ) -> Result<Vec<ProbabilityVector>> {
        let per_model = self
            .models
            .iter_mut()
            .map(|m| predict_source(m, src, batch, workers))
            .collect::<Result<Vec<_>>>()?;
        (0..src.len())
            .map(|i| average_probabilities(&per_model.iter().map(|p| p[i]).collect::<Vec<_>>()))
            .collect()
    }

    /// TTA-ensemble probabilities; each image's variants are seeded from
    /// `tta_seed` and its id, so results do not depend on sample order.
    pub fn predict_tta(&mut self, src: &dyn SampleSource, workers: usize) -> Result<Vec<ProbabilityVector>> {
        let idx: Vec<usize> = (0..src.len()).collect();
        let mut out = Vec::with_capacity(src.len());
        for chunk in idx.chunks(8) {
            let originals = load_parallel(chunk, workers, |i| src.original(i))?;
            for (&i, img) in chunk.iter().zip(originals) {
                let seed = derive_seed(self.tta_seed, &[hash_str(src.id(i))]);
                out.push(self.predict_seeded(&img, seed, self.tta_n)?);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleReports {
    pub plain: MetricsReport,
    /// Present when `tta_n > 1`.
    pub tta: Option<MetricsReport>,
}

/// Reports over `test` for the plain ensemble and, when enabled, the TTA
/// ensemble.
pub fn evaluate_ensemble(
    spec: &EnsembleSpec,
    test: &dyn SampleSource,
    batch: usize,
    workers: usize,
) -> Result<EnsembleReports> {
    if test.is_empty() {
        return Err(Error::Split("test split is empty".into()));
    }
    let mut ens = Ensemble::load(spec)?;
    let workers = worker_count(workers);
    let truths = test.labels();
    let plain = evaluate(&ens.predict_plain(test, batch, workers)?, &truths)?;
    let tta = if spec.tta_n > 1 {
        Some(evaluate(&ens.predict_tta(test, workers)?, &truths)?)
    } else {
        None
    };
    Ok(EnsembleReports { plain, tta })
}
