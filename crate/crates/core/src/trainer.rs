//! Training loop (Adam, reduce-on-plateau, best-checkpoint selection),
//! k-fold training and the technique ablation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::TransformSpec;
use crate::catalog::LesionRecord;
use crate::data::{load_parallel, worker_count, ImageStore, RecordSamples, SampleSource};
use crate::evaluator::{evaluate, MetricsReport};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::losses::{Loss, LossKind, ProbabilityVector};
use crate::models::{batch_tensor, build_model, load_checkpoint, save_checkpoint, Model, ModelSpec};
use crate::nn::{Adam, Ctx, Layer};
use crate::seed::{derive_seed, hash_str, rng_for};
use crate::split::{all_images, canonical_images, SplitManifest};
use crate::{Error, Result};

const STREAM_SHUFFLE: u64 = 11;
const STREAM_AUGMENT: u64 = 12;
const STREAM_DROPOUT: u64 = 13;
const STREAM_INIT: u64 = 14;
const STREAM_FOLD: u64 = 15;

/// Per-class loss weighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeighting {
    None,
    /// `n / (K · n_c)` over the K classes present in the training images.
    Balanced,
    Manual(BTreeMap<ClassLabel, f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    #[default]
    ValAccuracy,
    ValLoss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub loss: LossKind,
    pub gamma: f64,
    pub class_weights: ClassWeighting,
    pub use_dropout: bool,
    pub use_augment: bool,
    pub use_gap: bool,
    /// Quantity whose strict improvement triggers a checkpoint.
    pub monitor: Monitor,
    pub seed: u64,
    /// Image loading threads; 0 picks the available parallelism.
    pub workers: usize,
    /// Training-time transforms, used when `use_augment` is set.
    #[serde(skip)]
    pub augmentation: TransformSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            initial_lr: 1e-4,
            batch_size: 64,
            max_epochs: 50,
            plateau_factor: 0.5,
            plateau_patience: 3,
            min_lr: 1e-7,
            loss: LossKind::Focal,
            gamma: crate::losses::DEFAULT_GAMMA,
            class_weights: ClassWeighting::Balanced,
            use_dropout: true,
            use_augment: true,
            use_gap: true,
            monitor: Monitor::ValAccuracy,
            seed: 0,
            workers: 0,
            augmentation: TransformSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.min_lr > 0.0 && self.initial_lr > self.min_lr && self.initial_lr.is_finite()) {
            return bad(format!(
                "need initial_lr > min_lr > 0 (got {} and {})",
                self.initial_lr, self.min_lr
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad(format!("plateau_factor {} outside (0, 1)", self.plateau_factor));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be finite and >= 0, got {}", self.gamma));
        }
        self.augmentation.validate()
    }

    /// `base` with the head toggles of this config applied.
    pub fn model_spec(&self, base: &ModelSpec) -> ModelSpec {
        let dropout_rate = match (self.use_dropout, base.dropout_rate) {
            (false, _) => 0.0,
            (true, r) if r > 0.0 => r,
            (true, _) => 0.5,
        };
        ModelSpec {
            use_gap: self.use_gap,
            dropout_rate,
            ..base.clone()
        }
    }

    fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        if spec.use_gap != self.use_gap || (spec.dropout_rate > 0.0) != self.use_dropout {
            return Err(Error::Config(format!(
                "model (use_gap {}, dropout {}) disagrees with training toggles (use_gap {}, use_dropout {})",
                spec.use_gap, spec.dropout_rate, self.use_gap, self.use_dropout
            )));
        }
        Ok(())
    }
}

/// Loss weights for the given training labels; `None` means unweighted.
pub fn training_weights(setting: &ClassWeighting, labels: &[ClassLabel]) -> Result<Option<Vec<f64>>> {
    match setting {
        ClassWeighting::None => Ok(None),
        ClassWeighting::Balanced => {
            let mut counts = [0u64; NUM_CLASSES];
            for l in labels {
                counts[l.index()] += 1;
            }
            let present = counts.iter().filter(|&&c| c > 0).count() as f64;
            let n = labels.len() as f64;
            Ok(Some(
                counts
                    .iter()
                    .map(|&c| if c == 0 { 1.0 } else { n / (present * c as f64) })
                    .collect(),
            ))
        }
        ClassWeighting::Manual(map) => ClassLabel::ALL
            .iter()
            .map(|c| {
                map.get(c)
                    .copied()
                    .ok_or_else(|| Error::Config(format!("manual class weight missing for {c}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some),
    }
}

/// Multiplies the rate by `factor` once the monitored loss has gone
/// `patience` epochs without strictly improving, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            lr: initial_lr,
            factor,
            patience,
            min_lr,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's monitored loss and returns the rate for the next
    /// epoch.
    pub fn step(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.wait = 0;
            }
        }
        self.lr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Rate used during this epoch.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were checkpointed.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,lr\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_accuracy, e.learning_rate
            );
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("history.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("history.json");
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: TrainHistory,
}

struct BatchStats {
    loss_sum: f64,
    correct: usize,
}

fn logits_rows(logits: &Array2<f32>) -> Vec<Vec<f64>> {
    logits
        .outer_iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

/// Evaluation-mode logits for every sample, in order.
pub fn predict_logits(
    model: &mut Model,
    src: &dyn SampleSource,
    batch: usize,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    let idx: Vec<usize> = (0..src.len()).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut rng = rng_for(0, &[]);
    for chunk in idx.chunks(batch.max(1)) {
        let imgs = load_parallel(chunk, workers, |i| src.eval_input(i))?;
        let logits = model.logits(batch_tensor(&imgs), &mut Ctx::eval(&mut rng));
        out.extend(logits_rows(&logits));
    }
    Ok(out)
}

pub fn predict_source(
    model: &mut Model,
    src: &dyn SampleSource,
    batch: usize,
    workers: usize,
) -> Result<Vec<ProbabilityVector>> {
    predict_logits(model, src, batch, workers)?
        .iter()
        .map(|z| ProbabilityVector::from_logits(z))
        .collect()
}

/// Mean loss and accuracy of the model on `src` in evaluation mode.
pub fn evaluate_loss(
    model: &mut Model,
    src: &dyn SampleSource,
    loss: &Loss,
    batch: usize,
    workers: usize,
) -> Result<(f64, f64)> {
    let logits = predict_logits(model, src, batch, workers)?;
    let mut total = 0.0;
    let mut correct = 0;
    for (i, z) in logits.iter().enumerate() {
        let target = src.label(i).index();
        total += loss.value_and_grad(z, target)?.0;
        if ProbabilityVector::from_logits(z)?.argmax() == target {
            correct += 1;
        }
    }
    let n = logits.len().max(1) as f64;
    Ok((total / n, correct as f64 / n))
}

#[allow(clippy::too_many_arguments)]
fn train_batch(
    model: &mut Model,
    opt: &mut Adam,
    loss: &Loss,
    imgs: &[std::sync::Arc<crate::imaging::Image>],
    labels: &[usize],
    rng: &mut rand_chacha::ChaCha8Rng,
    epoch: usize,
    batch: usize,
) -> Result<BatchStats> {
    let mut ctx = Ctx::train(rng);
    let logits = model.logits(batch_tensor(imgs), &mut ctx);
    let n = labels.len();
    let mut grad = Array2::<f32>::zeros(logits.dim());
    let mut stats = BatchStats {
        loss_sum: 0.0,
        correct: 0,
    };
    let non_finite = || Error::NonFiniteLoss {
        epoch,
        batch,
        lr: opt.lr,
    };
    for (i, z) in logits_rows(&logits).iter().enumerate() {
        if z.iter().any(|v| !v.is_finite()) {
            model.clear();
            return Err(non_finite());
        }
        let (l, g) = loss.value_and_grad(z, labels[i])?;
        if !l.is_finite() {
            model.clear();
            return Err(non_finite());
        }
        stats.loss_sum += l;
        let best = (0..z.len()).fold(0, |b, j| if z[j] > z[b] { j } else { b });
        stats.correct += usize::from(best == labels[i]);
        for (j, gj) in g.iter().enumerate() {
            grad[[i, j]] = (gj / n as f64) as f32;
        }
    }
    model.backward_logits(grad);
    opt.step(model);
    Ok(stats)
}

/// Trains `model` in place, saving the best epoch to
/// `out_dir/best.safetensors` and its history next to it. On return the
/// model holds the checkpointed parameters.
pub fn train(
    model: &mut Model,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_model(model.spec())?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Split("training and validation sets must be non-empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let weights = training_weights(&config.class_weights, &train_set.labels())?;
    let loss = Loss::new(config.loss, config.gamma, weights)?;
    let mut opt = Adam::new(config.initial_lr);
    let mut sched = PlateauScheduler::new(
        config.initial_lr,
        config.plateau_factor,
        config.plateau_patience,
        config.min_lr,
    );
    let workers = worker_count(config.workers);
    let checkpoint = out_dir.join("best.safetensors");
    let mut history = TrainHistory::default();
    let mut best = f64::NEG_INFINITY;
    let n = train_set.len();

    for epoch in 1..=config.max_epochs {
        let lr = sched.lr();
        opt.lr = lr;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, &[STREAM_SHUFFLE, epoch as u64]));
        let mut drop_rng = rng_for(config.seed, &[STREAM_DROPOUT, epoch as u64]);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let imgs = load_parallel(idx, workers, |i| {
                if config.use_augment {
                    let seed = derive_seed(config.seed, &[STREAM_AUGMENT, epoch as u64, hash_str(train_set.id(i))]);
                    train_set.augmented(i, &config.augmentation, seed)
                } else {
                    train_set.eval_input(i)
                }
            })?;
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.label(i).index()).collect();
            let s = train_batch(model, &mut opt, &loss, &imgs, &labels, &mut drop_rng, epoch, b)?;
            loss_sum += s.loss_sum;
            correct += s.correct;
        }
        let (val_loss, val_accuracy) = evaluate_loss(model, val_set, &loss, config.batch_size, workers)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: n.div_ceil(config.batch_size),
                lr,
            });
        }
        sched.step(val_loss);
        let score = match config.monitor {
            Monitor::ValAccuracy => val_accuracy,
            Monitor::ValLoss => -val_loss,
        };
        if score > best {
            best = score;
            history.best_epoch = epoch;
            save_checkpoint(model, &checkpoint)?;
        }
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {val_loss:.5} val_acc {val_accuracy:.4} lr {lr:e}",
            loss_sum / n as f64
        );
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            train_accuracy: correct as f64 / n as f64,
            val_loss,
            val_accuracy,
            learning_rate: lr,
        });
    }
    history.best_val_accuracy = history.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
    history.save(out_dir)?;
    *model = load_checkpoint(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, history })
}

/// Catalog, split and image cache shared by the multi-run drivers.
pub struct Workspace<'a> {
    pub catalog: &'a [LesionRecord],
    pub manifest: &'a SplitManifest,
    pub store: &'a ImageStore,
}

impl<'a> Workspace<'a> {
    /// Every image of the given lesions.
    pub fn training_samples(&self, lesions: &std::collections::BTreeSet<String>) -> RecordSamples<'a> {
        RecordSamples::from_refs(&all_images(self.catalog, lesions), self.store)
    }

    /// One image per lesion.
    pub fn evaluation_samples(&self, lesions: &std::collections::BTreeSet<String>) -> RecordSamples<'a> {
        RecordSamples::from_refs(&canonical_images(self.catalog, lesions), self.store)
    }

    pub fn test_samples(&self) -> RecordSamples<'a> {
        self.evaluation_samples(&self.manifest.test)
    }
}

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub checkpoint: PathBuf,
    pub history: TrainHistory,
    pub test_report: MetricsReport,
    /// Image ids the test report was computed on, in order.
    pub test_ids: Vec<String>,
}

/// Trains one model per fold (validating on that fold, training on the
/// rest) under `out_dir/fold_<i>/` and evaluates each on the test split.
pub fn train_kfold(
    ws: &Workspace<'_>,
    base: &ModelSpec,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<Vec<FoldResult>> {
    let k = ws.manifest.k;
    if k < 2 || ws.manifest.folds.is_empty() {
        return Err(Error::Split("manifest carries no k-fold assignment".into()));
    }
    let test = ws.test_samples();
    if test.is_empty() {
        return Err(Error::Split("test split is empty".into()));
    }
    let workers = worker_count(config.workers);
    let mut results = Vec::with_capacity(k);
    for fold in 0..k {
        log::info!("fold {}/{k}", fold + 1);
        let train_set = ws.training_samples(&ws.manifest.fold_members(fold, false));
        let val_set = ws.evaluation_samples(&ws.manifest.fold_members(fold, true));
        let spec = ModelSpec {
            init_seed: derive_seed(config.seed, &[STREAM_INIT, fold as u64]),
            ..config.model_spec(base)
        };
        let fold_config = TrainConfig {
            seed: derive_seed(config.seed, &[STREAM_FOLD, fold as u64]),
            ..config.clone()
        };
        let mut model = build_model(&spec)?;
        let dir = out_dir.join(format!("fold_{fold}"));
        let outcome = train(&mut model, &train_set, &val_set, &fold_config, &dir)?;
        let probs = predict_source(&mut model, &test, config.batch_size, workers)?;
        let test_report = evaluate(&probs, &test.labels())?;
        results.push(FoldResult {
            fold,
            checkpoint: outcome.checkpoint,
            history: outcome.history,
            test_report,
            test_ids: (0..test.len()).map(|i| test.id(i).to_string()).collect(),
        });
    }
    Ok(results)
}

/// Which of the five techniques an experiment uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub dropout: bool,
    pub augment: bool,
    pub class_weights: bool,
    pub focal: bool,
    pub gap: bool,
}

impl Toggles {
    pub const ALL_ON: Toggles = Toggles {
        dropout: true,
        augment: true,
        class_weights: true,
        focal: true,
        gap: true,
    };

    /// The six experiments: each of the first five drops one technique, the
    /// sixth keeps all.
    pub fn ablation_matrix() -> [(String, Toggles); 6] {
        let on = Toggles::ALL_ON;
        [
            ("no dropout".to_string(), Toggles { dropout: false, ..on }),
            ("no augment".to_string(), Toggles { augment: false, ..on }),
            (
                "no CW".to_string(),
                Toggles {
                    class_weights: false,
                    ..on
                },
            ),
            ("no FC".to_string(), Toggles { focal: false, ..on }),
            ("no GAP".to_string(), Toggles { gap: false, ..on }),
            ("full".to_string(), on),
        ]
    }

    pub fn of(config: &TrainConfig) -> Toggles {
        Toggles {
            dropout: config.use_dropout,
            augment: config.use_augment,
            class_weights: config.class_weights != ClassWeighting::None,
            focal: config.loss == LossKind::Focal,
            gap: config.use_gap,
        }
    }

    /// `base` with these toggles applied. Dropping focal loss keeps the
    /// class weights, giving weighted cross-entropy.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.use_dropout = self.dropout;
        c.use_augment = self.augment;
        c.use_gap = self.gap;
        if !self.class_weights {
            c.class_weights = ClassWeighting::None;
        }
        if !self.focal {
            c.loss = if self.class_weights {
                LossKind::WeightedCe
            } else {
                LossKind::Ce
            };
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: usize,
    pub name: String,
    pub toggles: Toggles,
    pub loss: LossKind,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Runs the six experiments on the manifest's train/val/test split, each
/// under `out_dir/experiment_<n>/`.
pub fn run_ablation(
    ws: &Workspace<'_>,
    base: &ModelSpec,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<AblationReport> {
    if Toggles::of(config) != Toggles::ALL_ON {
        return Err(Error::Config(
            "the ablation base must enable dropout, augmentation, class weights, focal loss and GAP".into(),
        ));
    }
    let train_set = ws.training_samples(&ws.manifest.train);
    let val_set = ws.evaluation_samples(&ws.manifest.val);
    let test = ws.test_samples();
    if test.is_empty() {
        return Err(Error::Split("test split is empty".into()));
    }
    let workers = worker_count(config.workers);
    let init_seed = derive_seed(config.seed, &[STREAM_INIT]);
    let mut rows = Vec::new();
    for (i, (name, toggles)) in Toggles::ablation_matrix().into_iter().enumerate() {
        let experiment = i + 1;
        log::info!("experiment {experiment} ({name})");
        let cfg = toggles.apply(config);
        let spec = ModelSpec {
            init_seed,
            ..cfg.model_spec(base)
        };
        let mut model = build_model(&spec)?;
        let dir = out_dir.join(format!("experiment_{experiment}"));
        let outcome = train(&mut model, &train_set, &val_set, &cfg, &dir)?;
        let probs = predict_source(&mut model, &test, cfg.batch_size, workers)?;
        rows.push(AblationRow {
            experiment,
            name,
            toggles,
            loss: cfg.loss,
            best_epoch: outcome.history.best_epoch,
            best_val_accuracy: outcome.history.best_val_accuracy,
            test: evaluate(&probs, &test.labels())?,
        });
    }
    Ok(AblationReport { rows })
}

fn mark(on: bool) -> &'static str {
    if on {
        "✓"
    } else {
        "x"
    }
}

impl AblationReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Toggle matrix, aggregate results and per-class precision, recall and
    /// F1 tables (seven classes plus an average row each).
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        s.push_str("## Experiments\n\n| Experiment | Dropout | Augment | CW | FC | GAP |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let t = r.toggles;
            let _ = writeln!(
                s,
                "| {} ({}) | {} | {} | {} | {} | {} |",
                r.experiment,
                r.name,
                mark(t.dropout),
                mark(t.augment),
                mark(t.class_weights),
                mark(t.focal),
                mark(t.gap)
            );
        }
        s.push_str(
            "\n## Results\n\n| Experiment | Accuracy | Precision | Recall | F1-score |\n|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            let m = &r.test;
            let _ = writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |",
                r.experiment, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
            );
        }
        type Pick = fn(&crate::evaluator::ClassMetrics) -> f64;
        type Avg = fn(&MetricsReport) -> f64;
        let tables: [(&str, Pick, Avg); 3] = [
            ("Precision", |m| m.precision, |r| r.macro_precision),
            ("Recall", |m| m.recall, |r| r.macro_recall),
            ("F1-score", |m| m.f1, |r| r.macro_f1),
        ];
        for (title, pick, avg) in tables {
            let _ = write!(s, "\n## {title}\n\n| Class |");
            for r in &self.rows {
                let _ = write!(s, " {} |", r.experiment);
            }
            s.push_str("\n|---|");
            s.push_str(&"---|".repeat(self.rows.len()));
            s.push('\n');
            for c in ClassLabel::ALL {
                let _ = write!(s, "| {c} |");
                for r in &self.rows {
                    let _ = write!(s, " {:.4} |", pick(&r.test.class(c).metrics));
                }
                s.push('\n');
            }
            s.push_str("| Average |");
            for r in &self.rows {
                let _ = write!(s, " {:.4} |", avg(&r.test));
            }
            s.push('\n');
        }
        s
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("ablation.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::io(&json, e))?;
        let md = dir.join("ablation.md");
        std::fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::Rng;

    use super::*;
    use crate::data::MemorySamples;
    use crate::imaging::Image;
    use crate::seed::rng;

    pub(crate) fn noise_samples(n: usize, size: usize, seed: u64) -> MemorySamples {
        let mut r = rng(seed);
        MemorySamples {
            items: (0..n)
                .map(|i| {
                    let img = Image::from_fn(size, size, |_, _| [r.random(), r.random(), r.random()]);
                    (format!("s{i}"), ClassLabel::ALL[i % NUM_CLASSES], Arc::new(img))
                })
                .collect(),
        }
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            initial_lr: 3e-3,
            batch_size: 4,
            max_epochs: 3,
            use_augment: false,
            use_dropout: false,
            workers: 1,
            ..TrainConfig::default()
        }
    }

    fn quick_model(config: &TrainConfig) -> Model {
        build_model(&config.model_spec(&ModelSpec::tiny())).unwrap()
    }

    #[test]
    fn defaults_are_the_reference_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.initial_lr, c.batch_size), (1e-4, 64));
        assert_eq!((c.plateau_factor, c.plateau_patience, c.min_lr), (0.5, 3, 1e-7));
        assert_eq!(Toggles::of(&c), Toggles::ALL_ON);
        c.validate().unwrap();
        let bad = TrainConfig {
            min_lr: 1e-3,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = PlateauScheduler::new(1e-4, 0.5, 3, 1e-7);
        assert_eq!(s.step(1.0), 1e-4);
        assert_eq!(s.step(1.0), 1e-4);
        assert_eq!(s.step(1.0), 1e-4);
        assert_eq!(s.step(1.0), 5e-5);
        assert_eq!(s.step(0.5), 5e-5);
        let mut s = PlateauScheduler::new(1e-6, 0.5, 1, 1e-6 / 3.0);
        s.step(1.0);
        assert_eq!(s.step(1.0), 5e-7);
        assert_eq!(s.step(1.0), 1e-6 / 3.0);
        assert_eq!(s.step(1.0), 1e-6 / 3.0);
    }

    #[test]
    fn balanced_weights_skip_absent_classes() {
        let labels = [ClassLabel::Nv, ClassLabel::Nv, ClassLabel::Nv, ClassLabel::Mel];
        let w = training_weights(&ClassWeighting::Balanced, &labels).unwrap().unwrap();
        assert_eq!(w[ClassLabel::Nv.index()], 4.0 / 6.0);
        assert_eq!(w[ClassLabel::Mel.index()], 2.0);
        assert_eq!(w[ClassLabel::Df.index()], 1.0);
        assert_eq!(training_weights(&ClassWeighting::None, &labels).unwrap(), None);
        let partial = ClassWeighting::Manual([(ClassLabel::Nv, 1.0)].into_iter().collect());
        assert!(training_weights(&partial, &labels).is_err());
    }

    #[test]
    fn ablation_toggles_follow_the_table() {
        let m = Toggles::ablation_matrix();
        assert_eq!(m.len(), 6);
        assert!(!m[0].1.dropout && !m[1].1.augment && !m[2].1.class_weights && !m[3].1.focal && !m[4].1.gap);
        assert_eq!(m[5].1, Toggles::ALL_ON);
        for (i, (_, t)) in m.iter().enumerate().take(5) {
            let off = [t.dropout, t.augment, t.class_weights, t.focal, t.gap];
            assert_eq!(off.iter().filter(|on| !**on).count(), 1, "experiment {}", i + 1);
        }
        let base = TrainConfig::default();
        let four = m[3].1.apply(&base);
        assert_eq!(four.loss, LossKind::WeightedCe);
        assert_eq!(four.class_weights, ClassWeighting::Balanced);
        assert_eq!(m[5].1.apply(&base).loss, LossKind::Focal);
        assert_eq!(m[2].1.apply(&base).class_weights, ClassWeighting::None);
        assert_eq!(m[0].1.apply(&base).model_spec(&ModelSpec::tiny()).dropout_rate, 0.0);
        assert!(!m[4].1.apply(&base).model_spec(&ModelSpec::tiny()).use_gap);
    }

    #[test]
    fn memorizes_a_small_set() {
        let data = noise_samples(14, 32, 1);
        let config = TrainConfig {
            max_epochs: 30,
            ..quick_config()
        };
        let mut model = quick_model(&config);
        let dir = tempfile::tempdir().unwrap();
        let out = train(&mut model, &data, &data, &config, dir.path()).unwrap();
        let probs = predict_source(&mut model, &data, 8, 1).unwrap();
        let hits = probs
            .iter()
            .zip(data.labels())
            .filter(|(p, l)| p.argmax() == l.index())
            .count();
        assert!(hits as f64 / 14.0 >= 0.95, "{hits}/14");
        let h = &out.history;
        assert!(h.epochs.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));
        let max = h.epochs.iter().map(|e| e.val_accuracy).fold(0.0, f64::max);
        assert_eq!(h.best_val_accuracy, max);
        // the returned model is the checkpoint, which reproduces its score
        let loss = Loss::new(config.loss, config.gamma, None).unwrap();
        let (_, acc) = evaluate_loss(&mut model, &data, &loss, 4, 1).unwrap();
        assert!((acc - h.best_val_accuracy).abs() < 1e-6);
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        assert!(csv.starts_with("epoch,train_loss,val_loss,val_acc,lr\n"));
        assert_eq!(csv.lines().count(), 31);
    }

    #[test]
    fn equal_seeds_give_equal_runs() {
        let data = noise_samples(10, 32, 2);
        let config = TrainConfig {
            max_epochs: 1,
            use_dropout: true,
            ..quick_config()
        };
        let run = || {
            let mut m = quick_model(&config);
            let dir = tempfile::tempdir().unwrap();
            train(&mut m, &data, &data, &config, dir.path()).unwrap().history.epochs[0].train_loss
        };
        let (a, b) = (run(), run());
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }

    #[test]
    fn nan_input_aborts_with_diagnostics() {
        let mut data = noise_samples(8, 32, 3);
        data.items[5].2 = Arc::new(Image::filled(32, 32, [f32::NAN, 0.0, 0.0]));
        let config = quick_config();
        let mut m = quick_model(&config);
        let dir = tempfile::tempdir().unwrap();
        let err = train(&mut m, &data, &data, &config, dir.path()).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch, lr, .. } => {
                assert_eq!(epoch, 1);
                assert_eq!(lr, config.initial_lr);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn toggles_must_match_the_model() {
        let data = noise_samples(4, 32, 4);
        let config = quick_config();
        let mut m = build_model(&ModelSpec::tiny()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            train(&mut m, &data, &data, &config, dir.path()),
            Err(Error::Config(_))
        ));
    }
}
