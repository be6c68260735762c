//! One function per verb. Each creates a run directory under the configured
//! output directory, writes its artifacts there and finishes with `run.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use lesionkit::catalog::{
    class_distribution, distinct_lesions, load_catalog, ClassDistribution, Granularity, LesionRecord,
};
use lesionkit::data::{worker_count, ImageStore, SampleSource};
use lesionkit::ensemble::{evaluate_ensemble, EnsembleSpec};
use lesionkit::evaluator::{evaluate, render_report, MetricsReport};
use lesionkit::interpret::gradcam_batch;
use lesionkit::label::ClassLabel;
use lesionkit::models::{build_model, load_checkpoint};
use lesionkit::split::{all_images, make_split, SplitManifest};
use lesionkit::toy::{generate_toy, load_boxes, ToySpec};
use lesionkit::trainer::{predict_source, run_ablation, train, train_kfold, training_weights, Workspace};
use lesionkit::{Error, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const RUN_FILE: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// An open run directory.
pub struct Run {
    pub dir: PathBuf,
    pub name: String,
    verb: &'static str,
    started: String,
    digest: String,
}

impl Run {
    /// Creates `<output_dir>/<name>` and writes the config snapshot.
    pub fn create(cfg: &ExperimentConfig, verb: &'static str, name: Option<&str>) -> Result<Run> {
        let digest = cfg.digest()?;
        let now = chrono::Local::now();
        let base = match name {
            Some(n) => n.to_string(),
            None => format!("{verb}-{}-{}", now.format("%Y%m%d-%H%M%S"), &digest[..8]),
        };
        let mut name = base.clone();
        let mut n = 1;
        while cfg.output_dir.join(&name).exists() {
            n += 1;
            name = format!("{base}-{n}");
        }
        let dir = cfg.output_dir.join(&name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_file(&dir.join(CONFIG_SNAPSHOT), &cfg.to_toml()?)?;
        log::info!("run directory {}", dir.display());
        Ok(Run {
            dir,
            name,
            verb,
            started: now.to_rfc3339(),
            digest,
        })
    }

    /// Hashes every artifact and writes `run.json`.
    pub fn finish(self, cfg: &ExperimentConfig, extra: serde_json::Value) -> Result<PathBuf> {
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files)?;
        let mut artifacts = BTreeMap::new();
        for f in files {
            let rel = f.strip_prefix(&self.dir).expect("inside run dir");
            if rel == Path::new(RUN_FILE) {
                continue;
            }
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            artifacts.insert(
                rel.to_string_lossy().replace('\\', "/"),
                hex::encode(Sha256::digest(&bytes)),
            );
        }
        let record = json!({
            "verb": self.verb,
            "run_name": self.name,
            "started": self.started,
            "finished": chrono::Local::now().to_rfc3339(),
            "config_sha256": self.digest,
            "seeds": {
                "split": cfg.split.seed,
                "model_init": cfg.model.init_seed,
                "train": cfg.train.seed,
                "tta": cfg.ensemble.tta_seed,
            },
            "details": extra,
            "artifacts": artifacts,
        });
        write_file(&self.dir.join(RUN_FILE), &pretty(&record)?)?;
        Ok(self.dir)
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(v: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Catalog with every referenced image present on disk.
fn read_catalog_checked(cfg: &ExperimentConfig) -> Result<Vec<LesionRecord>> {
    cfg.check_paths()?;
    let records = load_catalog(&cfg.dataset.metadata_path, &cfg.dataset.images_root)?;
    if let Some(r) = records.iter().find(|r| !r.image_path.is_file()) {
        return Err(Error::Image {
            image_id: r.image_id.clone(),
            message: format!("file not found: {}", r.image_path.display()),
        });
    }
    Ok(records)
}

fn manifest_path(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.output_dir.join(MANIFEST_FILE), Path::to_path_buf)
}

fn load_inputs(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<(Vec<LesionRecord>, SplitManifest)> {
    cfg.validate()?;
    let records = read_catalog_checked(cfg)?;
    let path = manifest_path(cfg, manifest);
    if !path.is_file() {
        return Err(Error::Io {
            path,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "split manifest not found; run `prepare` first",
            ),
        });
    }
    let manifest = SplitManifest::load(&path)?;
    let known: std::collections::HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    if let Some(id) = manifest
        .test
        .iter()
        .chain(manifest.pool())
        .find(|id| !known.contains(id.as_str()))
    {
        return Err(Error::Integrity(format!(
            "manifest {} names image '{id}' which the catalog lacks",
            path.display()
        )));
    }
    Ok((records, manifest))
}

#[derive(Debug, Clone, Serialize)]
pub struct DistributionSummary {
    pub images: usize,
    pub distinct_lesions: usize,
    pub by_image: ClassDistribution,
    pub by_lesion: ClassDistribution,
    /// Lesion counts per subset.
    pub subsets: BTreeMap<String, ClassDistribution>,
    /// Loss weights the training subset induces under the configured scheme.
    pub class_weights: Option<BTreeMap<ClassLabel, f64>>,
    pub warnings: Vec<String>,
}

impl DistributionSummary {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{} images, {} distinct lesions\n{:<6}{:>8}{:>9}{:>7}{:>6}{:>6}{:>9}\n",
            self.images, self.distinct_lesions, "class", "images", "lesions", "train", "val", "test", "weight"
        );
        for c in ClassLabel::ALL {
            let sub = |k: &str| self.subsets.get(k).map_or(0, |d| d.count(c));
            let w = self
                .class_weights
                .as_ref()
                .map_or_else(|| "-".to_string(), |m| format!("{:.3}", m[&c]));
            s.push_str(&format!(
                "{:<6}{:>8}{:>9}{:>7}{:>6}{:>6}{:>9}\n",
                c.code(),
                self.by_image.count(c),
                self.by_lesion.count(c),
                sub("train"),
                sub("val"),
                sub("test"),
                w
            ));
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s
    }
}

pub fn prepare(cfg: &ExperimentConfig, run_name: Option<&str>) -> Result<PathBuf> {
    cfg.validate()?;
    let records = read_catalog_checked(cfg)?;
    let mut manifest = make_split(
        &records,
        cfg.split.seed,
        cfg.split.test_fraction,
        cfg.split.val_fraction,
    )?;
    if cfg.split.k >= 2 {
        manifest.assign_folds(&records, cfg.split.k)?;
    }
    let mut subsets = BTreeMap::new();
    for (name, ids) in [
        ("train", &manifest.train),
        ("val", &manifest.val),
        ("test", &manifest.test),
    ] {
        let owned: Vec<LesionRecord> = all_images(&records, ids).into_iter().cloned().collect();
        subsets.insert(name.to_string(), class_distribution(&owned, Granularity::Lesion)?);
    }
    let train_labels: Vec<ClassLabel> = all_images(&records, &manifest.train).iter().map(|r| r.label).collect();
    let class_weights = training_weights(&cfg.train.class_weights, &train_labels)?
        .map(|w| ClassLabel::ALL.iter().map(|&c| (c, w[c.index()])).collect());
    let summary = DistributionSummary {
        images: records.len(),
        distinct_lesions: distinct_lesions(&records),
        by_image: class_distribution(&records, Granularity::Image)?,
        by_lesion: class_distribution(&records, Granularity::Lesion)?,
        subsets,
        class_weights,
        warnings: manifest.warnings.clone(),
    };
    for w in &manifest.warnings {
        log::warn!("{w}");
    }

    let run = Run::create(cfg, "prepare", run_name)?;
    manifest.save(&run.dir.join(MANIFEST_FILE))?;
    manifest.save(&cfg.output_dir.join(MANIFEST_FILE))?;
    write_file(&run.dir.join("distribution.json"), &pretty(&summary)?)?;
    let text = summary.to_text();
    write_file(&run.dir.join("distribution.txt"), &text)?;
    print!("{text}");
    run.finish(
        cfg,
        json!({"distinct_lesions": summary.distinct_lesions, "images": summary.images, "k": manifest.k}),
    )
}

fn write_report(report: &MetricsReport, dir: &Path) -> Result<()> {
    render_report(report, dir)?;
    let bad = report.violations();
    if !bad.is_empty() {
        return Err(Error::invalid(format!(
            "metrics report violates invariants: {}",
            bad.join("; ")
        )));
    }
    Ok(())
}

fn summary_line(label: &str, r: &MetricsReport) -> String {
    format!(
        "{label}: accuracy {:.4}  top-2 {:.4}  top-3 {:.4}  macro F1 {:.4}  macro AUC {}",
        r.accuracy,
        r.top(2),
        r.top(3),
        r.macro_f1,
        r.macro_auc.map_or("n/a".into(), |a| format!("{a:.4}"))
    )
}

pub fn train_cmd(cfg: &ExperimentConfig, manifest: Option<&Path>, run_name: Option<&str>) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let tc = cfg.train_config();
    let mut model = build_model(&tc.model_spec(&cfg.model))?;
    let run = Run::create(cfg, "train", run_name)?;
    let outcome = train(
        &mut model,
        &ws.training_samples(&manifest.train),
        &ws.evaluation_samples(&manifest.val),
        &tc,
        &run.dir,
    )?;
    let test = ws.test_samples();
    let probs = predict_source(&mut model, &test, tc.batch_size, worker_count(tc.workers))?;
    let report = evaluate(&probs, &test.labels())?;
    write_report(&report, &run.dir.join("test"))?;
    println!("{}", summary_line("test", &report));
    run.finish(
        cfg,
        json!({
            "best_epoch": outcome.history.best_epoch,
            "best_val_accuracy": outcome.history.best_val_accuracy,
            "test_accuracy": report.accuracy,
        }),
    )
}

#[derive(Debug, Clone, Serialize)]
struct FoldRow {
    fold: usize,
    best_epoch: usize,
    best_val_accuracy: f64,
    test_accuracy: f64,
    top2: f64,
    top3: f64,
    macro_auc: Option<f64>,
    checkpoint: PathBuf,
}

pub fn crossval(cfg: &ExperimentConfig, manifest: Option<&Path>, run_name: Option<&str>) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let tc = cfg.train_config();
    let run = Run::create(cfg, "crossval", run_name)?;
    let folds = train_kfold(&ws, &cfg.model, &tc, &run.dir)?;
    let mut rows = Vec::new();
    for f in &folds {
        write_report(&f.test_report, &run.dir.join(format!("fold_{}", f.fold)).join("test"))?;
        println!("{}", summary_line(&format!("fold {}", f.fold), &f.test_report));
        rows.push(FoldRow {
            fold: f.fold,
            best_epoch: f.history.best_epoch,
            best_val_accuracy: f.history.best_val_accuracy,
            test_accuracy: f.test_report.accuracy,
            top2: f.test_report.top(2),
            top3: f.test_report.top(3),
            macro_auc: f.test_report.macro_auc,
            checkpoint: f.checkpoint.clone(),
        });
    }
    write_file(&run.dir.join("crossval.json"), &pretty(&rows)?)?;

    let spec = EnsembleSpec {
        checkpoint_paths: folds.iter().map(|f| f.checkpoint.clone()).collect(),
        tta_n: cfg.ensemble.tta_n,
        tta_seed: cfg.ensemble.tta_seed,
    };
    spec.save(&run.dir.join(ENSEMBLE_FILE))?;
    spec.save(&cfg.output_dir.join(ENSEMBLE_FILE))?;
    let plain = EnsembleSpec { tta_n: 1, ..spec };
    let reports = evaluate_ensemble(&plain, &ws.test_samples(), tc.batch_size, tc.workers)?;
    write_report(&reports.plain, &run.dir.join("ensemble"))?;
    println!("{}", summary_line("ensemble", &reports.plain));
    run.finish(
        cfg,
        json!({"folds": rows.len(), "ensemble_accuracy": reports.plain.accuracy}),
    )
}

pub fn ablation(cfg: &ExperimentConfig, manifest: Option<&Path>, run_name: Option<&str>) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let run = Run::create(cfg, "ablation", run_name)?;
    let report = run_ablation(&ws, &cfg.model, &cfg.train_config(), &run.dir)?;
    for row in &report.rows {
        write_report(
            &row.test,
            &run.dir.join(format!("experiment_{}", row.experiment)).join("test"),
        )?;
    }
    report.save(&run.dir)?;
    print!("{}", report.to_markdown());
    run.finish(cfg, json!({"experiments": report.rows.len()}))
}

pub fn evaluate_cmd(
    cfg: &ExperimentConfig,
    manifest: Option<&Path>,
    checkpoint: &Path,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let mut model = load_checkpoint(checkpoint)?;
    let test = ws.test_samples();
    let probs = predict_source(&mut model, &test, cfg.train.batch_size, worker_count(cfg.train.workers))?;
    let report = evaluate(&probs, &test.labels())?;
    let run = Run::create(cfg, "evaluate", run_name)?;
    write_report(&report, &run.dir)?;
    println!("{}", summary_line("test", &report));
    run.finish(cfg, json!({"checkpoint": checkpoint, "accuracy": report.accuracy}))
}

pub fn ensemble_cmd(
    cfg: &ExperimentConfig,
    manifest: Option<&Path>,
    spec_path: Option<&Path>,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let path = spec_path.map_or_else(|| cfg.output_dir.join(ENSEMBLE_FILE), Path::to_path_buf);
    if !path.is_file() {
        return Err(Error::Io {
            path,
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "ensemble spec not found; run `crossval` first",
            ),
        });
    }
    let spec = EnsembleSpec {
        tta_n: cfg.ensemble.tta_n,
        tta_seed: cfg.ensemble.tta_seed,
        ..EnsembleSpec::load(&path)?
    };
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let reports = evaluate_ensemble(&spec, &ws.test_samples(), cfg.train.batch_size, cfg.train.workers)?;
    let run = Run::create(cfg, "ensemble", run_name)?;
    spec.save(&run.dir.join(ENSEMBLE_FILE))?;
    write_report(&reports.plain, &run.dir.join("plain"))?;
    println!("{}", summary_line("ensemble", &reports.plain));
    if let Some(tta) = &reports.tta {
        write_report(tta, &run.dir.join("tta"))?;
        println!("{}", summary_line("ensemble + TTA", tta));
    }
    run.finish(
        cfg,
        json!({
            "models": spec.checkpoint_paths.len(),
            "plain_accuracy": reports.plain.accuracy,
            "tta_accuracy": reports.tta.as_ref().map(|r| r.accuracy),
        }),
    )
}

pub struct GradcamArgs<'a> {
    pub checkpoint: &'a Path,
    pub target: Option<ClassLabel>,
    pub limit: Option<usize>,
    /// `image_id,x0,y0,x1,y1` boxes for a localization summary.
    pub boxes: Option<&'a Path>,
}

pub fn gradcam_cmd(
    cfg: &ExperimentConfig,
    manifest: Option<&Path>,
    args: &GradcamArgs<'_>,
    run_name: Option<&str>,
) -> Result<PathBuf> {
    let (records, manifest) = load_inputs(cfg, manifest)?;
    let store = ImageStore::default();
    let ws = Workspace {
        catalog: &records,
        manifest: &manifest,
        store: &store,
    };
    let mut model = load_checkpoint(args.checkpoint)?;
    let mut test = ws.test_samples();
    if let Some(n) = args.limit {
        test.records.truncate(n);
    }
    let run = Run::create(cfg, "gradcam", run_name)?;
    let cams = gradcam_batch(&mut model, &test, args.target, &run.dir.join("overlays"))?;
    let mut details = json!({"images": cams.len()});
    if let Some(path) = args.boxes {
        let boxes = load_boxes(path)?;
        let mut hits = 0;
        let mut eligible = 0;
        for (i, cam) in cams.iter().enumerate() {
            let (Some(b), true) = (boxes.get(&cam.image_id), cam.predicted_class == cam.true_class) else {
                continue;
            };
            let img = test.original(i)?;
            let h = lesionkit::interpret::gradcam(&mut model, &img, cam.target_class)?;
            let s = b.scaled(img.width(), img.height(), h.values.ncols());
            let (inside, outside) = h.mean_inside_outside(s.x0, s.y0, s.x1, s.y1);
            eligible += 1;
            hits += usize::from(inside > outside);
        }
        let rate = if eligible > 0 {
            hits as f64 / eligible as f64
        } else {
            0.0
        };
        println!("localization: {hits}/{eligible} correctly classified images attend inside the box ({rate:.3})");
        details["localization"] = json!({"hits": hits, "eligible": eligible, "rate": rate});
        write_file(&run.dir.join("localization.json"), &pretty(&details["localization"])?)?;
    }
    run.finish(cfg, details)
}

/// Settings under which the tiny backbone learns the toy set in minutes.
pub fn toy_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.metadata_path = lesionkit::toy::METADATA_FILE.into();
    cfg.dataset.images_root = lesionkit::toy::IMAGES_DIR.into();
    cfg.model = lesionkit::models::ModelSpec::tiny();
    cfg.train.initial_lr = 1e-3;
    cfg.train.batch_size = 16;
    cfg.train.max_epochs = 5;
    cfg
}

pub fn synth(dir: &Path, spec: &ToySpec) -> Result<PathBuf> {
    let toy = generate_toy(dir, spec)?;
    let path = dir.join("toy.toml");
    write_file(&path, &toy_config().to_toml()?)?;
    println!(
        "wrote {} images of {} lesions to {}; config at {}",
        spec.n_images(),
        spec.lesions_per_class * ClassLabel::ALL.len(),
        toy.images_root.display(),
        path.display()
    );
    Ok(path)
}
