//! Confusion matrices, one-vs-rest class metrics, top-k accuracy, ROC AUC and
//! report rendering.
//!
//! Metrics whose denominator is zero are reported as 0 and listed in the
//! class's `undefined` set, so a report never contains NaN.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::label::{ClassLabel, NUM_CLASSES};
use crate::losses::ProbabilityVector;
use crate::render::{Canvas, Rgb, BLACK, WHITE};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn get(&self, truth: ClassLabel, predicted: ClassLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion(preds: &[ClassLabel], truths: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if preds.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::invalid("confusion matrix of zero samples"));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in preds.iter().zip(truths) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    /// One-vs-rest counts for class index `c`.
    pub fn counts_for(&self, c: usize) -> Counts {
        let tp = self.counts[c][c];
        let fp = self.col_sum(c) - tp;
        let fn_ = self.row_sum(c) - tp;
        let tn = self.total() - tp - fp - fn_;
        Counts { tp, fp, fn_, tn }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
    pub support: u64,
    /// Names of metrics that had a zero denominator and were set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_metrics(c: Counts) -> ClassMetrics {
    let mut undefined = Vec::new();
    let precision = ratio(c.tp, c.tp + c.fp, "precision", &mut undefined);
    let recall = ratio(c.tp, c.tp + c.fn_, "recall", &mut undefined);
    let f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "f1", &mut undefined);
    let specificity = ratio(c.tn, c.fp + c.tn, "specificity", &mut undefined);
    ClassMetrics {
        precision,
        recall,
        f1,
        specificity,
        support: c.tp + c.fn_,
        undefined,
    }
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> [ClassMetrics; NUM_CLASSES] {
    std::array::from_fn(|c| class_metrics(cm.counts_for(c)))
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::invalid("accuracy of an empty confusion matrix")),
        n => Ok(cm.trace() as f64 / n as f64),
    }
}

/// Position of the true class when classes are ordered by descending
/// probability, lower index first among equals.
fn true_rank(p: &ProbabilityVector, truth: ClassLabel) -> usize {
    let a = p.as_array();
    let t = truth.index();
    (0..NUM_CLASSES)
        .filter(|&j| a[j] > a[t] || (a[j] == a[t] && j < t))
        .count()
}

pub fn top_k_accuracy(probs: &[ProbabilityVector], truths: &[ClassLabel], k: usize) -> Result<f64> {
    if !(1..=NUM_CLASSES).contains(&k) {
        return Err(Error::invalid(format!("k = {k} outside 1..={NUM_CLASSES}")));
    }
    check_lengths(probs, truths)?;
    let hits = probs.iter().zip(truths).filter(|(p, t)| true_rank(p, **t) < k).count();
    Ok(hits as f64 / probs.len() as f64)
}

fn check_lengths(probs: &[ProbabilityVector], truths: &[ClassLabel]) -> Result<()> {
    if probs.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} probability vectors for {} truths",
            probs.len(),
            truths.len()
        )));
    }
    if probs.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    Ok(())
}

/// Binary AUC via the rank statistic; tied scores share their mean rank, so
/// a tied positive/negative pair counts 1/2. `None` without both a positive
/// and a negative.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 averaged
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucResult {
    /// `None` where the class has no positives or no negatives.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over defined classes; `None` when no class is defined.
    pub macro_auc: Option<f64>,
}

pub fn roc_auc(probs: &[ProbabilityVector], truths: &[ClassLabel]) -> Result<AucResult> {
    check_lengths(probs, truths)?;
    let per_class: [Option<f64>; NUM_CLASSES] = std::array::from_fn(|c| {
        let scores: Vec<f64> = probs.iter().map(|p| p.as_array()[c]).collect();
        let pos: Vec<bool> = truths.iter().map(|t| t.index() == c).collect();
        binary_auc(&scores, &pos)
    });
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucResult { per_class, macro_auc })
}

/// ROC vertices `(fpr, tpr)` from (0,0) to (1,1), one per distinct threshold.
pub fn roc_curve(scores: &[f64], positive: &[bool]) -> Option<Vec<[f64; 2]>> {
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![[0.0, 0.0]];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (i, &k) in order.iter().enumerate() {
        if positive[k] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        let last_of_tie = order.get(i + 1).is_none_or(|&next| scores[next] != scores[k]);
        if last_of_tie {
            pts.push([fp / n_neg, tp / n_pos]);
        }
    }
    Some(pts)
}

fn interp_tpr(curve: &[[f64; 2]], fpr: f64) -> f64 {
    // the curve is monotone in fpr; take the highest tpr reached at fpr
    let mut out = 0.0;
    for w in curve.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if x0 <= fpr && fpr <= x1 {
            out = if x1 == x0 {
                y1
            } else {
                y0 + (fpr - x0) / (x1 - x0) * (y1 - y0)
            };
        }
    }
    out
}

/// Mean of the defined per-class curves sampled on an even 101-point grid.
fn macro_curve(curves: &[Vec<[f64; 2]>]) -> Option<Vec<[f64; 2]>> {
    if curves.is_empty() {
        return None;
    }
    Some(
        (0..=100)
            .map(|i| {
                let x = i as f64 / 100.0;
                let y = curves.iter().map(|c| interp_tpr(c, x)).sum::<f64>() / curves.len() as f64;
                [x, y]
            })
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    #[serde(flatten)]
    pub metrics: ClassMetrics,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n_samples: u64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    /// Keyed by k as a string, "1" to "7".
    pub top_k: BTreeMap<String, f64>,
    pub macro_auc: Option<f64>,
    pub per_class: BTreeMap<ClassLabel, ClassReport>,
    pub confusion: ConfusionMatrix,
    /// ROC vertices per class code plus "macro".
    pub roc_curves: BTreeMap<String, Vec<[f64; 2]>>,
}

pub fn evaluate(probs: &[ProbabilityVector], truths: &[ClassLabel]) -> Result<MetricsReport> {
    check_lengths(probs, truths)?;
    let preds: Vec<ClassLabel> = probs
        .iter()
        .map(|p| ClassLabel::from_index(p.argmax()).expect("index in range"))
        .collect();
    let cm = confusion(&preds, truths)?;
    let per = per_class_metrics(&cm);
    let auc = roc_auc(probs, truths)?;
    let acc = accuracy(&cm)?;
    let mean = |f: fn(&ClassMetrics) -> f64| per.iter().map(f).sum::<f64>() / NUM_CLASSES as f64;
    let mut top_k = BTreeMap::new();
    for k in 1..=NUM_CLASSES {
        top_k.insert(k.to_string(), top_k_accuracy(probs, truths, k)?);
    }
    let mut roc_curves = BTreeMap::new();
    let mut defined = Vec::new();
    for c in ClassLabel::ALL {
        let scores: Vec<f64> = probs.iter().map(|p| p.as_array()[c.index()]).collect();
        let pos: Vec<bool> = truths.iter().map(|t| *t == c).collect();
        if let Some(curve) = roc_curve(&scores, &pos) {
            defined.push(curve.clone());
            roc_curves.insert(c.code().to_string(), curve);
        }
    }
    if let Some(m) = macro_curve(&defined) {
        roc_curves.insert("macro".to_string(), m);
    }
    let per_class = ClassLabel::ALL
        .iter()
        .map(|&c| {
            let mut metrics = per[c.index()].clone();
            if auc.per_class[c.index()].is_none() {
                metrics.undefined.push("auc".to_string());
            }
            (
                c,
                ClassReport {
                    metrics,
                    auc: auc.per_class[c.index()],
                },
            )
        })
        .collect();
    Ok(MetricsReport {
        schema_version: SCHEMA_VERSION,
        n_samples: cm.total(),
        accuracy: acc,
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        // single-label multiclass: pooled TP over pooled predictions/truths
        micro_precision: acc,
        micro_recall: acc,
        micro_f1: acc,
        top_k,
        macro_auc: auc.macro_auc,
        per_class,
        confusion: cm,
        roc_curves,
    })
}

impl MetricsReport {
    pub fn top(&self, k: usize) -> f64 {
        self.top_k[&k.to_string()]
    }

    pub fn class(&self, c: ClassLabel) -> &ClassReport {
        &self.per_class[&c]
    }

    /// Checks the structural invariants every report must satisfy; returns
    /// the violated ones.
    pub fn violations(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let mut scalars = vec![
            ("accuracy", self.accuracy),
            ("macro_precision", self.macro_precision),
            ("macro_recall", self.macro_recall),
            ("macro_f1", self.macro_f1),
            ("micro_precision", self.micro_precision),
            ("micro_recall", self.micro_recall),
            ("micro_f1", self.micro_f1),
        ];
        if let Some(a) = self.macro_auc {
            scalars.push(("macro_auc", a));
        }
        for (name, v) in scalars {
            if !unit(v) {
                bad.push(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (c, r) in &self.per_class {
            let m = &r.metrics;
            for (name, v) in [
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
                ("specificity", m.specificity),
            ]
            .into_iter()
            .chain(r.auc.map(|a| ("auc", a)))
            {
                if !unit(v) {
                    bad.push(format!("{c} {name} = {v} outside [0, 1]"));
                }
            }
            if m.support != self.confusion.row_sum(c.index()) {
                bad.push(format!("{c} support disagrees with the confusion matrix"));
            }
        }
        if self.per_class.len() != NUM_CLASSES {
            bad.push(format!("{} per-class rows", self.per_class.len()));
        }
        let ks: Vec<f64> = (1..=NUM_CLASSES)
            .map(|k| self.top_k.get(&k.to_string()).copied().unwrap_or(-1.0))
            .collect();
        if ks.windows(2).any(|w| w[0] > w[1]) || ks.iter().any(|&v| !unit(v)) {
            bad.push(format!("top-k not monotone in [0, 1]: {ks:?}"));
        }
        if self.confusion.total() != self.n_samples {
            bad.push("confusion total differs from sample count".into());
        }
        if self.n_samples > 0 {
            let trace_acc = self.confusion.trace() as f64 / self.n_samples as f64;
            if (trace_acc - self.accuracy).abs() > 1e-12 {
                bad.push("accuracy differs from trace / total".into());
            }
            if (self.top(1) - self.accuracy).abs() > 1e-12 {
                bad.push("top-1 differs from accuracy".into());
            }
            let weighted_recall: f64 = self
                .per_class
                .values()
                .map(|r| r.metrics.recall * r.metrics.support as f64)
                .sum::<f64>()
                / self.n_samples as f64;
            if (weighted_recall - self.accuracy).abs() > 1e-9 {
                bad.push("accuracy differs from support-weighted recall".into());
            }
        }
        bad
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: MetricsReport = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "metrics schema_version {} (expected {SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// `class,precision,recall,f1,specificity,support,auc` with an average row.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1,specificity,support,auc\n");
        let auc = |a: Option<f64>| a.map(|v| format!("{v:.6}")).unwrap_or_default();
        for (c, r) in &self.per_class {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{c},{:.6},{:.6},{:.6},{:.6},{},{}",
                m.precision,
                m.recall,
                m.f1,
                m.specificity,
                m.support,
                auc(r.auc)
            );
        }
        let spec = self.per_class.values().map(|r| r.metrics.specificity).sum::<f64>() / NUM_CLASSES as f64;
        let _ = writeln!(
            out,
            "average,{:.6},{:.6},{:.6},{:.6},{},{}",
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            spec,
            self.n_samples,
            auc(self.macro_auc)
        );
        out
    }
}

const CELL: i64 = 64;
const MARGIN: i64 = 90;

fn heat(t: f64) -> Rgb {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [lerp(247.0, 8.0), lerp(251.0, 48.0), lerp(255.0, 107.0)]
}

fn render_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    let size = (MARGIN + CELL * NUM_CLASSES as i64 + 20) as usize;
    let mut c = Canvas::new(size, size, WHITE);
    let max = cm.counts.iter().flatten().copied().max().unwrap_or(0).max(1) as f64;
    for t in 0..NUM_CLASSES {
        for p in 0..NUM_CLASSES {
            let n = cm.counts[t][p];
            let (x, y) = (MARGIN + p as i64 * CELL, MARGIN + t as i64 * CELL);
            let frac = n as f64 / max;
            c.fill_rect(x, y, CELL, CELL, heat(frac));
            c.rect_outline(x, y, CELL, CELL, [200, 200, 200]);
            let label = n.to_string();
            let w = Canvas::text_width(&label, 2);
            let ink = if frac > 0.5 { WHITE } else { BLACK };
            c.text(x + (CELL - w) / 2, y + CELL / 2 - 7, &label, 2, ink);
        }
    }
    for (i, cl) in ClassLabel::ALL.iter().enumerate() {
        let w = Canvas::text_width(cl.code(), 2);
        c.text(
            MARGIN + i as i64 * CELL + (CELL - w) / 2,
            MARGIN - 22,
            cl.code(),
            2,
            BLACK,
        );
        c.text(
            MARGIN - w - 8,
            MARGIN + i as i64 * CELL + CELL / 2 - 7,
            cl.code(),
            2,
            BLACK,
        );
    }
    c.text(MARGIN, 10, "predicted", 2, BLACK);
    c.text(4, 30, "true", 2, BLACK);
    let text = [
        ("cells", format!("{NUM_CLASSES}x{NUM_CLASSES}")),
        ("annotations", (NUM_CLASSES * NUM_CLASSES).to_string()),
        ("total", cm.total().to_string()),
    ];
    c.save_png(path, &text)
}

const PALETTE: [Rgb; NUM_CLASSES] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
];

fn render_roc(curves: &BTreeMap<String, Vec<[f64; 2]>>, path: &Path) -> Result<()> {
    let (plot, left, top) = (440i64, 60i64, 20i64);
    let mut c = Canvas::new((left + plot + 150) as usize, (top + plot + 50) as usize, WHITE);
    let to_px = |[x, y]: [f64; 2]| {
        (
            left + (x * plot as f64).round() as i64,
            top + plot - (y * plot as f64).round() as i64,
        )
    };
    c.rect_outline(left, top, plot + 1, plot + 1, BLACK);
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let (x, y) = to_px([v, v]);
        c.text(x - 10, top + plot + 8, &format!("{v:.2}"), 1, BLACK);
        c.text(left - 34, y - 3, &format!("{v:.2}"), 1, BLACK);
    }
    c.text(left + plot / 2 - 10, top + plot + 24, "fpr", 2, BLACK);
    c.text(4, top + plot / 2, "tpr", 2, BLACK);
    let d0 = to_px([0.0, 0.0]);
    for k in (0..plot).step_by(6) {
        c.set(d0.0 + k, d0.1 - k, [180, 180, 180]);
    }
    let mut drawn = Vec::new();
    let entries = ClassLabel::ALL
        .iter()
        .map(|cl| (cl.code(), PALETTE[cl.index()]))
        .chain(std::iter::once(("macro", BLACK)));
    for (row, (name, color)) in entries.enumerate() {
        let Some(curve) = curves.get(name) else { continue };
        for w in curve.windows(2) {
            let (a, b) = (to_px(w[0]), to_px(w[1]));
            c.thick_line(a.0, a.1, b.0, b.1, color);
        }
        let ly = top + 10 + row as i64 * 22;
        c.fill_rect(left + plot + 16, ly, 14, 10, color);
        c.text(left + plot + 36, ly, name, 2, BLACK);
        drawn.push(name);
    }
    let text = [("curves", drawn.len().to_string()), ("curve_labels", drawn.join(","))];
    c.save_png(path, &text)
}

/// Writes metrics.json, per_class.csv, confusion.png and roc.png.
pub fn render_report(report: &MetricsReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let write = |name: &str, body: String| {
        let p = out_dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("metrics.json", report.to_json()?)?;
    write("per_class.csv", report.per_class_csv())?;
    render_confusion(&report.confusion, &out_dir.join("confusion.png"))?;
    render_roc(&report.roc_curves, &out_dir.join("roc.png"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::read_png;
    use ClassLabel::*;

    fn pv(a: [f64; 7]) -> ProbabilityVector {
        ProbabilityVector::new(a).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let truths: Vec<ClassLabel> = ClassLabel::ALL.iter().flat_map(|&c| [c, c]).collect();
        let cm = confusion(&truths, &truths).unwrap();
        for t in 0..7 {
            for p in 0..7 {
                assert_eq!(cm.counts[t][p], if t == p { 2 } else { 0 });
            }
        }
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
        for m in per_class_metrics(&cm) {
            assert_eq!((m.precision, m.recall, m.f1, m.specificity), (1.0, 1.0, 1.0, 1.0));
        }

        let cm = confusion(&[Nv, Nv, Mel], &[Nv, Mel, Mel]).unwrap();
        assert_eq!(cm.get(Nv, Nv), 1);
        assert_eq!(cm.get(Mel, Nv), 1);
        assert_eq!(cm.get(Mel, Mel), 1);
        assert_eq!(cm.total(), 3);
        assert!((accuracy(&cm).unwrap() - 0.6667).abs() < 1e-4);

        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[Nv], &[]).is_err());
        assert!(accuracy(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn hand_computed_class_metrics() {
        let m = class_metrics(Counts {
            tp: 3,
            fp: 1,
            fn_: 1,
            tn: 5,
        });
        assert_eq!((m.precision, m.recall, m.f1), (0.75, 0.75, 0.75));
        assert!((m.specificity - 0.8333).abs() < 1e-4);
        assert!(m.undefined.is_empty());
    }

    #[test]
    fn absent_class_is_flagged() {
        let cm = confusion(&[Nv, Mel], &[Nv, Mel]).unwrap();
        let df = &per_class_metrics(&cm)[Df.index()];
        assert_eq!((df.precision, df.recall, df.f1), (0.0, 0.0, 0.0));
        assert_eq!(df.undefined, vec!["precision", "recall", "f1"]);
        // specificity is defined (two true negatives) and equals 1
        assert_eq!(df.specificity, 1.0);
    }

    #[test]
    fn top_k_examples() {
        let truths = [Akiec, Bcc, Nv, Vasc];
        let probs: Vec<ProbabilityVector> = truths
            .iter()
            .map(|t| {
                let mut a = [0.05; 7];
                a[t.index()] = 0.3;
                a[(t.index() + 1) % 7] = 0.45;
                pv(a)
            })
            .collect();
        assert_eq!(top_k_accuracy(&probs, &truths, 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&probs, &truths, 2).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&probs, &truths, 7).unwrap(), 1.0);
        assert!(top_k_accuracy(&probs, &truths, 0).is_err());
        assert!(top_k_accuracy(&probs, &truths, 8).is_err());
    }

    #[test]
    fn ties_break_to_lower_index() {
        let p = pv([0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(top_k_accuracy(&[p], &[Akiec], 1).unwrap(), 1.0);
        assert_eq!(top_k_accuracy(&[p], &[Bcc], 1).unwrap(), 0.0);
        assert_eq!(top_k_accuracy(&[p], &[Bcc], 2).unwrap(), 1.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(
            binary_auc(&[0.8, 0.6, 0.7, 0.5], &[true, true, false, false]),
            Some(0.75)
        );
        assert_eq!(binary_auc(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(binary_auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(binary_auc(&[0.5, 0.4], &[true, true]), None);
        let probs = vec![pv([1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]); 3];
        let auc = roc_auc(&probs, &[Nv, Nv, Nv]).unwrap();
        assert!(auc.per_class.iter().all(Option::is_none));
        assert_eq!(auc.macro_auc, None);
    }

    #[test]
    fn curve_matches_auc() {
        let scores = [0.9, 0.8, 0.8, 0.3, 0.2, 0.1];
        let pos = [true, false, true, true, false, false];
        let curve = roc_curve(&scores, &pos).unwrap();
        assert_eq!(curve.first(), Some(&[0.0, 0.0]));
        assert_eq!(curve.last(), Some(&[1.0, 1.0]));
        let area: f64 = curve
            .windows(2)
            .map(|w| (w[1][0] - w[0][0]) * (w[1][1] + w[0][1]) / 2.0)
            .sum();
        assert!((area - binary_auc(&scores, &pos).unwrap()).abs() < 1e-12);
    }

    fn sample_report() -> MetricsReport {
        let truths = [Akiec, Bcc, Bkl, Df, Mel, Nv, Vasc, Nv, Nv, Mel];
        let probs: Vec<ProbabilityVector> = truths
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut a = [0.1; 7];
                a[(t.index() + i % 3 / 2) % 7] = 0.4;
                pv(a)
            })
            .collect();
        evaluate(&probs, &truths).unwrap()
    }

    #[test]
    fn report_invariants_and_round_trip() {
        let r = sample_report();
        assert!(r.violations().is_empty(), "{:?}", r.violations());
        assert_eq!(MetricsReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert_eq!(r.n_samples, 10);
        let csv = r.per_class_csv();
        assert_eq!(csv.lines().count(), 1 + 7 + 1);
        assert!(csv.starts_with("class,precision,recall,f1,specificity,support,auc\n"));
    }

    #[test]
    fn rendered_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample_report();
        render_report(&r, dir.path()).unwrap();
        let back = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
        assert_eq!(MetricsReport::from_json(&back).unwrap(), r);
        let cm = read_png(&dir.path().join("confusion.png")).unwrap();
        assert_eq!(cm.text_value("cells"), Some("7x7"));
        assert_eq!(cm.text_value("annotations"), Some("49"));
        assert!(cm.width >= 7 * 64 && cm.height >= 7 * 64);
        let roc = read_png(&dir.path().join("roc.png")).unwrap();
        assert_eq!(roc.text_value("curves"), Some("8"));
        assert!(roc.text_value("curve_labels").unwrap().ends_with("macro"));
        assert!(dir.path().join("per_class.csv").is_file());
    }
}
