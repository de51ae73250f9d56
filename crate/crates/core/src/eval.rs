//! Confusion matrices, per-class and support-weighted precision/recall/F1,
//! report tables and misclassification galleries.

use std::fmt::Write as _;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_batch, DatasetManifest, Split};
use crate::model::{ModelBundle, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("split {0} has no samples")]
    EmptySplit(Split),
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: usize, classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { counts: vec![vec![0; classes]; classes] }
    }

    pub fn from_pairs(classes: usize, pairs: &[(usize, usize)]) -> Result<Self, EvalError> {
        let mut m = Self::new(classes);
        for &(t, p) in pairs {
            m.record(t, p)?;
        }
        Ok(m)
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<(), EvalError> {
        let classes = self.classes();
        for id in [truth, predicted] {
            if id >= classes {
                return Err(EvalError::ClassOutOfRange { id, classes });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Support of class `c` (row sum).
    pub fn support(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        self.counts.iter().map(|row| row[c]).sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    /// Off-diagonal `(true, predicted, count)` cells with a non-zero count.
    pub fn errors(&self) -> Vec<(usize, usize, u64)> {
        let mut cells = Vec::new();
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if t != p && n > 0 {
                    cells.push((t, p, n));
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ClassMetrics {
    /// F1 from precision and recall; 0 when both are 0.
    pub fn f1_of(precision: f64, recall: f64) -> f64 {
        if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_avg: ClassMetrics,
    pub matrix: ConfusionMatrix,
    pub warnings: Vec<String>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl ClassificationReport {
    pub fn from_matrix(class_names: Vec<String>, matrix: ConfusionMatrix) -> Self {
        let mut warnings = Vec::new();
        let per_class: Vec<ClassMetrics> = (0..matrix.classes())
            .map(|c| {
                let name = class_names.get(c).map(String::as_str).unwrap_or("?");
                let tp = matrix.true_positives(c);
                let precision = ratio(tp, matrix.predicted(c)).unwrap_or_else(|| {
                    warnings.push(format!("precision of {name} is undefined (no predictions); using 0"));
                    0.0
                });
                let recall = ratio(tp, matrix.support(c)).unwrap_or_else(|| {
                    warnings.push(format!("recall of {name} is undefined (no samples); using 0"));
                    0.0
                });
                ClassMetrics {
                    precision,
                    recall,
                    f1: ClassMetrics::f1_of(precision, recall),
                    support: matrix.support(c),
                }
            })
            .collect();

        let total: u64 = per_class.iter().map(|m| m.support).sum();
        let weighted = |field: fn(&ClassMetrics) -> f64| {
            if total == 0 {
                return 0.0;
            }
            per_class.iter().map(|m| m.support as f64 * field(m)).sum::<f64>() / total as f64
        };
        let weighted_avg = ClassMetrics {
            precision: weighted(|m| m.precision),
            recall: weighted(|m| m.recall),
            f1: weighted(|m| m.f1),
            support: total,
        };
        Self { class_names, per_class, weighted_avg, matrix, warnings }
    }

    pub fn from_pairs(class_names: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self, EvalError> {
        let matrix = ConfusionMatrix::from_pairs(class_names.len(), pairs)?;
        Ok(Self::from_matrix(class_names, matrix))
    }

    pub fn table(&self) -> MetricsTable {
        MetricsTable {
            rows: self.class_names.iter().cloned().zip(self.per_class.iter().copied()).collect(),
            weighted: self.weighted_avg,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Rendered layout: one row per class plus the weighted average row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<(String, ClassMetrics)>,
    pub weighted: ClassMetrics,
}

impl MetricsTable {
    /// Plain-text table, values rounded to two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::from("Class Precision Recall F1 Score\n");
        let mut row = |name: &str, m: &ClassMetrics| {
            let _ = writeln!(out, "{name} {:.2} {:.2} {:.2}", m.precision, m.recall, m.f1);
        };
        for (name, m) in &self.rows {
            row(name, m);
        }
        row("Weighted Average", &self.weighted);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub sample_id: String,
    pub true_class: usize,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
}

impl SamplePrediction {
    pub fn is_correct(&self) -> bool {
        self.true_class == self.predicted_class
    }
}

/// A report plus the per-sample predictions it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub split: Split,
    pub report: ClassificationReport,
    pub predictions: Vec<SamplePrediction>,
}

impl Evaluation {
    pub fn from_predictions(
        split: Split,
        class_names: Vec<String>,
        predictions: Vec<SamplePrediction>,
    ) -> Result<Self, EvalError> {
        let pairs: Vec<_> = predictions.iter().map(|p| (p.true_class, p.predicted_class)).collect();
        let report = ClassificationReport::from_pairs(class_names, &pairs)?;
        Ok(Self { split, report, predictions })
    }
}

/// Predicts every sample of `split` and builds the report. Batches are
/// merged in manifest order.
pub fn evaluate(
    bundle: &ModelBundle,
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
) -> Result<Evaluation, EvalError> {
    let samples = manifest.split_samples(split);
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let mut predictions = Vec::with_capacity(samples.len());
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (batch, labels) = load_batch(manifest, split, chunk, bundle.config.input_size)?;
        let pred = bundle.predict(&batch)?;
        for (((&i, label), class), probs) in
            chunk.iter().zip(labels).zip(pred.classes).zip(pred.probabilities)
        {
            predictions.push(SamplePrediction {
                sample_id: samples[i].sample_id.clone(),
                true_class: label,
                predicted_class: class,
                probabilities: probs,
            });
        }
    }
    Evaluation::from_predictions(split, manifest.class_names(), predictions)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryItem {
    pub sample_id: String,
    pub overlay_png: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GalleryCell {
    pub true_class: usize,
    pub predicted_class: usize,
    /// All errors in this cell, not only the ones shown.
    pub count: u64,
    pub items: Vec<GalleryItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub class_names: Vec<String>,
    pub cells: Vec<GalleryCell>,
}

/// Groups misclassified samples by confusion cell, largest cells first, with
/// up to `per_cell` overlays each.
pub fn misclassification_gallery(
    evaluation: &Evaluation,
    overlay_for: impl Fn(&str) -> Option<Vec<u8>>,
    per_cell: usize,
) -> Gallery {
    let mut cells: Vec<GalleryCell> = evaluation
        .report
        .matrix
        .errors()
        .into_iter()
        .map(|(t, p, count)| GalleryCell { true_class: t, predicted_class: p, count, items: Vec::new() })
        .collect();
    cells.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.true_class.cmp(&b.true_class))
            .then(a.predicted_class.cmp(&b.predicted_class))
    });
    for pred in evaluation.predictions.iter().filter(|p| !p.is_correct()) {
        let cell = cells
            .iter_mut()
            .find(|c| c.true_class == pred.true_class && c.predicted_class == pred.predicted_class)
            .expect("every error has a cell");
        if cell.items.len() < per_cell {
            cell.items.push(GalleryItem {
                sample_id: pred.sample_id.clone(),
                overlay_png: overlay_for(&pred.sample_id),
            });
        }
    }
    Gallery { class_names: evaluation.report.class_names.clone(), cells }
}

fn escape_html(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Gallery {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Static HTML page with overlays embedded as data URIs.
    pub fn render_html(&self) -> String {
        let name = |c: usize| escape_html(self.class_names.get(c).map(String::as_str).unwrap_or("?"));
        let mut html = String::from(
            "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Misclassified samples</title>\n\
             <style>body{font-family:sans-serif}figure{display:inline-block;margin:4px}\
             img{max-width:224px}</style></head><body>\n<h1>Misclassified samples</h1>\n",
        );
        if self.cells.is_empty() {
            html.push_str("<p>No misclassified samples.</p>\n");
        }
        for cell in &self.cells {
            let _ = writeln!(
                html,
                "<section><h2>true: {} &rarr; predicted: {} ({} errors)</h2>",
                name(cell.true_class),
                name(cell.predicted_class),
                cell.count
            );
            for item in &cell.items {
                let id = escape_html(&item.sample_id);
                let _ = write!(html, "<figure data-sample-id=\"{id}\">");
                if let Some(png) = &item.overlay_png {
                    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
                    let _ = write!(html, "<img alt=\"{id}\" src=\"data:image/png;base64,{b64}\">");
                }
                let _ = writeln!(
                    html,
                    "<figcaption>{id}<br>true: {} / predicted: {}</figcaption></figure>",
                    name(cell.true_class),
                    name(cell.predicted_class)
                );
            }
            html.push_str("</section>\n");
        }
        html.push_str("</body></html>\n");
        html
    }
}
