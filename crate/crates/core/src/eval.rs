//! Segmentation-based scoring of generated photos.
//!
//! A small segmenter is trained on real photos; generated photos are then
//! segmented and compared with the label maps they were generated from. All
//! three scores derive from one integer confusion matrix, so sharded results
//! merge exactly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::Digest;

use crate::data::{batch_iterator, Dataset, Split};
use crate::error::{Error, Result};
use crate::models::{Generator, Segmenter, SegmenterSpec};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Minimum held-out per-pixel accuracy on real photos before any generator is scored.
pub const SEGMENTER_GATE: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    /// Row-major; rows are ground truth, columns are predictions.
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub per_pixel_acc: f64,
    pub per_class_acc: f64,
    pub mean_iou: f64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape(format!("{} counts for {k} classes", counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn from_predictions(k: usize, labels: &[u8], predictions: &[u8]) -> Result<Self> {
        let mut cm = Self::new(k);
        cm.accumulate(labels, predictions)?;
        Ok(cm)
    }

    pub fn accumulate(&mut self, labels: &[u8], predictions: &[u8]) -> Result<()> {
        if labels.len() != predictions.len() {
            return Err(Error::shape(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        for (&l, &p) in labels.iter().zip(predictions) {
            let (l, p) = (l as usize, p as usize);
            if l >= self.k || p >= self.k {
                return Err(Error::data(format!("class id outside 0..{}", self.k)));
            }
            self.counts[l * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.k != other.k {
            return Err(Error::shape(format!("merging {} and {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn row_sum(&self, r: usize) -> u64 {
        self.counts[r * self.k..(r + 1) * self.k].iter().sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, c)).sum()
    }

    /// Classes without ground-truth pixels are left out of both class means.
    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::data("no evaluated pixels"));
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        let mut acc_sum = 0.0;
        let mut iou_sum = 0.0;
        let mut present = 0usize;
        for c in 0..self.k {
            let row = self.row_sum(c);
            if row == 0 {
                continue;
            }
            let diag = self.get(c, c);
            present += 1;
            acc_sum += diag as f64 / row as f64;
            iou_sum += diag as f64 / (row + self.col_sum(c) - diag) as f64;
        }
        Ok(Scores {
            per_pixel_acc: trace as f64 / total as f64,
            per_class_acc: acc_sum / present as f64,
            mean_iou: iou_sum / present as f64,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    /// Row label used when runs are compared.
    pub label: String,
    pub config_hash: String,
    pub dataset_hash: String,
    pub epoch: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub per_pixel_acc: f64,
    pub per_class_acc: f64,
    pub mean_iou: f64,
    pub n_images: usize,
    pub confusion: ConfusionMatrix,
    pub run: RunMeta,
    /// Mean of each loss term over the epoch that produced this record.
    #[serde(default)]
    pub loss_terms: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn from_confusion(confusion: ConfusionMatrix, n_images: usize, run: RunMeta) -> Result<Self> {
        let s = confusion.scores()?;
        Ok(Self {
            per_pixel_acc: s.per_pixel_acc,
            per_class_acc: s.per_class_acc,
            mean_iou: s.mean_iou,
            n_images,
            confusion,
            run,
            loss_terms: BTreeMap::new(),
        })
    }

    pub fn scores(&self) -> Scores {
        Scores {
            per_pixel_acc: self.per_pixel_acc,
            per_class_acc: self.per_class_acc,
            mean_iou: self.mean_iou,
        }
    }

    /// Recomputes the scores from the stored confusion matrix and checks them.
    pub fn verify(&self, tol: f64) -> Result<()> {
        let s = self.confusion.scores()?;
        let ok = (s.per_pixel_acc - self.per_pixel_acc).abs() <= tol
            && (s.per_class_acc - self.per_class_acc).abs() <= tol
            && (s.mean_iou - self.mean_iou).abs() <= tol;
        if ok {
            Ok(())
        } else {
            Err(Error::Invariant(format!(
                "stored scores {:?} disagree with confusion matrix {:?}",
                self.scores(),
                s
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

/// A segmenter that passed the accuracy gate. Only this type can score
/// generated images.
#[derive(Clone, Debug)]
pub struct ReferenceSegmenter {
    segmenter: Segmenter<f32>,
    heldout_acc: f64,
    dataset_spec_hash: String,
}

impl ReferenceSegmenter {
    pub fn new(segmenter: Segmenter<f32>, heldout_acc: f64, dataset_spec_hash: String) -> Result<Self> {
        if !(heldout_acc >= SEGMENTER_GATE) {
            return Err(Error::SegmenterGate {
                accuracy: heldout_acc,
                gate: SEGMENTER_GATE,
            });
        }
        Ok(Self {
            segmenter,
            heldout_acc,
            dataset_spec_hash,
        })
    }

    pub fn segmenter(&self) -> &Segmenter<f32> {
        &self.segmenter
    }

    pub fn heldout_acc(&self) -> f64 {
        self.heldout_acc
    }

    pub fn dataset_spec_hash(&self) -> &str {
        &self.dataset_spec_hash
    }

    /// Confusion matrix of segmenting `images` against `labels`, processed in chunks.
    pub fn confusion(&self, images: &Tensor<f32>, labels: &[u8]) -> Result<ConfusionMatrix> {
        let k = self.segmenter.spec().num_classes;
        let mut cm = ConfusionMatrix::new(k);
        let n = images.batch();
        let plane = labels.len() / n.max(1);
        for start in (0..n).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
            let pred = self.segmenter.predict(&images.gather(&idx))?;
            cm.accumulate(&labels[start * plane..(start + idx.len()) * plane], &pred)?;
        }
        Ok(cm)
    }
}

const EVAL_CHUNK: usize = 32;

/// Pseudo-FCN scores of generated photos against the label maps they came from.
pub fn fcn_scores(
    reference: &ReferenceSegmenter,
    generated: &Tensor<f32>,
    label_maps: &[u8],
    run: RunMeta,
) -> Result<MetricsRecord> {
    let (n, _, h, w) = generated.dims4();
    if label_maps.len() != n * h * w {
        return Err(Error::shape(format!(
            "{} label pixels for {n} images of {h}x{w}",
            label_maps.len()
        )));
    }
    let cm = reference.confusion(generated, label_maps)?;
    MetricsRecord::from_confusion(cm, n, run)
}

/// Generates every sample of `split` in eval mode and scores the result.
pub fn score_generator(
    reference: &ReferenceSegmenter,
    generator: &Generator<f32>,
    split: &Split,
    run: RunMeta,
) -> Result<MetricsRecord> {
    let k = reference.segmenter.spec().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(split.len())).collect();
        let batch = split.batch(&idx)?;
        let fake = generator.generate(&batch.x)?;
        cm.merge(&reference.confusion(&fake, &batch.labels)?)?;
    }
    MetricsRecord::from_confusion(cm, split.len(), run)
}

/// Scores the real photos of a split.
pub fn score_real(reference: &ReferenceSegmenter, split: &Split, run: RunMeta) -> Result<MetricsRecord> {
    let all = split.all()?;
    fcn_scores(reference, &all.y, &all.labels, run)
}

/// Mean softmax cross-entropy over pixels and its gradient.
pub fn cross_entropy(logits: &Tensor<f32>, labels: &[u8]) -> Result<(f64, Tensor<f32>)> {
    let (n, k, h, w) = logits.dims4();
    let plane = h * w;
    if labels.len() != n * plane {
        return Err(Error::shape("label count does not match logits"));
    }
    let count = (n * plane) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0f64;
    let g = grad.data_mut();
    let x = logits.data();
    for i in 0..n {
        for p in 0..plane {
            let at = |c: usize| i * k * plane + c * plane + p;
            let m = (0..k).map(|c| x[at(c)]).fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = (0..k).map(|c| (x[at(c)] as f64 - m).exp()).sum();
            let label = labels[i * plane + p] as usize;
            if label >= k {
                return Err(Error::data(format!("label {label} not below {k}")));
            }
            loss += z.ln() + m - x[at(label)] as f64;
            for c in 0..k {
                let prob = (x[at(c)] as f64 - m).exp() / z;
                let target = if c == label { 1.0 } else { 0.0 };
                g[at(c)] = ((prob - target) / count) as f32;
            }
        }
    }
    Ok((loss / count, grad))
}

/// Per-pixel accuracy of a plain segmenter on the real photos of a split.
pub fn segmenter_accuracy(segmenter: &Segmenter<f32>, split: &Split) -> Result<f64> {
    let all = split.all()?;
    let mut cm = ConfusionMatrix::new(segmenter.spec().num_classes);
    for start in (0..split.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(split.len())).collect();
        let plane = all.labels.len() / split.len();
        let pred = segmenter.predict(&all.y.gather(&idx))?;
        cm.accumulate(&all.labels[start * plane..(start + idx.len()) * plane], &pred)?;
    }
    Ok(cm.scores()?.per_pixel_acc)
}

#[derive(Clone, Debug)]
pub struct SegmenterReport {
    pub segmenter: Segmenter<f32>,
    pub train_acc: f64,
    pub heldout_acc: f64,
}

/// Trains the scoring segmenter on real (photo, label) pairs without applying the gate.
pub fn fit_segmenter(dataset: &Dataset, cfg: &SegmenterTrainConfig) -> Result<SegmenterReport> {
    let spec = SegmenterSpec::new(dataset.spec.n_classes);
    let mut seg = Segmenter::<f32>::build(&spec, cfg.seed)?;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    adam_cfg.validate()?;
    let mut adam = Adam::new(adam_cfg, seg.params());
    let batch_size = cfg.batch_size.min(dataset.train.len());
    for epoch in 0..cfg.epochs {
        let order = batch_iterator(dataset.train.len(), batch_size, cfg.seed ^ ((epoch as u64 + 1) << 32))?;
        for idx in order {
            let batch = dataset.train.batch(&idx)?;
            let (logits, trace) = seg.forward(&batch.y)?;
            let (loss, grad) = cross_entropy(&logits, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric("segmenter cross-entropy".into()));
            }
            let mut grads = seg.params().zeros_like();
            seg.backward(&trace, &grad, &mut grads);
            adam.update(seg.params_mut(), &grads)?;
        }
    }
    Ok(SegmenterReport {
        train_acc: segmenter_accuracy(&seg, &dataset.train)?,
        heldout_acc: segmenter_accuracy(&seg, &dataset.val)?,
        segmenter: seg,
    })
}

/// Trains the scoring segmenter and applies the accuracy gate on the held-out split.
pub fn train_reference_segmenter(dataset: &Dataset, cfg: &SegmenterTrainConfig) -> Result<ReferenceSegmenter> {
    let report = fit_segmenter(dataset, cfg)?;
    log::info!(
        "segmenter accuracy: train {:.4}, held-out {:.4}",
        report.train_acc,
        report.heldout_acc
    );
    ReferenceSegmenter::new(report.segmenter, report.heldout_acc, dataset.spec.hash())
}

/// Cache location keyed by the dataset spec hash and the training settings.
pub fn segmenter_cache_path(cache_dir: &Path, dataset: &Dataset, cfg: &SegmenterTrainConfig) -> PathBuf {
    let cfg_hash = hex::encode(sha2::Sha256::digest(
        serde_json::to_vec(cfg).expect("config serializes"),
    ));
    cache_dir.join(format!(
        "segmenter-{}-{}.ckpt",
        &dataset.spec.hash()[..16],
        &cfg_hash[..8]
    ))
}

/// Loads the cached reference segmenter for this dataset, training and
/// storing it on first use.
pub fn load_or_train_segmenter(
    cache_dir: &Path,
    dataset: &Dataset,
    cfg: &SegmenterTrainConfig,
) -> Result<ReferenceSegmenter> {
    let path = segmenter_cache_path(cache_dir, dataset, cfg);
    if path.exists() {
        let seg = Segmenter::load(&path)?;
        let acc = segmenter_accuracy(&seg, &dataset.val)?;
        return ReferenceSegmenter::new(seg, acc, dataset.spec.hash());
    }
    let report = fit_segmenter(dataset, cfg)?;
    let reference = ReferenceSegmenter::new(report.segmenter, report.heldout_acc, dataset.spec.hash())?;
    reference.segmenter.save(
        &path,
        json!({
            "dataset_spec_hash": dataset.spec.hash(),
            "train_acc": report.train_acc,
            "heldout_acc": report.heldout_acc,
        }),
    )?;
    Ok(reference)
}

/// Minimum training-set size `(p_t / p_s)^4` for the student risk bound.
pub fn sample_bound(p_t: u64, p_s: u64) -> Result<f64> {
    if p_s == 0 {
        return Err(Error::config("p_s", "student size must be at least 1"));
    }
    Ok((p_t as f64 / p_s as f64).powi(4))
}

pub const METRIC_COLUMNS: [&str; 3] = ["per_pixel_acc", "per_class_acc", "mean_iou"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    /// Means over the runs sharing this label, in [`METRIC_COLUMNS`] order.
    pub values: [f64; 3],
    pub best: [bool; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dataset_hash: String,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    pub fn row(&self, label: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:width$}  runs", "method");
        for c in METRIC_COLUMNS {
            out.push_str(&format!("  {c:>14}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:width$}  {:>4}", r.label, r.runs));
            for (v, b) in r.values.iter().zip(r.best) {
                let cell = format!("{:.4}{}", v, if b { " *" } else { "  " });
                out.push_str(&format!("  {cell:>14}"));
            }
            out.push('\n');
        }
        out.push_str("* best in column\n");
        out
    }
}

/// Tabulates records by row label (mean over records sharing a label, rows in
/// first-seen order) and marks the best value of each column. Ties are all marked.
pub fn compare_runs(records: &[MetricsRecord]) -> Result<ComparisonReport> {
    if records.len() < 2 {
        return Err(Error::Comparability("at least two records are needed".into()));
    }
    let hash = &records[0].run.dataset_hash;
    if let Some(r) = records.iter().find(|r| &r.run.dataset_hash != hash) {
        return Err(Error::Comparability(format!(
            "run `{}` uses dataset {} but `{}` uses {}",
            r.run.run_id, r.run.dataset_hash, records[0].run.run_id, hash
        )));
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in records {
        if !labels.contains(&r.run.label.as_str()) {
            labels.push(&r.run.label);
        }
    }
    let mut rows: Vec<ReportRow> = labels
        .iter()
        .map(|&label| {
            let group: Vec<&MetricsRecord> = records.iter().filter(|r| r.run.label == label).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&MetricsRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            ReportRow {
                label: label.to_string(),
                runs: group.len(),
                values: [
                    mean(|r| r.per_pixel_acc),
                    mean(|r| r.per_class_acc),
                    mean(|r| r.mean_iou),
                ],
                best: [false; 3],
            }
        })
        .collect();
    for c in 0..3 {
        let best = rows.iter().map(|r| r.values[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in &mut rows {
            r.best[c] = r.values[c] == best;
        }
    }
    Ok(ComparisonReport {
        dataset_hash: hash.clone(),
        rows,
    })
}
