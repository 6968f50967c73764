//! Parameter-space evaluation: expression classification of generated
//! anchors, class-balanced focal loss for imbalanced label sets, and the
//! per-label / per-sample accuracy and G-mean metrics.
//!
//! Generated anchors are classified directly in (expression, jaw) parameter
//! space, either by a trained MLP classifier or by the nearest-center oracle
//! of a synthetic dataset, so the generator is judged on exactly what it
//! produced.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::dataset::{DatasetManifest, Provenance, Split};
use crate::error::{Error, Result};
use crate::i2fet::I2FetModel;
use crate::mat::Mat;
use crate::nn::{self, Adam, Mlp};
use crate::rng;
use crate::tape::Tape;
use crate::text_embed::EmbeddingTable;

/// Class-balanced focal loss configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CBFocalConfig {
    /// Effective-number decay in [0, 1).
    pub beta: f64,
    /// Focusing exponent, >= 0.
    pub gamma: f64,
    pub class_counts: Vec<usize>,
}

impl CBFocalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if self.class_counts.is_empty() || self.class_counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("class counts must be positive".into()));
        }
        Ok(())
    }

    /// Inverse effective-number weights (1 - beta) / (1 - beta^n), normalized
    /// to mean one over classes.
    pub fn weights(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let raw: Vec<f64> = self
            .class_counts
            .iter()
            .map(|&n| {
                if self.beta == 0.0 {
                    1.0
                } else {
                    (1.0 - self.beta) / (1.0 - self.beta.powi(n as i32))
                }
            })
            .collect();
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        Ok(raw.iter().map(|w| w / mean).collect())
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean over the batch of w_y * (1 - p_y)^gamma * (-log p_y).
pub fn cb_focal_loss(logits: &Mat, labels: &[usize], cfg: &CBFocalConfig) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::Validation(format!(
            "{} logit rows but {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let c = logits.cols();
    if cfg.class_counts.len() != c {
        return Err(Error::Validation(format!(
            "{} class counts but {} logit columns",
            cfg.class_counts.len(),
            c
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Validation(format!("label {bad} out of range for {c} classes")));
    }
    let weights = cfg.weights()?;
    let mut acc = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let p = softmax_row(logits.row(i));
        let py = p[y];
        acc += weights[y] * (1.0 - py).powf(cfg.gamma) * (-py.ln());
    }
    Ok(acc / labels.len() as f64)
}

/// Per-label accuracy (`acc1`, both anchors count) and per-sample accuracy
/// (`acc2`, both labels must be right).
pub fn acc_metrics(
    predictions: &[(usize, usize)],
    truths: &[(usize, usize)],
) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() {
        return Err(Error::Validation(format!(
            "{} predictions but {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::Validation("no predictions".into()));
    }
    let mut correct_labels = 0usize;
    let mut correct_samples = 0usize;
    for (p, t) in predictions.iter().zip(truths) {
        let a = (p.0 == t.0) as usize;
        let b = (p.1 == t.1) as usize;
        correct_labels += a + b;
        correct_samples += (a & b) as usize;
    }
    let acc1 = correct_labels as f64 / (2 * predictions.len()) as f64;
    let acc2 = correct_samples as f64 / predictions.len() as f64;
    Ok((acc1, acc2))
}

/// Geometric mean of per-class recalls; the caller excludes zero-support
/// classes before calling.
pub fn gmean(per_class_recall: &[f64]) -> Result<f64> {
    if per_class_recall.is_empty() {
        return Err(Error::Validation("no recalls to aggregate".into()));
    }
    for &r in per_class_recall {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Domain(format!("recall {r} outside [0, 1]")));
        }
    }
    if per_class_recall.iter().any(|&r| r == 0.0) {
        return Ok(0.0);
    }
    let log_mean =
        per_class_recall.iter().map(|r| r.ln()).sum::<f64>() / per_class_recall.len() as f64;
    Ok(log_mean.exp())
}

/// Classification metrics over anchor predictions.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricsReport {
    pub acc1: f64,
    pub acc2: f64,
    pub gmean: f64,
    /// confusion[truth][predicted], both anchors counted.
    pub confusion: Vec<Vec<usize>>,
    /// Recall per class; `None` where the class has no support.
    pub per_class_recall: Vec<Option<f64>>,
}

impl MetricsReport {
    pub fn from_anchor_predictions(
        predictions: &[(usize, usize)],
        truths: &[(usize, usize)],
        n_classes: usize,
    ) -> Result<Self> {
        let (acc1, acc2) = acc_metrics(predictions, truths)?;
        let mut confusion = vec![vec![0usize; n_classes]; n_classes];
        for (p, t) in predictions.iter().zip(truths) {
            for (pred, truth) in [(p.0, t.0), (p.1, t.1)] {
                if truth >= n_classes || pred >= n_classes {
                    return Err(Error::Validation(format!(
                        "label ({truth}, {pred}) out of range for {n_classes} classes"
                    )));
                }
                confusion[truth][pred] += 1;
            }
        }
        let per_class_recall: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let support: usize = row.iter().sum();
                (support > 0).then(|| row[c] as f64 / support as f64)
            })
            .collect();
        let supported: Vec<f64> = per_class_recall.iter().flatten().copied().collect();
        let g = gmean(&supported)?;
        Ok(MetricsReport { acc1, acc2, gmean: g, confusion, per_class_recall })
    }
}

/// Classifies one anchor from its expression and jaw coordinates.
pub trait AnchorClassifier {
    fn classify(&self, e: &[f64], jaw: &[f64]) -> usize;
}

/// Nearest-center classification against the synthetic generator's own
/// cluster centers.
#[derive(Debug, Clone)]
pub struct NearestCenterOracle {
    centers: Vec<Vec<f64>>,
}

impl NearestCenterOracle {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::Validation("oracle needs at least one center".into()));
        }
        Ok(NearestCenterOracle { centers })
    }

    /// Centers straight from a synthetic dataset's provenance.
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        match manifest.provenance() {
            Provenance::Synthetic(cfg) => {
                let centers = (0..cfg.vocab.len()).map(|c| cfg.class_center(c)).collect();
                NearestCenterOracle::new(centers)
            }
            Provenance::External { .. } => Err(Error::State(
                "nearest-center oracle requires synthetic provenance with known centers".into(),
            )),
        }
    }
}

impl AnchorClassifier for NearestCenterOracle {
    fn classify(&self, e: &[f64], jaw: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, center) in self.centers.iter().enumerate() {
            let d: f64 = e
                .iter()
                .chain(jaw)
                .zip(center)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }
}

/// Loss used to train the MLP classifier.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum ClassifierLoss {
    CrossEntropy,
    CbFocal { beta: f64, gamma: f64 },
}

/// Classifier training configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: ClassifierLoss,
    /// Fraction held out for the reported accuracy.
    pub holdout_frac: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            loss: ClassifierLoss::CbFocal { beta: 0.9999, gamma: 2.0 },
            holdout_frac: 0.1,
        }
    }
}

/// MLP over [expression | jaw] features with two hidden layers of width 128.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    mlp: Mlp,
    feature_dim: usize,
    n_classes: usize,
}

impl ClassifierModel {
    pub fn new(feature_dim: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if feature_dim == 0 || n_classes < 2 {
            return Err(Error::Config("classifier needs features and at least 2 classes".into()));
        }
        let mut r = rng::stream(rng::derive_seed(seed, &[0xc1a55]));
        Ok(ClassifierModel {
            mlp: Mlp::new(&mut r, &[feature_dim, 128, 128, n_classes]),
            feature_dim,
            n_classes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.mlp.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.mlp.params_mut()
    }

    /// Raw logits for a feature batch.
    pub fn logits(&self, features: &Mat) -> Result<Mat> {
        if features.cols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "features have {} columns, classifier expects {}",
                features.cols(),
                self.feature_dim
            )));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let mlp = self.mlp.bind(&mut t, &mut reg);
        let x = t.leaf(features.clone());
        let out = mlp.apply(&mut t, x);
        Ok(t.value(out).clone())
    }

    pub fn predict(&self, feature: &[f64]) -> Result<usize> {
        let logits = self.logits(&Mat::row_vec(feature.to_vec()))?;
        let row = logits.row(0);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        Ok(best)
    }
}

impl AnchorClassifier for ClassifierModel {
    fn classify(&self, e: &[f64], jaw: &[f64]) -> usize {
        let mut f = e.to_vec();
        f.extend_from_slice(jaw);
        self.predict(&f).unwrap_or(0)
    }
}

/// Trains the classifier; returns the model and its held-out accuracy.
/// Every sample contributes its features/label as one example.
pub fn train_classifier(
    examples: &[(Vec<f64>, usize)],
    n_classes: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(ClassifierModel, f64)> {
    if examples.is_empty() {
        return Err(Error::Validation("no training examples".into()));
    }
    let mut seen_classes = vec![false; n_classes];
    for (f, y) in examples {
        if *y >= n_classes {
            return Err(Error::Validation(format!("label {y} out of range")));
        }
        if f.len() != examples[0].0.len() {
            return Err(Error::Shape("inconsistent feature dims".into()));
        }
        seen_classes[*y] = true;
    }
    if seen_classes.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::Validation("training set contains a single class".into()));
    }

    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng::shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, &[0x401d])), &mut order);
    let holdout = ((examples.len() as f64 * cfg.holdout_frac).round() as usize)
        .clamp(1, examples.len() - 1);
    let (hold_idx, train_idx) = order.split_at(holdout);

    // Effective-number weights from the training portion.
    let mut counts = vec![0usize; n_classes];
    for &i in train_idx {
        counts[examples[i].1] += 1;
    }
    let (weights, gamma) = match cfg.loss {
        ClassifierLoss::CrossEntropy => (vec![1.0; n_classes], 0.0),
        ClassifierLoss::CbFocal { beta, gamma } => {
            let safe_counts: Vec<usize> = counts.iter().map(|&c| c.max(1)).collect();
            let w = CBFocalConfig { beta, gamma, class_counts: safe_counts }.weights()?;
            (w, gamma)
        }
    };

    let feature_dim = examples[0].0.len();
    let mut model = ClassifierModel::new(feature_dim, n_classes, cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);

    for epoch in 0..cfg.epochs {
        let mut idx = train_idx.to_vec();
        rng::shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, &[1 + epoch as u64])), &mut idx);
        for chunk in idx.chunks(cfg.batch_size) {
            let mut x = Mat::zeros(chunk.len(), feature_dim);
            let mut onehot = Mat::zeros(chunk.len(), n_classes);
            let mut w_col = Mat::zeros(chunk.len(), 1);
            for (i, &e) in chunk.iter().enumerate() {
                x.row_mut(i).copy_from_slice(&examples[e].0);
                onehot[(i, examples[e].1)] = 1.0;
                w_col[(i, 0)] = weights[examples[e].1];
            }
            let mut t = Tape::new();
            let mut reg = Vec::new();
            let mlp = model.mlp.bind(&mut t, &mut reg);
            let x_leaf = t.leaf(x);
            let logits = mlp.apply(&mut t, x_leaf);
            let probs = t.softmax_rows(logits);
            let oh = t.leaf(onehot);
            let picked = t.mul(probs, oh);
            let p_y = t.row_sums(picked);
            let log_p = t.ln(p_y);
            let ones = t.leaf(Mat::filled(chunk.len(), 1, 1.0));
            let one_minus = t.sub(ones, p_y);
            let focal = t.pow_const(one_minus, gamma);
            let term = t.mul(focal, log_p);
            let w_leaf = t.leaf(w_col);
            let weighted = t.mul(w_leaf, term);
            let mean = t.mean_all(weighted);
            let loss = t.scale(mean, -1.0);
            if !t.scalar(loss).is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let grads = t.backward(loss);
            let grad_mats = nn::collect_grads(&t, &grads, &reg);
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_mats);
        }
    }

    let mut correct = 0usize;
    for &i in hold_idx {
        if model.predict(&examples[i].0)? == examples[i].1 {
            correct += 1;
        }
    }
    let holdout_acc = correct as f64 / hold_idx.len() as f64;
    Ok((model, holdout_acc))
}

/// Classification examples from a manifest split: each sample contributes
/// both anchors as ([expression | jaw], class) pairs.
pub fn anchor_examples(manifest: &DatasetManifest, split: Split) -> Result<Vec<(Vec<f64>, usize)>> {
    let vocab = manifest.vocab();
    let mut out = Vec::new();
    for &i in &manifest.indices_of(split) {
        let s = manifest.sample(i)?;
        let jaw0 = &s.anchors.theta0[3..];
        let jaw1 = &s.anchors.theta1[3..];
        for (e, jaw, label) in
            [(&s.anchors.e0, jaw0, &s.label_from), (&s.anchors.e1, jaw1, &s.label_to)]
        {
            let mut f = e.clone();
            f.extend_from_slice(jaw);
            let y = vocab
                .index_of(label)
                .ok_or_else(|| Error::Validation(format!("label {label:?} not in vocabulary")))?;
            out.push((f, y));
        }
    }
    Ok(out)
}

/// Metrics of one generation run plus the ground-truth ceiling.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GenerationEval {
    pub generated: MetricsReport,
    pub ground_truth: MetricsReport,
}

/// Generates anchors for every test instruction (fixed per-sample seeds
/// derived from `seed`), classifies them, and reports the metrics together
/// with the ground-truth-anchor ceiling.
pub fn evaluate_generation(
    model: &I2FetModel,
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    judge: &dyn AnchorClassifier,
    seed: u64,
) -> Result<GenerationEval> {
    let test_idx = manifest.indices_of(Split::Test);
    if test_idx.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let cfg = model.config();
    let m = cfg.m_tokens;
    let b = test_idx.len();
    let mut pooled = Mat::zeros(b * m, cfg.text_dim);
    let mut z_e = Mat::zeros(b * m, cfg.latent_dim);
    let mut z_p = Mat::zeros(b * m, cfg.latent_dim);
    let vocab = manifest.vocab();
    let mut truths = Vec::with_capacity(b);
    for (row, &i) in test_idx.iter().enumerate() {
        let s = manifest.sample(i)?;
        let emb = table.get(&s.instruction.text)?;
        let p = emb.pooled();
        for k in 0..m {
            pooled.row_mut(row * m + k).copy_from_slice(p.row(0));
        }
        let mut stream = rng::stream(rng::derive_seed(seed, &[0x9e4e, i as u64]));
        let ze = rng::normal_mat(&mut stream, m, cfg.latent_dim);
        let zp = rng::normal_mat(&mut stream, m, cfg.latent_dim);
        for k in 0..m {
            z_e.row_mut(row * m + k).copy_from_slice(ze.row(k));
            z_p.row_mut(row * m + k).copy_from_slice(zp.row(k));
        }
        let from = vocab
            .index_of(&s.label_from)
            .ok_or_else(|| Error::Validation("label not in vocabulary".into()))?;
        let to = vocab
            .index_of(&s.label_to)
            .ok_or_else(|| Error::Validation("label not in vocabulary".into()))?;
        truths.push((from, to));
    }

    let (e_hat, th_hat) = model.generate_from_latents(&pooled, &z_e, &z_p, b)?;
    let jaw_at = |th: &Mat, row: usize| th.row(row)[cfg.pose_dim - cfg.jaw_dim()..].to_vec();
    let mut generated_preds = Vec::with_capacity(b);
    let mut gt_preds = Vec::with_capacity(b);
    for (row, &i) in test_idx.iter().enumerate() {
        let s = manifest.sample(i)?;
        let p_from = judge.classify(e_hat.row(row * m), &jaw_at(&th_hat, row * m));
        let p_to = judge.classify(e_hat.row(row * m + 1), &jaw_at(&th_hat, row * m + 1));
        generated_preds.push((p_from, p_to));
        let g_from = judge.classify(&s.anchors.e0, &s.anchors.theta0[3..]);
        let g_to = judge.classify(&s.anchors.e1, &s.anchors.theta1[3..]);
        gt_preds.push((g_from, g_to));
    }
    let n_classes = vocab.len();
    Ok(GenerationEval {
        generated: MetricsReport::from_anchor_predictions(&generated_preds, &truths, n_classes)?,
        ground_truth: MetricsReport::from_anchor_predictions(&gt_preds, &truths, n_classes)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_reduces_to_cross_entropy_at_gamma_zero() {
        let logits = rng::normal_mat(&mut rng::stream(1), 6, 3);
        let labels = [0usize, 1, 2, 0, 1, 2];
        let cfg = CBFocalConfig { beta: 0.5, gamma: 0.0, class_counts: vec![10, 10, 10] };
        let focal = cb_focal_loss(&logits, &labels, &cfg).unwrap();
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            ce -= softmax_row(logits.row(i))[y].ln();
        }
        ce /= labels.len() as f64;
        assert!((focal - ce).abs() < 1e-10);
    }

    #[test]
    fn beta_zero_collapses_weights_to_one() {
        let cfg = CBFocalConfig { beta: 0.0, gamma: 2.0, class_counts: vec![5, 500] };
        let w = cfg.weights().unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn effective_number_weight_ratio() {
        let cfg = CBFocalConfig { beta: 0.99, gamma: 2.0, class_counts: vec![10, 100] };
        let w = cfg.weights().unwrap();
        let ratio = w[0] / w[1];
        let expected = (1.0 - 0.99f64.powi(100)) / (1.0 - 0.99f64.powi(10));
        assert!((ratio - expected).abs() < 1e-12);
        // Direct evaluation of the closed form.
        assert!((expected - 6.630215).abs() < 1e-5);
    }

    #[test]
    fn acc_metrics_counting() {
        // 3 samples, 5 of 6 labels correct, 2 samples fully correct.
        let truths = [(0, 1), (1, 2), (2, 0)];
        let preds = [(0, 1), (1, 2), (2, 1)];
        let (acc1, acc2) = acc_metrics(&preds, &truths).unwrap();
        assert!((acc1 - 5.0 / 6.0).abs() < 1e-12);
        assert!((acc2 - 2.0 / 3.0).abs() < 1e-12);
        let all_right = acc_metrics(&truths, &truths).unwrap();
        assert_eq!(all_right, (1.0, 1.0));
        let wrong = [(1, 0), (2, 1), (0, 2)];
        assert_eq!(acc_metrics(&wrong, &truths).unwrap(), (0.0, 0.0));
        assert!(matches!(acc_metrics(&preds[..2], &truths), Err(Error::Validation(_))));
    }

    #[test]
    fn gmean_cases() {
        assert_eq!(gmean(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(gmean(&[1.0, 0.0, 0.9]).unwrap(), 0.0);
        let g = gmean(&[1.0, 0.81, 0.64]).unwrap();
        let expected = (1.0f64 * 0.81 * 0.64).powf(1.0 / 3.0);
        assert!((g - expected).abs() < 1e-12);
        assert!(matches!(gmean(&[]), Err(Error::Validation(_))));
        assert!(matches!(gmean(&[1.2]), Err(Error::Domain(_))));
    }

    #[test]
    fn report_confusion_rows_sum_to_support() {
        let truths = [(0, 1), (1, 2), (2, 0), (0, 2)];
        let preds = [(0, 1), (2, 2), (2, 0), (1, 2)];
        let r = MetricsReport::from_anchor_predictions(&preds, &truths, 3).unwrap();
        assert!(r.acc2 <= r.acc1);
        let supports: Vec<usize> = r.confusion.iter().map(|row| row.iter().sum()).collect();
        // Each truth label appears in the confusion matrix once per anchor.
        let mut expected = vec![0usize; 3];
        for t in &truths {
            expected[t.0] += 1;
            expected[t.1] += 1;
        }
        assert_eq!(supports, expected);
        let trace: usize = (0..3).map(|i| r.confusion[i][i]).sum();
        let total: usize = supports.iter().sum();
        assert!((trace as f64 / total as f64 - r.acc1).abs() < 1e-12);
    }

    #[test]
    fn nearest_center_oracle_classifies_by_distance() {
        let oracle = NearestCenterOracle::new(vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![1.0, 1.0, 1.0, 1.0],
        ])
        .unwrap();
        assert_eq!(oracle.classify(&[0.1, -0.1, 0.05], &[0.0]), 0);
        assert_eq!(oracle.classify(&[0.9, 1.1, 0.95], &[1.05]), 1);
    }

    #[test]
    fn classifier_rejects_single_class() {
        let examples: Vec<(Vec<f64>, usize)> =
            (0..10).map(|i| (vec![i as f64, 0.0], 1usize)).collect();
        let cfg = ClassifierTrainConfig::default();
        assert!(matches!(
            train_classifier(&examples, 3, &cfg),
            Err(Error::Validation(_))
        ));
    }
}
