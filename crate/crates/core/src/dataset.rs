//! Synthetic instruction-dataset generation, split management, and class
//! statistics.
//!
//! Each sample couples a rendered instruction with a ground-truth anchor
//! pair drawn from per-class Gaussian clusters around well-separated centers.
//! The separation invariant (centers at least six noise deviations apart)
//! makes a nearest-center classifier on ground truth essentially perfect, so
//! end-to-end accuracy measures the learner rather than the data.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::i2fet::AnchorPair;
use crate::rng;
use crate::text_embed::{render_instruction, ExpressionVocabulary, Instruction, TEMPLATE_COUNT};

/// Split assignment of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One dataset record.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Sample {
    pub instruction: Instruction,
    /// Key into the embedding table/archive; equals the instruction text.
    pub embedding_key: String,
    pub subject_id: String,
    /// Identity shape coefficients of the subject.
    pub shape: Vec<f64>,
    pub anchors: AnchorPair,
    pub label_from: String,
    pub label_to: String,
}

impl Sample {
    /// Validates the label/instruction invariant.
    pub fn check(&self) -> Result<()> {
        if self.label_from != self.instruction.expr_from
            || self.label_to != self.instruction.expr_to
        {
            return Err(Error::Validation(format!(
                "sample {}: labels ({}, {}) do not match instruction ({}, {})",
                self.subject_id,
                self.label_from,
                self.label_to,
                self.instruction.expr_from,
                self.instruction.expr_to
            )));
        }
        if self.embedding_key != self.instruction.text {
            return Err(Error::Validation(format!(
                "sample {}: embedding key does not match instruction text",
                self.subject_id
            )));
        }
        if self.shape.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("sample {}: non-finite shape", self.subject_id)));
        }
        Ok(())
    }
}

/// Configuration of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticGenConfig {
    pub vocab: ExpressionVocabulary,
    pub samples_per_pair: usize,
    /// Per-class expression cluster centers.
    pub expr_centers: Vec<Vec<f64>>,
    /// Per-class jaw rotation cluster centers (3 coordinates).
    pub jaw_centers: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub global_pose_jitter_std: f64,
    pub shape_dim: usize,
    pub shape_std: f64,
    /// Optional per-class frequency multipliers; the count of pair (a, b)
    /// scales with `mult[a] * mult[b]`.
    pub class_multipliers: Option<Vec<f64>>,
    pub seed: u64,
}

impl SyntheticGenConfig {
    /// Draws cluster centers from a scaled Gaussian and (if ever necessary)
    /// repels them until every pair is at least six noise deviations apart.
    pub fn with_random_centers(
        vocab: ExpressionVocabulary,
        samples_per_pair: usize,
        expr_dim: usize,
        seed: u64,
    ) -> Self {
        let n = vocab.len();
        let noise_std = 0.05;
        let mut r = rng::stream(rng::derive_seed(seed, &[0xce27e5]));
        let center_std = 0.25;
        let mut expr_centers: Vec<Vec<f64>> = (0..n)
            .map(|_| rng::normal_vec(&mut r, expr_dim).iter().map(|v| v * center_std).collect())
            .collect();
        let mut jaw_centers: Vec<Vec<f64>> = (0..n)
            .map(|_| rng::normal_vec(&mut r, 3).iter().map(|v| v * center_std).collect())
            .collect();
        // Iterative pairwise repulsion until the separation invariant holds.
        let min_sep = 6.0 * noise_std;
        loop {
            let mut moved = false;
            for a in 0..n {
                for b in (a + 1)..n {
                    let mut diff: Vec<f64> = expr_centers[a]
                        .iter()
                        .zip(&expr_centers[b])
                        .map(|(x, y)| x - y)
                        .chain(jaw_centers[a].iter().zip(&jaw_centers[b]).map(|(x, y)| x - y))
                        .collect();
                    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if dist >= min_sep {
                        continue;
                    }
                    moved = true;
                    if dist < 1e-12 {
                        diff = rng::normal_vec(&mut r, expr_dim + 3);
                    }
                    let norm = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let push = (min_sep - dist) * 0.6 + 1e-3;
                    for (i, d) in diff.iter().enumerate() {
                        let delta = d / norm * push;
                        if i < expr_dim {
                            expr_centers[a][i] += delta;
                            expr_centers[b][i] -= delta;
                        } else {
                            jaw_centers[a][i - expr_dim] += delta;
                            jaw_centers[b][i - expr_dim] -= delta;
                        }
                    }
                }
            }
            if !moved {
                break;
            }
        }
        SyntheticGenConfig {
            vocab,
            samples_per_pair,
            expr_centers,
            jaw_centers,
            noise_std,
            global_pose_jitter_std: 0.02,
            shape_dim: 100,
            shape_std: 0.1,
            class_multipliers: None,
            seed,
        }
    }

    pub fn expr_dim(&self) -> usize {
        self.expr_centers.first().map(|c| c.len()).unwrap_or(0)
    }

    /// Concatenated (expression, jaw) center of one class; the feature space
    /// of the nearest-center oracle.
    pub fn class_center(&self, class: usize) -> Vec<f64> {
        let mut c = self.expr_centers[class].clone();
        c.extend_from_slice(&self.jaw_centers[class]);
        c
    }

    /// Smallest pairwise distance between class centers in (e, jaw) space.
    pub fn min_center_separation(&self) -> f64 {
        let n = self.vocab.len();
        let mut min = f64::INFINITY;
        for a in 0..n {
            for b in (a + 1)..n {
                let ca = self.class_center(a);
                let cb = self.class_center(b);
                let d = ca.iter().zip(&cb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
                min = min.min(d);
            }
        }
        min
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vocab.len();
        if self.samples_per_pair == 0 {
            return Err(Error::Config("samples_per_pair must be positive".into()));
        }
        if self.expr_centers.len() != n || self.jaw_centers.len() != n {
            return Err(Error::Config("one center per vocabulary class is required".into()));
        }
        let expr_dim = self.expr_dim();
        if expr_dim == 0 || self.expr_centers.iter().any(|c| c.len() != expr_dim) {
            return Err(Error::Config("expression centers must share a positive dimension".into()));
        }
        if self.jaw_centers.iter().any(|c| c.len() != 3) {
            return Err(Error::Config("jaw centers must have 3 coordinates".into()));
        }
        if !(self.noise_std > 0.0) || !(self.global_pose_jitter_std >= 0.0) {
            return Err(Error::Config("noise levels must be positive".into()));
        }
        if let Some(m) = &self.class_multipliers {
            if m.len() != n || m.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config("class multipliers must be positive, one per class".into()));
            }
        }
        let sep = self.min_center_separation();
        if sep < 6.0 * self.noise_std {
            return Err(Error::Config(format!(
                "centers are separated by {sep:.4}, need at least {:.4}",
                6.0 * self.noise_std
            )));
        }
        Ok(())
    }

    /// Count of samples generated for an ordered pair (a, b).
    pub fn pair_count(&self, a: usize, b: usize) -> usize {
        let base = self.samples_per_pair as f64;
        match &self.class_multipliers {
            Some(m) => (base * m[a] * m[b]).round() as usize,
            None => self.samples_per_pair,
        }
    }
}

/// Dataset provenance, kept alongside the samples.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Provenance {
    Synthetic(SyntheticGenConfig),
    External { path: String },
}

/// Samples plus split bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    vocab: ExpressionVocabulary,
    samples: Vec<Sample>,
    splits: Vec<Split>,
    provenance: Provenance,
}

impl DatasetManifest {
    pub fn new(
        vocab: ExpressionVocabulary,
        samples: Vec<Sample>,
        splits: Vec<Split>,
        provenance: Provenance,
    ) -> Result<Self> {
        if samples.len() != splits.len() {
            return Err(Error::Validation("one split assignment per sample is required".into()));
        }
        let m = DatasetManifest { vocab, samples, splits, provenance };
        m.validate()?;
        Ok(m)
    }

    /// Re-checks every invariant: label/instruction agreement, vocabulary
    /// membership, and dimensional consistency across samples.
    pub fn validate(&self) -> Result<()> {
        let mut dims: Option<(usize, usize, usize)> = None;
        for s in &self.samples {
            s.check()?;
            for label in [&s.label_from, &s.label_to] {
                if self.vocab.index_of(label).is_none() {
                    return Err(Error::Validation(format!(
                        "sample {}: label {label:?} is not in the vocabulary",
                        s.subject_id
                    )));
                }
            }
            let d = (s.anchors.e0.len(), s.anchors.theta0.len(), s.shape.len());
            s.anchors.check(d.0, d.1)?;
            match dims {
                None => dims = Some(d),
                Some(expect) if expect != d => {
                    return Err(Error::Validation(format!(
                        "sample {}: dims {:?} differ from {:?}",
                        s.subject_id, d, expect
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> &ExpressionVocabulary {
        &self.vocab
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, idx: usize) -> Result<&Sample> {
        self.samples
            .get(idx)
            .ok_or_else(|| Error::Validation(format!("sample index {idx} out of range")))
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    /// Anchor-label histogram; every sample contributes both of its labels.
    pub fn class_histogram(&self) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for s in &self.samples {
            *h.entry(s.label_from.clone()).or_insert(0) += 1;
            *h.entry(s.label_to.clone()).or_insert(0) += 1;
        }
        h
    }
}

/// Generates the synthetic dataset: for every ordered pair of distinct
/// labels, `pair_count` samples with anchors drawn as center + Gaussian
/// noise and a template chosen uniformly. All samples start in the training
/// split; apply [`split`] afterwards.
pub fn generate_synthetic(cfg: &SyntheticGenConfig) -> Result<DatasetManifest> {
    cfg.validate()?;
    let mut samples = Vec::new();
    let mut global_idx: u64 = 0;
    for (a, from) in cfg.vocab.labels().iter().enumerate() {
        for (b, to) in cfg.vocab.labels().iter().enumerate() {
            if a == b {
                continue;
            }
            for _ in 0..cfg.pair_count(a, b) {
                let mut r = rng::stream(rng::derive_seed(cfg.seed, &[0x5a3, global_idx]));
                let noisy = |r: &mut rand_chacha::ChaCha8Rng, center: &[f64], std: f64| {
                    center.iter().map(|&c| c + std * rng::normal(r)).collect::<Vec<f64>>()
                };
                let e0 = noisy(&mut r, &cfg.expr_centers[a], cfg.noise_std);
                let e1 = noisy(&mut r, &cfg.expr_centers[b], cfg.noise_std);
                let jaw0 = noisy(&mut r, &cfg.jaw_centers[a], cfg.noise_std);
                let jaw1 = noisy(&mut r, &cfg.jaw_centers[b], cfg.noise_std);
                let zero3 = [0.0; 3];
                let g0 = noisy(&mut r, &zero3, cfg.global_pose_jitter_std);
                let g1 = noisy(&mut r, &zero3, cfg.global_pose_jitter_std);
                let mut theta0 = g0;
                theta0.extend_from_slice(&jaw0);
                let mut theta1 = g1;
                theta1.extend_from_slice(&jaw1);
                let shape: Vec<f64> =
                    (0..cfg.shape_dim).map(|_| cfg.shape_std * rng::normal(&mut r)).collect();
                let template_id = r.gen_range(1..=TEMPLATE_COUNT);
                let instruction = render_instruction(template_id, from, to, &cfg.vocab)?;
                let embedding_key = instruction.text.clone();
                samples.push(Sample {
                    instruction,
                    embedding_key,
                    subject_id: format!("synth{global_idx:05}"),
                    shape,
                    anchors: AnchorPair { e0, theta0, e1, theta1 },
                    label_from: from.clone(),
                    label_to: to.clone(),
                });
                global_idx += 1;
            }
        }
    }
    let splits = vec![Split::Train; samples.len()];
    DatasetManifest::new(cfg.vocab.clone(), samples, splits, Provenance::Synthetic(cfg.clone()))
}

/// Proportional allocation by largest remainder: assigns `target` picks over
/// strata with the given sizes, never exceeding a stratum's size.
fn allocate(sizes: &[usize], target: usize) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    assert!(target <= total, "allocation target exceeds population");
    if total == 0 {
        return vec![0; sizes.len()];
    }
    let quota: Vec<f64> = sizes.iter().map(|&k| k as f64 * target as f64 / total as f64).collect();
    let mut picks: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    for (p, &k) in picks.iter_mut().zip(sizes) {
        *p = (*p).min(k);
    }
    let mut assigned: usize = picks.iter().sum();
    // Distribute the remainder by descending fractional part, stratum order
    // breaking ties.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&i, &j| {
        let fi = quota[i] - quota[i].floor();
        let fj = quota[j] - quota[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    let mut cursor = 0;
    while assigned < target {
        let s = order[cursor % order.len()];
        cursor += 1;
        if picks[s] < sizes[s] {
            picks[s] += 1;
            assigned += 1;
        }
    }
    picks
}

/// Seeded, stratified split: `test_frac` of all samples to the test set,
/// then `val_frac_of_train` of the remainder to validation, stratified by
/// ordered label pair so every pair stays represented in training.
pub fn split(
    manifest: &DatasetManifest,
    test_frac: f64,
    val_frac_of_train: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    for f in [test_frac, val_frac_of_train] {
        if !(0.0 < f && f < 1.0) {
            return Err(Error::Validation(format!("split fractions must be in (0, 1), got {f}")));
        }
    }
    // Stable stratum order: BTreeMap over the ordered label pair.
    let mut strata: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        strata.entry((s.label_from.clone(), s.label_to.clone())).or_default().push(i);
    }
    let keys: Vec<(String, String)> = strata.keys().cloned().collect();
    let mut shuffled: Vec<Vec<usize>> = Vec::with_capacity(keys.len());
    for (si, key) in keys.iter().enumerate() {
        let mut idx = strata[key].clone();
        rng::shuffle(&mut rng::stream(rng::derive_seed(seed, &[0x5b11, si as u64])), &mut idx);
        shuffled.push(idx);
    }
    let sizes: Vec<usize> = shuffled.iter().map(|v| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let test_target = (total as f64 * test_frac).round() as usize;
    let test_picks = allocate(&sizes, test_target);
    let remaining: Vec<usize> = sizes.iter().zip(&test_picks).map(|(&k, &t)| k - t).collect();
    let remaining_total: usize = remaining.iter().sum();
    let val_target = (remaining_total as f64 * val_frac_of_train).round() as usize;
    let val_picks = allocate(&remaining, val_target);

    let mut splits = manifest.splits.clone();
    for (si, idx) in shuffled.iter().enumerate() {
        let t = test_picks[si];
        let v = val_picks[si];
        if idx.len() < t + v + 1 {
            return Err(Error::Validation(format!(
                "stratum ({}, {}) has {} samples; too few to keep one in training",
                keys[si].0,
                keys[si].1,
                idx.len()
            )));
        }
        for (pos, &sample_idx) in idx.iter().enumerate() {
            splits[sample_idx] = if pos < t {
                Split::Test
            } else if pos < t + v {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    DatasetManifest::new(
        manifest.vocab.clone(),
        manifest.samples.clone(),
        splits,
        manifest.provenance.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(samples_per_pair: usize, seed: u64) -> SyntheticGenConfig {
        SyntheticGenConfig::with_random_centers(
            ExpressionVocabulary::ck_plus(),
            samples_per_pair,
            50,
            seed,
        )
    }

    #[test]
    fn counting_and_determinism() {
        let cfg = small_cfg(5, 7);
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 42 * 5);
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small_cfg(5, 8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn centers_satisfy_separation_invariant() {
        let cfg = small_cfg(1, 3);
        assert!(cfg.min_center_separation() >= 6.0 * cfg.noise_std);
        let mut bad = cfg.clone();
        for c in &mut bad.expr_centers {
            for v in c.iter_mut() {
                *v = 0.0;
            }
        }
        for c in &mut bad.jaw_centers {
            for v in c.iter_mut() {
                *v = 0.0;
            }
        }
        assert!(matches!(generate_synthetic(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn split_fractions_match_and_are_exhaustive() {
        let cfg = small_cfg(50, 11);
        let manifest = generate_synthetic(&cfg).unwrap();
        assert_eq!(manifest.len(), 2100);
        let s = split(&manifest, 0.10, 0.10, 13).unwrap();
        let test = s.indices_of(Split::Test).len();
        let val = s.indices_of(Split::Val).len();
        let train = s.indices_of(Split::Train).len();
        assert_eq!(test, 210);
        assert_eq!(val, 189);
        assert_eq!(train, 1701);
        assert_eq!(test + val + train, 2100);
        // Every ordered pair appears in training.
        let mut pairs = BTreeMap::new();
        for &i in &s.indices_of(Split::Train) {
            let smp = s.sample(i).unwrap();
            *pairs.entry((smp.label_from.clone(), smp.label_to.clone())).or_insert(0) += 1;
        }
        assert_eq!(pairs.len(), 42);
        // Deterministic per seed.
        let s2 = split(&manifest, 0.10, 0.10, 13).unwrap();
        assert_eq!(s.splits(), s2.splits());
    }

    #[test]
    fn histogram_counts_both_anchor_labels() {
        let cfg = small_cfg(4, 5);
        let manifest = generate_synthetic(&cfg).unwrap();
        let h = manifest.class_histogram();
        let total: usize = h.values().sum();
        assert_eq!(total, 2 * manifest.len());
        // Balanced generator: all classes equal.
        let counts: Vec<usize> = h.values().copied().collect();
        assert!(counts.iter().all(|&c| c == counts[0]));
    }

    #[test]
    fn skewed_multipliers_shift_the_histogram_per_pair_arithmetic() {
        let mut cfg = small_cfg(10, 9);
        let mut mult = vec![1.0; cfg.vocab.len()];
        let happy = cfg.vocab.index_of("happiness").unwrap();
        mult[happy] = 3.0;
        cfg.class_multipliers = Some(mult.clone());
        let manifest = generate_synthetic(&cfg).unwrap();
        // Expected counts straight from the generator arithmetic.
        let mut expected: BTreeMap<String, usize> = BTreeMap::new();
        for (a, from) in cfg.vocab.labels().iter().enumerate() {
            for (b, to) in cfg.vocab.labels().iter().enumerate() {
                if a == b {
                    continue;
                }
                let c = cfg.pair_count(a, b);
                *expected.entry(from.clone()).or_insert(0) += c;
                *expected.entry(to.clone()).or_insert(0) += c;
            }
        }
        assert_eq!(manifest.class_histogram(), expected);
        // The skewed class clearly dominates.
        let h = manifest.class_histogram();
        let happiness = h["happiness"] as f64;
        let anger = h["anger"] as f64;
        assert!(happiness > 2.0 * anger);
    }

    #[test]
    fn validate_catches_label_mismatch() {
        let cfg = small_cfg(1, 2);
        let mut manifest = generate_synthetic(&cfg).unwrap();
        manifest.samples[0].label_from = "sadness".into();
        manifest.samples[0].label_to = "anger".into();
        assert!(matches!(manifest.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn split_rejects_tiny_strata() {
        let cfg = small_cfg(1, 2);
        let manifest = generate_synthetic(&cfg).unwrap();
        assert!(matches!(split(&manifest, 0.5, 0.5, 1), Err(Error::Validation(_))));
    }
}
