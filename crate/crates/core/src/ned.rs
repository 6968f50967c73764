//! Neutral expression encoder-decoder.
//!
//! A small autoencoder over concatenated (expression, pose) vectors of
//! neutral faces: a four-layer encoder down to a 16-dim latent and two
//! four-layer decoders, one for pose and one for expression. After training,
//! a diagonal Gaussian is fitted to the training latents; novel neutrals are
//! generated by sampling that empirical latent distribution and decoding.
//!
//! A trivial alternative neutral source — zero expression with the jaw reset
//! and the global rotation preserved — is exposed as [`flame_zero_neutral`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{self, Adam, Mlp};
use crate::rng;
use crate::tape::Tape;

/// Training configuration for the neutral autoencoder.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NedConfig {
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for NedConfig {
    fn default() -> Self {
        NedConfig {
            expr_dim: 50,
            pose_dim: 6,
            latent_dim: 16,
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

/// Fitted diagonal Gaussian over training latents.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// The neutral autoencoder: four fully connected encoder layers, four per
/// decoder head, plus post-training latent statistics.
#[derive(Debug, Clone)]
pub struct NedModel {
    cfg: NedConfig,
    encoder: Mlp,
    dec_pose: Mlp,
    dec_expr: Mlp,
    latent_stats: Option<LatentStats>,
}

impl NedModel {
    pub fn new(cfg: NedConfig, seed: u64) -> Result<Self> {
        if cfg.expr_dim == 0 || cfg.pose_dim == 0 || cfg.latent_dim == 0 {
            return Err(Error::Config("ned dims must be positive".into()));
        }
        let input = cfg.expr_dim + cfg.pose_dim;
        let l = cfg.latent_dim;
        let mut r = rng::stream(rng::derive_seed(seed, &[0x7ed]));
        let encoder = Mlp::new(&mut r, &[input, 128, 64, 32, l]);
        let dec_pose = Mlp::new(&mut r, &[l, 32, 64, 128, cfg.pose_dim]);
        let dec_expr = Mlp::new(&mut r, &[l, 32, 64, 128, cfg.expr_dim]);
        Ok(NedModel { cfg, encoder, dec_pose, dec_expr, latent_stats: None })
    }

    pub fn config(&self) -> &NedConfig {
        &self.cfg
    }

    pub fn latent_stats(&self) -> Option<&LatentStats> {
        self.latent_stats.as_ref()
    }

    pub fn set_latent_stats(&mut self, stats: LatentStats) -> Result<()> {
        if stats.mean.len() != self.cfg.latent_dim || stats.std.len() != self.cfg.latent_dim {
            return Err(Error::Shape("latent stats must match the latent dimension".into()));
        }
        self.latent_stats = Some(stats);
        Ok(())
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut p = self.encoder.params();
        p.extend(self.dec_pose.params());
        p.extend(self.dec_expr.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.encoder.params_mut();
        p.extend(self.dec_pose.params_mut());
        p.extend(self.dec_expr.params_mut());
        p
    }

    /// Latent code of one (expression, pose) sample.
    pub fn encode(&self, e: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_dims(e, theta)?;
        let x = concat_row(e, theta);
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let enc = self.encoder.bind(&mut t, &mut reg);
        let leaf = t.leaf(x);
        let z = enc.apply(&mut t, leaf);
        Ok(t.value(z).row(0).to_vec())
    }

    /// Decode a latent into (expression, pose).
    pub fn decode(&self, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if z.len() != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} coordinates, expected {}",
                z.len(),
                self.cfg.latent_dim
            )));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let dp = self.dec_pose.bind(&mut t, &mut reg);
        let de = self.dec_expr.bind(&mut t, &mut reg);
        let leaf = t.leaf(Mat::row_vec(z.to_vec()));
        let pose = dp.apply(&mut t, leaf);
        let expr = de.apply(&mut t, leaf);
        Ok((t.value(expr).row(0).to_vec(), t.value(pose).row(0).to_vec()))
    }

    /// Reconstruction of one sample (encode then decode).
    pub fn reconstruct(&self, e: &[f64], theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = self.encode(e, theta)?;
        self.decode(&z)
    }

    fn check_dims(&self, e: &[f64], theta: &[f64]) -> Result<()> {
        if e.len() != self.cfg.expr_dim || theta.len() != self.cfg.pose_dim {
            return Err(Error::Shape(format!(
                "sample dims ({}, {}) do not match ned config ({}, {})",
                e.len(),
                theta.len(),
                self.cfg.expr_dim,
                self.cfg.pose_dim
            )));
        }
        Ok(())
    }
}

fn concat_row(e: &[f64], theta: &[f64]) -> Mat {
    let mut data = Vec::with_capacity(e.len() + theta.len());
    data.extend_from_slice(e);
    data.extend_from_slice(theta);
    Mat::row_vec(data)
}

/// Mean reconstruction MSE of the model over the given samples.
pub fn reconstruction_mse(model: &NedModel, samples: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (e, th) in samples {
        let (re, rt) = model.reconstruct(e, th)?;
        for (a, b) in e.iter().zip(&re).chain(th.iter().zip(&rt)) {
            acc += (a - b) * (a - b);
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// Per-epoch reconstruction MSE history.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NedLog {
    pub epoch_mse: Vec<f64>,
}

/// Trains the autoencoder with MSE reconstruction loss and fits the latent
/// Gaussian afterwards. Deterministic per seed.
pub fn train_ned(samples: &[(Vec<f64>, Vec<f64>)], cfg: &NedConfig) -> Result<(NedModel, NedLog)> {
    if samples.len() < 2 {
        return Err(Error::Validation(format!(
            "neutral training needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("invalid training hyperparameters".into()));
    }
    let mut model = NedModel::new(cfg.clone(), cfg.seed)?;
    for (e, th) in samples {
        model.check_dims(e, th)?;
        if e.iter().chain(th).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite neutral sample".into()));
        }
    }
    let rows: Vec<Mat> = samples.iter().map(|(e, th)| concat_row(e, th)).collect();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = NedLog { epoch_mse: Vec::with_capacity(cfg.epochs) };

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..rows.len()).collect();
        rng::shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, &[0xed, epoch as u64])), &mut order);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Mat::zeros(chunk.len(), cfg.expr_dim + cfg.pose_dim);
            for (i, &idx) in chunk.iter().enumerate() {
                x.row_mut(i).copy_from_slice(rows[idx].row(0));
            }
            let mut t = Tape::new();
            let mut reg = Vec::new();
            let enc = model.encoder.bind(&mut t, &mut reg);
            let dp = model.dec_pose.bind(&mut t, &mut reg);
            let de = model.dec_expr.bind(&mut t, &mut reg);
            let x_leaf = t.leaf(x);
            let z = enc.apply(&mut t, x_leaf);
            let pose_hat = dp.apply(&mut t, z);
            let expr_hat = de.apply(&mut t, z);
            let x_hat = t.hcat(expr_hat, pose_hat);
            let loss = t.mse(x_leaf, x_hat);
            let value = t.scalar(loss);
            if !value.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let grads = t.backward(loss);
            let grad_mats = nn::collect_grads(&t, &grads, &reg);
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_mats);
            epoch_loss += value * chunk.len() as f64;
            seen += chunk.len();
        }
        log.epoch_mse.push(epoch_loss / seen as f64);
    }

    // Fit the diagonal latent Gaussian on the trained encoder.
    let latents: Vec<Vec<f64>> =
        samples.iter().map(|(e, th)| model.encode(e, th)).collect::<Result<_>>()?;
    let l = cfg.latent_dim;
    let n = latents.len() as f64;
    let mut mean = vec![0.0; l];
    for z in &latents {
        for (m, &v) in mean.iter_mut().zip(z) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; l];
    for z in &latents {
        for ((s, &v), &m) in var.iter_mut().zip(z).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std = var.iter().map(|&v| (v + 1e-12).sqrt()).collect();
    model.latent_stats = Some(LatentStats { mean, std });
    Ok((model, log))
}

/// Generates a neutral (expression, pose) pair by sampling the fitted latent
/// Gaussian and decoding. Deterministic per seed.
pub fn generate_neutral(model: &NedModel, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let stats = model
        .latent_stats
        .as_ref()
        .ok_or_else(|| Error::State("neutral model has no latent statistics; train it first".into()))?;
    let mut r = rng::stream(rng::derive_seed(seed, &[0x7e09]));
    let z: Vec<f64> = stats
        .mean
        .iter()
        .zip(&stats.std)
        .map(|(&m, &s)| m + s * rng::normal(&mut r))
        .collect();
    model.decode(&z)
}

/// The trivial neutral source: zero expression, jaw reset to zero, global
/// rotation preserved from the given pose.
pub fn flame_zero_neutral(expr_dim: usize, pose: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut theta = pose.to_vec();
    for v in theta.iter_mut().skip(3) {
        *v = 0.0;
    }
    (vec![0.0; expr_dim], theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neutral_cluster(n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut r = rng::stream(seed);
        (0..n)
            .map(|_| {
                let e: Vec<f64> = (0..50).map(|_| 0.05 * rng::normal(&mut r)).collect();
                let th: Vec<f64> = (0..6).map(|_| 0.05 * rng::normal(&mut r)).collect();
                (e, th)
            })
            .collect()
    }

    fn quick_cfg() -> NedConfig {
        NedConfig { epochs: 30, batch_size: 32, ..NedConfig::default() }
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let samples = neutral_cluster(120, 3);
        let (m1, log1) = train_ned(&samples, &quick_cfg()).unwrap();
        let (m2, log2) = train_ned(&samples, &quick_cfg()).unwrap();
        assert_eq!(log1, log2);
        assert_eq!(m1.params().len(), m2.params().len());
        for (a, b) in m1.params().iter().zip(m2.params()) {
            assert_eq!(*a, b);
        }
        assert!(log1.epoch_mse.last().unwrap() < log1.epoch_mse.first().unwrap());
    }

    #[test]
    fn single_repeated_sample_is_memorized() {
        let one = neutral_cluster(1, 5).pop().unwrap();
        let samples: Vec<_> = (0..16).map(|_| one.clone()).collect();
        let cfg = NedConfig { epochs: 300, batch_size: 16, ..NedConfig::default() };
        let (model, _) = train_ned(&samples, &cfg).unwrap();
        let mse = reconstruction_mse(&model, &samples[..1]).unwrap();
        assert!(mse < 1e-4, "memorization mse {mse}");
    }

    #[test]
    fn generation_requires_training_and_is_seeded() {
        let untrained = NedModel::new(NedConfig::default(), 1).unwrap();
        assert!(matches!(generate_neutral(&untrained, 0), Err(Error::State(_))));
        let samples = neutral_cluster(80, 9);
        let (model, _) = train_ned(&samples, &quick_cfg()).unwrap();
        let a = generate_neutral(&model, 42).unwrap();
        let b = generate_neutral(&model, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 50);
        assert_eq!(a.1.len(), 6);
        let c = generate_neutral(&model, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn reconstructions_beat_random_latents() {
        let samples = neutral_cluster(100, 7);
        let (model, _) = train_ned(&samples, &quick_cfg()).unwrap();
        let mut recon_errs: Vec<f64> = Vec::new();
        let mut random_errs: Vec<f64> = Vec::new();
        let mut r = rng::stream(99);
        for (e, th) in &samples {
            let (re, rt) = model.reconstruct(e, th).unwrap();
            recon_errs.push(mse_pair(e, th, &re, &rt));
            let z: Vec<f64> = (0..model.cfg.latent_dim).map(|_| rng::normal(&mut r)).collect();
            let (ge, gt) = model.decode(&z).unwrap();
            random_errs.push(mse_pair(e, th, &ge, &gt));
        }
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(med(&mut recon_errs) < med(&mut random_errs));
    }

    #[test]
    fn flame_zero_keeps_global_rotation() {
        let pose = [0.1, -0.2, 0.3, 0.4, 0.5, 0.6];
        let (e, th) = flame_zero_neutral(50, &pose);
        assert!(e.iter().all(|&v| v == 0.0));
        assert_eq!(&th[..3], &pose[..3]);
        assert!(th[3..].iter().all(|&v| v == 0.0));
    }

    fn mse_pair(e: &[f64], th: &[f64], re: &[f64], rt: &[f64]) -> f64 {
        let n = (e.len() + th.len()) as f64;
        let s: f64 = e
            .iter()
            .zip(re)
            .chain(th.iter().zip(rt))
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        s / n
    }
}
