//! Instruction-to-facial-expression-transition model.
//!
//! A conditional VAE over anchor (expression, pose) pairs. Ground-truth
//! anchors and the instruction text feed an encoder-path decomposer whose
//! conditional vectors steer two MLP encoders (expression and pose) emitting
//! posterior mean/log-variance. Latents are reparameterized, linearly lifted
//! back to parameter widths, and a second decoder-path decomposer refines the
//! conditioning the two MLP decoders use to reconstruct the anchors. At
//! generation time latents come straight from the standard normal prior.
//!
//! Losses: per-branch reconstruction MSE plus the closed-form KL to the
//! standard normal, and an optional vertex loss that compares reconstructed
//! head geometry against ground truth through a bound head model.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::head_model::{self, FaceParams, HeadModel};
use crate::ifed::{self, ConditionalVectors, Ifed, IfedConfig, IfedVars};
use crate::mat::Mat;
use crate::nn::{self, Adam, Linear, LinearV, Mlp, MlpV};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::text_embed::{EmbeddingTable, TextEmbedding};

/// One generated or ground-truth anchor pair.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AnchorPair {
    pub e0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub e1: Vec<f64>,
    pub theta1: Vec<f64>,
}

impl AnchorPair {
    pub fn check(&self, expr_dim: usize, pose_dim: usize) -> Result<()> {
        if self.e0.len() != expr_dim || self.e1.len() != expr_dim {
            return Err(Error::Shape(format!(
                "anchor expression dims ({}, {}) do not match {expr_dim}",
                self.e0.len(),
                self.e1.len()
            )));
        }
        if self.theta0.len() != pose_dim || self.theta1.len() != pose_dim {
            return Err(Error::Shape(format!(
                "anchor pose dims ({}, {}) do not match {pose_dim}",
                self.theta0.len(),
                self.theta1.len()
            )));
        }
        let all = self.e0.iter().chain(&self.e1).chain(&self.theta0).chain(&self.theta1);
        for v in all {
            if !v.is_finite() {
                return Err(Error::Domain("non-finite anchor value".into()));
            }
        }
        Ok(())
    }

    /// Anchors stacked as token rows: row 0 first anchor, row 1 second.
    pub fn expr_rows(&self) -> Mat {
        let mut out = Mat::zeros(2, self.e0.len());
        out.row_mut(0).copy_from_slice(&self.e0);
        out.row_mut(1).copy_from_slice(&self.e1);
        out
    }

    pub fn pose_rows(&self) -> Mat {
        let mut out = Mat::zeros(2, self.theta0.len());
        out.row_mut(0).copy_from_slice(&self.theta0);
        out.row_mut(1).copy_from_slice(&self.theta1);
        out
    }

    pub fn from_rows(e: &Mat, theta: &Mat) -> Self {
        AnchorPair {
            e0: e.row(0).to_vec(),
            theta0: theta.row(0).to_vec(),
            e1: e.row(1).to_vec(),
            theta1: theta.row(1).to_vec(),
        }
    }
}

/// Posterior sample of one latent branch.
#[derive(Debug, Clone)]
pub struct LatentSample {
    pub mu: Mat,
    pub sigma: Mat,
    pub z: Mat,
    pub z_tilde: Mat,
}

/// Architecture of the transition model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct I2FetConfig {
    pub expr_dim: usize,
    pub pose_dim: usize,
    pub latent_dim: usize,
    pub m_tokens: usize,
    pub mlp_hidden: usize,
    pub text_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub n_facial_layers: usize,
    pub n_text_layers: usize,
    pub n_caft_layers: usize,
    pub use_positional_embedding: bool,
    /// Ablation switch: when false, conditional vectors come from plain
    /// linear projections of the pooled text instead of the decomposers.
    pub ifed_enabled: bool,
}

impl I2FetConfig {
    /// Desk-scale defaults for a given text embedding width.
    pub fn desk(text_dim: usize) -> Self {
        I2FetConfig {
            expr_dim: 50,
            pose_dim: 6,
            latent_dim: 16,
            m_tokens: 2,
            mlp_hidden: 256,
            text_dim,
            model_dim: 64,
            heads: 4,
            n_facial_layers: 2,
            n_text_layers: 1,
            n_caft_layers: 1,
            use_positional_embedding: true,
            ifed_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m_tokens != 2 {
            return Err(Error::Config("the transition model generates anchor pairs; m_tokens must be 2".into()));
        }
        let counts =
            [self.expr_dim, self.pose_dim, self.latent_dim, self.mlp_hidden, self.text_dim];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all dimensions must be >= 1".into()));
        }
        self.encoder_ifed_cfg().validate()
    }

    /// Jaw rotation width used by the facial tokens of the encoder path.
    pub fn jaw_dim(&self) -> usize {
        3.min(self.pose_dim)
    }

    /// Encoder-path decomposer: tokens are [expression | jaw].
    pub fn encoder_ifed_cfg(&self) -> IfedConfig {
        IfedConfig {
            facial_width: self.expr_dim + self.jaw_dim(),
            text_dim: self.text_dim,
            model_dim: self.model_dim,
            heads: self.heads,
            n_facial_layers: self.n_facial_layers,
            n_text_layers: self.n_text_layers,
            n_caft_layers: self.n_caft_layers,
            m_tokens: self.m_tokens,
            use_positional_embedding: self.use_positional_embedding,
            expr_dim: self.expr_dim,
            pose_dim: self.pose_dim,
        }
    }

    /// Decoder-path decomposer: tokens are [lifted pose latent | lifted
    /// expression latent], so the width is pose_dim + expr_dim.
    pub fn decoder_ifed_cfg(&self) -> IfedConfig {
        let mut cfg = self.encoder_ifed_cfg();
        cfg.facial_width = self.pose_dim + self.expr_dim;
        cfg
    }
}

/// Source of the conditional vectors.
#[derive(Debug, Clone)]
enum CondPath {
    /// Separate decomposer instances for the encoder and decoder paths
    /// (their facial widths differ, so weights cannot be shared).
    Decomposed { enc: Ifed, dec: Ifed },
    /// Ablation fallback: linear projections of the pooled text, replicated
    /// over tokens.
    Plain { enc_e: Linear, enc_p: Linear, dec_e: Linear, dec_p: Linear },
}

/// The trainable transition model.
#[derive(Debug, Clone)]
pub struct I2FetModel {
    cfg: I2FetConfig,
    cond: CondPath,
    enc_expr: Mlp,
    enc_pose: Mlp,
    lift_expr: Linear,
    lift_pose: Linear,
    dec_expr: Mlp,
    dec_pose: Mlp,
}

impl I2FetModel {
    pub fn new(cfg: I2FetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(rng::derive_seed(seed, &[0x12fe7]));
        let cond = if cfg.ifed_enabled {
            CondPath::Decomposed {
                enc: Ifed::new(cfg.encoder_ifed_cfg(), rng::derive_seed(seed, &[1]))?,
                dec: Ifed::new(cfg.decoder_ifed_cfg(), rng::derive_seed(seed, &[2]))?,
            }
        } else {
            CondPath::Plain {
                enc_e: Linear::projection(&mut r, cfg.text_dim, cfg.expr_dim),
                enc_p: Linear::projection(&mut r, cfg.text_dim, cfg.pose_dim),
                dec_e: Linear::projection(&mut r, cfg.text_dim, cfg.expr_dim),
                dec_p: Linear::projection(&mut r, cfg.text_dim, cfg.pose_dim),
            }
        };
        let h = cfg.mlp_hidden;
        // Final encoder layers start near zero so the posterior opens at
        // N(0, I) and the KL term starts near zero.
        let enc_expr = Mlp {
            layers: vec![
                Linear::fan_in_uniform(&mut r, 2 * cfg.expr_dim, h),
                Linear::fan_in_uniform(&mut r, h, h),
                Linear::projection(&mut r, h, 2 * cfg.latent_dim),
            ],
        };
        let enc_pose = Mlp {
            layers: vec![
                Linear::fan_in_uniform(&mut r, 2 * cfg.pose_dim, h),
                Linear::fan_in_uniform(&mut r, h, h),
                Linear::projection(&mut r, h, 2 * cfg.latent_dim),
            ],
        };
        let lift_expr = Linear::projection(&mut r, cfg.latent_dim, cfg.expr_dim);
        let lift_pose = Linear::projection(&mut r, cfg.latent_dim, cfg.pose_dim);
        let dec_expr = Mlp::new(&mut r, &[cfg.latent_dim + cfg.expr_dim, h, h, cfg.expr_dim]);
        let dec_pose = Mlp::new(&mut r, &[cfg.latent_dim + cfg.pose_dim, h, h, cfg.pose_dim]);
        Ok(I2FetModel { cfg, cond, enc_expr, enc_pose, lift_expr, lift_pose, dec_expr, dec_pose })
    }

    pub fn config(&self) -> &I2FetConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut p = Vec::new();
        match &self.cond {
            CondPath::Decomposed { enc, dec } => {
                p.extend(enc.params());
                p.extend(dec.params());
            }
            CondPath::Plain { enc_e, enc_p, dec_e, dec_p } => {
                p.extend(enc_e.params());
                p.extend(enc_p.params());
                p.extend(dec_e.params());
                p.extend(dec_p.params());
            }
        }
        p.extend(self.enc_expr.params());
        p.extend(self.enc_pose.params());
        p.extend(self.lift_expr.params());
        p.extend(self.lift_pose.params());
        p.extend(self.dec_expr.params());
        p.extend(self.dec_pose.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = Vec::new();
        match &mut self.cond {
            CondPath::Decomposed { enc, dec } => {
                p.extend(enc.params_mut());
                p.extend(dec.params_mut());
            }
            CondPath::Plain { enc_e, enc_p, dec_e, dec_p } => {
                p.extend(enc_e.params_mut());
                p.extend(enc_p.params_mut());
                p.extend(dec_e.params_mut());
                p.extend(dec_p.params_mut());
            }
        }
        p.extend(self.enc_expr.params_mut());
        p.extend(self.enc_pose.params_mut());
        p.extend(self.lift_expr.params_mut());
        p.extend(self.lift_pose.params_mut());
        p.extend(self.dec_expr.params_mut());
        p.extend(self.dec_pose.params_mut());
        p
    }

    fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> BoundModel {
        let cond = match &self.cond {
            CondPath::Decomposed { enc, dec } => {
                BoundCond::Decomposed { enc: enc.bind(t, reg), dec: dec.bind(t, reg) }
            }
            CondPath::Plain { enc_e, enc_p, dec_e, dec_p } => BoundCond::Plain {
                enc_e: enc_e.bind(t, reg),
                enc_p: enc_p.bind(t, reg),
                dec_e: dec_e.bind(t, reg),
                dec_p: dec_p.bind(t, reg),
            },
        };
        BoundModel {
            cond,
            enc_expr: self.enc_expr.bind(t, reg),
            enc_pose: self.enc_pose.bind(t, reg),
            lift_expr: self.lift_expr.bind(t, reg),
            lift_pose: self.lift_pose.bind(t, reg),
            dec_expr: self.dec_expr.bind(t, reg),
            dec_pose: self.dec_pose.bind(t, reg),
        }
    }

    fn check_text(&self, x_t: &TextEmbedding) -> Result<()> {
        if x_t.matrix.cols() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "text embedding dim {} does not match configured {}",
                x_t.matrix.cols(),
                self.cfg.text_dim
            )));
        }
        Ok(())
    }

    /// Posterior parameters and a reparameterized sample for both branches,
    /// conditioned on ground-truth anchors and the instruction embedding.
    /// Returns (expression, pose). Latent noise comes from `rng`: the
    /// expression branch draws first.
    pub fn encode(
        &self,
        e: &Mat,
        theta: &Mat,
        x_t: &TextEmbedding,
        rng_stream: &mut ChaCha8Rng,
    ) -> Result<(LatentSample, LatentSample)> {
        let m = self.cfg.m_tokens;
        if e.shape() != (m, self.cfg.expr_dim) || theta.shape() != (m, self.cfg.pose_dim) {
            return Err(Error::Shape(format!(
                "encode expects e {m} x {} and theta {m} x {}, got {:?} and {:?}",
                self.cfg.expr_dim,
                self.cfg.pose_dim,
                e.shape(),
                theta.shape()
            )));
        }
        self.check_text(x_t)?;
        let l = self.cfg.latent_dim;
        let z_e = rng::normal_mat(rng_stream, m, l);
        let z_p = rng::normal_mat(rng_stream, m, l);

        let mut t = Tape::new();
        let mut reg = Vec::new();
        let bound = self.bind(&mut t, &mut reg);
        let e_leaf = t.leaf(e.clone());
        let th_leaf = t.leaf(theta.clone());
        let pooled = t.leaf(ifed::replicate_pooled(x_t, m));
        let ze_leaf = t.leaf(z_e.clone());
        let zp_leaf = t.leaf(z_p.clone());
        let enc = bound.encode(&mut t, &self.cfg, e_leaf, th_leaf, pooled, ze_leaf, zp_leaf, 1);
        let sample = |t: &Tape, b: &BranchVars, z: Mat| LatentSample {
            mu: t.value(b.mu).clone(),
            sigma: t.value(b.sigma).clone(),
            z,
            z_tilde: t.value(b.z_tilde).clone(),
        };
        Ok((sample(&t, &enc.expr, z_e), sample(&t, &enc.pose, z_p)))
    }

    /// Posterior means and deviations only (no sampling); used for latent
    /// exports.
    pub fn encode_stats(&self, e: &Mat, theta: &Mat, x_t: &TextEmbedding) -> Result<(Mat, Mat, Mat, Mat)> {
        let mut stream = rng::stream(0);
        let (le, lp) = self.encode(e, theta, x_t, &mut stream)?;
        Ok((le.mu, le.sigma, lp.mu, lp.sigma))
    }

    /// Decoder-path conditional vectors from reparameterized latents and the
    /// instruction embedding.
    pub fn decoder_condition(
        &self,
        z_tilde_e: &Mat,
        z_tilde_p: &Mat,
        x_t: &TextEmbedding,
    ) -> Result<ConditionalVectors> {
        self.check_latents(z_tilde_e, z_tilde_p)?;
        self.check_text(x_t)?;
        let m = self.cfg.m_tokens;
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let bound = self.bind(&mut t, &mut reg);
        let ze = t.leaf(z_tilde_e.clone());
        let zp = t.leaf(z_tilde_p.clone());
        let pooled = t.leaf(ifed::replicate_pooled(x_t, m));
        let (ce, cp) = bound.decoder_condition(&mut t, ze, zp, pooled, 1);
        Ok(ConditionalVectors { expr: t.value(ce).clone(), pose: t.value(cp).clone() })
    }

    /// Decode anchors from latents and decoder-path conditional vectors.
    pub fn decode(
        &self,
        z_tilde_e: &Mat,
        z_tilde_p: &Mat,
        cond: &ConditionalVectors,
    ) -> Result<AnchorPair> {
        self.check_latents(z_tilde_e, z_tilde_p)?;
        let m = self.cfg.m_tokens;
        if cond.expr.shape() != (m, self.cfg.expr_dim) || cond.pose.shape() != (m, self.cfg.pose_dim) {
            return Err(Error::Shape("conditional vector shapes do not match model dims".into()));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let bound = self.bind(&mut t, &mut reg);
        let ze = t.leaf(z_tilde_e.clone());
        let zp = t.leaf(z_tilde_p.clone());
        let ce = t.leaf(cond.expr.clone());
        let cp = t.leaf(cond.pose.clone());
        let (e_hat, th_hat) = bound.decode(&mut t, ze, zp, ce, cp);
        Ok(AnchorPair::from_rows(t.value(e_hat), t.value(th_hat)))
    }

    /// Sample an anchor pair from the prior for one instruction.
    pub fn generate(&self, x_t: &TextEmbedding, seed: u64) -> Result<AnchorPair> {
        self.check_text(x_t)?;
        let m = self.cfg.m_tokens;
        let l = self.cfg.latent_dim;
        let mut stream = rng::stream(rng::derive_seed(seed, &[0x9e4]));
        let z_e = rng::normal_mat(&mut stream, m, l);
        let z_p = rng::normal_mat(&mut stream, m, l);
        let pooled = ifed::replicate_pooled(x_t, m);
        let (e_hat, th_hat) = self.generate_from_latents(&pooled, &z_e, &z_p, 1)?;
        Ok(AnchorPair::from_rows(&e_hat, &th_hat))
    }

    /// Batched prior-sample decoding; `pooled` holds batch*m replicated rows
    /// and the latent matrices are (batch*m) x latent. Returns stacked
    /// anchor rows.
    pub fn generate_from_latents(
        &self,
        pooled: &Mat,
        z_e: &Mat,
        z_p: &Mat,
        batch: usize,
    ) -> Result<(Mat, Mat)> {
        let m = self.cfg.m_tokens;
        let rows = batch * m;
        if pooled.shape() != (rows, self.cfg.text_dim)
            || z_e.shape() != (rows, self.cfg.latent_dim)
            || z_p.shape() != (rows, self.cfg.latent_dim)
        {
            return Err(Error::Shape("generate_from_latents input shapes".into()));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let bound = self.bind(&mut t, &mut reg);
        let ze = t.leaf(z_e.clone());
        let zp = t.leaf(z_p.clone());
        let pooled = t.leaf(pooled.clone());
        let (ce, cp) = bound.decoder_condition(&mut t, ze, zp, pooled, batch);
        let (e_hat, th_hat) = bound.decode(&mut t, ze, zp, ce, cp);
        Ok((t.value(e_hat).clone(), t.value(th_hat).clone()))
    }

    fn check_latents(&self, z_e: &Mat, z_p: &Mat) -> Result<()> {
        let want = (self.cfg.m_tokens, self.cfg.latent_dim);
        if z_e.shape() != want || z_p.shape() != want {
            return Err(Error::Shape(format!(
                "latents must be {:?}, got {:?} and {:?}",
                want,
                z_e.shape(),
                z_p.shape()
            )));
        }
        Ok(())
    }
}

/// Elementwise sigma * z + mu. Requires sigma > 0.
pub fn reparameterize(mu: &Mat, sigma: &Mat, z: &Mat) -> Result<Mat> {
    if mu.shape() != sigma.shape() || mu.shape() != z.shape() {
        return Err(Error::Shape("reparameterize shapes must match".into()));
    }
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("sigma must be strictly positive".into()));
    }
    Ok(Mat::from_vec(
        mu.rows(),
        mu.cols(),
        mu.data()
            .iter()
            .zip(sigma.data())
            .zip(z.data())
            .map(|((&m, &s), &zz)| s * zz + m)
            .collect(),
    ))
}

/// Closed-form KL divergence to the standard normal, summed over elements:
/// 0.5 [ -sum(log sigma^2 + 1) + sum(sigma^2) + sum(mu^2) ].
pub fn kl_term(mu: &Mat, sigma: &Mat) -> Result<f64> {
    if mu.shape() != sigma.shape() {
        return Err(Error::Shape("kl_term shapes must match".into()));
    }
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Domain("sigma must be strictly positive".into()));
    }
    let mut log_term = 0.0;
    let mut sig_term = 0.0;
    let mut mu_term = 0.0;
    for (&m, &s) in mu.data().iter().zip(sigma.data()) {
        let s2 = s * s;
        log_term += s2.ln() + 1.0;
        sig_term += s2;
        mu_term += m * m;
    }
    Ok(0.5 * (-log_term + sig_term + mu_term))
}

enum BoundCond {
    Decomposed { enc: IfedVars, dec: IfedVars },
    Plain { enc_e: LinearV, enc_p: LinearV, dec_e: LinearV, dec_p: LinearV },
}

struct BranchVars {
    mu: Var,
    sigma: Var,
    z_tilde: Var,
}

struct EncodeVars {
    expr: BranchVars,
    pose: BranchVars,
}

struct BoundModel {
    cond: BoundCond,
    enc_expr: MlpV,
    enc_pose: MlpV,
    lift_expr: LinearV,
    lift_pose: LinearV,
    dec_expr: MlpV,
    dec_pose: MlpV,
}

impl BoundModel {
    /// Encoder-path conditioning from ground-truth tokens and pooled text.
    fn encoder_condition(
        &self,
        t: &mut Tape,
        cfg: &I2FetConfig,
        e: Var,
        theta: Var,
        pooled: Var,
        batch: usize,
    ) -> (Var, Var) {
        match &self.cond {
            BoundCond::Decomposed { enc, .. } => {
                let jaw = t.slice_cols(theta, cfg.pose_dim - cfg.jaw_dim(), cfg.jaw_dim());
                let x_f = t.hcat(e, jaw);
                enc.forward_from_pooled(t, x_f, pooled, batch)
            }
            BoundCond::Plain { enc_e, enc_p, .. } => {
                (enc_e.apply(t, pooled), enc_p.apply(t, pooled))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn encode(
        &self,
        t: &mut Tape,
        cfg: &I2FetConfig,
        e: Var,
        theta: Var,
        pooled: Var,
        z_e: Var,
        z_p: Var,
        batch: usize,
    ) -> EncodeVars {
        let (cond_e, cond_p) = self.encoder_condition(t, cfg, e, theta, pooled, batch);
        let l = cfg.latent_dim;
        let branch = |t: &mut Tape, mlp: &MlpV, x: Var, cond: Var, z: Var| {
            let input = t.hcat(x, cond);
            let out = mlp.apply(t, input);
            let mu = t.slice_cols(out, 0, l);
            let logvar = t.slice_cols(out, l, l);
            let half = t.scale(logvar, 0.5);
            let sigma = t.exp(half);
            let scaled = t.mul(sigma, z);
            let z_tilde = t.add(scaled, mu);
            BranchVars { mu, sigma, z_tilde }
        };
        let expr = branch(t, &self.enc_expr, e, cond_e, z_e);
        let pose = branch(t, &self.enc_pose, theta, cond_p, z_p);
        EncodeVars { expr, pose }
    }

    /// Decoder-path conditioning from latents and pooled text.
    fn decoder_condition(
        &self,
        t: &mut Tape,
        z_tilde_e: Var,
        z_tilde_p: Var,
        pooled: Var,
        batch: usize,
    ) -> (Var, Var) {
        let zs_e = self.lift_expr.apply(t, z_tilde_e);
        let zs_p = self.lift_pose.apply(t, z_tilde_p);
        match &self.cond {
            BoundCond::Decomposed { dec, .. } => {
                let x_f = t.hcat(zs_p, zs_e);
                dec.forward_from_pooled(t, x_f, pooled, batch)
            }
            BoundCond::Plain { dec_e, dec_p, .. } => {
                (dec_e.apply(t, pooled), dec_p.apply(t, pooled))
            }
        }
    }

    fn decode(&self, t: &mut Tape, z_tilde_e: Var, z_tilde_p: Var, cond_e: Var, cond_p: Var) -> (Var, Var) {
        let in_e = t.hcat(z_tilde_e, cond_e);
        let e_hat = self.dec_expr.apply(t, in_e);
        let in_p = t.hcat(z_tilde_p, cond_p);
        let th_hat = self.dec_pose.apply(t, in_p);
        (e_hat, th_hat)
    }
}

/// Which loss terms participate in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossFlags {
    pub use_pose_loss: bool,
    pub use_vertex_loss: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags { use_pose_loss: true, use_vertex_loss: false }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss_flags: LossFlags,
    /// Recorded ablation switch; the model's own configuration decides the
    /// conditioning path.
    pub ifed_enabled: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 128,
            learning_rate: 8e-4,
            seed: 0,
            loss_flags: LossFlags::default(),
            ifed_enabled: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A batch of training samples in stacked token-row form.
pub struct TrainBatch {
    /// (batch*m) x expr_dim ground-truth expressions.
    pub e: Mat,
    /// (batch*m) x pose_dim ground-truth poses.
    pub theta: Mat,
    /// (batch*m) x text_dim pooled text rows (replicated per sample).
    pub pooled: Mat,
    /// Identity shape per sample (for the vertex loss).
    pub shapes: Vec<Vec<f64>>,
    /// Standard-normal draws for both branches.
    pub z_e: Mat,
    pub z_p: Mat,
}

impl TrainBatch {
    /// Assembles a batch from manifest samples. Latent noise is drawn from
    /// `stream` (expression branch first).
    pub fn assemble(
        manifest: &DatasetManifest,
        indices: &[usize],
        table: &EmbeddingTable,
        cfg: &I2FetConfig,
        stream: &mut ChaCha8Rng,
    ) -> Result<TrainBatch> {
        let m = cfg.m_tokens;
        let b = indices.len();
        if b == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        let mut e = Mat::zeros(b * m, cfg.expr_dim);
        let mut theta = Mat::zeros(b * m, cfg.pose_dim);
        let mut pooled = Mat::zeros(b * m, cfg.text_dim);
        let mut shapes = Vec::with_capacity(b);
        for (row, &idx) in indices.iter().enumerate() {
            let sample = manifest.sample(idx)?;
            sample.anchors.check(cfg.expr_dim, cfg.pose_dim)?;
            e.row_mut(2 * row).copy_from_slice(&sample.anchors.e0);
            e.row_mut(2 * row + 1).copy_from_slice(&sample.anchors.e1);
            theta.row_mut(2 * row).copy_from_slice(&sample.anchors.theta0);
            theta.row_mut(2 * row + 1).copy_from_slice(&sample.anchors.theta1);
            let emb = table.get(&sample.instruction.text)?;
            if emb.matrix.cols() != cfg.text_dim {
                return Err(Error::Shape(format!(
                    "embedding dim {} does not match model text dim {}",
                    emb.matrix.cols(),
                    cfg.text_dim
                )));
            }
            let p = emb.pooled();
            pooled.row_mut(2 * row).copy_from_slice(p.row(0));
            pooled.row_mut(2 * row + 1).copy_from_slice(p.row(0));
            shapes.push(sample.shape.clone());
        }
        let z_e = rng::normal_mat(stream, b * m, cfg.latent_dim);
        let z_p = rng::normal_mat(stream, b * m, cfg.latent_dim);
        Ok(TrainBatch { e, theta, pooled, shapes, z_e, z_p })
    }

    pub fn len(&self) -> usize {
        self.shapes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shapes.is_empty()
    }
}

/// Loss values in plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossComponents {
    pub total: f64,
    pub expr: f64,
    pub pose: f64,
    pub vertex: f64,
}

impl LossComponents {
    fn zeros() -> Self {
        LossComponents { total: 0.0, expr: 0.0, pose: 0.0, vertex: 0.0 }
    }

    fn add_scaled(&mut self, other: &LossComponents, w: f64) {
        self.total += w * other.total;
        self.expr += w * other.expr;
        self.pose += w * other.pose;
        self.vertex += w * other.vertex;
    }
}

struct LossVars {
    total: Var,
    expr: Var,
    pose: Option<Var>,
    vertex: Option<Var>,
}

/// Builds the full training graph for one batch and returns the loss nodes.
fn loss_graph(
    t: &mut Tape,
    bound: &BoundModel,
    cfg: &I2FetConfig,
    batch: &TrainBatch,
    head: Option<&HeadModel>,
    flags: &LossFlags,
) -> Result<LossVars> {
    let b = batch.len();
    let m = cfg.m_tokens;
    let e_gt = t.leaf(batch.e.clone());
    let th_gt = t.leaf(batch.theta.clone());
    let pooled = t.leaf(batch.pooled.clone());
    let z_e = t.leaf(batch.z_e.clone());
    let z_p = t.leaf(batch.z_p.clone());

    let enc = bound.encode(t, cfg, e_gt, th_gt, pooled, z_e, z_p, b);
    let (cond_e, cond_p) =
        bound.decoder_condition(t, enc.expr.z_tilde, enc.pose.z_tilde, pooled, b);
    let (e_hat, th_hat) = bound.decode(t, enc.expr.z_tilde, enc.pose.z_tilde, cond_e, cond_p);

    // KL summed per sample, averaged over the batch:
    // 0.5 [ -sum(logvar + 1) + sum(exp logvar) + sum(mu^2) ].
    let kl_of = |t: &mut Tape, branch: &BranchVars| {
        let mu2 = t.mul(branch.mu, branch.mu);
        let mu2s = t.sum_all(mu2);
        let sig2 = t.mul(branch.sigma, branch.sigma);
        let sig2s = t.sum_all(sig2);
        let sig2ln = t.ln(sig2);
        let lv_sum = t.sum_all(sig2ln);
        let count = t.value(branch.mu).len() as f64;
        let ones = t.leaf(Mat::from_vec(1, 1, vec![count]));
        let neg = t.add(lv_sum, ones);
        let part = t.sub(sig2s, neg);
        let part = t.add(part, mu2s);
        t.scale(part, 0.5 / b as f64)
    };

    let mse_e = t.mse(e_gt, e_hat);
    let kl_e = kl_of(t, &enc.expr);
    let loss_e = t.add(mse_e, kl_e);

    let mut total = loss_e;
    let loss_p = if flags.use_pose_loss {
        let mse_p = t.mse(th_gt, th_hat);
        let kl_p = kl_of(t, &enc.pose);
        let lp = t.add(mse_p, kl_p);
        total = t.add(total, lp);
        Some(lp)
    } else {
        None
    };

    let loss_v = if flags.use_vertex_loss {
        let head = head.ok_or_else(|| {
            Error::Config("vertex loss enabled but no head model was provided".into())
        })?;
        if head.n_expr() != cfg.expr_dim || head.pose_dim() != cfg.pose_dim {
            return Err(Error::Config(format!(
                "head model dims (expr {}, pose {}) do not match model (expr {}, pose {})",
                head.n_expr(),
                head.pose_dim(),
                cfg.expr_dim,
                cfg.pose_dim
            )));
        }
        let mut acc: Option<Var> = None;
        for s in 0..b {
            let shape = &batch.shapes[s];
            for a in 0..m {
                let row = s * m + a;
                let gt_params = FaceParams::new(
                    shape.clone(),
                    batch.e.row(row).to_vec(),
                    batch.theta.row(row).to_vec(),
                    vec![0.0; 3],
                )?;
                let v_gt = head_model::compute_vertices(head, &gt_params)?;
                let v_gt = t.leaf(v_gt.positions);
                let e_row = t.slice_rows(e_hat, row, 1);
                let th_row = t.slice_rows(th_hat, row, 1);
                let v_hat = head_model::vertices_on_tape(t, head, shape, e_row, th_row);
                let d = t.sub(v_hat, v_gt);
                let sq = t.mul(d, d);
                let ssq = t.sum_all(sq);
                acc = Some(match acc {
                    Some(prev) => t.add(prev, ssq),
                    None => ssq,
                });
            }
        }
        let count = (b * m * head.n_vertices() * 3) as f64;
        let lv = t.scale(acc.expect("batch is non-empty"), 1.0 / count);
        total = t.add(total, lv);
        Some(lv)
    } else {
        None
    };

    Ok(LossVars { total, expr: loss_e, pose: loss_p, vertex: loss_v })
}

/// Evaluates the total training loss and its components on one batch.
pub fn loss_total(
    model: &I2FetModel,
    batch: &TrainBatch,
    head: Option<&HeadModel>,
    flags: &LossFlags,
) -> Result<(f64, LossComponents)> {
    let mut t = Tape::new();
    let mut reg = Vec::new();
    let bound = model.bind(&mut t, &mut reg);
    let vars = loss_graph(&mut t, &bound, &model.cfg, batch, head, flags)?;
    let comps = LossComponents {
        total: t.scalar(vars.total),
        expr: t.scalar(vars.expr),
        pose: vars.pose.map(|v| t.scalar(v)).unwrap_or(0.0),
        vertex: vars.vertex.map(|v| t.scalar(v)).unwrap_or(0.0),
    };
    Ok((comps.total, comps))
}

/// Which loss node drives the gradients in [`loss_with_grads`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelect {
    Total,
    Expr,
    Pose,
    Vertex,
}

/// Loss components plus the gradient of the selected component with respect
/// to every model parameter, in [`I2FetModel::params`] order. Parameters the
/// selected loss does not reach get zero gradients.
pub fn loss_with_grads(
    model: &I2FetModel,
    batch: &TrainBatch,
    head: Option<&HeadModel>,
    flags: &LossFlags,
    select: LossSelect,
) -> Result<(LossComponents, Vec<Mat>)> {
    let mut t = Tape::new();
    let mut reg = Vec::new();
    let bound = model.bind(&mut t, &mut reg);
    let vars = loss_graph(&mut t, &bound, &model.cfg, batch, head, flags)?;
    let comps = LossComponents {
        total: t.scalar(vars.total),
        expr: t.scalar(vars.expr),
        pose: vars.pose.map(|v| t.scalar(v)).unwrap_or(0.0),
        vertex: vars.vertex.map(|v| t.scalar(v)).unwrap_or(0.0),
    };
    let node = match select {
        LossSelect::Total => vars.total,
        LossSelect::Expr => vars.expr,
        LossSelect::Pose => vars.pose.ok_or_else(|| {
            Error::Config("pose loss is disabled in the given flags".into())
        })?,
        LossSelect::Vertex => vars.vertex.ok_or_else(|| {
            Error::Config("vertex loss is disabled in the given flags".into())
        })?,
    };
    let grads = t.backward(node);
    Ok((comps, nn::collect_grads(&t, &grads, &reg)))
}

/// Per-epoch loss summary.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub train: LossComponents,
    pub val: LossComponents,
}

/// Full training history.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

/// Minibatch training with Adam: deterministic shuffling, per-(epoch, batch)
/// latent noise streams, and best-validation-weights retention.
pub fn train(
    model: I2FetModel,
    manifest: &DatasetManifest,
    table: &EmbeddingTable,
    head: Option<&HeadModel>,
    cfg: &TrainConfig,
) -> Result<(I2FetModel, TrainingLog)> {
    cfg.validate()?;
    let mut model = model;
    let train_idx: Vec<usize> = manifest.indices_of(Split::Train);
    let val_idx: Vec<usize> = manifest.indices_of(Split::Val);
    if train_idx.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if cfg.loss_flags.use_vertex_loss && head.is_none() {
        return Err(Error::Config("vertex loss enabled but no head model was provided".into()));
    }

    let mcfg = model.cfg.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = TrainingLog { epochs: Vec::with_capacity(cfg.epochs), best_epoch: 0 };
    let mut best: Option<(f64, I2FetModel)> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        rng::shuffle(&mut rng::stream(rng::derive_seed(cfg.seed, &[epoch as u64, 0])), &mut order);

        let mut train_acc = LossComponents::zeros();
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut stream =
                rng::stream(rng::derive_seed(cfg.seed, &[epoch as u64, 1 + bi as u64]));
            let batch = TrainBatch::assemble(manifest, chunk, table, &mcfg, &mut stream)?;

            let mut t = Tape::new();
            let mut reg = Vec::new();
            let bound = model.bind(&mut t, &mut reg);
            let vars = loss_graph(&mut t, &bound, &mcfg, &batch, head, &cfg.loss_flags)?;
            let comps = LossComponents {
                total: t.scalar(vars.total),
                expr: t.scalar(vars.expr),
                pose: vars.pose.map(|v| t.scalar(v)).unwrap_or(0.0),
                vertex: vars.vertex.map(|v| t.scalar(v)).unwrap_or(0.0),
            };
            if !comps.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let grads = t.backward(vars.total);
            let grad_mats = nn::collect_grads(&t, &grads, &reg);
            let mut params = model.params_mut();
            adam.step(&mut params, &grad_mats);

            train_acc.add_scaled(&comps, chunk.len() as f64);
            seen += chunk.len();
        }
        let train_avg = {
            let mut a = LossComponents::zeros();
            a.add_scaled(&train_acc, 1.0 / seen as f64);
            a
        };

        let val_avg = if val_idx.is_empty() {
            train_avg
        } else {
            let mut acc = LossComponents::zeros();
            let mut n = 0usize;
            for (bi, chunk) in val_idx.chunks(cfg.batch_size).enumerate() {
                let mut stream = rng::stream(rng::derive_seed(
                    cfg.seed,
                    &[epoch as u64, 0xffff_0000 + bi as u64],
                ));
                let batch = TrainBatch::assemble(manifest, chunk, table, &mcfg, &mut stream)?;
                let (_, comps) = loss_total(&model, &batch, head, &cfg.loss_flags)?;
                acc.add_scaled(&comps, chunk.len() as f64);
                n += chunk.len();
            }
            let mut a = LossComponents::zeros();
            a.add_scaled(&acc, 1.0 / n as f64);
            a
        };
        if !val_avg.total.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }

        log.epochs.push(EpochLog { train: train_avg, val: val_avg });
        let improved = match &best {
            Some((best_val, _)) => val_avg.total < *best_val,
            None => true,
        };
        if improved {
            best = Some((val_avg.total, model.clone()));
            log.best_epoch = epoch;
        }
    }

    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text_embed::{EmbeddingProvider, HashingEmbedder};

    fn tiny_cfg() -> I2FetConfig {
        I2FetConfig {
            expr_dim: 50,
            pose_dim: 6,
            latent_dim: 16,
            m_tokens: 2,
            mlp_hidden: 32,
            text_dim: 24,
            model_dim: 16,
            heads: 2,
            n_facial_layers: 1,
            n_text_layers: 1,
            n_caft_layers: 1,
            use_positional_embedding: true,
            ifed_enabled: true,
        }
    }

    fn embedding() -> TextEmbedding {
        HashingEmbedder::new(8, 24, 5)
            .unwrap()
            .embed("Turn this face from anger to fear.")
            .unwrap()
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let model = I2FetModel::new(tiny_cfg(), 3).unwrap();
        let e = rng::normal_mat(&mut rng::stream(1), 2, 50);
        let th = rng::normal_mat(&mut rng::stream(2), 2, 6);
        let x_t = embedding();
        let (le, lp) = model.encode(&e, &th, &x_t, &mut rng::stream(7)).unwrap();
        assert_eq!(le.mu.shape(), (2, 16));
        assert_eq!(le.sigma.shape(), (2, 16));
        assert_eq!(lp.mu.shape(), (2, 16));
        assert!(le.sigma.data().iter().all(|&s| s > 0.0));
        assert!(lp.sigma.data().iter().all(|&s| s > 0.0));
        // Reparameterization identity holds exactly.
        let rebuilt = reparameterize(&le.mu, &le.sigma, &le.z).unwrap();
        assert_eq!(rebuilt, le.z_tilde);
        // Bit-identical under the same stream.
        let (le2, lp2) = model.encode(&e, &th, &x_t, &mut rng::stream(7)).unwrap();
        assert_eq!(le.z_tilde, le2.z_tilde);
        assert_eq!(lp.z_tilde, lp2.z_tilde);
    }

    #[test]
    fn decoder_condition_and_decode_shapes() {
        let model = I2FetModel::new(tiny_cfg(), 3).unwrap();
        let z_e = rng::normal_mat(&mut rng::stream(4), 2, 16);
        let z_p = rng::normal_mat(&mut rng::stream(5), 2, 16);
        let cond = model.decoder_condition(&z_e, &z_p, &embedding()).unwrap();
        assert_eq!(cond.expr.shape(), (2, 50));
        assert_eq!(cond.pose.shape(), (2, 6));
        let anchors = model.decode(&z_e, &z_p, &cond).unwrap();
        assert_eq!(anchors.e0.len(), 50);
        assert_eq!(anchors.e1.len(), 50);
        assert_eq!(anchors.theta0.len(), 6);
        assert_eq!(anchors.theta1.len(), 6);
        let again = model.decode(&z_e, &z_p, &cond).unwrap();
        assert_eq!(anchors, again);
    }

    #[test]
    fn generate_is_seed_deterministic() {
        let model = I2FetModel::new(tiny_cfg(), 3).unwrap();
        let a = model.generate(&embedding(), 11).unwrap();
        let b = model.generate(&embedding(), 11).unwrap();
        let c = model.generate(&embedding(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn reparameterize_edge_cases() {
        let mu = Mat::filled(2, 3, 0.7);
        let sigma = Mat::filled(2, 3, 1.0);
        let zeros = Mat::zeros(2, 3);
        assert_eq!(reparameterize(&mu, &sigma, &zeros).unwrap(), mu);
        let z = rng::normal_mat(&mut rng::stream(1), 2, 3);
        assert_eq!(reparameterize(&zeros, &Mat::filled(2, 3, 1.0), &z).unwrap(), z);
        let bad = Mat::filled(2, 3, 0.0);
        assert!(matches!(reparameterize(&mu, &bad, &z), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_closed_form_values() {
        let mu = Mat::zeros(1, 4);
        let sigma = Mat::filled(1, 4, 1.0);
        assert!(kl_term(&mu, &sigma).unwrap().abs() < 1e-12);
        let mut mu1 = Mat::zeros(1, 4);
        mu1[(0, 0)] = 1.0;
        assert!((kl_term(&mu1, &sigma).unwrap() - 0.5).abs() < 1e-12);
        // Single element mu=0.5, sigma=0.8.
        let mu = Mat::filled(1, 1, 0.5);
        let sigma = Mat::filled(1, 1, 0.8);
        let expect = 0.5 * (-(0.64f64.ln()) - 1.0 + 0.64 + 0.25);
        assert!((kl_term(&mu, &sigma).unwrap() - expect).abs() < 1e-12);
        assert!(matches!(
            kl_term(&mu, &Mat::zeros(1, 1)),
            Err(Error::Domain(_))
        ));
    }
}
