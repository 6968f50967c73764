//! Instruction-driven facial expression decomposer.
//!
//! Two transformer branches encode facial-parameter tokens and replicated
//! text tokens; a cross-attention fusion layer (one per configured depth)
//! exchanges information between the branches; the layer-normed outputs are
//! concatenated along the feature axis and projected into per-token
//! conditional vectors for expression and pose.
//!
//! Branch widths are preserved through every stage, so the module can sit in
//! front of both the encoder path (expression + jaw tokens) and the decoder
//! path (transformed latent tokens) of the transition model.

use alloc::format;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::nn::{EncoderBlock, EncoderBlockV, LayerNorm, LayerNormV, Linear, LinearV};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::text_embed::TextEmbedding;

/// Architecture of one decomposer instance.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IfedConfig {
    /// Width of the facial-parameter branch tokens.
    pub facial_width: usize,
    /// Width of the text branch tokens.
    pub text_dim: usize,
    /// Internal attention width; must be divisible by `heads`.
    pub model_dim: usize,
    pub heads: usize,
    /// Transformer blocks in the facial branch.
    pub n_facial_layers: usize,
    /// Transformer blocks in the text branch.
    pub n_text_layers: usize,
    /// Cross-attention fusion layers.
    pub n_caft_layers: usize,
    /// Tokens per sample (one per expression named in the instruction).
    pub m_tokens: usize,
    /// Learned positional embeddings over the token axis.
    pub use_positional_embedding: bool,
    /// Width of the expression conditional vector.
    pub expr_dim: usize,
    /// Width of the pose conditional vector.
    pub pose_dim: usize,
}

impl IfedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        let counts = [
            self.facial_width,
            self.text_dim,
            self.heads,
            self.n_facial_layers,
            self.n_text_layers,
            self.n_caft_layers,
            self.m_tokens,
            self.expr_dim,
            self.pose_dim,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Config("all dimension counts must be >= 1".into()));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        4 * self.model_dim
    }
}

/// Per-token conditional vectors produced by the decomposer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalVectors {
    /// m x expr_dim.
    pub expr: Mat,
    /// m x pose_dim.
    pub pose: Mat,
}

/// One cross-attention fusion layer.
///
/// Each branch projects its tokens into the other branch's width, attends
/// over the concatenation of those projected tokens with the other branch's
/// tokens, adds the projected tokens back as a residual, back-projects into
/// its own width, concatenates with its own encoded features along the
/// feature axis, and reduces back to the branch width.
#[derive(Debug, Clone)]
struct CaftLayer {
    f_to_t: Linear,
    f_wq: Linear,
    f_wk: Linear,
    f_wv: Linear,
    f_wo: Linear,
    f_back: Linear,
    f_reduce: Linear,
    t_to_f: Linear,
    t_wq: Linear,
    t_wk: Linear,
    t_wv: Linear,
    t_wo: Linear,
    t_back: Linear,
    t_reduce: Linear,
}

impl CaftLayer {
    fn new(r: &mut ChaCha8Rng, cfg: &IfedConfig) -> Self {
        let (wf, dt, d) = (cfg.facial_width, cfg.text_dim, cfg.model_dim);
        CaftLayer {
            f_to_t: Linear::projection(r, wf, dt),
            f_wq: Linear::projection(r, dt, d),
            f_wk: Linear::projection(r, dt, d),
            f_wv: Linear::projection(r, dt, d),
            f_wo: Linear::projection(r, d, dt),
            f_back: Linear::projection(r, dt, wf),
            f_reduce: Linear::projection(r, 2 * wf, wf),
            t_to_f: Linear::projection(r, dt, wf),
            t_wq: Linear::projection(r, wf, d),
            t_wk: Linear::projection(r, wf, d),
            t_wv: Linear::projection(r, wf, d),
            t_wo: Linear::projection(r, d, wf),
            t_back: Linear::projection(r, wf, dt),
            t_reduce: Linear::projection(r, 2 * dt, dt),
        }
    }

    fn params(&self) -> Vec<&Mat> {
        let mut p = Vec::new();
        for l in [
            &self.f_to_t, &self.f_wq, &self.f_wk, &self.f_wv, &self.f_wo, &self.f_back,
            &self.f_reduce, &self.t_to_f, &self.t_wq, &self.t_wk, &self.t_wv, &self.t_wo,
            &self.t_back, &self.t_reduce,
        ] {
            p.extend(l.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = Vec::new();
        for l in [
            &mut self.f_to_t, &mut self.f_wq, &mut self.f_wk, &mut self.f_wv, &mut self.f_wo,
            &mut self.f_back, &mut self.f_reduce, &mut self.t_to_f, &mut self.t_wq,
            &mut self.t_wk, &mut self.t_wv, &mut self.t_wo, &mut self.t_back, &mut self.t_reduce,
        ] {
            p.extend(l.params_mut());
        }
        p
    }

    fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> CaftLayerV {
        CaftLayerV {
            f_to_t: self.f_to_t.bind(t, reg),
            f_wq: self.f_wq.bind(t, reg),
            f_wk: self.f_wk.bind(t, reg),
            f_wv: self.f_wv.bind(t, reg),
            f_wo: self.f_wo.bind(t, reg),
            f_back: self.f_back.bind(t, reg),
            f_reduce: self.f_reduce.bind(t, reg),
            t_to_f: self.t_to_f.bind(t, reg),
            t_wq: self.t_wq.bind(t, reg),
            t_wk: self.t_wk.bind(t, reg),
            t_wv: self.t_wv.bind(t, reg),
            t_wo: self.t_wo.bind(t, reg),
            t_back: self.t_back.bind(t, reg),
            t_reduce: self.t_reduce.bind(t, reg),
        }
    }
}

struct CaftLayerV {
    f_to_t: LinearV,
    f_wq: LinearV,
    f_wk: LinearV,
    f_wv: LinearV,
    f_wo: LinearV,
    f_back: LinearV,
    f_reduce: LinearV,
    t_to_f: LinearV,
    t_wq: LinearV,
    t_wk: LinearV,
    t_wv: LinearV,
    t_wo: LinearV,
    t_back: LinearV,
    t_reduce: LinearV,
}

impl CaftLayerV {
    fn apply(&self, t: &mut Tape, xf: Var, xt: Var, m: usize, heads: usize) -> (Var, Var) {
        // Facial branch queries text tokens.
        let yf = self.f_to_t.apply(t, xf);
        let kv = t.vcat_blocked(yf, xt, m, m);
        let q = self.f_wq.apply(t, yf);
        let k = self.f_wk.apply(t, kv);
        let v = self.f_wv.apply(t, kv);
        let att = t.block_mha(q, k, v, heads, m, 2 * m);
        let att = self.f_wo.apply(t, att);
        let r = t.add(att, yf);
        let back = self.f_back.apply(t, r);
        let cat = t.hcat(back, xf);
        let xf_out = self.f_reduce.apply(t, cat);

        // Text branch queries facial tokens.
        let yt = self.t_to_f.apply(t, xt);
        let kv = t.vcat_blocked(yt, xf, m, m);
        let q = self.t_wq.apply(t, yt);
        let k = self.t_wk.apply(t, kv);
        let v = self.t_wv.apply(t, kv);
        let att = t.block_mha(q, k, v, heads, m, 2 * m);
        let att = self.t_wo.apply(t, att);
        let r = t.add(att, yt);
        let back = self.t_back.apply(t, r);
        let cat = t.hcat(back, xt);
        let xt_out = self.t_reduce.apply(t, cat);

        (xf_out, xt_out)
    }
}

/// The decomposer: configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Ifed {
    cfg: IfedConfig,
    pos_facial: Option<Mat>,
    pos_text: Option<Mat>,
    facial_blocks: Vec<EncoderBlock>,
    text_proj: Linear,
    text_blocks: Vec<EncoderBlock>,
    caft_layers: Vec<CaftLayer>,
    fuse_norm_f: LayerNorm,
    fuse_norm_t: LayerNorm,
    proj_expr: Linear,
    proj_pose: Linear,
}

impl Ifed {
    pub fn new(cfg: IfedConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(rng::derive_seed(seed, &[0x1f3d]));
        let (pos_facial, pos_text) = if cfg.use_positional_embedding {
            (
                Some(crate::nn::trunc_normal(&mut r, cfg.m_tokens, cfg.facial_width, 0.02)),
                Some(crate::nn::trunc_normal(&mut r, cfg.m_tokens, cfg.text_dim, 0.02)),
            )
        } else {
            (None, None)
        };
        let facial_blocks = (0..cfg.n_facial_layers)
            .map(|_| EncoderBlock::new(&mut r, cfg.facial_width, cfg.model_dim, cfg.ffn_hidden()))
            .collect();
        let text_proj = Linear::projection(&mut r, cfg.text_dim, cfg.text_dim);
        let text_blocks = (0..cfg.n_text_layers)
            .map(|_| EncoderBlock::new(&mut r, cfg.text_dim, cfg.model_dim, cfg.ffn_hidden()))
            .collect();
        let caft_layers = (0..cfg.n_caft_layers).map(|_| CaftLayer::new(&mut r, &cfg)).collect();
        let fuse_norm_f = LayerNorm::new(cfg.facial_width);
        let fuse_norm_t = LayerNorm::new(cfg.text_dim);
        let fused_width = cfg.facial_width + cfg.text_dim;
        let proj_expr = Linear::projection(&mut r, fused_width, cfg.expr_dim);
        let proj_pose = Linear::projection(&mut r, fused_width, cfg.pose_dim);
        Ok(Ifed {
            cfg,
            pos_facial,
            pos_text,
            facial_blocks,
            text_proj,
            text_blocks,
            caft_layers,
            fuse_norm_f,
            fuse_norm_t,
            proj_expr,
            proj_pose,
        })
    }

    pub fn config(&self) -> &IfedConfig {
        &self.cfg
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut p = Vec::new();
        if let Some(pe) = &self.pos_facial {
            p.push(pe);
        }
        if let Some(pe) = &self.pos_text {
            p.push(pe);
        }
        for b in &self.facial_blocks {
            p.extend(b.params());
        }
        p.extend(self.text_proj.params());
        for b in &self.text_blocks {
            p.extend(b.params());
        }
        for c in &self.caft_layers {
            p.extend(c.params());
        }
        p.extend(self.fuse_norm_f.params());
        p.extend(self.fuse_norm_t.params());
        p.extend(self.proj_expr.params());
        p.extend(self.proj_pose.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = Vec::new();
        if let Some(pe) = &mut self.pos_facial {
            p.push(pe);
        }
        if let Some(pe) = &mut self.pos_text {
            p.push(pe);
        }
        for b in &mut self.facial_blocks {
            p.extend(b.params_mut());
        }
        p.extend(self.text_proj.params_mut());
        for b in &mut self.text_blocks {
            p.extend(b.params_mut());
        }
        for c in &mut self.caft_layers {
            p.extend(c.params_mut());
        }
        p.extend(self.fuse_norm_f.params_mut());
        p.extend(self.fuse_norm_t.params_mut());
        p.extend(self.proj_expr.params_mut());
        p.extend(self.proj_pose.params_mut());
        p
    }

    pub fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> IfedVars {
        let pos_facial = self.pos_facial.as_ref().map(|pe| {
            let v = t.param(pe.clone());
            reg.push(v);
            v
        });
        let pos_text = self.pos_text.as_ref().map(|pe| {
            let v = t.param(pe.clone());
            reg.push(v);
            v
        });
        IfedVars {
            cfg: self.cfg.clone(),
            pos_facial,
            pos_text,
            facial_blocks: self.facial_blocks.iter().map(|b| b.bind(t, reg)).collect(),
            text_proj: self.text_proj.bind(t, reg),
            text_blocks: self.text_blocks.iter().map(|b| b.bind(t, reg)).collect(),
            caft_layers: self.caft_layers.iter().map(|c| c.bind(t, reg)).collect(),
            fuse_norm_f: self.fuse_norm_f.bind(t, reg),
            fuse_norm_t: self.fuse_norm_t.bind(t, reg),
            proj_expr: self.proj_expr.bind(t, reg),
            proj_pose: self.proj_pose.bind(t, reg),
        }
    }

    fn check_facial(&self, x_f: &Mat) -> Result<()> {
        if x_f.shape() != (self.cfg.m_tokens, self.cfg.facial_width) {
            return Err(Error::Shape(format!(
                "facial tokens must be {} x {}, got {:?}",
                self.cfg.m_tokens,
                self.cfg.facial_width,
                x_f.shape()
            )));
        }
        if !x_f.is_finite() {
            return Err(Error::Domain("non-finite facial tokens".into()));
        }
        Ok(())
    }

    fn check_text(&self, x_t: &TextEmbedding) -> Result<()> {
        if x_t.matrix.cols() != self.cfg.text_dim {
            return Err(Error::Shape(format!(
                "text embedding dim {} does not match configured {}",
                x_t.matrix.cols(),
                self.cfg.text_dim
            )));
        }
        if !x_t.matrix.is_finite() {
            return Err(Error::Domain("non-finite text embedding".into()));
        }
        Ok(())
    }

    /// Facial branch: positional embedding plus the transformer blocks.
    /// Input and output are m x facial_width.
    pub fn facial_encoder(&self, x_f: &Mat) -> Result<Mat> {
        self.check_facial(x_f)?;
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let vars = self.bind(&mut t, &mut reg);
        let x = t.leaf(x_f.clone());
        let out = vars.facial_encoder(&mut t, x, 1);
        Ok(t.value(out).clone())
    }

    /// Text branch: mean-pool the embedding rows, replicate to m tokens,
    /// project, and run the text transformer blocks. Output is m x text_dim.
    pub fn text_encoder(&self, x_t: &TextEmbedding) -> Result<Mat> {
        self.check_text(x_t)?;
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let vars = self.bind(&mut t, &mut reg);
        let pooled = t.leaf(replicate_pooled(x_t, self.cfg.m_tokens));
        let out = vars.text_encoder(&mut t, pooled, 1);
        Ok(t.value(out).clone())
    }

    /// Cross-attention fusion over already-encoded branch tokens.
    pub fn caft(&self, x_f_enc: &Mat, x_t_enc: &Mat) -> Result<(Mat, Mat)> {
        self.check_facial(x_f_enc)?;
        if x_t_enc.shape() != (self.cfg.m_tokens, self.cfg.text_dim) {
            return Err(Error::Shape(format!(
                "text tokens must be {} x {}, got {:?}",
                self.cfg.m_tokens,
                self.cfg.text_dim,
                x_t_enc.shape()
            )));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let vars = self.bind(&mut t, &mut reg);
        let xf = t.leaf(x_f_enc.clone());
        let xt = t.leaf(x_t_enc.clone());
        let (of, ot) = vars.caft(&mut t, xf, xt, 1);
        Ok((t.value(of).clone(), t.value(ot).clone()))
    }

    /// Layer-norm both fusion outputs, concatenate along the feature axis,
    /// and project into the conditional vectors.
    pub fn fuse_and_decompose(&self, x_o_f: &Mat, x_o_t: &Mat) -> Result<ConditionalVectors> {
        self.check_facial(x_o_f)?;
        if x_o_t.shape() != (self.cfg.m_tokens, self.cfg.text_dim) {
            return Err(Error::Shape(format!(
                "text tokens must be {} x {}, got {:?}",
                self.cfg.m_tokens,
                self.cfg.text_dim,
                x_o_t.shape()
            )));
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let vars = self.bind(&mut t, &mut reg);
        let xf = t.leaf(x_o_f.clone());
        let xt = t.leaf(x_o_t.clone());
        let (expr, pose) = vars.fuse(&mut t, xf, xt);
        Ok(ConditionalVectors { expr: t.value(expr).clone(), pose: t.value(pose).clone() })
    }

    /// Full decomposition: both encoders, fusion, and projection.
    pub fn forward(&self, x_f: &Mat, x_t: &TextEmbedding) -> Result<ConditionalVectors> {
        self.check_facial(x_f)?;
        self.check_text(x_t)?;
        let mut t = Tape::new();
        let mut reg = Vec::new();
        let vars = self.bind(&mut t, &mut reg);
        let xf = t.leaf(x_f.clone());
        let pooled = t.leaf(replicate_pooled(x_t, self.cfg.m_tokens));
        let (expr, pose) = vars.forward_from_pooled(&mut t, xf, pooled, 1);
        Ok(ConditionalVectors { expr: t.value(expr).clone(), pose: t.value(pose).clone() })
    }
}

/// Mean-pool an embedding over its rows and replicate to m identical rows.
pub fn replicate_pooled(x_t: &TextEmbedding, m: usize) -> Mat {
    let pooled = x_t.pooled();
    let mut out = Mat::zeros(m, pooled.cols());
    for i in 0..m {
        out.row_mut(i).copy_from_slice(pooled.row(0));
    }
    out
}

/// Tape-bound decomposer parameters; `batch` is the number of samples, each
/// contributing `m_tokens` consecutive rows.
pub struct IfedVars {
    cfg: IfedConfig,
    pos_facial: Option<Var>,
    pos_text: Option<Var>,
    facial_blocks: Vec<EncoderBlockV>,
    text_proj: LinearV,
    text_blocks: Vec<EncoderBlockV>,
    caft_layers: Vec<CaftLayerV>,
    fuse_norm_f: LayerNormV,
    fuse_norm_t: LayerNormV,
    proj_expr: LinearV,
    proj_pose: LinearV,
}

impl IfedVars {
    pub fn facial_encoder(&self, t: &mut Tape, x: Var, batch: usize) -> Var {
        let m = self.cfg.m_tokens;
        let mut h = x;
        if let Some(pe) = self.pos_facial {
            let tiled = t.tile_rows(pe, batch);
            h = t.add(h, tiled);
        }
        for block in &self.facial_blocks {
            h = block.apply(t, h, m, self.cfg.heads);
        }
        h
    }

    /// `pooled` is the already mean-pooled, m-replicated text constant
    /// ((batch*m) x text_dim).
    pub fn text_encoder(&self, t: &mut Tape, pooled: Var, batch: usize) -> Var {
        let m = self.cfg.m_tokens;
        let mut h = pooled;
        if let Some(pe) = self.pos_text {
            let tiled = t.tile_rows(pe, batch);
            h = t.add(h, tiled);
        }
        h = self.text_proj.apply(t, h);
        for block in &self.text_blocks {
            h = block.apply(t, h, m, self.cfg.heads);
        }
        h
    }

    pub fn caft(&self, t: &mut Tape, mut xf: Var, mut xt: Var, _batch: usize) -> (Var, Var) {
        for layer in &self.caft_layers {
            let (nf, nt) = layer.apply(t, xf, xt, self.cfg.m_tokens, self.cfg.heads);
            xf = nf;
            xt = nt;
        }
        (xf, xt)
    }

    pub fn fuse(&self, t: &mut Tape, x_o_f: Var, x_o_t: Var) -> (Var, Var) {
        let lf = self.fuse_norm_f.apply(t, x_o_f);
        let lt = self.fuse_norm_t.apply(t, x_o_t);
        let fused = t.hcat(lt, lf);
        let expr = self.proj_expr.apply(t, fused);
        let pose = self.proj_pose.apply(t, fused);
        (expr, pose)
    }

    pub fn forward_from_pooled(
        &self,
        t: &mut Tape,
        x_f: Var,
        pooled: Var,
        batch: usize,
    ) -> (Var, Var) {
        let f = self.facial_encoder(t, x_f, batch);
        let txt = self.text_encoder(t, pooled, batch);
        let (of, ot) = self.caft(t, f, txt, batch);
        self.fuse(t, of, ot)
    }
}
