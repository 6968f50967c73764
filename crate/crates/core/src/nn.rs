//! Neural-network building blocks shared by the models in this crate.
//!
//! Parameters live in plain structs of [`Mat`]s. To run a forward pass the
//! caller *binds* a struct onto a [`Tape`], which registers each tensor as a
//! gradient leaf and returns a lightweight `*V` mirror holding [`Var`]
//! handles. `bind` and `params`/`params_mut` must enumerate tensors in the
//! same order; the optimizer and checkpointing rely on it.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::mat::Mat;
use crate::rng;
use crate::tape::{Grads, Tape, Var};

/// Layer-norm epsilon used everywhere in the crate.
pub const LN_EPS: f64 = 1e-5;

/// Truncated normal (|x| <= 2 std) initialization.
pub fn trunc_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| loop {
        let v: f64 = rng::normal(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    })
}

/// Fully connected layer; `w` is input x output, `b` is 1 x output.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Mat,
    pub b: Mat,
}

impl Linear {
    /// Projection-style init: truncated normal with fan-in scaling
    /// (std = 1/sqrt(fan_in)), zero bias.
    pub fn projection(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        let std = (1.0 / inp as f64).sqrt();
        Linear { w: trunc_normal(rng, inp, out, std), b: Mat::zeros(1, out) }
    }

    /// Fan-in uniform init, the usual default for plain MLP layers.
    pub fn fan_in_uniform(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Self {
        let k = 1.0 / (inp as f64).sqrt();
        let mut sample = |r: usize, c: usize| {
            Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0) * k)
        };
        let w = sample(inp, out);
        let b = sample(1, out);
        Linear { w, b }
    }

    pub fn params(&self) -> Vec<&Mat> {
        vec![&self.w, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> LinearV {
        let w = t.param(self.w.clone());
        let b = t.param(self.b.clone());
        reg.push(w);
        reg.push(b);
        LinearV { w, b }
    }

    /// Plain (tape-free) application for inference helpers.
    pub fn apply_plain(&self, x: &Mat) -> Mat {
        let mut out = x.matmul(&self.w);
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(self.b.row(0)) {
                *o += b;
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct LinearV {
    pub w: Var,
    pub b: Var,
}

impl LinearV {
    pub fn apply(&self, t: &mut Tape, x: Var) -> Var {
        let y = t.matmul(x, self.w);
        t.add_row(y, self.b)
    }
}

/// Learned layer-norm scale/shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

impl LayerNorm {
    pub fn new(width: usize) -> Self {
        LayerNorm { gamma: Mat::filled(1, width, 1.0), beta: Mat::zeros(1, width) }
    }

    pub fn params(&self) -> Vec<&Mat> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> LayerNormV {
        let gamma = t.param(self.gamma.clone());
        let beta = t.param(self.beta.clone());
        reg.push(gamma);
        reg.push(beta);
        LayerNormV { gamma, beta }
    }
}

#[derive(Clone, Copy)]
pub struct LayerNormV {
    pub gamma: Var,
    pub beta: Var,
}

impl LayerNormV {
    pub fn apply(&self, t: &mut Tape, x: Var) -> Var {
        t.layer_norm(x, self.gamma, self.beta, LN_EPS)
    }
}

/// Stack of fully connected layers with GELU between them (none after the
/// last layer).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists the input width followed by each layer's output width.
    pub fn new(rng: &mut ChaCha8Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = dims
            .windows(2)
            .map(|w| Linear::fan_in_uniform(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    pub fn params(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> MlpV {
        MlpV { layers: self.layers.iter().map(|l| l.bind(t, reg)).collect() }
    }
}

pub struct MlpV {
    pub layers: Vec<LinearV>,
}

impl MlpV {
    pub fn apply(&self, t: &mut Tape, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.apply(t, x);
            if i < last {
                x = t.gelu(x);
            }
        }
        x
    }
}

/// Pre-norm residual transformer encoder block operating on per-sample token
/// blocks of `m` rows. The block projects its input width to `model_dim`,
/// applies self-attention and a GELU feed-forward with residuals, then
/// projects back, so stacking preserves the branch width.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub in_proj: Linear,
    pub ln_attn: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn: Mlp,
    pub out_proj: Linear,
}

impl EncoderBlock {
    pub fn new(rng: &mut ChaCha8Rng, width: usize, model_dim: usize, ffn_hidden: usize) -> Self {
        EncoderBlock {
            in_proj: Linear::projection(rng, width, model_dim),
            ln_attn: LayerNorm::new(model_dim),
            wq: Linear::projection(rng, model_dim, model_dim),
            wk: Linear::projection(rng, model_dim, model_dim),
            wv: Linear::projection(rng, model_dim, model_dim),
            wo: Linear::projection(rng, model_dim, model_dim),
            ln_ffn: LayerNorm::new(model_dim),
            ffn: Mlp::new(rng, &[model_dim, ffn_hidden, model_dim]),
            out_proj: Linear::projection(rng, model_dim, width),
        }
    }

    pub fn params(&self) -> Vec<&Mat> {
        let mut p = self.in_proj.params();
        p.extend(self.ln_attn.params());
        p.extend(self.wq.params());
        p.extend(self.wk.params());
        p.extend(self.wv.params());
        p.extend(self.wo.params());
        p.extend(self.ln_ffn.params());
        p.extend(self.ffn.params());
        p.extend(self.out_proj.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Mat> {
        let mut p = self.in_proj.params_mut();
        p.extend(self.ln_attn.params_mut());
        p.extend(self.wq.params_mut());
        p.extend(self.wk.params_mut());
        p.extend(self.wv.params_mut());
        p.extend(self.wo.params_mut());
        p.extend(self.ln_ffn.params_mut());
        p.extend(self.ffn.params_mut());
        p.extend(self.out_proj.params_mut());
        p
    }

    pub fn bind(&self, t: &mut Tape, reg: &mut Vec<Var>) -> EncoderBlockV {
        EncoderBlockV {
            in_proj: self.in_proj.bind(t, reg),
            ln_attn: self.ln_attn.bind(t, reg),
            wq: self.wq.bind(t, reg),
            wk: self.wk.bind(t, reg),
            wv: self.wv.bind(t, reg),
            wo: self.wo.bind(t, reg),
            ln_ffn: self.ln_ffn.bind(t, reg),
            ffn: self.ffn.bind(t, reg),
            out_proj: self.out_proj.bind(t, reg),
        }
    }
}

pub struct EncoderBlockV {
    in_proj: LinearV,
    ln_attn: LayerNormV,
    wq: LinearV,
    wk: LinearV,
    wv: LinearV,
    wo: LinearV,
    ln_ffn: LayerNormV,
    ffn: MlpV,
    out_proj: LinearV,
}

impl EncoderBlockV {
    /// `x` has B*m rows; attention runs within each m-row block.
    pub fn apply(&self, t: &mut Tape, x: Var, m: usize, heads: usize) -> Var {
        let u = self.in_proj.apply(t, x);
        let normed = self.ln_attn.apply(t, u);
        let q = self.wq.apply(t, normed);
        let k = self.wk.apply(t, normed);
        let v = self.wv.apply(t, normed);
        let att = t.block_mha(q, k, v, heads, m, m);
        let att = self.wo.apply(t, att);
        let y = t.add(u, att);
        let normed = self.ln_ffn.apply(t, y);
        let f = self.ffn.apply(t, normed);
        let z = t.add(y, f);
        self.out_proj.apply(t, z)
    }
}

/// Adam optimizer with the usual default moments.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// One update step. `params` and `grads` must be index-aligned with the
    /// order used on every previous call.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[Mat]) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
            self.v = params.iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam: grad shape mismatch");
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / b1t;
                let vh = *vv / b2t;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Gradients for every registered leaf, in registration order; leaves that
/// received no gradient yield zero matrices.
pub fn collect_grads(tape: &Tape, grads: &Grads, reg: &[Var]) -> Vec<Mat> {
    reg.iter()
        .map(|&v| match grads.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Mat::zeros(r, c)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_and_params_agree_in_order() {
        let mut r = rng::stream(3);
        let block = EncoderBlock::new(&mut r, 7, 8, 16);
        // Tag every tensor with a unique sentinel, bind, and make sure the
        // registration order matches the params() order.
        let mut tagged = block.clone();
        for (i, p) in tagged.params_mut().into_iter().enumerate() {
            p.data_mut()[0] = 1000.0 + i as f64;
        }
        let mut t = Tape::new();
        let mut reg = Vec::new();
        tagged.bind(&mut t, &mut reg);
        for (i, v) in reg.iter().enumerate() {
            assert_eq!(t.value(*v).data()[0], 1000.0 + i as f64, "order mismatch at {i}");
        }
        assert_eq!(reg.len(), block.params().len());
    }

    #[test]
    fn adam_moves_params_against_gradient() {
        let mut p = Mat::filled(2, 2, 1.0);
        let g = Mat::filled(2, 2, 0.5);
        let mut adam = Adam::new(0.1);
        adam.step(&mut [&mut p], &[g]);
        assert!(p.data().iter().all(|&v| v < 1.0));
    }
}
