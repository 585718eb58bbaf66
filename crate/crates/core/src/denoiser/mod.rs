//! The reconstruction network `z0_hat = f(z_t, c, t)` and its training loop.
//!
//! Each block is pre-norm: self-attention over `z_t` with bucketed relative
//! position bias, cross-attention into the source encoding, then a GeGLU
//! feed-forward whose input norm is modulated (AdaLN) by the sum of the time
//! embedding and the mean-pooled block input.

mod train;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::nn::{bucket_grid, sinusoidal, Attention, GeGluFfn, Linear, Norm};
use crate::tensor::{BucketGrid, Graph, Mat, ParamId, ParamStore, Var};

pub use train::{
    prepare_pairs, reconstruction_loss, sample_dropout_flags, train_diffusion, training_step, DiffusionPair,
    CheckpointHook, DiffusionTraining, TrainBatch, TrainItem,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub max_len: usize,
    pub ffn_mult: usize,
    pub rel_buckets: usize,
    /// Relative position bias in self-attention. Off only for wiring checks.
    pub rel_bias: bool,
    pub cond_dropout: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Exponential moving average of weights; `None` keeps the raw weights.
    pub ema_decay: Option<f64>,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 64,
            max_len: 24,
            ffn_mult: 2,
            rel_buckets: 16,
            rel_bias: true,
            cond_dropout: 0.1,
            steps: 30_000,
            batch: 64,
            lr: 1e-3,
            warmup: 1000,
            weight_decay: 0.0,
            clip_norm: 1.0,
            ema_decay: None,
            seed: 11,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width % self.heads != 0 {
            return Err(Error::Invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Invalid(format!("condition dropout {} outside [0, 1)", self.cond_dropout)));
        }
        if self.layers == 0 || self.max_len == 0 || self.width < 2 {
            return Err(Error::Invalid("denoiser needs at least one layer and a non-empty grid".into()));
        }
        Ok(())
    }
}

/// What the network is conditioned on. `source: None` selects the learned null tokens.
#[derive(Clone, Copy, Debug, Default)]
pub struct Cond<'a> {
    pub source: Option<&'a Mat>,
    /// Encoded keyword segment; read only by a controller.
    pub keywords: Option<&'a Mat>,
}

impl<'a> Cond<'a> {
    pub fn source(c: &'a Mat) -> Self {
        Self { source: Some(c), keywords: None }
    }

    pub fn null() -> Self {
        Self::default()
    }

    pub fn with_keywords(self, kw: &'a Mat) -> Self {
        Self { keywords: Some(kw), ..self }
    }

    pub fn unconditional(self) -> Self {
        Self { source: None, ..self }
    }
}

/// Anything that predicts clean latents. Samplers only see this trait.
pub trait Denoise: Sync {
    fn predict(&self, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat>;
    fn latent_shape(&self) -> (usize, usize);
    /// Share of source tokens to keep as a keyword segment, for models that read one.
    fn keyword_ratio(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    ada_scale: Linear,
    ada_shift: Linear,
    ffn: GeGluFfn,
}

/// Parameter layout of the network; shared by a base model and its trainable copy.
#[derive(Clone, Debug)]
pub struct DenoiserNet {
    config: DenoiserConfig,
    time1: Linear,
    time2: Linear,
    input: Linear,
    blocks: Vec<Block>,
    norm_out: Norm,
    output: Linear,
    /// Time-dependent per-dimension gate on the `z_t` skip into the output.
    skip: Linear,
    null_cond: ParamId,
    grid: Arc<BucketGrid>,
}

impl DenoiserNet {
    pub fn build<R: Rng>(store: &mut ParamStore, config: &DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let buckets = config.rel_bias.then_some(config.rel_buckets);
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("block{i}");
                Block {
                    norm_self: Norm::new(store, &format!("{n}.norm_self"), d),
                    self_attn: Attention::new(store, &format!("{n}.self_attn"), d, config.heads, buckets, rng),
                    norm_cross: Norm::new(store, &format!("{n}.norm_cross"), d),
                    cross_attn: Attention::new(store, &format!("{n}.cross_attn"), d, config.heads, buckets, rng),
                    ada_scale: Linear::with_std(store, &format!("{n}.ada_scale"), d, d, 0.02, rng),
                    ada_shift: Linear::with_std(store, &format!("{n}.ada_shift"), d, d, 0.02, rng),
                    ffn: GeGluFfn::new(store, &format!("{n}.ffn"), d, config.ffn_mult * d, rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            time1: Linear::new(store, "time.fc1", d, d, rng),
            time2: Linear::new(store, "time.fc2", d, d, rng),
            input: Linear::new(store, "input", d, d, rng),
            blocks,
            norm_out: Norm::new(store, "norm_out", d),
            output: Linear::new(store, "output", d, d, rng),
            skip: Linear::zeros(store, "skip", d, d),
            null_cond: store.normal("null_cond", config.max_len, d, 1.0, rng),
            grid: bucket_grid(config.max_len, config.max_len, config.rel_buckets, 2 * config.max_len),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn null_cond_id(&self) -> ParamId {
        self.null_cond
    }

    pub fn time_embed_graph<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, t: usize) -> Var {
        let s = g.constant(sinusoidal(t as f64, self.config.width));
        let h = self.time1.forward(g, p, s);
        let h = g.silu(h);
        self.time2.forward(g, p, h)
    }

    /// Builds the prediction on `g`. `c = None` binds the null tokens.
    pub fn forward<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, z_t: Var, c: Option<Var>, t: usize) -> Var {
        self.forward_ext(g, p, z_t, c, t, None, None)
    }

    /// [`forward`](Self::forward) with hooks on the residual stream: `inject[i]`
    /// is added after block `i`, and `taps` collects every block's output.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_ext<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &'p ParamStore,
        z_t: Var,
        c: Option<Var>,
        t: usize,
        inject: Option<&[Var]>,
        mut taps: Option<&mut Vec<Var>>,
    ) -> Var {
        let temb = self.time_embed_graph(g, p, t);
        let c = c.unwrap_or_else(|| g.param(p, self.null_cond));
        let grid = self.config.rel_bias.then_some(&self.grid);
        let mut x = self.input.forward(g, p, z_t);
        for (i, b) in self.blocks.iter().enumerate() {
            let pooled = g.mean_rows(x);
            let cond = g.add(temb, pooled);
            let cond = g.silu(cond);
            let h = b.norm_self.forward(g, p, x);
            let a = b.self_attn.forward(g, p, h, h, grid, None);
            x = g.add(x, a);
            let h = b.norm_cross.forward(g, p, x);
            let a = b.cross_attn.forward(g, p, h, c, grid, None);
            x = g.add(x, a);
            let scale = b.ada_scale.forward(g, p, cond);
            let shift = b.ada_shift.forward(g, p, cond);
            let h = g.layer_norm(x);
            let h = g.modulate(h, scale, shift);
            let f = b.ffn.forward(g, p, h);
            x = g.add(x, f);
            if let Some(tp) = taps.as_mut() {
                tp.push(x);
            }
            if let Some(inj) = inject {
                x = g.add(x, inj[i]);
            }
        }
        let x = self.norm_out.forward(g, p, x);
        let out = self.output.forward(g, p, x);
        // The final norm discards each row's scale, so the clean part of z_t
        // reaches the output through a gated skip instead.
        let gate = self.skip.forward(g, p, temb);
        let kept = g.mul_row(z_t, gate);
        g.add(out, kept)
    }

    pub(crate) fn check_inputs(&self, z_t: &Mat, cond: &Cond<'_>) -> Result<()> {
        let want = (self.config.max_len, self.config.width);
        if z_t.dim() != want {
            return Err(Error::shape(want, z_t.dim()));
        }
        if let Some(c) = cond.source {
            if c.dim() != want {
                return Err(Error::shape(want, c.dim()));
            }
        }
        Ok(())
    }

    /// Inference-only prediction against the parameters in `p`.
    pub fn predict_with(&self, p: &ParamStore, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat> {
        self.check_inputs(z_t, &cond)?;
        let mut g = Graph::inference();
        let z = g.constant_ref(z_t);
        let c = cond.source.map(|c| g.constant_ref(c));
        let out = self.forward(&mut g, p, z, c, t);
        let out = g.take(out);
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite denoiser output at t = {t}")));
        }
        Ok(out)
    }
}

/// Trained (or freshly initialised) denoiser.
#[derive(Clone, Debug)]
pub struct DenoiserModel {
    net: DenoiserNet,
    store: ParamStore,
}

impl DenoiserModel {
    pub fn init(config: DenoiserConfig, rng: &mut Prng) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = DenoiserNet::build(&mut store, &config, rng)?;
        Ok(Self { net, store })
    }

    pub fn from_parts(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::init(config, &mut crate::rng::seeded(0))?;
        let n = m.store.len();
        if params.len() != n || m.store.copy_matching(&params) != n {
            return Err(Error::Checkpoint("denoiser parameters do not match config".into()));
        }
        Ok(m)
    }

    pub fn config(&self) -> &DenoiserConfig {
        self.net.config()
    }

    pub fn net(&self) -> &DenoiserNet {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Projected sinusoidal embedding of step `t`, length `width`.
    pub fn time_embed(&self, t: usize) -> Vec<f64> {
        let mut g = Graph::inference();
        let e = self.net.time_embed_graph(&mut g, &self.store, t);
        g.value(e).row(0).to_vec()
    }

    pub fn denoise(&self, z_t: &Mat, c: Option<&Mat>, t: usize) -> Result<Mat> {
        self.net.predict_with(&self.store, z_t, Cond { source: c, keywords: None }, t)
    }
}

impl Denoise for DenoiserModel {
    fn predict(&self, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat> {
        self.net.predict_with(&self.store, z_t, cond, t)
    }

    fn latent_shape(&self) -> (usize, usize) {
        (self.config().max_len, self.config().width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, seeded};

    fn small() -> DenoiserConfig {
        DenoiserConfig { layers: 2, heads: 2, width: 8, max_len: 6, rel_buckets: 8, ..Default::default() }
    }

    #[test]
    fn output_shape_matches_input() {
        let m = DenoiserModel::init(small(), &mut seeded(1)).unwrap();
        let mut r = seeded(2);
        let z = randn(&mut r, 6, 8);
        let c = randn(&mut r, 6, 8);
        assert_eq!(m.denoise(&z, Some(&c), 10).unwrap().dim(), (6, 8));
        assert!(m.denoise(&randn(&mut r, 5, 8), Some(&c), 10).is_err());
        assert!(m.denoise(&z, Some(&randn(&mut r, 6, 4)), 10).is_err());
    }

    #[test]
    fn time_embedding_contract() {
        let m = DenoiserModel::init(DenoiserConfig { width: 64, ..small() }, &mut seeded(3)).unwrap();
        let a = m.time_embed(0);
        assert_eq!(a, m.time_embed(0));
        assert_eq!(a.len(), 64);
        let b = m.time_embed(1000);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(1.0 - dot / (na * nb) > 0.1, "cosine distance {}", 1.0 - dot / (na * nb));
    }

    #[test]
    fn cross_attention_reads_the_source() {
        let m = DenoiserModel::init(small(), &mut seeded(4)).unwrap();
        let mut r = seeded(5);
        let z = randn(&mut r, 6, 8);
        let c = randn(&mut r, 6, 8);
        let mut perm = c.clone();
        for i in 0..6 {
            perm.row_mut(i).assign(&c.row((i + 1) % 6));
        }
        perm.row_mut(0).mapv_inplace(|x| x + 1.0);
        assert_ne!(m.denoise(&z, Some(&c), 5).unwrap(), m.denoise(&z, Some(&perm), 5).unwrap());
    }

    #[test]
    fn null_condition_ignores_source() {
        let m = DenoiserModel::init(small(), &mut seeded(6)).unwrap();
        let mut r = seeded(7);
        let z = randn(&mut r, 6, 8);
        let a = m.predict(&z, Cond::source(&randn(&mut r, 6, 8)).unconditional(), 3).unwrap();
        let b = m.predict(&z, Cond::source(&randn(&mut r, 6, 8)).unconditional(), 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(DenoiserModel::init(DenoiserConfig { heads: 3, ..small() }, &mut seeded(0)).is_err());
        assert!(DenoiserModel::init(DenoiserConfig { cond_dropout: 1.0, ..small() }, &mut seeded(0)).is_err());
    }
}
