//! Zero-initialised control branch that steers a frozen denoiser with a
//! masked keyword segment:
//!
//! `fused = base(z_t, c, t) + out(copy(z_t + in(c_kw), c, t))`
//!
//! `in` and `out` are position-wise linear maps that start at zero weight and
//! bias, so the fused model starts out as the base model exactly. Only the copy
//! and the projections are trained.
//!
//! [`Fusion::PerLayer`] instead feeds every copy block's output, through its
//! own zero projection, into the matching residual stream of the base.

mod keywords;

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{CodecModel, NormStats};
use crate::corpus::ParaphraseRecord;
use crate::denoiser::{sample_dropout_flags, Cond, Denoise, DenoiserModel};
use crate::error::{Error, Result};
use crate::rng::{randn, Prng};
use crate::schedule::NoiseSchedule;
use crate::tensor::nn::Linear;
use crate::tensor::{AdamW, AdamWConfig, Graph, LrSchedule, Mat, ParamStore, Var};
use crate::train_util::{batch_gradients, LossRecord};

pub use keywords::{extract_keyword_segment, keyword_count, KeywordMode, KeywordSegment, SAMPLED_POOL_RATIO};

/// Where the control branch joins the base model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Added to the base prediction.
    #[default]
    Output,
    /// Added to the base residual stream after every block.
    PerLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    #[serde(default)]
    pub fusion: Fusion,
    pub keyword_ratio: f64,
    /// How training keywords are picked from the reference. Inference always uses deterministic mode.
    pub keyword_mode: KeywordMode,
    /// Keyword segments drawn per training pair.
    pub keyword_variants: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub cond_dropout: f64,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            fusion: Fusion::Output,
            keyword_ratio: 0.15,
            keyword_mode: KeywordMode::Sampled,
            keyword_variants: 4,
            steps: 3000,
            batch: 64,
            lr: 1e-4,
            warmup: 100,
            weight_decay: 0.0,
            clip_norm: 1.0,
            cond_dropout: 0.1,
            seed: 13,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keyword_ratio > 0.0 && self.keyword_ratio <= 1.0) {
            return Err(Error::Invalid(format!("keyword ratio {} outside (0, 1]", self.keyword_ratio)));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Invalid(format!("condition dropout {} outside [0, 1)", self.cond_dropout)));
        }
        if self.keyword_variants == 0 || self.batch == 0 {
            return Err(Error::Invalid("controller needs at least one keyword variant and a non-empty batch".into()));
        }
        Ok(())
    }
}

/// A frozen base denoiser plus its trainable copy and zero projections.
#[derive(Clone, Debug)]
pub struct ControllerModel {
    base: Arc<DenoiserModel>,
    config: ControllerConfig,
    /// Copy of the base parameters followed by `ctrl.in.*` and `ctrl.out.*`
    /// (or `ctrl.layer{i}.*` with per-layer fusion).
    store: ParamStore,
    input: Linear,
    output: Option<Linear>,
    layers: Vec<Linear>,
}

impl ControllerModel {
    pub fn init(base: Arc<DenoiserModel>, config: ControllerConfig) -> Result<Self> {
        config.validate()?;
        let d = base.config().width;
        let mut store = base.params().clone();
        let input = Linear::zeros(&mut store, "ctrl.in", d, d);
        let (output, layers) = match config.fusion {
            Fusion::Output => (Some(Linear::zeros(&mut store, "ctrl.out", d, d)), Vec::new()),
            Fusion::PerLayer => {
                let n = base.config().layers;
                (None, (0..n).map(|i| Linear::zeros(&mut store, &format!("ctrl.layer{i}"), d, d)).collect())
            }
        };
        Ok(Self { base, config, store, input, output, layers })
    }

    /// Rebuilds a trained controller from saved copy and projection weights.
    pub fn from_parts(base: Arc<DenoiserModel>, config: ControllerConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::init(base, config)?;
        let n = m.store.len();
        if params.len() != n || m.store.copy_matching(&params) != n {
            return Err(Error::Checkpoint("controller parameters do not match the base layout".into()));
        }
        Ok(m)
    }

    pub fn base(&self) -> &DenoiserModel {
        &self.base
    }

    pub fn base_arc(&self) -> &Arc<DenoiserModel> {
        &self.base
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `out(copy(z_t + in(c_kw), c, t))` on `g`.
    fn branch<'p>(&self, g: &mut Graph<'p>, p: &'p ParamStore, z_t: Var, c: Option<Var>, kw: Var, t: usize) -> Var {
        let inj = self.input.forward(g, p, kw);
        let z = g.add(z_t, inj);
        let h = self.base.net().forward(g, p, z, c, t);
        self.output.as_ref().expect("output fusion").forward(g, p, h)
    }

    /// The base run on `g` with every copy block's projected output added to its residual stream.
    fn per_layer<'p>(&'p self, g: &mut Graph<'p>, p: &'p ParamStore, z_t: Var, c: Option<Var>, kw: Var, t: usize) -> Var {
        let inj = self.input.forward(g, p, kw);
        let z = g.add(z_t, inj);
        let mut taps = Vec::with_capacity(self.layers.len());
        self.base.net().forward_ext(g, p, z, c, t, None, Some(&mut taps));
        let res: Vec<Var> = taps.iter().zip(&self.layers).map(|(&h, l)| l.forward(g, p, h)).collect();
        self.base.net().forward_ext(g, self.base.params(), z_t, c, t, Some(&res), None)
    }

    fn check(&self, z_t: &Mat, cond: &Cond<'_>, keywords: &Mat) -> Result<()> {
        self.base.net().check_inputs(z_t, cond)?;
        if keywords.dim() != z_t.dim() {
            return Err(Error::shape(z_t.dim(), keywords.dim()));
        }
        Ok(())
    }

    /// What the control branch adds to the base prediction; exactly zero at initialisation.
    pub fn control(&self, z_t: &Mat, cond: Cond<'_>, keywords: &Mat, t: usize) -> Result<Mat> {
        self.check(z_t, &cond, keywords)?;
        match self.config.fusion {
            Fusion::Output => {
                let mut g = Graph::inference();
                let z = g.constant_ref(z_t);
                let c = cond.source.map(|c| g.constant_ref(c));
                let kw = g.constant_ref(keywords);
                let out = self.branch(&mut g, &self.store, z, c, kw, t);
                Ok(g.take(out))
            }
            Fusion::PerLayer => Ok(self.fused_denoise(z_t, cond.with_keywords(keywords), t)? - self.base.predict(z_t, cond, t)?),
        }
    }

    /// Fused prediction; without keywords this is the base prediction.
    pub fn fused_denoise(&self, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat> {
        let Some(kw) = cond.keywords else { return self.base.predict(z_t, cond, t) };
        let out = match self.config.fusion {
            Fusion::Output => self.base.predict(z_t, cond, t)? + self.control(z_t, cond, kw, t)?,
            Fusion::PerLayer => {
                self.check(z_t, &cond, kw)?;
                let mut g = Graph::inference();
                let z = g.constant_ref(z_t);
                let c = cond.source.map(|c| g.constant_ref(c));
                let k = g.constant_ref(kw);
                let out = self.per_layer(&mut g, &self.store, z, c, k, t);
                g.take(out)
            }
        };
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite controller output at t = {t}")));
        }
        Ok(out)
    }
}

impl Denoise for ControllerModel {
    fn predict(&self, z_t: &Mat, cond: Cond<'_>, t: usize) -> Result<Mat> {
        self.fused_denoise(z_t, cond, t)
    }

    fn latent_shape(&self) -> (usize, usize) {
        self.base.latent_shape()
    }

    fn keyword_ratio(&self) -> Option<f64> {
        Some(self.config.keyword_ratio)
    }
}

/// Target, source and keyword-segment latents for one training pair.
#[derive(Clone, Debug)]
pub struct ControlPair {
    pub z0: Mat,
    pub source: Mat,
    /// Encoded keyword segments of the target, one per drawn variant.
    pub keywords: Vec<Mat>,
}

/// Encodes pairs; keyword segments come from the reference (target) side.
pub fn prepare_control_pairs(
    records: &[ParaphraseRecord],
    codec: &CodecModel,
    norm: &NormStats,
    config: &ControllerConfig,
    rng: &mut Prng,
) -> Result<Vec<ControlPair>> {
    config.validate()?;
    let variants = match config.keyword_mode {
        KeywordMode::Deterministic => 1,
        KeywordMode::Sampled => config.keyword_variants,
    };
    let mut segments = Vec::with_capacity(records.len());
    for r in records {
        let tokens = codec.tokenize(&r.target)?;
        let segs = (0..variants)
            .map(|_| extract_keyword_segment(&tokens, codec.vocab(), config.keyword_ratio, config.keyword_mode, rng))
            .collect::<Result<Vec<_>>>()?;
        segments.push(segs);
    }
    let latent = |t: &crate::codec::TokenSeq| -> Result<Mat> { Ok(norm.normalize(&codec.encode(t)?)?.values) };
    let idx: Vec<usize> = (0..records.len()).collect();
    crate::parallel::map(&idx, |&i| -> Result<ControlPair> {
        let r = &records[i];
        Ok(ControlPair {
            z0: latent(&codec.tokenize(&r.target)?)?,
            source: latent(&codec.tokenize(&r.source)?)?,
            keywords: segments[i].iter().map(|s| latent(&s.masked)).collect::<Result<Vec<_>>>()?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug)]
struct ControlItem {
    pair: usize,
    variant: usize,
    t: usize,
    eps: Mat,
    drop_cond: bool,
}

fn sample_items(pairs: &[ControlPair], config: &ControllerConfig, schedule: &NoiseSchedule, rng: &mut Prng) -> Vec<ControlItem> {
    let drops = sample_dropout_flags(config.batch, config.cond_dropout, rng);
    drops
        .into_iter()
        .map(|drop_cond| {
            let pair = rng.gen_range(0..pairs.len());
            let (l, d) = pairs[pair].z0.dim();
            ControlItem {
                pair,
                variant: rng.gen_range(0..pairs[pair].keywords.len()),
                t: rng.gen_range(1..=schedule.steps()),
                eps: randn(rng, l, d),
                drop_cond,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ControllerTraining {
    pub model: ControllerModel,
    pub log: Vec<LossRecord>,
}

/// Trains copy and projections on the reconstruction loss of the fused prediction.
pub fn finetune_controller(
    base: Arc<DenoiserModel>,
    pairs: &[ControlPair],
    schedule: &NoiseSchedule,
    config: &ControllerConfig,
    rng: &mut Prng,
) -> Result<ControllerTraining> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no controller training pairs".into()));
    }
    let mut model = ControllerModel::init(base, config.clone())?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, clip_norm: config.clip_norm, ..Default::default() },
    );
    let lrs = LrSchedule { base: config.lr, warmup: config.warmup };
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let items = sample_items(pairs, config, schedule, rng);
        let (loss, mut grads) = {
            let m = &model;
            batch_gradients(&m.store, &items, |it| {
                let p = &pairs[it.pair];
                let z_t = schedule.forward_noise(&p.z0, it.t, &it.eps)?;
                let kw = &p.keywords[it.variant];
                let cond = if it.drop_cond { Cond::null() } else { Cond::source(&p.source) };
                let mut g = Graph::new(&[m.store.tag()]);
                let pred = match m.config.fusion {
                    Fusion::Output => {
                        let base = m.base.predict(&z_t, cond, it.t)?;
                        let z = g.constant(z_t);
                        let c = cond.source.map(|s| g.constant_ref(s));
                        let k = g.constant_ref(kw);
                        let ctrl = m.branch(&mut g, &m.store, z, c, k, it.t);
                        let b = g.constant(base);
                        g.add(b, ctrl)
                    }
                    Fusion::PerLayer => {
                        let z = g.constant(z_t);
                        let c = cond.source.map(|s| g.constant_ref(s));
                        let k = g.constant_ref(kw);
                        m.per_layer(&mut g, &m.store, z, c, k, it.t)
                    }
                };
                let loss = g.mse(pred, p.z0.clone());
                Ok((g.scalar(loss), g.backward(loss, &m.store)))
            })
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("controller step {step}: {msg}")),
                other => other,
            })?
        };
        let lr = lrs.at(step);
        opt.step(&mut model.store, &mut grads, lr);
        log.push(LossRecord { step, loss, lr });
        if step % 250 == 0 {
            log::info!("controller step {step} loss {loss:.5}");
        }
    }
    Ok(ControllerTraining { model, log })
}

/// Fits a controller on pairs from a new domain, leaving the base untouched.
pub fn adapt_domain(
    base: Arc<DenoiserModel>,
    records: &[ParaphraseRecord],
    codec: &CodecModel,
    norm: &NormStats,
    schedule: &NoiseSchedule,
    config: &ControllerConfig,
    rng: &mut Prng,
) -> Result<ControllerTraining> {
    let pairs = prepare_control_pairs(records, codec, norm, config, rng)?;
    finetune_controller(base, &pairs, schedule, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::DenoiserConfig;
    use crate::rng::seeded;

    fn base() -> Arc<DenoiserModel> {
        let cfg = DenoiserConfig { layers: 1, heads: 2, width: 8, max_len: 6, rel_buckets: 8, ..Default::default() };
        Arc::new(DenoiserModel::init(cfg, &mut seeded(1)).unwrap())
    }

    fn pairs(n: usize) -> Vec<ControlPair> {
        let mut r = seeded(2);
        (0..n)
            .map(|_| ControlPair {
                z0: randn(&mut r, 6, 8),
                source: randn(&mut r, 6, 8),
                keywords: vec![randn(&mut r, 6, 8), randn(&mut r, 6, 8)],
            })
            .collect()
    }

    fn small() -> ControllerConfig {
        ControllerConfig { steps: 30, batch: 4, lr: 1e-2, warmup: 1, ..Default::default() }
    }

    #[test]
    fn fresh_controller_is_the_base_bitwise() {
        let b = base();
        let c = ControllerModel::init(b.clone(), ControllerConfig::default()).unwrap();
        let mut r = seeded(3);
        for t in [1, 10, 500, 1000] {
            let z = randn(&mut r, 6, 8);
            let s = randn(&mut r, 6, 8);
            let kw = randn(&mut r, 6, 8);
            let fused = c.predict(&z, Cond::source(&s).with_keywords(&kw), t).unwrap();
            assert_eq!(fused, b.predict(&z, Cond::source(&s), t).unwrap());
        }
    }

    #[test]
    fn training_moves_only_the_copy() {
        let b = base();
        let before = b.params().fingerprint();
        let ps = pairs(3);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let out = finetune_controller(b.clone(), &ps, &sched, &small(), &mut seeded(4)).unwrap();
        assert_eq!(b.params().fingerprint(), before);
        let m = out.model;
        let mut r = seeded(5);
        let z = randn(&mut r, 6, 8);
        let s = randn(&mut r, 6, 8);
        let k1 = randn(&mut r, 6, 8);
        let k2 = randn(&mut r, 6, 8);
        let a = m.predict(&z, Cond::source(&s).with_keywords(&k1), 20).unwrap();
        let c = m.predict(&z, Cond::source(&s).with_keywords(&k2), 20).unwrap();
        assert_ne!(a, c, "control branch still dead after training");
        // Detaching the keywords recovers the base exactly.
        assert_eq!(m.predict(&z, Cond::source(&s), 20).unwrap(), b.predict(&z, Cond::source(&s), 20).unwrap());
    }

    #[test]
    fn first_step_loss_equals_base_loss() {
        let b = base();
        let ps = pairs(2);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let cfg = ControllerConfig { steps: 1, cond_dropout: 0.0, ..small() };
        let mut rng = seeded(6);
        let items = sample_items(&ps, &cfg, &sched, &mut seeded(6));
        let out = finetune_controller(b.clone(), &ps, &sched, &cfg, &mut rng).unwrap();
        let mut base_loss = 0.0;
        for it in &items {
            let p = &ps[it.pair];
            let z = sched.forward_noise(&p.z0, it.t, &it.eps).unwrap();
            let pred = b.predict(&z, Cond::source(&p.source), it.t).unwrap();
            base_loss += (&pred - &p.z0).mapv(|x| x * x).mean().unwrap() / items.len() as f64;
        }
        assert!((out.log[0].loss - base_loss).abs() < 1e-12);
    }

    #[test]
    fn from_parts_round_trip_and_mismatch() {
        let b = base();
        let ps = pairs(2);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let m = finetune_controller(b.clone(), &ps, &sched, &ControllerConfig { steps: 3, ..small() }, &mut seeded(7))
            .unwrap()
            .model;
        let back = ControllerModel::from_parts(b.clone(), small(), m.params().clone()).unwrap();
        assert_eq!(back.params().fingerprint(), m.params().fingerprint());
        assert!(ControllerModel::from_parts(b.clone(), small(), b.params().clone()).is_err());
    }

    #[test]
    fn keyword_shape_mismatch_is_an_error() {
        let c = ControllerModel::init(base(), ControllerConfig::default()).unwrap();
        let mut r = seeded(8);
        let z = randn(&mut r, 6, 8);
        let bad = randn(&mut r, 5, 8);
        assert!(c.predict(&z, Cond::null().with_keywords(&bad), 3).is_err());
    }

    #[test]
    fn per_layer_fusion_starts_at_the_base_and_learns() {
        let b = base();
        let cfg = ControllerConfig { fusion: Fusion::PerLayer, ..small() };
        let fresh = ControllerModel::init(b.clone(), cfg.clone()).unwrap();
        let mut r = seeded(9);
        let (z, s, kw) = (randn(&mut r, 6, 8), randn(&mut r, 6, 8), randn(&mut r, 6, 8));
        let cond = Cond::source(&s).with_keywords(&kw);
        assert_eq!(fresh.predict(&z, cond, 7).unwrap(), b.predict(&z, Cond::source(&s), 7).unwrap());
        assert!(fresh.control(&z, Cond::source(&s), &kw, 7).unwrap().iter().all(|&x| x == 0.0));
        let before = b.params().fingerprint();
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let m = finetune_controller(b.clone(), &pairs(3), &sched, &cfg, &mut seeded(10)).unwrap().model;
        assert_eq!(b.params().fingerprint(), before);
        assert_ne!(m.predict(&z, cond, 7).unwrap(), b.predict(&z, Cond::source(&s), 7).unwrap());
        let back = ControllerModel::from_parts(b.clone(), cfg, m.params().clone()).unwrap();
        assert_eq!(back.predict(&z, cond, 7).unwrap(), m.predict(&z, cond, 7).unwrap());
        assert!(ControllerModel::from_parts(b, small(), m.params().clone()).is_err());
    }
}
