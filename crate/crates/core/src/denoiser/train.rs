use rand::Rng;

use super::{Cond, Denoise, DenoiserConfig, DenoiserModel};
use crate::codec::{CodecModel, NormStats};
use crate::corpus::ParaphraseRecord;
use crate::error::{Error, Result};
use crate::rng::{randn, Prng};
use crate::schedule::NoiseSchedule;
use crate::tensor::{AdamW, AdamWConfig, Graph, LrSchedule, Mat, ParamStore};
use crate::train_util::{batch_gradients, LossRecord};

/// Normalised target latent and source encoding for one paraphrase pair.
#[derive(Clone, Debug)]
pub struct DiffusionPair {
    pub z0: Mat,
    pub source: Mat,
}

/// Encodes and normalises every record with the frozen codec.
pub fn prepare_pairs(records: &[ParaphraseRecord], codec: &CodecModel, norm: &NormStats) -> Result<Vec<DiffusionPair>> {
    crate::parallel::map(records, |r| -> Result<DiffusionPair> {
        let z0 = norm.normalize(&codec.encode_text(&r.target)?)?.values;
        let source = norm.normalize(&codec.encode_text(&r.source)?)?.values;
        Ok(DiffusionPair { z0, source })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub pair: usize,
    pub t: usize,
    pub eps: Mat,
    /// Replace the source with the null tokens for this item.
    pub drop_cond: bool,
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

/// Independent Bernoulli(`p`) draws deciding which items lose their condition.
pub fn sample_dropout_flags<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<f64>() < p).collect()
}

impl TrainBatch {
    /// Pairs uniformly at random, `t` uniform on `1..=T`, standard normal noise.
    pub fn sample<R: Rng>(
        n_pairs: usize,
        batch: usize,
        schedule: &NoiseSchedule,
        cond_dropout: f64,
        shape: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let drops = sample_dropout_flags(batch, cond_dropout, rng);
        let items = drops
            .into_iter()
            .map(|drop_cond| TrainItem {
                pair: rng.gen_range(0..n_pairs),
                t: rng.gen_range(1..=schedule.steps()),
                eps: randn(rng, shape.0, shape.1),
                drop_cond,
            })
            .collect();
        Self { items }
    }
}

/// Mean squared reconstruction error of `model` on `batch`, without gradients.
pub fn reconstruction_loss(
    model: &dyn Denoise,
    pairs: &[DiffusionPair],
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let losses = crate::parallel::map(&batch.items, |it| -> Result<f64> {
        let p = &pairs[it.pair];
        let z_t = schedule.forward_noise(&p.z0, it.t, &it.eps)?;
        let cond = if it.drop_cond { Cond::null() } else { Cond::source(&p.source) };
        let pred = model.predict(&z_t, cond, it.t)?;
        Ok((&pred - &p.z0).mapv(|x| x * x).mean().unwrap_or(0.0))
    });
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / batch.items.len() as f64)
}

/// One optimiser update on `batch`; returns the batch loss before the update.
pub fn training_step(
    model: &mut DenoiserModel,
    opt: &mut AdamW,
    pairs: &[DiffusionPair],
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    lr: f64,
) -> Result<f64> {
    let net = model.net.clone();
    let store = &model.store;
    let (loss, mut grads) = batch_gradients(store, &batch.items, |it| {
        let p = &pairs[it.pair];
        let z_t = schedule.forward_noise(&p.z0, it.t, &it.eps)?;
        let mut g = Graph::new(&[store.tag()]);
        let z = g.constant(z_t);
        let c = (!it.drop_cond).then(|| g.constant_ref(&p.source));
        let pred = net.forward(&mut g, store, z, c, it.t);
        let loss = g.mse(pred, p.z0.clone());
        Ok((g.scalar(loss), g.backward(loss, store)))
    })
    .map_err(|e| match e {
        Error::Numerical(m) => {
            let ts: Vec<usize> = batch.items.iter().map(|i| i.t).collect();
            Error::Numerical(format!("{m}; batch steps {ts:?}"))
        }
        other => other,
    })?;
    opt.step(&mut model.store, &mut grads, lr);
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct DiffusionTraining {
    pub model: DenoiserModel,
    pub log: Vec<LossRecord>,
}

pub type CheckpointHook<'a> = &'a mut dyn FnMut(usize, &DenoiserModel) -> Result<()>;

fn ema_update(ema: &mut ParamStore, live: &ParamStore, decay: f64) {
    let ids: Vec<_> = live.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let src = live.get(id);
        let dst = ema.get_mut(id);
        ndarray::Zip::from(dst).and(src).for_each(|e, &x| *e = decay * *e + (1.0 - decay) * x);
    }
}

/// Full training loop. `hook` is invoked every `every` steps and after the last one.
pub fn train_diffusion(
    pairs: &[DiffusionPair],
    schedule: &NoiseSchedule,
    config: &DenoiserConfig,
    rng: &mut Prng,
    mut hook: Option<(usize, CheckpointHook<'_>)>,
) -> Result<DiffusionTraining> {
    if pairs.is_empty() {
        return Err(Error::Invalid("no training pairs".into()));
    }
    let mut model = DenoiserModel::init(config.clone(), rng)?;
    let mut opt = AdamW::new(
        &model.store,
        AdamWConfig { lr: config.lr, weight_decay: config.weight_decay, clip_norm: config.clip_norm, ..Default::default() },
    );
    let sched = LrSchedule { base: config.lr, warmup: config.warmup };
    let mut ema = config.ema_decay.map(|_| model.store.clone());
    let shape = (config.max_len, config.width);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = TrainBatch::sample(pairs.len(), config.batch, schedule, config.cond_dropout, shape, rng);
        let lr = sched.at(step);
        let loss = training_step(&mut model, &mut opt, pairs, &batch, schedule, lr)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("diffusion step {step}: {m}")),
                other => other,
            })?;
        if let (Some(e), Some(decay)) = (ema.as_mut(), config.ema_decay) {
            ema_update(e, &model.store, decay);
        }
        log.push(LossRecord { step, loss, lr });
        if step % 500 == 0 {
            log::info!("diffusion step {step} loss {loss:.5}");
        }
        if let Some((every, f)) = hook.as_mut() {
            if *every > 0 && (step + 1) % *every == 0 && step + 1 < config.steps {
                f(step + 1, &model)?;
            }
        }
    }
    if let Some(e) = ema {
        model.store.copy_matching(&e);
    }
    if let Some((_, f)) = hook.as_mut() {
        f(config.steps, &model)?;
    }
    Ok(DiffusionTraining { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    struct Oracle<'a>(&'a [DiffusionPair]);

    impl Denoise for Oracle<'_> {
        // Single-pair data set, so the clean latent is known exactly.
        fn predict(&self, _z_t: &Mat, _cond: Cond<'_>, _t: usize) -> Result<Mat> {
            Ok(self.0[0].z0.clone())
        }
        fn latent_shape(&self) -> (usize, usize) {
            self.0[0].z0.dim()
        }
    }

    fn pairs(n: usize) -> Vec<DiffusionPair> {
        let mut r = seeded(1);
        (0..n).map(|_| DiffusionPair { z0: randn(&mut r, 6, 8), source: randn(&mut r, 6, 8) }).collect()
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig {
            layers: 1,
            heads: 2,
            width: 8,
            max_len: 6,
            rel_buckets: 8,
            steps: 40,
            batch: 4,
            lr: 3e-3,
            warmup: 5,
            ..Default::default()
        }
    }

    #[test]
    fn exact_predictor_has_zero_loss() {
        let ps = pairs(1);
        let sched = NoiseSchedule::cosine(100, 0.008, 0.999).unwrap();
        let batch = TrainBatch::sample(1, 16, &sched, 0.1, (6, 8), &mut seeded(2));
        assert_eq!(reconstruction_loss(&Oracle(&ps), &ps, &batch, &sched).unwrap(), 0.0);
    }

    #[test]
    fn dropout_frequency_matches_probability() {
        let flags = sample_dropout_flags(100_000, 0.1, &mut seeded(3));
        let freq = flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64;
        assert!((freq - 0.1).abs() <= 0.005, "frequency {freq}");
    }

    #[test]
    fn batch_steps_are_uniform_in_range() {
        let sched = NoiseSchedule::cosine(10, 0.008, 0.999).unwrap();
        let b = TrainBatch::sample(3, 5000, &sched, 0.1, (2, 2), &mut seeded(4));
        assert!(b.items.iter().all(|i| (1..=10).contains(&i.t) && i.pair < 3));
        for t in 1..=10 {
            let n = b.items.iter().filter(|i| i.t == t).count();
            assert!((400..600).contains(&n), "t={t} drawn {n} times");
        }
    }

    #[test]
    fn seeded_training_is_reproducible_and_learns() {
        let ps = pairs(4);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let a = train_diffusion(&ps, &sched, &small(), &mut seeded(5), None).unwrap();
        let b = train_diffusion(&ps, &sched, &small(), &mut seeded(5), None).unwrap();
        let la: Vec<f64> = a.log.iter().map(|r| r.loss).collect();
        let lb: Vec<f64> = b.log.iter().map(|r| r.loss).collect();
        assert_eq!(la, lb);
        assert_eq!(a.model.params().fingerprint(), b.model.params().fingerprint());
    }

    #[test]
    fn hook_fires_periodically() {
        let ps = pairs(2);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let mut seen = Vec::new();
        let mut f = |s: usize, _: &DenoiserModel| -> Result<()> {
            seen.push(s);
            Ok(())
        };
        let cfg = DenoiserConfig { steps: 10, ..small() };
        train_diffusion(&ps, &sched, &cfg, &mut seeded(6), Some((4, &mut f))).unwrap();
        assert_eq!(seen, vec![4, 8, 10]);
    }

    #[test]
    fn ema_changes_final_weights() {
        let ps = pairs(2);
        let sched = NoiseSchedule::cosine(50, 0.008, 0.999).unwrap();
        let cfg = DenoiserConfig { steps: 10, ..small() };
        let plain = train_diffusion(&ps, &sched, &cfg, &mut seeded(7), None).unwrap();
        let ema = train_diffusion(&ps, &sched, &DenoiserConfig { ema_decay: Some(0.9), ..cfg }, &mut seeded(7), None).unwrap();
        assert_ne!(plain.model.params().fingerprint(), ema.model.params().fingerprint());
    }
}
