//! Train-and-save steps shared by the command line and the toy experiment.
//! Each writes a checkpoint directory plus `loss.csv` and returns the
//! component as reloaded from disk, so callers always use saved weights.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde_json::json;

use super::checkpoint::{
    load_codec, load_controller, load_denoiser, save_codec, save_controller, save_denoiser, sha256_bytes, CodecBundle,
    ComponentKind, ControllerBundle, DenoiserBundle, Manifest,
};
use crate::codec::{train_codec, CodecConfig, NormStats};
use crate::controller::{adapt_domain, ControllerConfig};
use crate::corpus::ParaphraseRecord;
use crate::denoiser::{prepare_pairs, train_diffusion, DenoiserConfig, DenoiserModel};
use crate::error::Result;
use crate::rng::seeded;
use crate::schedule::ScheduleSpec;
use crate::train_util::write_loss_csv;

/// Caller-supplied manifest fields, such as the echoed run configuration.
pub type Extra = BTreeMap<String, serde_json::Value>;

/// Stable hash of a training corpus.
pub fn corpus_hash(records: &[ParaphraseRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.source);
        s.push('\t');
        s.push_str(&r.target);
        s.push('\n');
    }
    sha256_bytes(s.as_bytes())
}

/// Every source and target sentence, in corpus order.
pub fn sentences(records: &[ParaphraseRecord]) -> Vec<String> {
    records.iter().flat_map(|r| [r.source.clone(), r.target.clone()]).collect()
}

pub fn run_train_codec(
    records: &[ParaphraseRecord],
    config: &CodecConfig,
    out: &Path,
    held_out: Option<&[String]>,
    extra: &Extra,
) -> Result<CodecBundle> {
    let start = Instant::now();
    let texts = sentences(records);
    let trained = train_codec(&texts, config.clone(), &mut seeded(config.seed))?;
    let norm = NormStats::fit(&texts, &trained.model)?;
    let mut m = Manifest::new(ComponentKind::Codec, serde_json::Value::Null);
    m.extra.extend(extra.clone());
    m.seeds.insert("codec".into(), config.seed);
    m.extra.insert("data_sha256".into(), json!(corpus_hash(records)));
    m.extra.insert("train_seconds".into(), json!(start.elapsed().as_secs_f64()));
    m.extra.insert("train_round_trip".into(), json!(trained.model.round_trip_accuracy(&texts)?));
    if let Some(h) = held_out {
        m.extra.insert("held_out_round_trip".into(), json!(trained.model.round_trip_accuracy(h)?));
    }
    save_codec(out, &trained.model, &norm, m)?;
    write_loss_csv(&out.join("loss.csv"), &trained.log)?;
    load_codec(out)
}

pub fn run_train_diffusion(
    records: &[ParaphraseRecord],
    codec: &CodecBundle,
    config: &DenoiserConfig,
    schedule: &ScheduleSpec,
    out: &Path,
    checkpoint_every: usize,
    extra: &Extra,
) -> Result<DenoiserBundle> {
    let start = Instant::now();
    let sched = schedule.build()?;
    let pairs = prepare_pairs(records, &codec.codec, &codec.norm)?;
    let base_manifest = |seconds: f64| {
        let mut m = Manifest::new(ComponentKind::Denoiser, serde_json::Value::Null);
        m.extra.extend(extra.clone());
        m.seeds.insert("denoiser".into(), config.seed);
        m.extra.insert("data_sha256".into(), json!(corpus_hash(records)));
        m.extra.insert("train_seconds".into(), json!(seconds));
        m
    };
    let partial = out.join("partial");
    let mut hook = |step: usize, model: &DenoiserModel| -> Result<()> {
        let mut m = base_manifest(start.elapsed().as_secs_f64());
        m.extra.insert("step".into(), json!(step));
        save_denoiser(&partial, model, &sched, codec, m)?;
        log::info!("checkpoint at step {step}");
        Ok(())
    };
    let hook_arg = (checkpoint_every > 0).then_some((checkpoint_every, &mut hook as _));
    let trained = train_diffusion(&pairs, &sched, config, &mut seeded(config.seed), hook_arg)?;
    let mut m = base_manifest(start.elapsed().as_secs_f64());
    m.extra.insert("step".into(), json!(config.steps));
    save_denoiser(out, &trained.model, &sched, codec, m)?;
    write_loss_csv(&out.join("loss.csv"), &trained.log)?;
    if partial.exists() {
        std::fs::remove_dir_all(&partial)?;
    }
    load_denoiser(out)
}

pub fn run_train_controller(
    records: &[ParaphraseRecord],
    codec: &CodecBundle,
    base: &DenoiserBundle,
    config: &ControllerConfig,
    out: &Path,
    extra: &Extra,
) -> Result<ControllerBundle> {
    let start = Instant::now();
    let trained = adapt_domain(
        base.model.clone(),
        records,
        &codec.codec,
        &codec.norm,
        &base.schedule,
        config,
        &mut seeded(config.seed),
    )?;
    let mut m = Manifest::new(ComponentKind::Controller, serde_json::Value::Null);
    m.extra.extend(extra.clone());
    m.seeds.insert("controller".into(), config.seed);
    m.extra.insert("data_sha256".into(), json!(corpus_hash(records)));
    m.extra.insert("train_seconds".into(), json!(start.elapsed().as_secs_f64()));
    save_controller(out, &trained.model, base, m)?;
    write_loss_csv(&out.join("loss.csv"), &trained.log)?;
    load_controller(out, base)
}
