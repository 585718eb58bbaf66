//! The desk-scale experiment: toy corpora, a codec, a diffusion model trained
//! on template family A, a keyword controller on A and a domain controller on
//! family B. Every stage is cached under a root directory and keyed by its
//! configuration and the keys of the stages it reads, so reruns only redo
//! what changed.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_codec, load_controller, load_denoiser, sha256_bytes, CodecBundle, ControllerBundle, DenoiserBundle};
use super::pipeline::{Extra, run_train_codec, run_train_controller, run_train_diffusion, sentences};
use crate::codec::CodecConfig;
use crate::controller::ControllerConfig;
use crate::corpus::{load_corpus, make_toy_split, save_corpus, Family, ParaphraseRecord};
use crate::denoiser::DenoiserConfig;
use crate::error::Result;
use crate::schedule::ScheduleSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub corpus_seed: u64,
    pub n_train_a: usize,
    pub n_train_b: usize,
    pub n_test: usize,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleSpec,
    pub checkpoint_every: usize,
    /// Keyword controller trained on family A.
    pub guidance: ControllerConfig,
    /// Domain controller trained on family B.
    pub domain: ControllerConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            corpus_seed: 5,
            n_train_a: 4000,
            n_train_b: 2000,
            n_test: 100,
            codec: CodecConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleSpec::cosine_default(1000),
            checkpoint_every: 5000,
            guidance: ControllerConfig { seed: 13, ..Default::default() },
            domain: ControllerConfig { seed: 17, ..Default::default() },
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageRecord {
    pub key: String,
    pub seconds: f64,
}

/// Outcome of one stage: whether it was reused and how long it originally took.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub name: &'static str,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct ToyData {
    pub train_a: Vec<ParaphraseRecord>,
    pub test_a: Vec<ParaphraseRecord>,
    pub train_b: Vec<ParaphraseRecord>,
    pub test_b: Vec<ParaphraseRecord>,
}

pub struct ToyRun {
    pub root: PathBuf,
    pub data: ToyData,
    pub codec: CodecBundle,
    pub denoiser: DenoiserBundle,
    pub guidance: ControllerBundle,
    pub domain: ControllerBundle,
    pub stages: Vec<StageRun>,
}

impl ToyRun {
    /// Total recorded training time across stages, cached or not.
    pub fn training_seconds(&self) -> f64 {
        self.stages.iter().map(|s| s.seconds).sum()
    }
}

fn key_of(name: &str, parts: &[String]) -> String {
    sha256_bytes(format!("{name}|{}|{}", env!("CARGO_PKG_VERSION"), parts.join("|")).as_bytes())
}

fn cached(dir: &Path, key: &str) -> Option<StageRecord> {
    let text = fs::read_to_string(dir.join("stage.json")).ok()?;
    let rec: StageRecord = serde_json::from_str(&text).ok()?;
    (rec.key == key).then_some(rec)
}

/// Runs `build` unless `dir` already holds a stage with the same key, then `load`s it.
fn stage<T>(
    name: &'static str,
    dir: &Path,
    key: &str,
    stages: &mut Vec<StageRun>,
    build: impl FnOnce() -> Result<()>,
    load: impl Fn() -> Result<T>,
) -> Result<T> {
    if let Some(rec) = cached(dir, key) {
        if let Ok(v) = load() {
            log::info!("stage {name}: reusing {}", dir.display());
            stages.push(StageRun { name, cached: true, seconds: rec.seconds });
            return Ok(v);
        }
        log::warn!("stage {name}: cached output in {} is unreadable; rebuilding", dir.display());
    }
    stage_fresh(name, dir, key, stages, build, load)
}

fn stage_fresh<T>(
    name: &'static str,
    dir: &Path,
    key: &str,
    stages: &mut Vec<StageRun>,
    build: impl FnOnce() -> Result<()>,
    load: impl Fn() -> Result<T>,
) -> Result<T> {
    log::info!("stage {name}: building in {}", dir.display());
    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let start = Instant::now();
    build()?;
    let seconds = start.elapsed().as_secs_f64();
    fs::write(dir.join("stage.json"), serde_json::to_string_pretty(&StageRecord { key: key.to_string(), seconds })?)?;
    stages.push(StageRun { name, cached: false, seconds });
    load()
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).unwrap_or_default()
}

fn load_data(dir: &Path) -> Result<ToyData> {
    Ok(ToyData {
        train_a: load_corpus(&dir.join("train_a.jsonl"))?,
        test_a: load_corpus(&dir.join("test_a.jsonl"))?,
        train_b: load_corpus(&dir.join("train_b.jsonl"))?,
        test_b: load_corpus(&dir.join("test_b.jsonl"))?,
    })
}

/// Runs (or reuses) every stage under `root`.
pub fn run_toy(root: &Path, cfg: &ToyConfig) -> Result<ToyRun> {
    let mut stages = Vec::new();
    let data_dir = root.join("data");
    let data_key = key_of("data", &[cfg.corpus_seed.to_string(), cfg.n_train_a.to_string(), cfg.n_train_b.to_string(), cfg.n_test.to_string()]);
    let data = stage(
        "data",
        &data_dir,
        &data_key,
        &mut stages,
        || {
            let (train_a, test_a) = make_toy_split(cfg.corpus_seed, Family::A, cfg.n_train_a, cfg.n_test);
            let (train_b, test_b) = make_toy_split(cfg.corpus_seed + 1, Family::B, cfg.n_train_b, cfg.n_test);
            save_corpus(&data_dir.join("train_a.jsonl"), &train_a)?;
            save_corpus(&data_dir.join("test_a.jsonl"), &test_a)?;
            save_corpus(&data_dir.join("train_b.jsonl"), &train_b)?;
            save_corpus(&data_dir.join("test_b.jsonl"), &test_b)
        },
        || load_data(&data_dir),
    )?;

    let codec_dir = root.join("codec");
    let codec_key = key_of("codec", &[data_key.clone(), json(&cfg.codec)]);
    let codec = stage(
        "codec",
        &codec_dir,
        &codec_key,
        &mut stages,
        || {
            // The codec sees both families; diffusion only ever sees family A.
            let mut records = data.train_a.clone();
            records.extend(data.train_b.iter().cloned());
            let mut held_out = sentences(&data.test_a);
            held_out.extend(sentences(&data.test_b));
            run_train_codec(&records, &cfg.codec, &codec_dir, Some(&held_out), &Extra::new()).map(|_| ())
        },
        || load_codec(&codec_dir),
    )?;

    let den_dir = root.join("denoiser");
    let den_key = key_of("denoiser", &[codec_key.clone(), json(&cfg.denoiser), json(&cfg.schedule)]);
    let denoiser = stage(
        "denoiser",
        &den_dir,
        &den_key,
        &mut stages,
        || run_train_diffusion(&data.train_a, &codec, &cfg.denoiser, &cfg.schedule, &den_dir, cfg.checkpoint_every, &Extra::new()).map(|_| ()),
        || load_denoiser(&den_dir),
    )?;

    let g_dir = root.join("controller-guidance");
    let g_key = key_of("guidance", &[den_key.clone(), json(&cfg.guidance)]);
    let guidance = stage(
        "guidance",
        &g_dir,
        &g_key,
        &mut stages,
        || run_train_controller(&data.train_a, &codec, &denoiser, &cfg.guidance, &g_dir, &Extra::new()).map(|_| ()),
        || load_controller(&g_dir, &denoiser),
    )?;

    let d_dir = root.join("controller-domain");
    let d_key = key_of("domain", &[den_key, json(&cfg.domain)]);
    let domain = stage(
        "domain",
        &d_dir,
        &d_key,
        &mut stages,
        || run_train_controller(&data.train_b, &codec, &denoiser, &cfg.domain, &d_dir, &Extra::new()).map(|_| ()),
        || load_controller(&d_dir, &denoiser),
    )?;

    Ok(ToyRun { root: root.to_path_buf(), data, codec, denoiser, guidance, domain, stages })
}
