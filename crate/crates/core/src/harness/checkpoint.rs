//! Checkpoint directories: `manifest.json` plus `params.bin` (flat
//! little-endian f32) and `params.index.json` (name, shape, offset).
//!
//! A codec manifest carries the vocabulary and latent normalisation. A
//! denoiser manifest repeats both, names its schedule and pins the codec by
//! manifest hash. A controller stores only its own weights and pins the
//! denoiser it was trained against.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecModel, NormStats, Vocab};
use crate::controller::{ControllerConfig, ControllerModel};
use crate::denoiser::{DenoiserConfig, DenoiserModel};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::tensor::ParamStore;

pub const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Codec,
    Denoiser,
    Controller,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ComponentKind,
    pub version: String,
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vocab>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub norm: Option<NormStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleSpec>,
    /// SHA-256 of `params.bin`.
    pub params_sha256: String,
    /// Manifest hash of the codec this component was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec_hash: Option<String>,
    /// Manifest hash of the base denoiser (controllers only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
    /// Anything else worth keeping: data hashes, training summaries.
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Manifest {
    pub fn new(kind: ComponentKind, config: serde_json::Value) -> Self {
        Self {
            kind,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            vocab: None,
            norm: None,
            schedule: None,
            params_sha256: String::new(),
            codec_hash: None,
            base_hash: None,
            seeds: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.vocab = m.vocab.map(Vocab::reindexed);
        Ok(m)
    }

    fn expect(&self, kind: ComponentKind, dir: &Path) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("{} holds a {:?}, expected a {kind:?}", dir.display(), self.kind)));
        }
        Ok(())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_bytes(&fs::read(path)?))
}

/// Hash identifying a checkpoint: the SHA-256 of its manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    sha256_file(&dir.join(MANIFEST))
}

/// Hashes of every file in a checkpoint directory, for before/after comparisons.
pub fn directory_digest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_file() {
            out.insert(p.file_name().unwrap_or_default().to_string_lossy().into_owned(), sha256_file(&p)?);
        }
    }
    Ok(out)
}

fn write(dir: &Path, params: &ParamStore, mut manifest: Manifest) -> Result<String> {
    fs::create_dir_all(dir)?;
    params.save(dir, PARAMS)?;
    manifest.params_sha256 = sha256_file(&dir.join(format!("{PARAMS}.bin")))?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    manifest_hash(dir)
}

fn read_params(dir: &Path, manifest: &Manifest) -> Result<ParamStore> {
    let got = sha256_file(&dir.join(format!("{PARAMS}.bin")))?;
    if got != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!("{}: params.bin does not match its manifest hash", dir.display())));
    }
    ParamStore::load(dir, PARAMS)
}

fn config_of<T: serde::de::DeserializeOwned>(m: &Manifest) -> Result<T> {
    serde_json::from_value(m.config.clone()).map_err(|e| Error::Checkpoint(format!("bad config in manifest: {e}")))
}

/// Frozen codec with the normalisation fitted on its training corpus.
#[derive(Clone, Debug)]
pub struct CodecBundle {
    pub codec: CodecModel,
    pub norm: NormStats,
    pub manifest: Manifest,
    pub hash: String,
}

pub fn save_codec(dir: &Path, codec: &CodecModel, norm: &NormStats, mut manifest: Manifest) -> Result<String> {
    manifest.kind = ComponentKind::Codec;
    manifest.config = serde_json::to_value(codec.config())?;
    manifest.vocab = Some(codec.vocab().clone());
    manifest.norm = Some(norm.clone());
    write(dir, codec.params(), manifest)
}

pub fn load_codec(dir: &Path) -> Result<CodecBundle> {
    let manifest = Manifest::load(dir)?;
    manifest.expect(ComponentKind::Codec, dir)?;
    let config: CodecConfig = config_of(&manifest)?;
    let vocab = manifest.vocab.clone().ok_or_else(|| Error::Checkpoint("codec manifest lacks a vocabulary".into()))?;
    let norm = manifest.norm.clone().ok_or_else(|| Error::Checkpoint("codec manifest lacks normalisation".into()))?;
    let codec = CodecModel::from_parts(config, vocab, read_params(dir, &manifest)?)?;
    Ok(CodecBundle { codec, norm, hash: manifest_hash(dir)?, manifest })
}

#[derive(Clone, Debug)]
pub struct DenoiserBundle {
    pub model: Arc<DenoiserModel>,
    pub schedule: NoiseSchedule,
    pub manifest: Manifest,
    pub hash: String,
}

pub fn save_denoiser(
    dir: &Path,
    model: &DenoiserModel,
    schedule: &NoiseSchedule,
    codec: &CodecBundle,
    mut manifest: Manifest,
) -> Result<String> {
    manifest.kind = ComponentKind::Denoiser;
    manifest.config = serde_json::to_value(model.config())?;
    manifest.vocab = Some(codec.codec.vocab().clone());
    manifest.norm = Some(codec.norm.clone());
    manifest.schedule = Some(schedule.spec().clone());
    manifest.codec_hash = Some(codec.hash.clone());
    write(dir, model.params(), manifest)
}

pub fn load_denoiser(dir: &Path) -> Result<DenoiserBundle> {
    let manifest = Manifest::load(dir)?;
    manifest.expect(ComponentKind::Denoiser, dir)?;
    let config: DenoiserConfig = config_of(&manifest)?;
    let schedule = manifest
        .schedule
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("denoiser manifest lacks a schedule".into()))?
        .build()?;
    let model = DenoiserModel::from_parts(config, read_params(dir, &manifest)?)?;
    Ok(DenoiserBundle { model: Arc::new(model), schedule, hash: manifest_hash(dir)?, manifest })
}

pub fn save_controller(dir: &Path, model: &ControllerModel, base: &DenoiserBundle, mut manifest: Manifest) -> Result<String> {
    manifest.kind = ComponentKind::Controller;
    manifest.config = serde_json::to_value(model.config())?;
    manifest.base_hash = Some(base.hash.clone());
    manifest.codec_hash = base.manifest.codec_hash.clone();
    write(dir, model.params(), manifest)
}

#[derive(Clone, Debug)]
pub struct ControllerBundle {
    pub model: ControllerModel,
    pub manifest: Manifest,
    pub hash: String,
}

/// Loads a controller on top of `base`, refusing a base it was not trained against.
pub fn load_controller(dir: &Path, base: &DenoiserBundle) -> Result<ControllerBundle> {
    let manifest = Manifest::load(dir)?;
    manifest.expect(ComponentKind::Controller, dir)?;
    if manifest.base_hash.as_deref() != Some(base.hash.as_str()) {
        return Err(Error::Manifest(format!(
            "controller {} was trained against base {}, not {}",
            dir.display(),
            manifest.base_hash.as_deref().unwrap_or("?"),
            base.hash
        )));
    }
    let config: ControllerConfig = config_of(&manifest)?;
    let model = ControllerModel::from_parts(base.model.clone(), config, read_params(dir, &manifest)?)?;
    Ok(ControllerBundle { model, hash: manifest_hash(dir)?, manifest })
}

/// Paths of the checkpoints a run reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub codec: PathBuf,
    pub denoiser: PathBuf,
    #[serde(default)]
    pub controller: Option<PathBuf>,
    pub sampler: crate::sampler::SamplerConfig,
    pub n_samples: usize,
}

/// Loaded, mutually consistent components of a run.
#[derive(Clone, Debug)]
pub struct LoadedRun {
    pub codec: CodecBundle,
    pub denoiser: DenoiserBundle,
    pub controller: Option<ControllerBundle>,
}

impl LoadedRun {
    pub fn load(run: &RunConfig) -> Result<Self> {
        let codec = load_codec(&run.codec)?;
        let denoiser = load_denoiser(&run.denoiser)?;
        check_pair(&codec, &denoiser)?;
        let controller = run.controller.as_deref().map(|p| load_controller(p, &denoiser)).transpose()?;
        Ok(Self { codec, denoiser, controller })
    }

    /// Components for sampling; the controller (if any) wraps the base.
    pub fn components(&self) -> crate::sampler::Components<'_> {
        let model: &dyn crate::denoiser::Denoise = match &self.controller {
            Some(c) => &c.model,
            None => self.denoiser.model.as_ref(),
        };
        crate::sampler::Components {
            codec: &self.codec.codec,
            norm: &self.codec.norm,
            schedule: &self.denoiser.schedule,
            model,
        }
    }

    pub fn base_components(&self) -> crate::sampler::Components<'_> {
        crate::sampler::Components { model: self.denoiser.model.as_ref(), ..self.components() }
    }
}

/// The denoiser must have been trained on latents of exactly this codec.
pub fn check_pair(codec: &CodecBundle, denoiser: &DenoiserBundle) -> Result<()> {
    if denoiser.manifest.codec_hash.as_deref() != Some(codec.hash.as_str()) {
        return Err(Error::Manifest(format!(
            "denoiser expects codec {}, got {}",
            denoiser.manifest.codec_hash.as_deref().unwrap_or("?"),
            codec.hash
        )));
    }
    if denoiser.manifest.norm.as_ref() != Some(&codec.norm) {
        return Err(Error::Manifest("denoiser and codec disagree on latent normalisation".into()));
    }
    Ok(())
}
