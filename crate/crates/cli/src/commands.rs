use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde_json::json;

use paradiff::controller::ControllerConfig;
use paradiff::corpus::{load_corpus, make_toy_corpus, make_toy_split, save_corpus, Family, ParaphraseRecord};
use paradiff::denoiser::DenoiserConfig;
use paradiff::codec::CodecConfig;
use paradiff::harness::checkpoint::{directory_digest, load_codec, load_denoiser, LoadedRun, RunConfig};
use paradiff::harness::kv::KvConfig;
use paradiff::harness::metrics::{similarity_backend, DistinctGrouping};
use paradiff::harness::pipeline::{run_train_codec, run_train_controller, run_train_diffusion, Extra};
use paradiff::harness::report::{evaluate, summarize_traces, write_trace_csv};
use paradiff::harness::run::RunManifest;
use paradiff::sampler::{generate_many, trace_many, SamplerConfig, SamplerKind};
use paradiff::schedule::ScheduleSpec;

use crate::args::*;

const CODEC_PATH: &str = "codec_path";

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToyCorpus(a) => make_corpus(a),
        Command::TrainCodec(a) => train_codec(a),
        Command::TrainDiffusion(a) => train_diffusion(a),
        Command::TrainController(a) => train_controller(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Trace(a) => trace_cmd(a),
    }
}

fn load_kv(c: &ConfigArgs) -> Result<KvConfig> {
    let mut kv = match &c.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for s in &c.set {
        let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
        kv.set(k.trim(), v.trim());
    }
    Ok(kv)
}

fn echo(kv: &KvConfig) -> serde_json::Value {
    json!(kv.echo())
}

/// Writes `<out>.manifest.json` next to a file output.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn make_corpus(a: MakeToyCorpus) -> Result<()> {
    let family = match a.family {
        FamilyArg::A => Family::A,
        FamilyArg::B => Family::B,
    };
    if a.n == 0 {
        bail!(paradiff::Error::Invalid("--n must be at least 1".into()));
    }
    let mut m = RunManifest::new("make-toy-corpus");
    m.seeds.insert("corpus".into(), a.seed);
    m.config.insert("family".into(), family.to_string());
    m.config.insert("n".into(), a.n.to_string());
    match &a.test_out {
        Some(test_out) => {
            let (train, test) = make_toy_split(a.seed, family, a.n, a.n_test);
            save_corpus(&a.out, &train)?;
            save_corpus(test_out, &test)?;
            m.config.insert("n_test".into(), a.n_test.to_string());
            m.output("test", test_out)?;
        }
        None => save_corpus(&a.out, &make_toy_corpus(a.seed, a.n, family))?,
    }
    m.output("corpus", &a.out)?;
    m.write(&sidecar(&a.out))?;
    Ok(())
}

fn train_codec(a: TrainCodec) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    let cfg: CodecConfig = kv.apply(&CodecConfig::default())?;
    let echoed = echo(&kv);
    kv.finish()?;
    let records = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let held_out = a.held_out.as_deref().map(load_corpus).transpose()?.map(|r| paradiff::harness::pipeline::sentences(&r));
    let extra = Extra::from([("config_echo".to_string(), echoed)]);
    let bundle = run_train_codec(&records, &cfg, &a.out, held_out.as_deref(), &extra)?;
    println!("{}", serde_json::to_string_pretty(&bundle.manifest.extra)?);
    Ok(())
}

fn schedule_from(kv: &mut KvConfig) -> Result<ScheduleSpec> {
    let kind = kv.take("schedule.kind").unwrap_or_else(|| "cosine".into());
    let steps = kv.take_parsed("schedule.steps")?.unwrap_or(1000);
    Ok(match kind.as_str() {
        "cosine" => {
            let ScheduleSpec::Cosine { offset, max_beta, .. } = ScheduleSpec::cosine_default(steps) else { unreachable!() };
            ScheduleSpec::Cosine {
                steps,
                offset: kv.take_parsed("schedule.offset")?.unwrap_or(offset),
                max_beta: kv.take_parsed("schedule.max_beta")?.unwrap_or(max_beta),
            }
        }
        "linear" => ScheduleSpec::Linear {
            steps,
            beta_start: kv.take_parsed("schedule.beta_start")?.unwrap_or(1e-4),
            beta_end: kv.take_parsed("schedule.beta_end")?.unwrap_or(0.02),
        },
        other => bail!(paradiff::Error::Invalid(format!("unknown schedule kind {other:?}"))),
    })
}

fn canonical(p: &Path) -> String {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).to_string_lossy().into_owned()
}

fn train_diffusion(a: TrainDiffusion) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    let echoed = echo(&kv);
    let schedule = schedule_from(&mut kv)?;
    let every = kv.take_parsed("checkpoint_every")?.unwrap_or(5000);
    let cfg: DenoiserConfig = kv.apply(&DenoiserConfig::default())?;
    kv.finish()?;
    let records = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let codec = load_codec(&a.codec)?;
    let extra = Extra::from([("config_echo".to_string(), echoed), (CODEC_PATH.to_string(), json!(canonical(&a.codec)))]);
    let bundle = run_train_diffusion(&records, &codec, &cfg, &schedule, &a.out, every, &extra)?;
    println!("saved denoiser {} ({})", a.out.display(), bundle.hash);
    Ok(())
}

/// The codec a denoiser checkpoint was trained with, unless given explicitly.
fn codec_dir(explicit: Option<&Path>, denoiser: &Path) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let m = paradiff::harness::checkpoint::Manifest::load(denoiser)?;
    match m.extra.get(CODEC_PATH).and_then(|v| v.as_str()) {
        Some(p) => Ok(PathBuf::from(p)),
        None => bail!(paradiff::Error::Invalid(format!("{} records no codec path; pass --codec", denoiser.display()))),
    }
}

fn train_controller(a: TrainController) -> Result<()> {
    let mut kv = load_kv(&a.config)?;
    if let Some(lr) = a.lr {
        kv.set("lr", lr.to_string());
    }
    if let Some(s) = a.steps {
        kv.set("steps", s.to_string());
    }
    if let Some(m) = &a.keyword_mode {
        kv.set("keyword_mode", m.as_str());
    }
    let echoed = echo(&kv);
    // Flags and file share the serde field names, except the keyword mode which is an enum.
    let mode = kv.take("keyword_mode").map(|s| s.parse()).transpose()?;
    let mut cfg: ControllerConfig = kv.apply(&ControllerConfig::default())?;
    kv.finish()?;
    if let Some(mode) = mode {
        cfg.keyword_mode = mode;
    }
    let records = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let codec_path = codec_dir(a.codec.as_deref(), &a.base_ckpt)?;
    let codec = load_codec(&codec_path)?;
    let base = load_denoiser(&a.base_ckpt)?;
    paradiff::harness::checkpoint::check_pair(&codec, &base)?;
    let extra = Extra::from([("config_echo".to_string(), echoed)]);
    let bundle = run_train_controller(&records, &codec, &base, &cfg, &a.out, &extra)?;
    println!("saved controller {} ({})", a.out.display(), bundle.hash);
    Ok(())
}

/// Effective sampler settings: defaults, then the config file, then flags.
fn sampler_config(s: &SamplerArgs, n_flag: Option<usize>, schedule_len: usize) -> Result<(SamplerConfig, usize, BTreeMap<String, String>)> {
    let mut kv = match &s.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    let set = |kv: &mut KvConfig, k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.set(k, v);
        }
    };
    set(&mut kv, "sampler", s.sampler.clone());
    set(&mut kv, "steps", s.steps.map(|v| v.to_string()));
    set(&mut kv, "eta", s.eta.map(|v| v.to_string()));
    set(&mut kv, "guidance", s.guidance.map(|v| v.to_string()));
    set(&mut kv, "seed", s.seed.map(|v| v.to_string()));
    set(&mut kv, "n_samples", n_flag.map(|v| v.to_string()));
    let echoed = kv.echo().clone();
    let kind: SamplerKind = kv.take_parsed("sampler")?.unwrap_or(SamplerKind::DpmSolverPp);
    let default_steps = if kind == SamplerKind::DpmSolverPp { 25 } else { schedule_len };
    let d = SamplerConfig::default();
    let cfg = SamplerConfig {
        kind,
        steps: kv.take_parsed("steps")?.unwrap_or(default_steps),
        eta: kv.take_parsed("eta")?.unwrap_or(d.eta),
        guidance: kv.take_parsed("guidance")?.unwrap_or(d.guidance),
        seed: kv.take_parsed("seed")?.unwrap_or(d.seed),
    };
    let n = kv.take_parsed("n_samples")?.unwrap_or(5);
    kv.finish()?;
    Ok((cfg, n, echoed))
}

fn load_run(m: &ModelArgs, sampler: SamplerConfig, n_samples: usize) -> Result<(RunConfig, LoadedRun)> {
    let run = RunConfig {
        codec: codec_dir(m.codec.as_deref(), &m.denoiser)?,
        denoiser: m.denoiser.clone(),
        controller: m.controller.clone(),
        sampler,
        n_samples,
    };
    let loaded = LoadedRun::load(&run)?;
    Ok((run, loaded))
}

fn record_inputs(man: &mut RunManifest, run: &RunConfig) -> Result<()> {
    man.input("codec", &run.codec)?;
    man.input("denoiser", &run.denoiser)?;
    if let Some(c) = &run.controller {
        man.input("controller", c)?;
    }
    man.seeds.insert("sampler".into(), run.sampler.seed);
    man.extra.insert("run".into(), serde_json::to_value(run)?);
    Ok(())
}

fn sources_from(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| paradiff::Error::Corpus { line: i + 1, msg: e.to_string() })?;
            match v.get("source").and_then(|s| s.as_str()) {
                Some(s) => out.push(s.to_string()),
                None => bail!(paradiff::Error::Corpus { line: i + 1, msg: "missing \"source\"".into() }),
            }
        } else {
            out.push(line.to_string());
        }
    }
    if out.is_empty() {
        bail!(paradiff::Error::Invalid(format!("{} holds no sources", path.display())));
    }
    Ok(out)
}

fn schedule_len(denoiser: &Path) -> Result<usize> {
    let m = paradiff::harness::checkpoint::Manifest::load(denoiser)?;
    Ok(m.schedule.map(|s| s.build().map(|s| s.steps())).transpose()?.unwrap_or(1000))
}

fn generate(a: Generate) -> Result<()> {
    let mut sources = a.text.clone();
    if let Some(p) = &a.source_file {
        sources.extend(sources_from(p)?);
    }
    let (cfg, n, echoed) = sampler_config(&a.sampler, a.n_samples, schedule_len(&a.model.denoiser)?)?;
    let (run, loaded) = load_run(&a.model, cfg.clone(), n)?;
    let groups = generate_many(&sources, loaded.components(), &cfg, n)?;
    let mut text = String::new();
    for (s, g) in sources.iter().zip(&groups) {
        text.push_str(&serde_json::to_string(&json!({ "source": s, "samples": g }))?);
        text.push('\n');
    }
    match &a.out {
        Some(out) => {
            fs::write(out, &text)?;
            let mut man = RunManifest::new("generate");
            man.config = echoed;
            record_inputs(&mut man, &run)?;
            if let Some(p) = &a.source_file {
                man.input("sources", p)?;
            }
            man.output("samples", out)?;
            man.write(&sidecar(out))?;
        }
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn evaluate_cmd(a: Evaluate) -> Result<()> {
    let (cfg, n, echoed) = sampler_config(&a.sampler, a.n_samples, schedule_len(&a.model.denoiser)?)?;
    let backend = similarity_backend(&a.similarity)?;
    let grouping = match a.distinct_grouping {
        GroupingArg::PerSource => DistinctGrouping::PerSource,
        GroupingArg::CorpusGlobal => DistinctGrouping::CorpusGlobal,
    };
    let records = load_corpus(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let (run, loaded) = load_run(&a.model, cfg.clone(), n)?;
    let dirs: Vec<&Path> = [Some(run.codec.as_path()), Some(run.denoiser.as_path()), run.controller.as_deref()].into_iter().flatten().collect();
    let before = dirs.iter().map(|d| directory_digest(d)).collect::<paradiff::Result<Vec<_>>>()?;
    let report = evaluate(&records, loaded.components(), &cfg, n, backend.as_ref(), grouping)?;
    let after = dirs.iter().map(|d| directory_digest(d)).collect::<paradiff::Result<Vec<_>>>()?;
    if before != after {
        bail!(paradiff::Error::Checkpoint("a checkpoint changed during evaluation".into()));
    }
    fs::create_dir_all(&a.out_dir)?;
    let json_path = a.out_dir.join("report.json");
    let csv_path = a.out_dir.join("samples.csv");
    report.write_json(&json_path)?;
    report.write_csv(&csv_path)?;
    let mut man = RunManifest::new("evaluate");
    man.config = echoed;
    man.config.insert("similarity".into(), a.similarity.clone());
    man.config.insert("distinct_grouping".into(), serde_json::to_value(grouping)?.as_str().unwrap_or_default().into());
    record_inputs(&mut man, &run)?;
    man.input("data", &a.data)?;
    man.extra.insert("checkpoints_unchanged".into(), json!(true));
    man.output("report", &json_path)?;
    man.output("samples", &csv_path)?;
    man.write(&a.out_dir.join("manifest.json"))?;
    println!(
        "bleu {:.2}  src_bleu {:.2}  similarity {:.2}  ibscore {:.2}  distinct-4 {:.2}",
        report.bleu, report.src_bleu, report.similarity, report.ibscore, report.distinct_4
    );
    Ok(())
}

fn trace_cmd(a: Trace) -> Result<()> {
    let pairs: Vec<(String, Option<String>)> = match (&a.text, &a.source_file) {
        (Some(t), _) => vec![(t.clone(), a.reference.clone())],
        (None, Some(p)) => load_corpus(p)?.into_iter().map(|r: ParaphraseRecord| (r.source, Some(r.target))).collect(),
        (None, None) => bail!(paradiff::Error::Invalid("need --text or --source-file".into())),
    };
    let (cfg, n, echoed) = sampler_config(&a.sampler, None, schedule_len(&a.model.denoiser)?)?;
    let (run, loaded) = load_run(&a.model, cfg.clone(), n)?;
    let trajs = trace_many(&pairs, loaded.components(), &cfg)?;
    let rows = summarize_traces(&trajs)?;
    fs::create_dir_all(&a.out_dir)?;
    let csv = a.out_dir.join("trace.csv");
    write_trace_csv(&csv, &rows)?;
    let snaps = a.out_dir.join("snapshots.jsonl");
    let mut text = String::new();
    for tr in &trajs {
        text.push_str(&serde_json::to_string(tr)?);
        text.push('\n');
    }
    fs::write(&snaps, text)?;
    let mut man = RunManifest::new("trace");
    man.config = echoed;
    record_inputs(&mut man, &run)?;
    if let Some(p) = &a.source_file {
        man.input("sources", p)?;
    }
    man.output("trace", &csv)?;
    man.output("snapshots", &snaps)?;
    man.write(&a.out_dir.join("manifest.json"))?;
    Ok(())
}
