//! Runs (or resumes from cache) the toy experiment.
//!
//! `cargo run --release --example toy_pipeline -- <root> [overrides.conf]`
//!
//! Overrides use `section.key=value` with sections `codec`, `denoiser`,
//! `guidance`, `domain` and top-level keys of the toy config.

use std::path::PathBuf;

use paradiff::harness::kv::KvConfig;
use paradiff::harness::toy::{run_toy, ToyConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let root = PathBuf::from(args.next().ok_or("usage: toy_pipeline <root> [overrides]")?);
    let mut cfg = ToyConfig::default();
    if let Some(path) = args.next() {
        let mut kv = KvConfig::load(path.as_ref())?;
        fn sub<T: serde::Serialize + serde::de::DeserializeOwned>(kv: &mut KvConfig, name: &str, base: &T) -> paradiff::Result<T> {
            let mut s = kv.section(name);
            let v = s.apply(base)?;
            s.finish()?;
            Ok(v)
        }
        cfg.codec = sub(&mut kv, "codec", &cfg.codec)?;
        cfg.denoiser = sub(&mut kv, "denoiser", &cfg.denoiser)?;
        cfg.guidance = sub(&mut kv, "guidance", &cfg.guidance)?;
        cfg.domain = sub(&mut kv, "domain", &cfg.domain)?;
        cfg = kv.apply(&cfg)?;
        kv.finish()?;
    }
    let run = run_toy(&root, &cfg)?;
    for s in &run.stages {
        println!("{:<10} {:>10.1}s {}", s.name, s.seconds, if s.cached { "(cached)" } else { "" });
    }
    println!("codec extra: {:?}", run.codec.manifest.extra);
    Ok(())
}
