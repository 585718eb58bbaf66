use serde::Serialize;

use super::{sample, sample_from, SamplerConfig};
use crate::codec::{CodecModel, LatentSeq, NormStats, TokenSeq};
use crate::controller::{extract_keyword_segment, KeywordMode};
use crate::denoiser::{Cond, Denoise};
use crate::error::{Error, Result};
use crate::harness::metrics::sentence_bleu;
use crate::rng::{randn, seeded, substream};
use crate::schedule::NoiseSchedule;
use crate::tensor::Mat;

/// Everything generation reads. All of it is shared read-only.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub codec: &'a CodecModel,
    pub norm: &'a NormStats,
    pub schedule: &'a NoiseSchedule,
    pub model: &'a dyn Denoise,
}

struct Encoded {
    source: Mat,
    keywords: Option<Mat>,
}

impl Components<'_> {
    fn check(&self) -> Result<()> {
        let want = (self.codec.max_len(), self.codec.width());
        if self.model.latent_shape() != want || self.norm.width() != want.1 {
            return Err(Error::Manifest(format!(
                "denoiser grid {:?} and normalisation width {} do not match codec grid {want:?}",
                self.model.latent_shape(),
                self.norm.width()
            )));
        }
        Ok(())
    }

    fn latent(&self, tokens: &TokenSeq) -> Result<Mat> {
        Ok(self.norm.normalize(&self.codec.encode(tokens)?)?.values)
    }

    fn encode_source(&self, text: &str) -> Result<Encoded> {
        let tokens = self.codec.tokenize(text)?;
        let source = self.latent(&tokens)?;
        let keywords = match self.model.keyword_ratio() {
            Some(r) => {
                let seg = extract_keyword_segment(&tokens, self.codec.vocab(), r, KeywordMode::Deterministic, &mut seeded(0))?;
                Some(self.latent(&seg.masked)?)
            }
            None => None,
        };
        Ok(Encoded { source, keywords })
    }

    fn decode(&self, z: &Mat) -> Result<TokenSeq> {
        self.codec.decode(&self.norm.denormalize(&LatentSeq::new(z.clone()))?)
    }
}

fn cond(e: &Encoded) -> Cond<'_> {
    let c = Cond::source(&e.source);
    match &e.keywords {
        Some(k) => c.with_keywords(k),
        None => c,
    }
}

/// Seed for source `j` of a batch; source 0 uses the configured seed itself.
fn source_seed(seed: u64, j: usize) -> u64 {
    seed ^ (j as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `n_samples` paraphrases of `source`, sample `i` drawn from substream `(seed, i)`.
pub fn generate(source: &str, comps: Components<'_>, config: &SamplerConfig, n_samples: usize) -> Result<Vec<String>> {
    Ok(generate_many(&[source], comps, config, n_samples)?.remove(0))
}

/// [`generate`] over many sources; source `j` uses its own derived seed.
pub fn generate_many<S: AsRef<str> + Sync>(
    sources: &[S],
    comps: Components<'_>,
    config: &SamplerConfig,
    n_samples: usize,
) -> Result<Vec<Vec<String>>> {
    if n_samples == 0 {
        return Err(Error::Invalid("n_samples must be at least 1".into()));
    }
    comps.check()?;
    config.validate(comps.schedule)?;
    let encoded = crate::parallel::map(sources, |s| comps.encode_source(s.as_ref()))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..sources.len()).flat_map(|j| (0..n_samples).map(move |i| (j, i))).collect();
    let texts = crate::parallel::map(&jobs, |&(j, i)| -> Result<String> {
        let mut rng = substream(source_seed(config.seed, j), i as u64);
        let z = sample(comps.model, cond(&encoded[j]), comps.schedule, config, &mut rng)
            .map_err(|e| annotate(e, j))?;
        Ok(comps.codec.detokenize(&comps.decode(&z)?))
    });
    let mut out = vec![Vec::with_capacity(n_samples); sources.len()];
    for ((j, _), t) in jobs.iter().zip(texts) {
        out[*j].push(t?);
    }
    Ok(out)
}

fn annotate(e: Error, j: usize) -> Error {
    match e {
        Error::Numerical(m) => Error::Numerical(format!("source {j}: {m}")),
        other => other,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TracePoint {
    /// Solver step, counting model evaluations from 0.
    pub step: usize,
    pub t: usize,
    #[serde(skip)]
    pub z0_hat: Mat,
    #[serde(skip)]
    pub tokens: TokenSeq,
    pub text: String,
    /// Content tokens in the force-decoded sequence.
    pub length: usize,
    pub bleu: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Trajectory {
    pub source: String,
    pub reference: Option<String>,
    pub points: Vec<TracePoint>,
}

impl Trajectory {
    pub fn final_text(&self) -> Option<&str> {
        self.points.last().map(|p| p.text.as_str())
    }
}

/// Force-decodes every intermediate clean-latent prediction of sample 0.
pub fn trace(source: &str, reference: Option<&str>, comps: Components<'_>, config: &SamplerConfig) -> Result<Trajectory> {
    comps.check()?;
    trace_seeded(source, reference, comps, config, config.seed)
}

/// [`trace`] over many `(source, reference)` pairs, source `j` seeded as in [`generate_many`].
pub fn trace_many<S: AsRef<str> + Sync, R: AsRef<str> + Sync>(
    pairs: &[(S, Option<R>)],
    comps: Components<'_>,
    config: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    comps.check()?;
    config.validate(comps.schedule)?;
    let idx: Vec<usize> = (0..pairs.len()).collect();
    crate::parallel::map(&idx, |&j| {
        let (s, r) = &pairs[j];
        trace_seeded(s.as_ref(), r.as_ref().map(|r| r.as_ref()), comps, config, source_seed(config.seed, j))
            .map_err(|e| annotate(e, j))
    })
    .into_iter()
    .collect()
}

fn trace_seeded(
    source: &str,
    reference: Option<&str>,
    comps: Components<'_>,
    config: &SamplerConfig,
    seed: u64,
) -> Result<Trajectory> {
    let enc = comps.encode_source(source)?;
    let mut rng = substream(seed, 0);
    let (l, d) = comps.model.latent_shape();
    let z_t = randn(&mut rng, l, d);
    let mut seen: Vec<(usize, Mat)> = Vec::new();
    let mut obs = |t: usize, x: &Mat| seen.push((t, x.clone()));
    sample_from(comps.model, cond(&enc), comps.schedule, config, z_t, &mut rng, Some(&mut obs))?;
    let points = seen
        .into_iter()
        .enumerate()
        .map(|(step, (t, z0_hat))| -> Result<TracePoint> {
            let tokens = comps.decode(&z0_hat)?;
            let text = comps.codec.detokenize(&tokens);
            let bleu = reference.map(|r| sentence_bleu(&text, r));
            Ok(TracePoint { step, t, z0_hat, length: tokens.content_len(), tokens, text, bleu })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { source: source.to_string(), reference: reference.map(str::to_string), points })
}
