//! Generation-based evaluation and its JSON/CSV report.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{
    bleu, distinct_n_grouped, ibscore, semantic_similarity, sentence_bleu, src_bleu, DistinctGrouping, SimilarityBackend,
};
use crate::corpus::ParaphraseRecord;
use crate::error::{Error, Result};
use crate::sampler::{generate_many, Components, SamplerConfig, Trajectory};

/// One generated sample with sentence-level scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub source_index: usize,
    pub sample_index: usize,
    pub source: String,
    pub reference: String,
    pub hypothesis: String,
    pub bleu: f64,
    pub src_bleu: f64,
    pub similarity: f64,
    pub ibscore: f64,
}

/// Corpus scores for one sample index (the k-th sample of every source).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSetScores {
    pub sample_index: usize,
    pub bleu: f64,
    pub src_bleu: f64,
    pub similarity: f64,
    pub ibscore: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Means over sample indices of the corpus scores.
    pub bleu: f64,
    pub src_bleu: f64,
    pub similarity: f64,
    pub similarity_backend: String,
    pub ibscore: f64,
    pub distinct_4: f64,
    pub distinct_grouping: DistinctGrouping,
    pub n_sources: usize,
    pub n_samples: usize,
    pub per_sample_set: Vec<SampleSetScores>,
    pub rows: Vec<SampleRow>,
    pub config: serde_json::Value,
}

impl MetricsReport {
    /// Scores already generated samples; `groups[j]` holds the samples of source `j`.
    pub fn from_samples(
        records: &[ParaphraseRecord],
        groups: &[Vec<String>],
        backend: &dyn SimilarityBackend,
        grouping: DistinctGrouping,
        config: serde_json::Value,
    ) -> Result<Self> {
        if records.is_empty() || records.len() != groups.len() {
            return Err(Error::Invalid(format!("{} records but {} sample groups", records.len(), groups.len())));
        }
        let n = groups[0].len();
        if n == 0 || groups.iter().any(|g| g.len() != n) {
            return Err(Error::Invalid("every source needs the same non-zero number of samples".into()));
        }
        let refs: Vec<&str> = records.iter().map(|r| r.target.as_str()).collect();
        let srcs: Vec<&str> = records.iter().map(|r| r.source.as_str()).collect();
        let mut per_sample_set = Vec::with_capacity(n);
        for k in 0..n {
            let hyps: Vec<&str> = groups.iter().map(|g| g[k].as_str()).collect();
            let b = bleu(&hyps, &refs)?;
            let sb = src_bleu(&hyps, &srcs)?;
            let sim = semantic_similarity(&hyps, &refs, backend)?;
            per_sample_set.push(SampleSetScores { sample_index: k, bleu: b, src_bleu: sb, similarity: sim, ibscore: ibscore(sim, sb) });
        }
        let mean = |f: fn(&SampleSetScores) -> f64| per_sample_set.iter().map(f).sum::<f64>() / n as f64;
        let similarity = mean(|s| s.similarity);
        let src = mean(|s| s.src_bleu);
        let mut rows = Vec::with_capacity(records.len() * n);
        for (j, (r, g)) in records.iter().zip(groups).enumerate() {
            for (k, h) in g.iter().enumerate() {
                let sim = 100.0 * backend.similarity(h, &r.target);
                let sb = sentence_bleu(h, &r.source);
                rows.push(SampleRow {
                    source_index: j,
                    sample_index: k,
                    source: r.source.clone(),
                    reference: r.target.clone(),
                    hypothesis: h.clone(),
                    bleu: sentence_bleu(h, &r.target),
                    src_bleu: sb,
                    similarity: sim,
                    ibscore: ibscore(sim, sb),
                });
            }
        }
        Ok(Self {
            bleu: mean(|s| s.bleu),
            src_bleu: src,
            similarity,
            similarity_backend: backend.id().to_string(),
            ibscore: ibscore(similarity, src),
            distinct_4: distinct_n_grouped(groups, 4, grouping),
            distinct_grouping: grouping,
            n_sources: records.len(),
            n_samples: n,
            per_sample_set,
            rows,
            config,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Per-sample table: one line per generated sample.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("source_index,sample_index,source,reference,hypothesis,bleu,src_bleu,similarity,ibscore\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.source_index,
                r.sample_index,
                csv_field(&r.source),
                csv_field(&r.reference),
                csv_field(&r.hypothesis),
                r.bleu,
                r.src_bleu,
                r.similarity,
                r.ibscore
            );
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Generates `n_samples` per source with `comps` and scores them against the references.
pub fn evaluate(
    records: &[ParaphraseRecord],
    comps: Components<'_>,
    sampler: &SamplerConfig,
    n_samples: usize,
    backend: &dyn SimilarityBackend,
    grouping: DistinctGrouping,
) -> Result<MetricsReport> {
    let sources: Vec<&str> = records.iter().map(|r| r.source.as_str()).collect();
    let groups = generate_many(&sources, comps, sampler, n_samples)?;
    let config = serde_json::json!({ "sampler": sampler, "n_samples": n_samples });
    MetricsReport::from_samples(records, &groups, backend, grouping, config)
}

/// Corpus-level view of one solver step across many trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub t: usize,
    /// Corpus BLEU of the force-decoded predictions against the references.
    pub bleu: f64,
    /// Mean content length of the force-decoded predictions.
    pub length: f64,
}

/// Per-step corpus BLEU and mean length. All trajectories must share the
/// step grid and carry a reference.
pub fn summarize_traces(trajs: &[Trajectory]) -> Result<Vec<TraceRow>> {
    let first = trajs.first().ok_or_else(|| Error::Invalid("no trajectories".into()))?;
    let refs: Vec<&str> = trajs
        .iter()
        .map(|tr| tr.reference.as_deref().ok_or_else(|| Error::Invalid(format!("no reference for \"{}\"", tr.source))))
        .collect::<Result<_>>()?;
    let grid: Vec<usize> = first.points.iter().map(|p| p.t).collect();
    if trajs.iter().any(|tr| tr.points.iter().map(|p| p.t).ne(grid.iter().copied())) {
        return Err(Error::Invalid("trajectories use different step grids".into()));
    }
    grid.iter()
        .enumerate()
        .map(|(step, &t)| {
            let hyps: Vec<&str> = trajs.iter().map(|tr| tr.points[step].text.as_str()).collect();
            let length = trajs.iter().map(|tr| tr.points[step].length as f64).sum::<f64>() / trajs.len() as f64;
            Ok(TraceRow { step, t, bleu: bleu(&hyps, &refs)?, length })
        })
        .collect()
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut s = String::from("step,t,bleu,length\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.t, r.bleu, r.length);
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::TokenF1;

    #[test]
    fn identity_holds_on_every_row() {
        let recs = vec![ParaphraseRecord::new("how can i learn chess ?", "how do i learn chess ?"); 2];
        let groups = vec![
            vec!["how do i learn chess ?".to_string(), "how can i learn chess ?".to_string()],
            vec!["what is chess".to_string(), "how do i learn chess ?".to_string()],
        ];
        let r = MetricsReport::from_samples(&recs, &groups, &TokenF1, DistinctGrouping::PerSource, serde_json::Value::Null).unwrap();
        assert_eq!(r.ibscore, r.similarity - r.src_bleu);
        for row in &r.rows {
            assert_eq!(row.ibscore, row.similarity - row.src_bleu);
        }
        for s in &r.per_sample_set {
            assert_eq!(s.ibscore, s.similarity - s.src_bleu);
        }
        assert_eq!(r.rows.len(), 4);
        assert!((0.0..=100.0).contains(&r.distinct_4));
    }

    #[test]
    fn ragged_groups_are_rejected() {
        let recs = vec![ParaphraseRecord::new("a", "b"); 2];
        let groups = vec![vec!["a".to_string()], vec![]];
        assert!(MetricsReport::from_samples(&recs, &groups, &TokenF1, DistinctGrouping::PerSource, serde_json::Value::Null).is_err());
    }

    #[test]
    fn csv_quotes_commas() {
        assert_eq!(csv_field("i want to , where"), "\"i want to , where\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    fn traj(reference: &str, texts: &[(usize, &str)]) -> Trajectory {
        let points = texts
            .iter()
            .enumerate()
            .map(|(step, &(t, text))| crate::sampler::TracePoint {
                step,
                t,
                z0_hat: crate::tensor::Mat::zeros((1, 1)),
                tokens: crate::codec::TokenSeq { ids: vec![] },
                text: text.to_string(),
                length: text.split_whitespace().count(),
                bleu: None,
            })
            .collect();
        Trajectory { source: "s".into(), reference: Some(reference.into()), points }
    }

    #[test]
    fn trace_summary_scores_each_step() {
        let a = traj("how do i learn chess ?", &[(9, "what what"), (1, "how do i learn chess ?")]);
        let b = traj("how can i swim ?", &[(9, "i"), (1, "how can i swim ?")]);
        let rows = summarize_traces(&[a.clone(), b]).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].t, rows[1].t), (9, 1));
        assert_eq!(rows[1].bleu, 100.0);
        assert_eq!(rows[0].length, 1.5);
        let c = traj("x", &[(8, "x"), (1, "x")]);
        assert!(summarize_traces(&[a, c]).is_err());
    }
}
