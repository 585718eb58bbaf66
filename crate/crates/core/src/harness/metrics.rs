//! Reference BLEU, source BLEU, distinct-n and a pluggable similarity score.
//!
//! BLEU is corpus-level over whitespace tokens, up to 4-grams, with the usual
//! brevity penalty. Unigram precision is unsmoothed; 2- to 4-gram precisions
//! use add-one smoothing so short toy sentences do not collapse to zero.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLEU_ORDER: usize = 4;

fn tokens(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn ngram_counts<'a, 'b>(toks: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate totals per order, plus both lengths.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; BLEU_ORDER],
    pub totals: [usize; BLEU_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of_pair(hyp: &str, reference: &str) -> Self {
        let h = tokens(hyp);
        let r = tokens(reference);
        let mut s = Self { hyp_len: h.len(), ref_len: r.len(), ..Default::default() };
        for n in 1..=BLEU_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &Self) {
        for i in 0..BLEU_ORDER {
            self.matches[i] += o.matches[i];
            self.totals[i] += o.totals[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches[0] == 0 {
            return 0.0;
        }
        let mut log_p = (self.matches[0] as f64 / self.totals[0] as f64).ln();
        for i in 1..BLEU_ORDER {
            log_p += ((self.matches[i] + 1) as f64 / (self.totals[i] + 1) as f64).ln();
        }
        let bp = if self.hyp_len < self.ref_len { 1.0 - self.ref_len as f64 / self.hyp_len as f64 } else { 0.0 };
        100.0 * (bp + log_p / BLEU_ORDER as f64).exp()
    }
}

fn check_lists(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Invalid("no hypotheses to score".into()));
    }
    if a != b {
        return Err(Error::Invalid(format!("{a} hypotheses but {b} references")));
    }
    Ok(())
}

/// Corpus BLEU in [0, 100], one reference per hypothesis.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_lists(hypotheses.len(), references.len())?;
    let mut total = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&BleuStats::of_pair(h.as_ref(), r.as_ref()));
    }
    Ok(total.score())
}

/// BLEU against the inputs; high values mean the output copies its source.
pub fn src_bleu<H: AsRef<str>, S: AsRef<str>>(hypotheses: &[H], sources: &[S]) -> Result<f64> {
    bleu(hypotheses, sources)
}

pub fn sentence_bleu(hyp: &str, reference: &str) -> f64 {
    BleuStats::of_pair(hyp, reference).score()
}

/// Unique and total n-grams pooled over `sentences`; shorter sentences contribute nothing.
fn distinct_counts<S: AsRef<str>>(sentences: &[S], n: usize) -> (usize, usize) {
    let mut seen = HashMap::new();
    let mut total = 0;
    for s in sentences {
        let t = tokens(s.as_ref());
        if t.len() < n {
            log::warn!("sentence shorter than {n} tokens skipped in distinct-{n}: {:?}", s.as_ref());
            continue;
        }
        for w in t.windows(n) {
            total += 1;
            *seen.entry(w.join(" ")).or_insert(0usize) += 1;
        }
    }
    (seen.len(), total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistinctGrouping {
    /// One group per source, scores averaged over groups.
    PerSource,
    /// Every sample pooled into a single group.
    CorpusGlobal,
}

/// Percentage of unique n-grams within each group, averaged over groups.
pub fn distinct_n<S: AsRef<str>>(groups: &[Vec<S>], n: usize) -> f64 {
    let scores: Vec<f64> = groups
        .iter()
        .filter_map(|g| {
            let (u, t) = distinct_counts(g, n);
            (t > 0).then(|| 100.0 * u as f64 / t as f64)
        })
        .collect();
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn distinct_n_grouped<S: AsRef<str>>(groups: &[Vec<S>], n: usize, grouping: DistinctGrouping) -> f64 {
    match grouping {
        DistinctGrouping::PerSource => distinct_n(groups, n),
        DistinctGrouping::CorpusGlobal => {
            let all: Vec<&str> = groups.iter().flatten().map(|s| s.as_ref()).collect();
            distinct_n(&[all], n)
        }
    }
}

/// Sentence-level similarity in [0, 1]. Implement this to plug in an embedding model.
pub trait SimilarityBackend: Sync {
    fn id(&self) -> &str;
    fn similarity(&self, hyp: &str, reference: &str) -> f64;
}

/// Bag-of-tokens F1 between hypothesis and reference.
#[derive(Clone, Copy, Debug, Default)]
pub struct TokenF1;

impl SimilarityBackend for TokenF1 {
    fn id(&self) -> &str {
        "token-f1"
    }

    fn similarity(&self, hyp: &str, reference: &str) -> f64 {
        let h = tokens(hyp);
        let r = tokens(reference);
        if h.is_empty() || r.is_empty() {
            return if h.is_empty() && r.is_empty() { 1.0 } else { 0.0 };
        }
        let mut rc: HashMap<&str, usize> = HashMap::new();
        for w in &r {
            *rc.entry(w).or_insert(0) += 1;
        }
        let mut overlap = 0;
        for w in &h {
            if let Some(c) = rc.get_mut(w) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let p = overlap as f64 / h.len() as f64;
        let rec = overlap as f64 / r.len() as f64;
        2.0 * p * rec / (p + rec)
    }
}

pub fn similarity_backend(name: &str) -> Result<Box<dyn SimilarityBackend>> {
    match name {
        "token-f1" => Ok(Box::new(TokenF1)),
        other => Err(Error::Invalid(format!("unknown similarity backend {other:?}"))),
    }
}

/// Mean sentence similarity scaled to [0, 100].
pub fn semantic_similarity<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
    backend: &dyn SimilarityBackend,
) -> Result<f64> {
    check_lists(hypotheses.len(), references.len())?;
    let total: f64 = hypotheses.iter().zip(references).map(|(h, r)| backend.similarity(h.as_ref(), r.as_ref())).sum();
    Ok(100.0 * total / hypotheses.len() as f64)
}

pub fn ibscore(similarity: f64, src_bleu: f64) -> f64 {
    similarity - src_bleu
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identical_corpus_scores_100() {
        let s = ["a b c d e", "x y z w v u"];
        assert!((bleu(&s, &s).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(bleu(&["a b c d"], &["e f g h"]).unwrap(), 0.0);
    }

    #[test]
    fn short_hypothesis_pays_brevity() {
        let want = 100.0 * (-1.0f64 / 3.0).exp();
        assert!((sentence_bleu("the cat sat", "the cat sat down") - want).abs() < 1e-9);
    }

    #[test]
    fn clipping_limits_repeats() {
        let s = BleuStats::of_pair("the the the the", "the cat");
        assert_eq!(s.matches[0], 1);
        assert_eq!(s.totals[0], 4);
    }

    #[test]
    fn bad_lists_are_rejected() {
        assert!(bleu::<&str, &str>(&[], &[]).is_err());
        assert!(bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn distinct_of_identical_samples() {
        let g = vec![vec!["a b c d e f g h"; 5]];
        assert!((distinct_n(&g, 4) - 20.0).abs() < 1e-12);
        assert_eq!(distinct_n(&[vec!["a b c d e"]], 4), 100.0);
        assert_eq!(distinct_n(&[vec!["a b"]], 4), 0.0);
    }

    #[test]
    fn global_grouping_pools_samples() {
        let g = vec![vec!["a b c d"], vec!["a b c d"]];
        assert_eq!(distinct_n_grouped(&g, 4, DistinctGrouping::PerSource), 100.0);
        assert_eq!(distinct_n_grouped(&g, 4, DistinctGrouping::CorpusGlobal), 50.0);
    }

    #[test]
    fn token_f1_limits() {
        assert_eq!(semantic_similarity(&["a b c"], &["c b a"], &TokenF1).unwrap(), 100.0);
        assert_eq!(semantic_similarity(&["a b c"], &["d e"], &TokenF1).unwrap(), 0.0);
        assert!(similarity_backend("bertscore").is_err());
    }

    proptest! {
        #[test]
        fn metric_ranges(h in proptest::collection::vec("[a-d]( [a-d]){0,7}", 1..5), seed in 0usize..4) {
            let r: Vec<String> = h.iter().map(|s| s.chars().rev().collect()).collect();
            let b = bleu(&h, &r).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&b));
            let s = semantic_similarity(&h, &r, &TokenF1).unwrap();
            prop_assert!((0.0..=100.0 + 1e-9).contains(&s));
            let groups: Vec<Vec<String>> = h.chunks(seed + 1).map(|c| c.to_vec()).collect();
            let d = distinct_n(&groups, 2);
            prop_assert!((0.0..=100.0).contains(&d));
        }
    }
}
