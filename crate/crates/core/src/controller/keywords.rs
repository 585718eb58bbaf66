use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{TokenSeq, Vocab, BOS, EOS, MASK, PAD};
use crate::error::{Error, Result};

/// Share of content tokens that forms the candidate pool in sampled mode.
pub const SAMPLED_POOL_RATIO: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeywordMode {
    /// The `k` longest tokens, earliest first among equal lengths.
    Deterministic,
    /// `k` tokens drawn uniformly from the longest 30%.
    Sampled,
}

impl std::str::FromStr for KeywordMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(KeywordMode::Deterministic),
            "sampled" => Ok(KeywordMode::Sampled),
            other => Err(Error::Invalid(format!("unknown keyword mode {other:?}"))),
        }
    }
}

/// The input sequence with every content token outside `kept` replaced by `<M>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeywordSegment {
    pub masked: TokenSeq,
    /// Kept positions in ascending order.
    pub kept: Vec<usize>,
}

/// `max(1, ceil(ratio * n))`, tolerant of `0.15 * 20` landing a hair above 3.
pub fn keyword_count(ratio: f64, content_len: usize) -> usize {
    let x = ratio * content_len as f64;
    ((x - 1e-9).ceil() as usize).clamp(1, content_len.max(1))
}

pub fn extract_keyword_segment<R: Rng>(
    tokens: &TokenSeq,
    vocab: &Vocab,
    ratio: f64,
    mode: KeywordMode,
    rng: &mut R,
) -> Result<KeywordSegment> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Invalid(format!("keyword ratio {ratio} outside (0, 1]")));
    }
    let positions: Vec<usize> = tokens
        .ids
        .iter()
        .enumerate()
        .take(tokens.eos_position().unwrap_or(tokens.len()))
        .filter(|&(_, &id)| id != BOS && id != PAD)
        .map(|(i, _)| i)
        .collect();
    if positions.is_empty() {
        return Err(Error::Invalid("keyword extraction needs at least one content token".into()));
    }
    let k = keyword_count(ratio, positions.len());
    let mut ranked = positions.clone();
    // Stable sort keeps earlier positions first among equal lengths.
    ranked.sort_by_key(|&i| std::cmp::Reverse(vocab.word(tokens.ids[i]).chars().count()));
    let mut kept: Vec<usize> = match mode {
        KeywordMode::Deterministic => ranked[..k].to_vec(),
        KeywordMode::Sampled => {
            let pool = keyword_count(SAMPLED_POOL_RATIO, positions.len()).max(k);
            sample(rng, pool, k).into_iter().map(|j| ranked[j]).collect()
        }
    };
    kept.sort_unstable();
    let mut ids = tokens.ids.clone();
    for &i in &positions {
        if kept.binary_search(&i).is_err() && ids[i] != EOS {
            ids[i] = MASK;
        }
    }
    Ok(KeywordSegment { masked: TokenSeq { ids }, kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tokenize;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::from_texts(["how is black money gone what are some good ways to learn tennis quickly"])
    }

    #[test]
    fn longest_token_earliest_tie() {
        let v = vocab();
        let t = tokenize("how is black money gone", &v, 10).unwrap();
        let seg = extract_keyword_segment(&t, &v, 0.15, KeywordMode::Deterministic, &mut seeded(0)).unwrap();
        assert_eq!(seg.kept, vec![3]);
        let words: Vec<&str> = seg.masked.ids.iter().map(|&i| v.word(i)).collect();
        assert_eq!(words, ["<s>", "<M>", "<M>", "black", "<M>", "<M>", "</s>", "<pad>", "<pad>", "<pad>"]);
    }

    #[test]
    fn full_ratio_keeps_everything() {
        let v = vocab();
        let t = tokenize("what are some good ways to learn tennis quickly", &v, 16).unwrap();
        for mode in [KeywordMode::Deterministic, KeywordMode::Sampled] {
            let seg = extract_keyword_segment(&t, &v, 1.0, mode, &mut seeded(1)).unwrap();
            assert_eq!(seg.masked, t);
        }
    }

    #[test]
    fn count_law() {
        assert_eq!(keyword_count(0.15, 1), 1);
        assert_eq!(keyword_count(0.15, 6), 1);
        assert_eq!(keyword_count(0.15, 7), 2);
        assert_eq!(keyword_count(0.15, 20), 3);
        assert_eq!(keyword_count(0.15, 21), 4);
    }

    #[test]
    fn empty_content_is_an_error() {
        let v = vocab();
        let t = tokenize("", &v, 6).unwrap();
        assert!(extract_keyword_segment(&t, &v, 0.15, KeywordMode::Deterministic, &mut seeded(0)).is_err());
        let t = tokenize("how is", &v, 6).unwrap();
        assert!(extract_keyword_segment(&t, &v, 0.0, KeywordMode::Deterministic, &mut seeded(0)).is_err());
    }

    #[test]
    fn sampled_mode_stays_in_the_pool() {
        let v = vocab();
        let t = tokenize("what are some good ways to learn tennis quickly", &v, 16).unwrap();
        let mut seen = std::collections::BTreeSet::new();
        let mut r = seeded(2);
        for _ in 0..200 {
            let seg = extract_keyword_segment(&t, &v, 0.15, KeywordMode::Sampled, &mut r).unwrap();
            assert_eq!(seg.kept.len(), 2);
            seen.extend(seg.kept);
        }
        // Pool of ceil(0.3 * 9) = 3: "quickly", "tennis", "learn".
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![7, 8, 9]);
    }

    proptest! {
        #[test]
        fn segment_shape(n in 1usize..12, ratio in 0.01f64..1.0, seed in 0u64..50) {
            let v = vocab();
            let words: Vec<&str> = v.words()[5..].iter().cycle().take(n).map(String::as_str).collect();
            let t = tokenize(&words.join(" "), &v, 16).unwrap();
            for mode in [KeywordMode::Deterministic, KeywordMode::Sampled] {
                let seg = extract_keyword_segment(&t, &v, ratio, mode, &mut seeded(seed)).unwrap();
                prop_assert_eq!(seg.masked.len(), t.len());
                prop_assert_eq!(seg.kept.len(), keyword_count(ratio, n));
                prop_assert_eq!(seg.masked.ids[0], BOS);
                prop_assert_eq!(seg.masked.eos_position(), t.eos_position());
                for (i, (&a, &b)) in seg.masked.ids.iter().zip(&t.ids).enumerate() {
                    prop_assert!(a == b || (a == MASK && seg.kept.binary_search(&i).is_err()));
                }
            }
        }
    }
}
