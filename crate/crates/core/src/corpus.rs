//! Paraphrase corpora: JSONL I/O and the templated toy grammar.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParaphraseRecord {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

impl ParaphraseRecord {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        Self { source: source.into(), target: target.into(), domain: None }
    }
}

/// Reads one JSON object per line. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<ParaphraseRecord>> {
    let text = fs::read_to_string(path)?;
    parse_corpus(&text)
}

pub fn parse_corpus(text: &str) -> Result<Vec<ParaphraseRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| Error::Corpus { line: line_no, msg: e.to_string() })?;
        let field = |key: &str| -> Result<String> {
            match value.get(key) {
                Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
                Some(serde_json::Value::String(_)) => Err(Error::Corpus { line: line_no, msg: format!("empty \"{key}\"") }),
                Some(_) => Err(Error::Corpus { line: line_no, msg: format!("\"{key}\" is not a string") }),
                None => Err(Error::Corpus { line: line_no, msg: format!("missing \"{key}\"") }),
            }
        };
        let domain = value.get("domain").and_then(|d| d.as_str()).map(str::to_string);
        out.push(ParaphraseRecord { source: field("source")?, target: field("target")?, domain });
    }
    if out.is_empty() {
        return Err(Error::Invalid("corpus is empty".into()));
    }
    Ok(out)
}

pub fn save_corpus(path: &Path, records: &[ParaphraseRecord]) -> Result<()> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Template family of the toy grammar. Both families draw slot fillers from
/// the same word lists but never share a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    A,
    B,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::A => write!(f, "A"),
            Family::B => write!(f, "B"),
        }
    }
}

const TEMPLATES_A: [&str; 5] = [
    "how can i {} ?",
    "what is the best way to {} ?",
    "how do i {} ?",
    "what should i do to {} ?",
    "what are some good ways to {} ?",
];

const TEMPLATES_B: [&str; 5] = [
    "is it possible to {} ?",
    "can someone tell me how to {} ?",
    "i want to {} , where do i begin ?",
    "any tips on how to {} ?",
    "which steps help me {} ?",
];

const VERBS: [&str; 10] = [
    "learn",
    "practice",
    "study",
    "master",
    "teach",
    "improve my",
    "start learning",
    "get better at",
    "become good at",
    "understand",
];

const OBJECTS: [&str; 56] = [
    "tennis", "chess", "python", "guitar", "piano", "spanish", "french", "cooking", "photography", "painting",
    "swimming", "programming", "mathematics", "physics", "chemistry", "writing", "drawing", "singing", "dancing",
    "running", "yoga", "baking", "gardening", "knitting", "typing", "statistics", "economics", "history", "poetry",
    "calligraphy", "biology", "geometry", "algebra", "japanese", "german", "violin", "drums", "skiing", "surfing",
    "climbing", "archery", "fencing", "rowing", "sailing", "sculpture", "pottery", "astronomy", "philosophy",
    "accounting", "marketing", "korean", "italian", "cello", "flute", "boxing", "golf",
];

const MODIFIERS: [&str; 8] = [
    "quickly",
    "at home",
    "for free",
    "online",
    "in a month",
    "as a beginner",
    "without a teacher",
    "every day",
];

impl Family {
    pub fn templates(self) -> &'static [&'static str] {
        match self {
            Family::A => &TEMPLATES_A,
            Family::B => &TEMPLATES_B,
        }
    }
}

/// Number of distinct slot fillers (verb, object, optional modifier).
pub fn slot_count() -> usize {
    VERBS.len() * OBJECTS.len() * (MODIFIERS.len() + 1)
}

/// The slot filler with index `i` in `0..slot_count()`.
pub fn slot_filler(i: usize) -> String {
    let m = i % (MODIFIERS.len() + 1);
    let o = (i / (MODIFIERS.len() + 1)) % OBJECTS.len();
    let v = i / ((MODIFIERS.len() + 1) * OBJECTS.len());
    let mut s = format!("{} {}", VERBS[v], OBJECTS[o]);
    if m > 0 {
        s.push(' ');
        s.push_str(MODIFIERS[m - 1]);
    }
    s
}

/// Slot fillers reserved for held-out evaluation: every tenth index.
pub fn is_held_out_slot(i: usize) -> bool {
    i % 10 == 3
}

fn fill(template: &str, slot: &str) -> String {
    template.replace("{}", slot)
}

fn make_pair<R: Rng>(family: Family, slot: &str, rng: &mut R) -> ParaphraseRecord {
    let ts = family.templates();
    let s = rng.gen_range(0..ts.len());
    let mut t = rng.gen_range(0..ts.len() - 1);
    if t >= s {
        t += 1;
    }
    ParaphraseRecord { source: fill(ts[s], slot), target: fill(ts[t], slot), domain: Some(family.to_string()) }
}

fn pairs_from_pool(seed: u64, n: usize, family: Family, pool: &[usize]) -> Vec<ParaphraseRecord> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let slot = slot_filler(*pool.choose(&mut rng).expect("non-empty slot pool"));
            make_pair(family, &slot, &mut rng)
        })
        .collect()
}

/// `n` seeded pairs from `family` over all slot fillers.
pub fn make_toy_corpus(seed: u64, n: usize, family: Family) -> Vec<ParaphraseRecord> {
    let pool: Vec<usize> = (0..slot_count()).collect();
    pairs_from_pool(seed, n, family, &pool)
}

/// Train/test split whose test slot fillers never occur in training.
pub fn make_toy_split(seed: u64, family: Family, n_train: usize, n_test: usize) -> (Vec<ParaphraseRecord>, Vec<ParaphraseRecord>) {
    let (test_pool, train_pool): (Vec<usize>, Vec<usize>) = (0..slot_count()).partition(|&i| is_held_out_slot(i));
    let train = pairs_from_pool(seed, n_train, family, &train_pool);
    let test = pairs_from_pool(seed ^ 0x5eed_7e57, n_test, family, &test_pool);
    (train, test)
}

/// Every word the toy grammar can emit, in a stable order.
pub fn toy_vocabulary() -> Vec<String> {
    let mut words: Vec<String> = TEMPLATES_A
        .iter()
        .chain(&TEMPLATES_B)
        .chain(&VERBS)
        .chain(&OBJECTS)
        .chain(&MODIFIERS)
        .flat_map(|s| s.split_whitespace())
        .filter(|w| *w != "{}")
        .map(str::to_string)
        .collect();
    words.sort();
    words.dedup();
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn one_line_one_record() {
        let r = parse_corpus("{\"source\": \"a b\", \"target\": \"c d\"}\n").unwrap();
        assert_eq!(r, vec![ParaphraseRecord::new("a b", "c d")]);
    }

    #[test]
    fn missing_target_names_the_line() {
        let text = "{\"source\": \"a\", \"target\": \"b\"}\n\n{\"source\": \"x\"}\n";
        match parse_corpus(text) {
            Err(Error::Corpus { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("target"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_corpus("not json"), Err(Error::Corpus { line: 1, .. })));
        assert!(parse_corpus("\n\n").is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let recs = make_toy_corpus(4, 20, Family::B);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_corpus(&path, &recs).unwrap();
        assert_eq!(load_corpus(&path).unwrap(), recs);
    }

    #[test]
    fn toy_corpus_is_seeded() {
        assert_eq!(make_toy_corpus(1, 50, Family::A), make_toy_corpus(1, 50, Family::A));
        assert_ne!(make_toy_corpus(1, 50, Family::A), make_toy_corpus(2, 50, Family::A));
    }

    #[test]
    fn pairs_share_slot_words_and_differ_in_template() {
        let stop: HashSet<String> = Family::A
            .templates()
            .iter()
            .chain(Family::B.templates())
            .flat_map(|t| t.split_whitespace().map(str::to_string))
            .collect();
        for fam in [Family::A, Family::B] {
            for r in make_toy_corpus(9, 200, fam) {
                assert_ne!(r.source, r.target);
                let content = |s: &str| -> HashSet<String> {
                    s.split_whitespace().filter(|w| !stop.contains(*w)).map(str::to_string).collect()
                };
                assert_eq!(content(&r.source), content(&r.target), "{r:?}");
            }
        }
    }

    #[test]
    fn families_share_vocabulary_not_templates() {
        let a: HashSet<_> = Family::A.templates().iter().collect();
        assert!(Family::B.templates().iter().all(|t| !a.contains(t)));
        let vocab: HashSet<String> = toy_vocabulary().into_iter().collect();
        for fam in [Family::A, Family::B] {
            for r in make_toy_corpus(3, 300, fam) {
                assert!(r.source.split_whitespace().chain(r.target.split_whitespace()).all(|w| vocab.contains(w)));
            }
        }
        assert!((100..=130).contains(&vocab.len()), "vocabulary size {}", vocab.len());
    }

    #[test]
    fn split_holds_out_slot_fillers() {
        let (train, test) = make_toy_split(5, Family::A, 500, 100);
        let test_slots: HashSet<String> = test.iter().map(|r| r.source.clone()).collect();
        let train_src: HashSet<String> = train.iter().map(|r| r.source.clone()).collect();
        assert!(test_slots.is_disjoint(&train_src));
    }
}
