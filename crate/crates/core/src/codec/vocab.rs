use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;

pub const SPECIALS: [&str; 5] = ["<pad>", "<s>", "</s>", "<unk>", "<M>"];

/// Closed whitespace vocabulary. Ids `0..5` are the special tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = all.iter().cloned().collect();
        for w in words {
            if seen.insert(w.clone()) {
                all.push(w);
            }
        }
        Self::from_words(all)
    }

    /// Sorted vocabulary of every whitespace token in `texts`.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(|t| t.split_whitespace().map(str::to_string)).collect();
        Self::new(set)
    }

    fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_words(self.words)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= SPECIALS.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        self.words.get(id).map(String::as_str).unwrap_or(SPECIALS[UNK])
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Fixed-length token ids: `BOS content.. EOS PAD..`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Position of the first EOS.
    pub fn eos_position(&self) -> Option<usize> {
        self.ids.iter().position(|&t| t == EOS)
    }

    /// Content tokens between BOS and the first EOS.
    pub fn content(&self) -> &[usize] {
        let end = self.eos_position().unwrap_or(self.ids.len());
        let start = usize::from(self.ids.first() == Some(&BOS)).min(end);
        &self.ids[start..end]
    }

    pub fn content_len(&self) -> usize {
        self.content().len()
    }

    /// `true` for every position up to and including the first EOS.
    pub fn non_pad_mask(&self) -> Vec<bool> {
        let end = self.eos_position().map(|p| p + 1).unwrap_or(self.ids.len());
        (0..self.ids.len()).map(|i| i < end).collect()
    }

    /// Exactly one EOS, nothing but PAD after it.
    pub fn is_well_formed(&self) -> bool {
        match self.eos_position() {
            Some(p) => self.ids[p + 1..].iter().all(|&t| t == PAD),
            None => false,
        }
    }

    /// Cuts the stream at its first EOS and pads the tail. A stream without EOS
    /// gets one in its final slot.
    pub fn truncated(mut ids: Vec<usize>) -> Self {
        match ids.iter().position(|&t| t == EOS) {
            Some(p) => ids[p + 1..].iter_mut().for_each(|t| *t = PAD),
            None => {
                if let Some(last) = ids.last_mut() {
                    *last = EOS;
                }
            }
        }
        Self { ids }
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq> {
    if vocab.is_empty() {
        return Err(Error::Invalid("empty vocabulary".into()));
    }
    if max_len < 2 {
        return Err(Error::Invalid(format!("max length {max_len} leaves no room for BOS/EOS")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(text.split_whitespace().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    ids.resize(max_len, PAD);
    Ok(TokenSeq { ids })
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> String {
    let mut out = Vec::new();
    for &t in &seq.ids {
        match t {
            EOS => break,
            BOS | PAD => {}
            _ => out.push(vocab.word(t)),
        }
    }
    out.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab() -> Vocab {
        Vocab::from_texts(["how can i learn", "what is the best way"])
    }

    #[test]
    fn tokenize_pads_to_length() {
        let v = vocab();
        let s = tokenize("how can i", &v, 6).unwrap();
        assert_eq!(s.ids, vec![BOS, v.id("how"), v.id("can"), v.id("i"), EOS, PAD]);
        assert!(s.is_well_formed());
        assert_eq!(s.content_len(), 3);
        assert_eq!(s.non_pad_mask(), vec![true, true, true, true, true, false]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = vocab();
        let s = tokenize("how zebra", &v, 6).unwrap();
        assert_eq!(s.ids[2], UNK);
        assert_eq!(detokenize(&s, &v), "how <unk>");
    }

    #[test]
    fn empty_vocab_rejected() {
        let v = Vocab::new(Vec::<String>::new());
        assert!(tokenize("x", &v, 6).is_err());
    }

    #[test]
    fn truncation_stops_at_first_eos() {
        let s = TokenSeq::truncated(vec![BOS, 7, 8, EOS, 9, 10]);
        assert_eq!(s.ids, vec![BOS, 7, 8, EOS, PAD, PAD]);
        let s = TokenSeq::truncated(vec![BOS, 7, 8]);
        assert_eq!(s.ids, vec![BOS, 7, EOS]);
        assert!(s.is_well_formed());
    }

    #[test]
    fn vocab_survives_serde() {
        let v = vocab();
        let back: Vocab = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        let back = back.reindexed();
        assert_eq!(back.id("best"), v.id("best"));
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(idx in proptest::collection::vec(0usize..9, 1..8)) {
            let v = vocab();
            let words: Vec<&str> = idx.iter().map(|&i| v.word(i + SPECIALS.len())).collect();
            let text = words.join(" ");
            let seq = tokenize(&text, &v, 10).unwrap();
            prop_assert_eq!(detokenize(&seq, &v), text);
        }
    }
}
