//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace; the characters `. , ; : ( ) /
//! ? !` become tokens of their own, except a `.` between two digits, which
//! stays inside the number (`0.12`).

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

fn is_split_char(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '(' | ')' | '/' | '?' | '!')
}

/// Splits text into normalized word tokens.
pub fn words(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let chars: Vec<char> = lower.chars().collect();
    let mut out = Vec::new();
    let mut cur = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if is_split_char(c) {
            let decimal_point = c == '.'
                && i > 0
                && chars[i - 1].is_ascii_digit()
                && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
            if decimal_point {
                cur.push(c);
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// The normalized form of `text`: its tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VocabEntry {
    pub token: String,
    pub id: u32,
    pub frequency: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    frequencies: Vec<usize>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<VocabEntry>,
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, frequencies: Vec<usize>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            frequencies,
            index,
        }
    }

    /// Keeps tokens seen at least `min_freq` times, ordered by descending
    /// frequency and then lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for w in words(doc.as_ref()) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut frequencies = vec![0; SPECIALS.len()];
        for (t, c) in kept {
            tokens.push(t);
            frequencies.push(c);
        }
        Ok(Self::from_parts(tokens, frequencies))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn frequency(&self, id: u32) -> Option<usize> {
        self.frequencies.get(id as usize).copied()
    }

    pub fn entries(&self) -> Vec<VocabEntry> {
        self.tokens
            .iter()
            .zip(&self.frequencies)
            .enumerate()
            .map(|(i, (t, &f))| VocabEntry {
                token: t.clone(),
                id: i as u32,
                frequency: f,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&VocabFile {
            tokens: self.entries(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(json)?;
        let mut entries = file.tokens;
        entries.sort_by_key(|e| e.id);
        for (i, e) in entries.iter().enumerate() {
            if e.id as usize != i {
                return Err(Error::InvalidConfig(format!(
                    "vocab ids are not contiguous at {i}"
                )));
            }
            if i < SPECIALS.len() && e.token != SPECIALS[i] {
                return Err(Error::InvalidConfig(format!(
                    "vocab id {i} must be {}",
                    SPECIALS[i]
                )));
            }
        }
        let (tokens, frequencies) = entries.into_iter().map(|e| (e.token, e.frequency)).unzip();
        Ok(Self::from_parts(tokens, frequencies))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::signal_io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}

/// `BOS, ids..., EOS` with no padding inside.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSeq {
    let mut ids = vec![BOS];
    ids.extend(words(text).iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSeq { ids }
}

pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> Result<String> {
    let mut out = Vec::with_capacity(seq.ids.len());
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or(Error::UnknownId(id))?;
        if (id as usize) >= SPECIALS.len() {
            out.push(tok);
        }
    }
    Ok(out.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splitting_rules() {
        assert_eq!(
            words("QT/QTc interval: 380/416 ms; P wave peak: 0.12 mV."),
            vec![
                "qt", "/", "qtc", "interval", ":", "380", "/", "416", "ms", ";", "p", "wave",
                "peak", ":", "0.12", "mv", "."
            ]
        );
        assert_eq!(words("  Sinus   rhythm.  "), vec!["sinus", "rhythm", "."]);
    }

    #[test]
    fn min_freq_filter() {
        let v = Vocab::build(&["a b", "a c"], 2).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.id("b"), None);
    }

    #[test]
    fn empty_corpus() {
        assert!(matches!(
            Vocab::build::<&str>(&[], 1),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn deterministic_build() {
        let corpus = [
            "sinus rhythm.",
            "left bundle branch block.",
            "sinus bradycardia.",
        ];
        assert_eq!(
            Vocab::build(&corpus, 1).unwrap(),
            Vocab::build(&corpus, 1).unwrap()
        );
    }

    #[test]
    fn ids_match_counting_oracle() {
        let corpus = ["b a a", "c b a", "d c b; a"];
        // Counted by hand: a=4, b=3, c=2, d=1, ;=1
        let expect = ["a", "b", "c", ";", "d"];
        let v = Vocab::build(&corpus, 1).unwrap();
        for (i, t) in expect.iter().enumerate() {
            assert_eq!(v.id(t), Some(4 + i as u32), "{t}");
        }
        assert_eq!(v.frequency(4), Some(4));
    }

    #[test]
    fn tokenize_cases() {
        let v = Vocab::build(&["sinus rhythm ."], 1).unwrap();
        assert_eq!(tokenize("", &v).ids, vec![BOS, EOS]);
        assert!(tokenize("atrial fibrillation", &v).ids.contains(&UNK));
        let s = "Sinus  Rhythm.";
        assert_eq!(detokenize(&tokenize(s, &v), &v).unwrap(), normalize(s));
        assert_eq!(
            detokenize(
                &TokenSeq {
                    ids: vec![BOS, EOS]
                },
                &v
            )
            .unwrap(),
            ""
        );
        assert!(matches!(
            detokenize(&TokenSeq { ids: vec![BOS, 99] }, &v),
            Err(Error::UnknownId(99))
        ));
    }

    #[test]
    fn json_round_trip() {
        let v = Vocab::build(&["sinus rhythm.", "sinus tachycardia."], 1).unwrap();
        assert_eq!(Vocab::from_json(&v.to_json()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(idx in proptest::collection::vec(0usize..6, 0..20)) {
            let pool = ["sinus", "rhythm", "0.12", "ms", ";", "/"];
            let text: Vec<&str> = idx.iter().map(|&i| pool[i]).collect();
            let text = text.join(" ");
            let v = Vocab::build(&[pool.join(" ")], 1).unwrap();
            prop_assert_eq!(detokenize(&tokenize(&text, &v), &v).unwrap(), normalize(&text));
        }

        #[test]
        fn order_independent(mut docs in proptest::collection::vec("[a-d ]{0,12}", 1..6), seed in any::<u64>()) {
            let a = Vocab::build(&docs, 1).unwrap();
            let n = docs.len();
            docs.rotate_left((seed as usize) % n);
            prop_assert_eq!(a, Vocab::build(&docs, 1).unwrap());
        }
    }
}
