//! BLEU, ROUGE-L, METEOR and clinical-efficacy scores, plus rule-based
//! label extraction from report text.
//!
//! All text metrics work on token slices; use [`crate::text::words`] to get
//! tokens from raw text.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::ddp::{Group, Taxonomy};
use crate::error::{Error, Result};
use crate::text::words;

/// Precision, recall and F1 from confusion counts; 0/0 is 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f)
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-free sentence BLEU with uniform weights up to `max_n`.
///
/// Orders longer than the candidate are dropped. Zero matches at order
/// two and above get add-one smoothing; zero unigram matches give 0.
pub fn bleu(candidate: &[&str], references: &[Vec<&str>], max_n: usize) -> Result<f64> {
    if candidate.is_empty() {
        return Err(Error::EmptyCandidate);
    }
    if references.is_empty() || max_n == 0 {
        return Ok(0.0);
    }
    let orders = max_n.min(candidate.len());
    let mut log_sum = 0.0;
    for n in 1..=orders {
        let cand = ngram_counts(candidate, n);
        let mut max_ref: HashMap<&[&str], usize> = HashMap::new();
        for r in references {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = candidate.len() + 1 - n;
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return Ok(0.0);
        } else {
            1.0 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_len(a: &[&str], b: &[&str]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based ROUGE-L with beta 1.
pub fn rouge_l(candidate: &[&str], reference: &[&str]) -> Rouge {
    if candidate.is_empty() || reference.is_empty() {
        return Rouge {
            precision: 0.0,
            recall: 0.0,
            f: 0.0,
        };
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    let f = if l == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Rouge {
        precision: p,
        recall: r,
        f,
    }
}

pub const METEOR_ALPHA: f64 = 0.9;
pub const METEOR_BETA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;

/// Suffix-stripping stem: drops the first of `ing`, `es`, `ed`, `s` that
/// leaves at least three characters, then a trailing `e` under the same
/// rule, so `wave` and `waves` share a stem.
pub fn stem(word: &str) -> &str {
    let long_enough = |b: &str| b.chars().count() >= 3;
    let mut base = word;
    for suffix in ["ing", "es", "ed", "s"] {
        if let Some(b) = base.strip_suffix(suffix).filter(|b| long_enough(b)) {
            base = b;
            break;
        }
    }
    base.strip_suffix('e')
        .filter(|b| long_enough(b))
        .unwrap_or(base)
}

/// Maximum-size unigram alignment (exact or stem match) built by repeatedly
/// taking the longest run of consecutive matches among unaligned tokens,
/// leftmost in the candidate, then leftmost in the reference. Returns
/// `(matches, chunks)`.
pub fn meteor_alignment(candidate: &[&str], reference: &[&str]) -> (usize, usize) {
    let c: Vec<&str> = candidate.iter().map(|w| stem(w)).collect();
    let r: Vec<&str> = reference.iter().map(|w| stem(w)).collect();
    let mut used_c = vec![false; c.len()];
    let mut used_r = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    loop {
        let mut best = (0, 0, 0);
        for i in 0..c.len() {
            for j in 0..r.len() {
                let mut len = 0;
                while i + len < c.len()
                    && j + len < r.len()
                    && !used_c[i + len]
                    && !used_r[j + len]
                    && c[i + len] == r[j + len]
                {
                    len += 1;
                }
                if len > best.2 {
                    best = (i, j, len);
                }
            }
        }
        let (i, j, len) = best;
        if len == 0 {
            break;
        }
        for k in 0..len {
            used_c[i + k] = true;
            used_r[j + k] = true;
            pairs.push((i + k, j + k));
        }
    }
    pairs.sort_unstable();
    let chunks = pairs
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || pairs[k - 1] != (i - 1, j.wrapping_sub(1)))
        .count();
    (pairs.len(), chunks)
}

/// METEOR from an alignment: harmonic mean weighted to recall times the
/// fragmentation penalty.
pub fn meteor_score(matches: usize, chunks: usize, cand_len: usize, ref_len: usize) -> f64 {
    if matches == 0 || cand_len == 0 || ref_len == 0 {
        return 0.0;
    }
    let p = matches as f64 / cand_len as f64;
    let r = matches as f64 / ref_len as f64;
    let f_mean = p * r / (METEOR_ALPHA * p + (1.0 - METEOR_ALPHA) * r);
    let penalty = METEOR_GAMMA * (chunks as f64 / matches as f64).powf(METEOR_BETA);
    f_mean * (1.0 - penalty)
}

pub fn meteor(candidate: &[&str], reference: &[&str]) -> f64 {
    let (m, ch) = meteor_alignment(candidate, reference);
    meteor_score(m, ch, candidate.len(), reference.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Labels that occur in references or predictions and enter the average.
    pub n_labels: usize,
}

pub type CeResult = BTreeMap<Group, GroupScore>;

/// Per-label P/R/F1 macro-averaged within each group over labels that
/// appear in at least one reference or prediction.
pub fn ce_metrics(
    pred: &[BTreeSet<String>],
    reference: &[BTreeSet<String>],
    taxonomy: &Taxonomy,
) -> Result<CeResult> {
    if pred.len() != reference.len() {
        return Err(Error::LengthMismatch(pred.len(), reference.len()));
    }
    let mut out = CeResult::new();
    for group in Group::ALL {
        let (mut sp, mut sr, mut sf, mut n) = (0.0, 0.0, 0.0, 0);
        for (_, def) in taxonomy.in_group(group) {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (p, r) in pred.iter().zip(reference) {
                match (p.contains(&def.code), r.contains(&def.code)) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            if tp + fp + fn_ == 0 {
                continue;
            }
            let (p, r, f) = prf(tp, fp, fn_);
            sp += p;
            sr += r;
            sf += f;
            n += 1;
        }
        let d = n.max(1) as f64;
        out.insert(
            group,
            GroupScore {
                precision: sp / d,
                recall: sr / d,
                f1: sf / d,
                n_labels: n,
            },
        );
    }
    Ok(out)
}

const NEGATION_CUES: [&str; 6] = ["no", "not", "without", "absent", "absence", "negative"];

/// Labels whose description, synonyms or code occur in `report` as a whole
/// token phrase. Longer phrases win over the phrases they contain, and
/// clauses (split at `. , ; ? !`) holding a negation cue are ignored.
pub fn extract_labels(report: &str, taxonomy: &Taxonomy) -> BTreeSet<String> {
    let tokens = words(report);
    let mut clause = vec![0usize; tokens.len()];
    let mut negated = vec![false];
    for (i, t) in tokens.iter().enumerate() {
        if matches!(t.as_str(), "." | "," | ";" | "?" | "!") {
            negated.push(false);
        } else if NEGATION_CUES.contains(&t.as_str()) {
            *negated.last_mut().unwrap() = true;
        }
        clause[i] = negated.len() - 1;
    }

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (li, def) in taxonomy.labels().iter().enumerate() {
        let phrases = std::iter::once(def.description.as_str())
            .chain(def.synonyms.iter().map(String::as_str))
            .chain(std::iter::once(def.code.as_str()));
        for phrase in phrases {
            let pw = words(phrase);
            if pw.is_empty() || pw.len() > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - pw.len() {
                if tokens[start..start + pw.len()] == pw[..] {
                    candidates.push((pw.len(), start, li));
                }
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; tokens.len()];
    let mut out = BTreeSet::new();
    for (len, start, li) in candidates {
        if taken[start..start + len].iter().any(|&t| t) {
            continue;
        }
        taken[start..start + len].iter_mut().for_each(|t| *t = true);
        if !negated[clause[start]] {
            out.insert(taxonomy.labels()[li].code.clone());
        }
    }
    out
}
