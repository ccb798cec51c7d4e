//! Templated instruction data: single-turn pretraining and diagnosis
//! records, multi-turn conversations, negative injections and corpus
//! statistics.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddp::{Group, LabelDef, Taxonomy};
use crate::delineation::WaveformFeatures;
use crate::error::{Error, Result};

pub const MIN_TURNS: usize = 4;
pub const MAX_TURNS: usize = 15;

const DEFAULT_QUESTIONS: &str = include_str!("../data/questions.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normality {
    Normal,
    Abnormal,
    Borderline,
}

impl fmt::Display for Normality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normality::Normal => "normal",
            Normality::Abnormal => "abnormal",
            Normality::Borderline => "borderline",
        })
    }
}

impl Normality {
    /// The category with its indefinite article: "a normal", "an abnormal".
    pub fn with_article(&self) -> String {
        match self {
            Normality::Abnormal => "an abnormal".into(),
            other => format!("a {other}"),
        }
    }

    /// Any disease-group label other than `NORM` makes the ECG abnormal;
    /// `NORM` otherwise makes it normal; anything else is borderline.
    pub fn from_labels<S: AsRef<str>>(codes: &[S], taxonomy: &Taxonomy) -> Self {
        let mut has_norm = false;
        for c in codes {
            let c = c.as_ref();
            if c == "NORM" {
                has_norm = true;
            } else if taxonomy.get(c).is_some_and(|l| l.group == Group::Disease) {
                return Normality::Abnormal;
            }
        }
        if has_norm {
            Normality::Normal
        } else {
            Normality::Borderline
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructKind {
    Pretrain,
    Diagnosis,
    Conversation,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructRecord {
    pub ecg_id: String,
    pub kind: InstructKind,
    pub turns: Vec<Turn>,
}

pub fn builtin_question_bank() -> Vec<String> {
    parse_question_bank(DEFAULT_QUESTIONS)
}

pub fn parse_question_bank(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

pub fn load_question_bank(path: &Path) -> Result<Vec<String>> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_question_bank(&s))
}

fn clean_reports<S: AsRef<str>>(reports: &[S]) -> Result<Vec<String>> {
    let cleaned: Vec<String> = reports
        .iter()
        .map(|r| {
            r.as_ref()
                .trim()
                .trim_end_matches(['.', ' '])
                .trim()
                .to_string()
        })
        .filter(|r| !r.is_empty())
        .collect();
    if cleaned.is_empty() {
        return Err(Error::EmptyReports);
    }
    Ok(cleaned)
}

fn pick_question(bank: &[String], rng: &mut ChaCha8Rng) -> Result<String> {
    bank.choose(rng)
        .cloned()
        .ok_or_else(|| Error::InvalidConfig("question bank is empty".into()))
}

/// `"Your ECG shows r1; r2. It's a normal ECG."` (or "an abnormal", "a borderline") with a question drawn
/// uniformly from `bank`.
pub fn build_pretrain_record<S: AsRef<str>>(
    ecg_id: &str,
    reports: &[S],
    bank: &[String],
    normality: Normality,
    seed: u64,
) -> Result<InstructRecord> {
    let reports = clean_reports(reports)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = pick_question(bank, &mut rng)?;
    let answer = format!(
        "Your ECG shows {}. It's {} ECG.",
        reports.join("; "),
        normality.with_article()
    );
    Ok(InstructRecord {
        ecg_id: ecg_id.into(),
        kind: InstructKind::Pretrain,
        turns: vec![Turn { question, answer }],
    })
}

/// Single-turn answer phrased for a patient, led by the diagnosis prompt
/// when one is given.
pub fn build_diagnosis_record<S: AsRef<str>>(
    ecg_id: &str,
    reports: &[S],
    ddp_prompt: Option<&str>,
    bank: &[String],
    normality: Normality,
    seed: u64,
) -> Result<InstructRecord> {
    let reports = clean_reports(reports)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = pick_question(bank, &mut rng)?;
    let mut answer = String::new();
    if let Some(p) = ddp_prompt.map(str::trim).filter(|p| !p.is_empty()) {
        answer.push_str(&format!("Diagnosis: {p} "));
    }
    answer.push_str(&format!(
        "The findings in your ECG are: {}. Overall, this is {} ECG.",
        reports.join("; "),
        normality.with_article()
    ));
    Ok(InstructRecord {
        ecg_id: ecg_id.into(),
        kind: InstructKind::Diagnosis,
        turns: vec![Turn { question, answer }],
    })
}

pub fn denial(description: &str) -> String {
    format!("No, there is no evidence of {description} in this ECG.")
}

/// A label absent from the report, drawn uniformly, with its denial answer.
pub fn build_negative_injection<S: AsRef<str>>(
    report_labels: &[S],
    taxonomy: &Taxonomy,
    seed: u64,
) -> Result<(LabelDef, String)> {
    let present: HashSet<&str> = report_labels.iter().map(AsRef::as_ref).collect();
    let absent: Vec<&LabelDef> = taxonomy
        .labels()
        .iter()
        .filter(|l| !present.contains(l.code.as_str()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label = absent.choose(&mut rng).ok_or(Error::NoAbsentLabels)?;
    Ok(((*label).clone(), denial(&label.description)))
}

fn fmt_ms(v: Option<f64>) -> Option<String> {
    v.map(|v| format!("{} ms", v.round_ties_even()))
}

/// A 4 to 15 turn dialogue covering heart rate, intervals, rhythm,
/// diagnoses and one injected absent finding.
pub fn build_conversation<S: AsRef<str>>(
    ecg_id: &str,
    reports: &[S],
    labels: &[S],
    features: Option<&WaveformFeatures>,
    taxonomy: &Taxonomy,
    seed: u64,
) -> Result<InstructRecord> {
    let reports = clean_reports(reports)?;
    let codes: Vec<&str> = labels.iter().map(AsRef::as_ref).collect();
    let normality = Normality::from_labels(&codes, taxonomy);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let turn = |q: &str, a: String| Turn {
        question: q.to_string(),
        answer: a,
    };

    let mut pool = vec![
        turn(
            "What does my ECG show?",
            format!("Your ECG shows {}.", reports.join("; ")),
        ),
        turn("Is my ECG normal?", format!("It's {} ECG.", normality.with_article())),
        turn(
            "Should I follow up with a doctor?",
            match normality {
                Normality::Normal => "Your ECG looks normal; routine follow-up is enough unless you have symptoms.".into(),
                _ => "Please discuss these findings with your physician, who can correlate them with your symptoms.".into(),
            },
        ),
    ];

    let present: Vec<&LabelDef> = codes.iter().filter_map(|c| taxonomy.get(c)).collect();
    let rhythm = present.iter().find(|l| l.group == Group::Rhythm);
    pool.push(turn(
        "What is my heart rhythm?",
        match rhythm {
            Some(l) => format!("The rhythm is {}.", l.description),
            None => "The rhythm could not be classified from the report.".into(),
        },
    ));
    for l in &present {
        pool.push(Turn {
            question: format!("Is there {} in my ECG?", l.description),
            answer: format!("Yes, {} is present.", l.description),
        });
    }
    if let Ok((label, answer)) = build_negative_injection(&codes, taxonomy, rng.random()) {
        pool.push(Turn {
            question: format!("Is there {} in my ECG?", label.description),
            answer,
        });
    }

    if let Some(f) = features {
        pool.push(turn(
            "What is my heart rate?",
            format!(
                "Your heart rate is about {} beats per minute.",
                f.heart_rate_bpm.round()
            ),
        ));
        pool.push(turn(
            "What is the RR interval?",
            format!("The RR interval is {}.", fmt_ms(Some(f.rr_ms)).unwrap()),
        ));
        if let Some(pr) = fmt_ms(f.pr_ms) {
            pool.push(turn(
                "What is the PR interval?",
                format!("The PR interval is {pr}."),
            ));
        }
        if let Some(qrs) = fmt_ms(f.qrs_ms) {
            pool.push(turn(
                "How wide is the QRS complex?",
                format!("The QRS duration is {qrs}."),
            ));
        }
        if let (Some(qt), Some(qtc)) = (fmt_ms(f.qt_ms), fmt_ms(f.qtc_ms)) {
            pool.push(turn(
                "What are the QT and QTc intervals?",
                format!("The QT interval is {qt} and the corrected QTc is {qtc}."),
            ));
        }
    }

    // Keep the overview first; shuffle the rest.
    pool[1..].shuffle(&mut rng);
    let max = pool.len().min(MAX_TURNS);
    let n = rng.random_range(MIN_TURNS..=max);
    pool.truncate(n);
    Ok(InstructRecord {
        ecg_id: ecg_id.into(),
        kind: InstructKind::Conversation,
        turns: pool,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub vocab_count: usize,
    pub distinct_vocab: usize,
    pub sentences: usize,
    pub avg_caption_len: f64,
    pub avg_sentences_per_caption: f64,
    pub n_ecgs: usize,
}

pub fn count_sentences(text: &str) -> usize {
    text.split(['.', '!', '?', ';'])
        .filter(|s| !s.trim().is_empty())
        .count()
}

/// Whitespace-token statistics over every answer in `records`.
pub fn corpus_stats(records: &[InstructRecord]) -> CorpusStats {
    let mut distinct = BTreeSet::new();
    let mut ecgs = HashSet::new();
    let (mut tokens, mut sentences, mut answers) = (0, 0, 0);
    for r in records {
        ecgs.insert(r.ecg_id.as_str());
        for t in &r.turns {
            answers += 1;
            for w in t.answer.split_whitespace() {
                tokens += 1;
                distinct.insert(w);
            }
            sentences += count_sentences(&t.answer);
        }
    }
    let per = |x: usize| {
        if answers == 0 {
            0.0
        } else {
            x as f64 / answers as f64
        }
    };
    CorpusStats {
        vocab_count: tokens,
        distinct_vocab: distinct.len(),
        sentences,
        avg_caption_len: per(tokens),
        avg_sentences_per_caption: per(sentences),
        n_ecgs: ecgs.len(),
    }
}

pub fn to_jsonl(records: &[InstructRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddp::Group;
    use proptest::prelude::*;

    fn bank() -> Vec<String> {
        builtin_question_bank()
    }

    #[test]
    fn pretrain_template() {
        let r =
            build_pretrain_record("e1", &["sinus rhythm."], &bank(), Normality::Normal, 3).unwrap();
        assert_eq!(r.turns.len(), 1);
        assert_eq!(
            r.turns[0].answer,
            "Your ECG shows sinus rhythm. It's a normal ECG."
        );
        let r2 =
            build_pretrain_record("e1", &["sinus rhythm."], &bank(), Normality::Normal, 3).unwrap();
        assert_eq!(r, r2);
        let two = build_pretrain_record(
            "e1",
            &["sinus rhythm", "left bundle branch block."],
            &bank(),
            Normality::Abnormal,
            0,
        )
        .unwrap();
        assert_eq!(
            two.turns[0].answer,
            "Your ECG shows sinus rhythm; left bundle branch block. It's an abnormal ECG."
        );
    }

    #[test]
    fn pretrain_errors() {
        let none: [&str; 0] = [];
        assert!(matches!(
            build_pretrain_record("e", &none, &bank(), Normality::Normal, 0),
            Err(Error::EmptyReports)
        ));
        assert!(build_pretrain_record("e", &["x"], &[], Normality::Normal, 0).is_err());
    }

    #[test]
    fn normality_rules() {
        let t = Taxonomy::builtin();
        assert_eq!(
            Normality::from_labels(&["NORM", "SR"], &t),
            Normality::Normal
        );
        assert_eq!(
            Normality::from_labels(&["NORM", "LBBB"], &t),
            Normality::Abnormal
        );
        assert_eq!(
            Normality::from_labels(&["LVOLT"], &t),
            Normality::Borderline
        );
    }

    #[test]
    fn only_choice_injection() {
        let t = Taxonomy::new(vec![
            LabelDef {
                code: "SR".into(),
                description: "sinus rhythm".into(),
                group: Group::Rhythm,
                synonyms: vec![],
            },
            LabelDef {
                code: "LBBB".into(),
                description: "left bundle branch block".into(),
                group: Group::Disease,
                synonyms: vec![],
            },
        ])
        .unwrap();
        let (l, a) = build_negative_injection(&["SR"], &t, 9).unwrap();
        assert_eq!(l.code, "LBBB");
        assert_eq!(
            a,
            "No, there is no evidence of left bundle branch block in this ECG."
        );
        assert!(matches!(
            build_negative_injection(&["SR", "LBBB"], &t, 0),
            Err(Error::NoAbsentLabels)
        ));
    }

    #[test]
    fn stats_hand_count() {
        assert_eq!(corpus_stats(&[]), CorpusStats::default());
        let r = InstructRecord {
            ecg_id: "a".into(),
            kind: InstructKind::Pretrain,
            turns: vec![Turn {
                question: "q".into(),
                answer: "a b. c d.".into(),
            }],
        };
        let s = corpus_stats(&[r]);
        assert_eq!(
            (s.vocab_count, s.distinct_vocab, s.sentences, s.n_ecgs),
            (4, 4, 2, 1)
        );
    }

    proptest! {
        #[test]
        fn injected_label_is_absent(seed in any::<u64>(), mask in 0u32..(1 << 10)) {
            let t = Taxonomy::builtin();
            let present: Vec<String> = t.labels().iter().take(10).enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, l)| l.code.clone())
                .collect();
            let (l, _) = build_negative_injection(&present, &t, seed).unwrap();
            prop_assert!(!present.contains(&l.code));
        }

        #[test]
        fn conversation_turn_bounds(seed in any::<u64>(), with_features in any::<bool>()) {
            let t = Taxonomy::builtin();
            let f = WaveformFeatures {
                rr_ms: 800.0, pr_ms: Some(160.0), qrs_ms: Some(90.0), qt_ms: Some(380.0),
                qtc_ms: Some(424.8), p_peak_mv: Some(0.1), r_peak_mv: 1.0, t_peak_mv: Some(0.3),
                heart_rate_bpm: 75.0, n_beats: 12,
            };
            let r = build_conversation("e", &["sinus rhythm."], &["SR"], with_features.then_some(&f), &t, seed).unwrap();
            prop_assert!((MIN_TURNS..=MAX_TURNS).contains(&r.turns.len()));
            let again = build_conversation("e", &["sinus rhythm."], &["SR"], with_features.then_some(&f), &t, seed).unwrap();
            prop_assert_eq!(to_jsonl(&[r]), to_jsonl(&[again]));
        }

        #[test]
        fn vocab_count_is_additive(a in proptest::collection::vec("[a-c .]{0,20}", 0..5), b in proptest::collection::vec("[a-c .]{0,20}", 0..5)) {
            let mk = |xs: &[String]| -> Vec<InstructRecord> {
                xs.iter().enumerate().map(|(i, s)| InstructRecord {
                    ecg_id: i.to_string(),
                    kind: InstructKind::Pretrain,
                    turns: vec![Turn { question: String::new(), answer: s.clone() }],
                }).collect()
            };
            let (ra, rb) = (mk(&a), mk(&b));
            let all: Vec<_> = ra.iter().chain(&rb).cloned().collect();
            prop_assert_eq!(corpus_stats(&all).vocab_count, corpus_stats(&ra).vocab_count + corpus_stats(&rb).vocab_count);
        }
    }
}
