//! Label taxonomy, grouped per-label classifiers and diagnosis-driven
//! prompts ("Sinus rhythm is present; ...").

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::model::EmbeddingVector;
use crate::retrieval::{fit_logistic, is_degenerate, LogisticUnit, ProbeConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    #[serde(alias = "Rhythm")]
    Rhythm,
    #[serde(alias = "Disease")]
    Disease,
    #[serde(alias = "Form")]
    Form,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Disease, Group::Form, Group::Rhythm];
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Rhythm => "rhythm",
            Group::Disease => "disease",
            Group::Form => "form",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelDef {
    pub code: String,
    pub description: String,
    pub group: Group,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub synonyms: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TaxonomyFile", into = "TaxonomyFile")]
pub struct Taxonomy {
    labels: Vec<LabelDef>,
}

#[derive(Serialize, Deserialize)]
struct TaxonomyFile {
    labels: Vec<LabelDef>,
}

impl TryFrom<TaxonomyFile> for Taxonomy {
    type Error = Error;

    fn try_from(f: TaxonomyFile) -> Result<Self> {
        Taxonomy::new(f.labels)
    }
}

impl From<Taxonomy> for TaxonomyFile {
    fn from(t: Taxonomy) -> Self {
        TaxonomyFile { labels: t.labels }
    }
}

const DEFAULT_TAXONOMY: &str = include_str!("../data/taxonomy.json");

impl Taxonomy {
    pub fn new(labels: Vec<LabelDef>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyLabelSet);
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.code.as_str()) {
                return Err(Error::DuplicateId(l.code.clone()));
            }
        }
        Ok(Self { labels })
    }

    /// The bundled PTB-XL style taxonomy.
    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn labels(&self) -> &[LabelDef] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.code == code)
    }

    pub fn get(&self, code: &str) -> Option<&LabelDef> {
        self.index_of(code).map(|i| &self.labels[i])
    }

    pub fn in_group(&self, group: Group) -> impl Iterator<Item = (usize, &LabelDef)> {
        self.labels
            .iter()
            .enumerate()
            .filter(move |(_, l)| l.group == group)
    }

    /// Multi-hot row for a set of codes; unknown codes are ignored.
    pub fn multihot<S: AsRef<str>>(&self, codes: &[S]) -> Vec<bool> {
        let mut v = vec![false; self.len()];
        for c in codes {
            if let Some(i) = self.index_of(c.as_ref()) {
                v[i] = true;
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedClassifier {
    pub taxonomy: Taxonomy,
    /// One unit per taxonomy label; `None` where the label was degenerate.
    pub units: Vec<Option<LogisticUnit>>,
}

pub const CLASSIFIER_KIND: &str = "ddp_classifier";

/// Fits one logistic unit per label on frozen ECG embeddings.
pub fn fit_group_classifiers(
    embs: &[EmbeddingVector],
    labels: &[Vec<bool>],
    taxonomy: &Taxonomy,
    cfg: &ProbeConfig,
) -> Result<GroupedClassifier> {
    if taxonomy.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    if embs.len() != labels.len() {
        return Err(Error::LengthMismatch(embs.len(), labels.len()));
    }
    if embs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(bad) = labels.iter().find(|r| r.len() != taxonomy.len()) {
        return Err(Error::LengthMismatch(bad.len(), taxonomy.len()));
    }
    let xs: Vec<&[f64]> = embs.iter().map(EmbeddingVector::as_slice).collect();
    let units = taxonomy
        .labels()
        .iter()
        .enumerate()
        .map(|(l, def)| {
            let y: Vec<bool> = labels.iter().map(|r| r[l]).collect();
            if is_degenerate(&y) {
                log::warn!("label {} is degenerate in training data; skipped", def.code);
                None
            } else {
                Some(fit_logistic(&xs, &y, cfg))
            }
        })
        .collect();
    Ok(GroupedClassifier {
        taxonomy: taxonomy.clone(),
        units,
    })
}

impl GroupedClassifier {
    /// Per-label probabilities in taxonomy order; skipped labels score 0.
    pub fn predict(&self, emb: &EmbeddingVector) -> Vec<f64> {
        self.units
            .iter()
            .map(|u| u.as_ref().map_or(0.0, |u| u.prob(emb.as_slice())))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dim = self
            .units
            .iter()
            .flatten()
            .map(|u| u.w.len())
            .next()
            .unwrap_or(0);
        let mut w = Array2::zeros((self.units.len(), dim));
        let mut b = Array2::zeros((1, self.units.len()));
        let mut fitted = Vec::with_capacity(self.units.len());
        for (i, u) in self.units.iter().enumerate() {
            fitted.push(u.is_some());
            if let Some(u) = u {
                w.row_mut(i).assign(&ndarray::ArrayView1::from(&u.w));
                b[[0, i]] = u.b;
            }
        }
        let mut c = Checkpoint::new(
            CLASSIFIER_KIND,
            serde_json::json!({ "taxonomy": self.taxonomy, "fitted": fitted }),
        );
        c.tensors.push(("w".into(), w));
        c.tensors.push(("b".into(), b));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != CLASSIFIER_KIND {
            return Err(Error::CorruptCheckpoint(format!(
                "expected a {CLASSIFIER_KIND} checkpoint, found {}",
                c.kind
            )));
        }
        let taxonomy: Taxonomy = serde_json::from_value(c.meta["taxonomy"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("taxonomy: {e}")))?;
        let fitted: Vec<bool> = serde_json::from_value(c.meta["fitted"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("fitted: {e}")))?;
        let (w, b) = match (c.tensor("w"), c.tensor("b")) {
            (Some(w), Some(b)) => (w, b),
            _ => return Err(Error::CorruptCheckpoint("missing w or b".into())),
        };
        if fitted.len() != taxonomy.len()
            || w.nrows() != taxonomy.len()
            || b.ncols() != taxonomy.len()
        {
            return Err(Error::CorruptCheckpoint("classifier shape mismatch".into()));
        }
        let units = fitted
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                f.then(|| LogisticUnit {
                    w: w.row(i).to_vec(),
                    b: b[[0, i]],
                })
            })
            .collect();
        Ok(Self { taxonomy, units })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisSelection {
    pub rhythm: Option<LabelDef>,
    pub disease: Vec<LabelDef>,
    pub form: Vec<LabelDef>,
    /// Probability of each selected label, in prompt order.
    pub probabilities: Vec<(String, f64)>,
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Disease and form labels at or above their threshold; the single most
/// probable rhythm label regardless of threshold (lowest index on ties).
pub fn select(
    probs: &[f64],
    taxonomy: &Taxonomy,
    tau_disease: f64,
    tau_form: f64,
) -> Result<DiagnosisSelection> {
    if probs.len() != taxonomy.len() {
        return Err(Error::LengthMismatch(probs.len(), taxonomy.len()));
    }
    if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidConfig(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    let mut rhythm: Option<(usize, f64)> = None;
    for (i, _) in taxonomy.in_group(Group::Rhythm) {
        if rhythm.is_none_or(|(_, best)| probs[i] > best) {
            rhythm = Some((i, probs[i]));
        }
    }
    let pick = |group: Group, tau: f64| -> Vec<usize> {
        taxonomy
            .in_group(group)
            .filter(|&(i, _)| probs[i] >= tau)
            .map(|(i, _)| i)
            .collect()
    };
    let disease = pick(Group::Disease, tau_disease);
    let form = pick(Group::Form, tau_form);
    let labels = taxonomy.labels();
    let probabilities = rhythm
        .map(|(i, _)| i)
        .into_iter()
        .chain(disease.iter().copied())
        .chain(form.iter().copied())
        .map(|i| (labels[i].code.clone(), probs[i]))
        .collect();
    Ok(DiagnosisSelection {
        rhythm: rhythm.map(|(i, _)| labels[i].clone()),
        disease: disease.into_iter().map(|i| labels[i].clone()).collect(),
        form: form.into_iter().map(|i| labels[i].clone()).collect(),
        probabilities,
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `"{Description} is present"` clauses ordered rhythm, disease, form,
/// joined by `"; "` and closed with a period. Empty when nothing is
/// selected.
pub fn render_prompt(sel: &DiagnosisSelection) -> String {
    let clauses: Vec<String> = sel
        .rhythm
        .iter()
        .chain(&sel.disease)
        .chain(&sel.form)
        .map(|l| format!("{} is present", capitalize(&l.description)))
        .collect();
    if clauses.is_empty() {
        String::new()
    } else {
        clauses.join("; ") + "."
    }
}
