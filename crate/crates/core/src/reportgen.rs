//! Six-section clinical report assembly, LaTeX emission and a structural
//! LaTeX checker. Narrative sections come from a pluggable backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ddp::{render_prompt, DiagnosisSelection};
use crate::delineation::{features_to_text, WaveformFeatures};
use crate::error::{Error, Result};
use crate::signal_io::PatientMeta;

pub const NOT_AVAILABLE: &str = "Not available";

pub const SECTION_TITLES: [&str; 6] = [
    "Patient Information",
    "Medical History",
    "ECG Data Analysis",
    "Pathological Analysis",
    "Diagnosis",
    "Recommendations",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDoc {
    pub patient_information: String,
    pub medical_history: String,
    pub ecg_data_analysis: String,
    pub pathological_analysis: String,
    pub diagnosis: String,
    pub recommendations: String,
}

impl Default for ReportDoc {
    fn default() -> Self {
        let na = || NOT_AVAILABLE.to_string();
        Self {
            patient_information: na(),
            medical_history: na(),
            ecg_data_analysis: na(),
            pathological_analysis: na(),
            diagnosis: na(),
            recommendations: na(),
        }
    }
}

impl ReportDoc {
    /// `(title, body)` in fixed section order.
    pub fn sections(&self) -> [(&'static str, &str); 6] {
        [
            (SECTION_TITLES[0], &self.patient_information),
            (SECTION_TITLES[1], &self.medical_history),
            (SECTION_TITLES[2], &self.ecg_data_analysis),
            (SECTION_TITLES[3], &self.pathological_analysis),
            (SECTION_TITLES[4], &self.diagnosis),
            (SECTION_TITLES[5], &self.recommendations),
        ]
    }
}

pub trait NarrativeBackend {
    fn generate(&self, prompt: &str) -> Result<String>;
}

/// Which narrative section a backend prompt asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NarrativeSection {
    PathologicalAnalysis,
    Recommendations,
}

impl NarrativeSection {
    fn key(self) -> &'static str {
        match self {
            NarrativeSection::PathologicalAnalysis => "pathological_analysis",
            NarrativeSection::Recommendations => "recommendations",
        }
    }
}

/// The structured prompt handed to a backend: one `Key: value` line per
/// field.
pub fn narrative_prompt(
    section: NarrativeSection,
    features_text: &str,
    diagnosis: &str,
    patient: &str,
) -> String {
    format!(
        "Section: {}\nWaveform data: {features_text}\nDiagnosis: {diagnosis}\nPatient: {patient}\n\
         Write this section of a clinical ECG report in plain sentences.",
        section.key()
    )
}

fn prompt_field<'a>(prompt: &'a str, key: &str) -> Option<&'a str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(':'))
        .map(str::trim)
}

/// Deterministic fill-in sentences keyed on the prompt's fields.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateBackend;

/// `(label description, pathology sentence, recommendation sentence)`.
const LABEL_TEMPLATES: &[(&str, &str, &str)] = &[
    (
        "sinus rhythm",
        "The rhythm is sinus rhythm with regular atrial activation preceding each QRS complex.",
        "No rhythm-specific intervention is required.",
    ),
    (
        "sinus bradycardia",
        "Sinus bradycardia indicates a slowed sinus node discharge rate.",
        "Review medications that slow the heart rate and assess for symptoms of bradycardia.",
    ),
    (
        "sinus tachycardia",
        "Sinus tachycardia indicates an accelerated sinus node discharge rate.",
        "Look for reversible causes such as fever, anemia, dehydration or pain.",
    ),
    (
        "atrial fibrillation",
        "Atrial fibrillation shows irregular ventricular response without organized atrial activity.",
        "Assess stroke risk for anticoagulation and consider rate or rhythm control.",
    ),
    (
        "left bundle branch block",
        "Left bundle branch block reflects delayed left ventricular depolarization with a widened QRS complex.",
        "Echocardiography is advised to evaluate left ventricular structure and function.",
    ),
    (
        "right bundle branch block",
        "Right bundle branch block reflects delayed right ventricular depolarization.",
        "Correlate clinically; evaluate for underlying pulmonary or structural heart disease if new.",
    ),
    (
        "first degree av block",
        "First degree AV block reflects prolonged atrioventricular conduction.",
        "Monitor periodically for progression of conduction disease.",
    ),
    (
        "left ventricular hypertrophy",
        "Voltage criteria suggest left ventricular hypertrophy.",
        "Assess blood pressure control and consider echocardiography.",
    ),
    (
        "normal ecg",
        "No pathological pattern is identified.",
        "Routine follow-up is sufficient.",
    ),
];

fn present_labels(diagnosis: &str) -> Vec<String> {
    diagnosis
        .trim_end_matches('.')
        .split(';')
        .filter_map(|c| c.trim().strip_suffix(" is present"))
        .map(|d| d.trim().to_lowercase())
        .filter(|d| !d.is_empty())
        .collect()
}

fn measured(features: &str, key: &str) -> Option<f64> {
    features.split(';').find_map(|part| {
        let rest = part
            .trim()
            .strip_prefix(key)?
            .trim_start()
            .strip_prefix(':')?;
        rest.split_whitespace().next()?.parse().ok()
    })
}

fn interval_sentences(features: &str) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(rr) = measured(features, "RR interval").filter(|&rr| rr > 0.0) {
        let hr = (60_000.0 / rr).round();
        let kind = if hr < 60.0 {
            "below"
        } else if hr > 100.0 {
            "above"
        } else {
            "within"
        };
        out.push(format!(
            "The ventricular rate of about {hr} bpm is {kind} the normal range."
        ));
    }
    match measured(features, "PR interval") {
        Some(pr) if pr > 200.0 => out.push("The PR interval is prolonged.".into()),
        Some(pr) if pr < 120.0 => out.push("The PR interval is short.".into()),
        Some(_) => out.push("Atrioventricular conduction time is normal.".into()),
        None => {}
    }
    match measured(features, "QRS duration") {
        Some(q) if q >= 120.0 => out.push(
            "The QRS complex is wide, consistent with a ventricular conduction delay.".into(),
        ),
        Some(_) => out.push("The QRS duration is normal.".into()),
        None => {}
    }
    let qtc = features.split(';').find_map(|part| {
        let rest = part.trim().strip_prefix("QT/QTc interval:")?;
        rest.split_whitespace()
            .next()?
            .split('/')
            .nth(1)?
            .parse::<f64>()
            .ok()
    });
    match qtc {
        Some(q) if q > 460.0 => out.push("The corrected QT interval is prolonged.".into()),
        Some(_) => out.push("The corrected QT interval is within normal limits.".into()),
        None => {}
    }
    out
}

impl NarrativeBackend for TemplateBackend {
    fn generate(&self, prompt: &str) -> Result<String> {
        let section = prompt_field(prompt, "Section").unwrap_or_default();
        let features = prompt_field(prompt, "Waveform data").unwrap_or_default();
        let labels = present_labels(prompt_field(prompt, "Diagnosis").unwrap_or_default());
        let lookup = |l: &str| LABEL_TEMPLATES.iter().find(|(d, ..)| *d == l);
        let mut sentences = Vec::new();
        if section == NarrativeSection::Recommendations.key() {
            for l in &labels {
                sentences.push(match lookup(l) {
                    Some((.., rec)) => rec.to_string(),
                    None => format!("Clinical correlation is advised regarding {l}."),
                });
            }
            if sentences.is_empty() {
                sentences.push("Clinical correlation is advised.".into());
            }
        } else {
            sentences.extend(interval_sentences(features));
            for l in &labels {
                sentences.push(match lookup(l) {
                    Some((_, path, _)) => path.to_string(),
                    None => format!("Findings are consistent with {l}."),
                });
            }
            if sentences.is_empty() {
                sentences.push(NOT_AVAILABLE.into());
            }
        }
        sentences.dedup();
        Ok(sentences.join(" "))
    }
}

/// POSTs `{"prompt": ...}` to `url` and expects `{"text": ...}` back.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub url: String,
    pub timeout: Duration,
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    text: String,
}

impl NarrativeBackend for HttpBackend {
    fn generate(&self, prompt: &str) -> Result<String> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut resp = agent
            .post(&self.url)
            .send_json(HttpRequest { prompt })
            .map_err(|e| Error::BackendUnavailable(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::BackendUnavailable(format!(
                "{}: HTTP {status}",
                self.url
            )));
        }
        let body: HttpResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::BackendMalformedResponse(e.to_string()))?;
        Ok(body.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Template,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub url: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

fn default_timeout_ms() -> u64 {
    10_000
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Template,
            url: None,
            timeout_ms: default_timeout_ms(),
        }
    }
}

impl BackendConfig {
    pub fn build(&self) -> Result<Box<dyn NarrativeBackend>> {
        match self.kind {
            BackendKind::Template => Ok(Box::new(TemplateBackend)),
            BackendKind::Http => {
                let url = self.url.clone().ok_or_else(|| {
                    Error::InvalidConfig("backend.url is required for http".into())
                })?;
                Ok(Box::new(HttpBackend {
                    url,
                    timeout: Duration::from_millis(self.timeout_ms),
                }))
            }
        }
    }
}

fn patient_text(meta: &PatientMeta) -> String {
    let mut parts = Vec::new();
    if let Some(age) = meta.age {
        parts.push(format!("Age: {age} years"));
    }
    if let Some(sex) = meta.sex {
        parts.push(format!("Sex: {sex}"));
    }
    if parts.is_empty() {
        NOT_AVAILABLE.into()
    } else {
        parts.join("; ") + "."
    }
}

/// Builds all six sections; the two narrative ones come from `backend`.
pub fn assemble(
    meta: &PatientMeta,
    features: &WaveformFeatures,
    sel: &DiagnosisSelection,
    backend: &dyn NarrativeBackend,
) -> Result<ReportDoc> {
    let patient_information = patient_text(meta);
    let medical_history = meta
        .history
        .as_deref()
        .map(str::trim)
        .filter(|h| !h.is_empty())
        .unwrap_or(NOT_AVAILABLE)
        .to_string();
    let ecg_data_analysis = features_to_text(features);
    let ddp = render_prompt(sel);
    let diagnosis = if ddp.is_empty() {
        NOT_AVAILABLE.to_string()
    } else {
        ddp.clone()
    };
    let ask = |section| {
        backend.generate(&narrative_prompt(
            section,
            &ecg_data_analysis,
            &ddp,
            &patient_information,
        ))
    };
    let pathological_analysis = ask(NarrativeSection::PathologicalAnalysis)?;
    let recommendations = ask(NarrativeSection::Recommendations)?;
    Ok(ReportDoc {
        patient_information,
        medical_history,
        ecg_data_analysis,
        pathological_analysis,
        diagnosis,
        recommendations,
    })
}

/// Escapes LaTeX special characters in raw text.
pub fn escape_latex(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 8);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\textbackslash{}"),
            '%' | '$' | '&' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            _ => out.push(c),
        }
    }
    out
}

const PREAMBLE: &str = "\\documentclass[11pt]{article}
\\usepackage[utf8]{inputenc}
\\usepackage[T1]{fontenc}
\\usepackage[margin=2.5cm]{geometry}
\\title{Electrocardiogram Report}
\\date{}
\\begin{document}
\\maketitle
";

pub fn render_latex(doc: &ReportDoc) -> String {
    let mut out = String::from(PREAMBLE);
    for (title, body) in doc.sections() {
        out.push_str(&format!("\n\\section{{{title}}}\n{}\n", escape_latex(body)));
    }
    out.push_str("\n\\end{document}\n");
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatexViolation {
    /// Byte offset into the checked string.
    pub offset: usize,
    pub message: String,
}

/// Structural check: balanced braces, matching `\begin`/`\end` pairs and no
/// unescaped `# $ % & ^ _ ~`. Returns every violation found.
pub fn validate_latex(s: &str) -> Vec<LatexViolation> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut braces: Vec<usize> = Vec::new();
    let mut envs: Vec<(String, usize)> = Vec::new();
    let mut i = 0;
    let mut violation = |offset, message: String| out.push(LatexViolation { offset, message });

    let read_group = |from: usize| -> Option<(String, usize)> {
        let rest = s.get(from..)?;
        let rest_trim = rest.trim_start();
        let skipped = rest.len() - rest_trim.len();
        let inner = rest_trim.strip_prefix('{')?;
        let end = inner.find('}')?;
        Some((inner[..end].to_string(), from + skipped + 1 + end + 1))
    };

    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                let start = i;
                i += 1;
                if i >= bytes.len() {
                    violation(start, "dangling backslash".into());
                    break;
                }
                if !bytes[i].is_ascii_alphabetic() {
                    i += 1;
                    continue;
                }
                while i < bytes.len() && bytes[i].is_ascii_alphabetic() {
                    i += 1;
                }
                let name = &s[start + 1..i];
                if name == "begin" || name == "end" {
                    match read_group(i) {
                        Some((env, next)) => {
                            if name == "begin" {
                                envs.push((env, start));
                            } else {
                                match envs.pop() {
                                    Some((open, _)) if open == env => {}
                                    Some((open, _)) => violation(
                                        start,
                                        format!("\\end{{{env}}} closes \\begin{{{open}}}"),
                                    ),
                                    None => {
                                        violation(start, format!("\\end{{{env}}} without \\begin"))
                                    }
                                }
                            }
                            i = next;
                        }
                        None => violation(start, format!("\\{name} without an environment name")),
                    }
                }
            }
            b'{' => {
                braces.push(i);
                i += 1;
            }
            b'}' => {
                if braces.pop().is_none() {
                    violation(i, "unmatched '}'".into());
                }
                i += 1;
            }
            c @ (b'#' | b'$' | b'%' | b'&' | b'^' | b'_' | b'~') => {
                violation(i, format!("unescaped '{}'", c as char));
                i += 1;
            }
            _ => i += 1,
        }
    }
    for open in braces {
        violation(open, "unclosed '{'".into());
    }
    for (env, at) in envs {
        violation(at, format!("\\begin{{{env}}} is never closed"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddp::{select, Group, LabelDef, Taxonomy};

    fn features() -> WaveformFeatures {
        WaveformFeatures {
            rr_ms: 800.0,
            pr_ms: Some(160.0),
            qrs_ms: Some(130.0),
            qt_ms: Some(400.0),
            qtc_ms: Some(447.2),
            p_peak_mv: Some(0.12),
            r_peak_mv: 1.1,
            t_peak_mv: Some(0.3),
            heart_rate_bpm: 75.0,
            n_beats: 12,
        }
    }

    fn fig3_selection() -> DiagnosisSelection {
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
        select(&[0.9, 0.8], &t, 0.5, 0.5).unwrap()
    }

    #[test]
    fn assemble_is_deterministic() {
        let meta = PatientMeta {
            age: Some(63),
            sex: Some(crate::signal_io::Sex::Female),
            history: Some("Hypertension.".into()),
        };
        let a = assemble(&meta, &features(), &fig3_selection(), &TemplateBackend).unwrap();
        let b = assemble(&meta, &features(), &fig3_selection(), &TemplateBackend).unwrap();
        assert_eq!(a, b);
        assert!(a.diagnosis.contains("Sinus rhythm is present"));
        assert_eq!(a.patient_information, "Age: 63 years; Sex: female.");
        assert!(a.pathological_analysis.contains("QRS complex is wide"));
        assert!(a.recommendations.contains("Echocardiography"));
    }

    #[test]
    fn missing_meta_is_not_available() {
        let d = assemble(
            &PatientMeta::default(),
            &features(),
            &fig3_selection(),
            &TemplateBackend,
        )
        .unwrap();
        assert_eq!(d.patient_information, NOT_AVAILABLE);
        assert_eq!(d.medical_history, NOT_AVAILABLE);
    }

    #[test]
    fn template_sinus_rhythm_sentence() {
        let p = narrative_prompt(
            NarrativeSection::PathologicalAnalysis,
            "",
            "Sinus rhythm is present.",
            "",
        );
        assert!(TemplateBackend
            .generate(&p)
            .unwrap()
            .contains("sinus rhythm"));
    }

    #[test]
    fn escaping() {
        assert_eq!(escape_latex("50% stenosis"), "50\\% stenosis");
        assert_eq!(
            escape_latex("a_b {c} #1 $2 & ~^\\"),
            "a\\_b \\{c\\} \\#1 \\$2 \\& \\textasciitilde{}\\textasciicircum{}\\textbackslash{}"
        );
        let doc = ReportDoc {
            pathological_analysis: "50% stenosis".into(),
            ..Default::default()
        };
        assert!(render_latex(&doc).contains("50\\% stenosis"));
    }

    #[test]
    fn empty_doc_skeleton() {
        let doc = ReportDoc {
            patient_information: String::new(),
            medical_history: String::new(),
            ecg_data_analysis: String::new(),
            pathological_analysis: String::new(),
            diagnosis: String::new(),
            recommendations: String::new(),
        };
        let tex = render_latex(&doc);
        assert_eq!(tex.matches("\\section{").count(), 6);
        assert!(validate_latex(&tex).is_empty());
    }

    #[test]
    fn validator_cases() {
        assert!(!validate_latex("text }").is_empty());
        assert!(!validate_latex("{open").is_empty());
        assert!(!validate_latex("50% off").is_empty());
        assert!(validate_latex("50\\% off").is_empty());
        let nested = "\\begin{document}\\begin{itemize}\\item {a}\\end{itemize}\\end{document}";
        assert!(validate_latex(nested).is_empty());
        let crossed = "\\begin{document}\\begin{itemize}\\end{document}\\end{itemize}";
        assert_eq!(validate_latex(crossed).len(), 2);
        assert_eq!(validate_latex("\\begin{center}").len(), 1);
    }

    #[test]
    fn http_config_requires_url() {
        let cfg = BackendConfig {
            kind: BackendKind::Http,
            ..Default::default()
        };
        assert!(cfg.build().is_err());
    }
}
