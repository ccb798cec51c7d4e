//! Loading, sanitizing and standardizing 12-lead ECG records.
//!
//! Two on-disk record formats are supported:
//!
//! * **CSV**: one header line of comma-separated `key=value` pairs that must
//!   contain `fs=<int>` (optional keys: `id`, `age`, `sex`, `history`),
//!   followed by one row per sample with 12 comma-separated lead values in
//!   millivolts. Literal `NAN`/`nan`/`inf`/`-inf` cells are accepted.
//! * **Binary**: magic `ECG1`, then little-endian `u32` lead count, `u32`
//!   sampling rate, `u32` sample count, then `leads * samples` `f32` values
//!   stored lead-major.
//!
//! Dataset manifests are JSON-lines files with one entry per line.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_LEADS: usize = 12;
pub const DEFAULT_FS: u32 = 500;
pub const DEFAULT_DURATION_S: u32 = 10;
/// Index of lead II in the standard I, II, III, aVR, aVL, aVF, V1..V6 order.
pub const LEAD_II: usize = 1;

const BIN_MAGIC: &[u8; 4] = b"ECG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Other,
}

impl std::str::FromStr for Sex {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m" | "male" => Ok(Sex::Male),
            "f" | "female" => Ok(Sex::Female),
            "o" | "other" => Ok(Sex::Other),
            other => Err(Error::MalformedRecord(format!("unknown sex {other:?}"))),
        }
    }
}

impl std::fmt::Display for Sex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<String>,
}

impl PatientMeta {
    pub fn is_empty(&self) -> bool {
        self.age.is_none() && self.sex.is_none() && self.history.is_none()
    }
}

/// A 12-lead recording in millivolts, `signal[[lead, sample]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub signal: Array2<f32>,
    pub fs: u32,
    pub meta: PatientMeta,
}

impl EcgRecord {
    pub fn new(id: impl Into<String>, signal: Array2<f32>, fs: u32) -> Result<Self> {
        if signal.nrows() != N_LEADS {
            return Err(Error::MalformedRecord(format!(
                "expected {N_LEADS} leads, got {}",
                signal.nrows()
            )));
        }
        if fs == 0 {
            return Err(Error::MalformedRecord(
                "sampling rate must be positive".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            signal,
            fs,
            meta: PatientMeta::default(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.signal.ncols()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_samples() as f64 / self.fs as f64
    }

    /// True when any sample is NaN or infinite.
    pub fn is_dirty(&self) -> bool {
        self.signal.iter().any(|v| !v.is_finite())
    }

    pub fn lead(&self, lead: usize) -> Vec<f64> {
        self.signal.row(lead).iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    Csv,
    Bin,
}

impl RecordFormat {
    /// Picks the format from a file extension (`.csv` or `.bin`/`.ecg`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "csv" => Some(RecordFormat::Csv),
            "bin" | "ecg" => Some(RecordFormat::Bin),
            _ => None,
        }
    }
}

impl std::str::FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(RecordFormat::Csv),
            "bin" => Ok(RecordFormat::Bin),
            other => Err(Error::MalformedRecord(format!(
                "unknown record format {other:?}"
            ))),
        }
    }
}

fn record_id_from_path(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("record")
        .to_string()
}

pub fn load_record(path: &Path, format: RecordFormat) -> Result<EcgRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut record = match format {
        RecordFormat::Csv => {
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::MalformedRecord("csv is not valid utf-8".into()))?;
            parse_csv(&text)?
        }
        RecordFormat::Bin => parse_bin(&bytes)?,
    };
    if record.id.is_empty() {
        record.id = record_id_from_path(path);
    }
    Ok(record)
}

/// Loads with the format inferred from the extension.
pub fn load_record_auto(path: &Path) -> Result<EcgRecord> {
    let format = RecordFormat::from_path(path).ok_or_else(|| {
        Error::MalformedRecord(format!("cannot infer record format of {}", path.display()))
    })?;
    load_record(path, format)
}

fn parse_cell(cell: &str) -> Option<f32> {
    let cell = cell.trim();
    match cell.to_ascii_lowercase().as_str() {
        "nan" | "+nan" | "-nan" => Some(f32::NAN),
        "inf" | "+inf" | "infinity" | "+infinity" => Some(f32::INFINITY),
        "-inf" | "-infinity" => Some(f32::NEG_INFINITY),
        _ => cell.parse::<f32>().ok(),
    }
}

pub fn parse_csv(text: &str) -> Result<EcgRecord> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedRecord("empty csv".into()))?;
    let mut fs = None;
    let mut id = String::new();
    let mut meta = PatientMeta::default();
    for pair in header.split(',') {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::MalformedRecord(format!("bad header field {pair:?}")))?;
        let value = value.trim();
        match key.trim() {
            "fs" => {
                fs =
                    Some(value.parse::<u32>().map_err(|_| {
                        Error::MalformedRecord(format!("bad sampling rate {value:?}"))
                    })?)
            }
            "id" => id = value.to_string(),
            "age" => {
                meta.age = Some(
                    value
                        .parse()
                        .map_err(|_| Error::MalformedRecord(format!("bad age {value:?}")))?,
                )
            }
            "sex" => meta.sex = Some(value.parse()?),
            "history" => meta.history = Some(value.to_string()),
            other => log::debug!("ignoring csv header key {other:?}"),
        }
    }
    let fs = fs.ok_or_else(|| Error::MalformedRecord("header lacks fs=<int>".into()))?;

    let mut columns: Vec<Vec<f32>> = vec![Vec::new(); N_LEADS];
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != N_LEADS {
            return Err(Error::MalformedRecord(format!(
                "row {} has {} columns, expected {N_LEADS}",
                row + 2,
                cells.len()
            )));
        }
        for (lead, cell) in cells.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                Error::MalformedRecord(format!("row {}: cannot parse {cell:?}", row + 2))
            })?;
            columns[lead].push(v);
        }
    }
    let n = columns[0].len();
    let flat: Vec<f32> = columns.into_iter().flatten().collect();
    let signal = Array2::from_shape_vec((N_LEADS, n), flat)
        .map_err(|e| Error::MalformedRecord(e.to_string()))?;
    let mut record = EcgRecord::new(id, signal, fs)?;
    record.meta = meta;
    Ok(record)
}

pub fn parse_bin(bytes: &[u8]) -> Result<EcgRecord> {
    if bytes.len() < 16 || &bytes[..4] != BIN_MAGIC {
        return Err(Error::MalformedRecord("missing ECG1 magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (leads, fs, samples) = (word(4), word(8) as u32, word(12));
    if leads != N_LEADS {
        return Err(Error::MalformedRecord(format!(
            "expected {N_LEADS} leads, got {leads}"
        )));
    }
    let expected = 16 + leads * samples * 4;
    if bytes.len() != expected {
        return Err(Error::MalformedRecord(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let signal = Array2::from_shape_vec((leads, samples), values)
        .map_err(|e| Error::MalformedRecord(e.to_string()))?;
    EcgRecord::new(String::new(), signal, fs)
}

pub fn encode_bin(record: &EcgRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + record.signal.len() * 4);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&(record.signal.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&record.fs.to_le_bytes());
    out.extend_from_slice(&(record.n_samples() as u32).to_le_bytes());
    for v in record.signal.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_csv(record: &EcgRecord) -> String {
    let mut out = format!("fs={}", record.fs);
    if !record.id.is_empty() {
        out.push_str(&format!(",id={}", record.id));
    }
    if let Some(age) = record.meta.age {
        out.push_str(&format!(",age={age}"));
    }
    if let Some(sex) = record.meta.sex {
        out.push_str(&format!(",sex={sex}"));
    }
    if let Some(history) = &record.meta.history {
        out.push_str(&format!(",history={}", history.replace([',', '\n'], " ")));
    }
    out.push('\n');
    for col in record.signal.columns() {
        let row: Vec<String> = col.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes via a temporary sibling file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_record(record: &EcgRecord, path: &Path, format: RecordFormat) -> Result<()> {
    match format {
        RecordFormat::Csv => write_atomic(path, encode_csv(record).as_bytes()),
        RecordFormat::Bin => write_atomic(path, &encode_bin(record)),
    }
}

/// Replaces every NaN and ±inf sample with 0.0; finite samples are untouched.
pub fn sanitize(record: &EcgRecord) -> EcgRecord {
    let mut out = record.clone();
    out.signal
        .mapv_inplace(|v| if v.is_finite() { v } else { 0.0 });
    out
}

/// Brings a record to `target_fs` Hz and exactly `duration_s` seconds.
///
/// Longer inputs keep their first `duration_s` seconds, shorter ones are
/// zero-padded at the tail. Records at another rate are linearly
/// resampled: output sample `j` reads the input at fractional index
/// `j * fs / target_fs`, holds the last sample inside the final input
/// interval and is zero past the end of the input.
pub fn standardize(record: &EcgRecord, target_fs: u32, duration_s: u32) -> Result<EcgRecord> {
    if record.fs == 0 || target_fs == 0 {
        return Err(Error::MalformedRecord(
            "sampling rate must be positive".into(),
        ));
    }
    let n_in = record.n_samples();
    if n_in == 0 {
        return Err(Error::MalformedRecord("zero-length lead".into()));
    }
    let n_out = (target_fs * duration_s) as usize;
    let mut signal = Array2::<f32>::zeros((record.signal.nrows(), n_out));
    if record.fs == target_fs {
        let keep = n_in.min(n_out);
        signal
            .slice_mut(ndarray::s![.., ..keep])
            .assign(&record.signal.slice(ndarray::s![.., ..keep]));
    } else {
        let step = record.fs as f64 / target_fs as f64;
        for j in 0..n_out {
            let pos = j as f64 * step;
            if pos >= n_in as f64 {
                break;
            }
            let lo = pos.floor() as usize;
            let frac = pos - lo as f64;
            for lead in 0..record.signal.nrows() {
                let a = record.signal[[lead, lo]] as f64;
                let v = if lo + 1 < n_in {
                    let b = record.signal[[lead, lo + 1]] as f64;
                    a + (b - a) * frac
                } else {
                    a
                };
                signal[[lead, j]] = v as f32;
            }
        }
    }
    Ok(EcgRecord {
        id: record.id.clone(),
        signal,
        fs: target_fs,
        meta: record.meta.clone(),
    })
}

/// `sanitize` followed by `standardize` to 500 Hz, 10 s.
pub fn preprocess(record: &EcgRecord) -> Result<EcgRecord> {
    standardize(&sanitize(record), DEFAULT_FS, DEFAULT_DURATION_S)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub record_path: String,
    pub report: String,
    #[serde(default)]
    pub labels: Vec<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries serialize") + "\n")
            .collect()
    }
}

pub fn parse_manifest(reader: impl BufRead) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::MalformedManifest {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| Error::MalformedManifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
        if !seen.insert(entry.record_path.clone()) {
            return Err(Error::MalformedManifest {
                line: i + 1,
                reason: format!("duplicate record_path {:?}", entry.record_path),
            });
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        log::warn!("manifest has no entries");
    }
    Ok(DatasetManifest { entries })
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(BufReader::new(f))
}
