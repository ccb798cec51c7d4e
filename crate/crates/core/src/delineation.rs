//! Beat detection and wave delineation on lead II, plus the waveform text
//! appended to reports before contrastive training.
//!
//! R peaks come from a Pan-Tompkins style chain: 5-15 Hz band-pass built from
//! two second-order Butterworth sections, five-point derivative, squaring,
//! a 150 ms moving-window integral and an adaptive dual threshold with a
//! 200 ms refractory period and search-back. Waves are then delineated per
//! beat with windowed extrema and walk-outs, and intervals are reduced across
//! beats by the median.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{EcgRecord, LEAD_II};

const REFRACTORY_MS: f64 = 200.0;
const MWI_MS: f64 = 150.0;
const T_WAVE_GUARD_MS: f64 = 360.0;
const P_SEARCH_MS: (f64, f64) = (-300.0, -100.0);
const T_SEARCH_MS: (f64, f64) = (100.0, 450.0);
const QRS_MAX_HALF_MS: f64 = 120.0;
const WAVE_MAX_HALF_MS: f64 = 200.0;
const WALKOUT_FRACTION: f64 = 0.1;
const MIN_WAVE_MV: f64 = 0.03;

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

/// Direct-form I biquad.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn butterworth(cutoff_hz: f64, fs: f64, highpass: bool) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / std::f64::consts::SQRT_2;
        let a0 = 1.0 + alpha;
        let b = if highpass {
            [(1.0 + cos) / 2.0, -(1.0 + cos), (1.0 + cos) / 2.0]
        } else {
            [(1.0 - cos) / 2.0, 1.0 - cos, (1.0 - cos) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[0] * y1
                    - self.a[1] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

fn bandpass(x: &[f64], fs: f64) -> Vec<f64> {
    let hp = Biquad::butterworth(5.0, fs, true).apply(x);
    Biquad::butterworth(15.0, fs, false).apply(&hp)
}

fn five_point_derivative(x: &[f64], fs: f64) -> Vec<f64> {
    let at = |i: isize| if i < 0 { 0.0 } else { x[i as usize] };
    (0..x.len() as isize)
        .map(|n| (2.0 * at(n) + at(n - 1) - at(n - 3) - 2.0 * at(n - 4)) * fs / 8.0)
        .collect()
}

fn moving_window_integral(x: &[f64], width: usize) -> Vec<f64> {
    let width = width.max(1);
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        acc += x[i];
        if i >= width {
            acc -= x[i - width];
        }
        out.push(acc / width as f64);
    }
    out
}

pub(crate) fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Detects R peaks and returns their sample indices, strictly increasing and
/// at least 200 ms apart.
pub fn detect_r_peaks(lead_ii: &[f64], fs: f64) -> Result<Vec<usize>> {
    if fs < 100.0 {
        return Err(Error::NoBeatsDetected(format!(
            "sampling rate {fs} Hz is below 100 Hz"
        )));
    }
    if (lead_ii.len() as f64) < 2.0 * fs {
        return Err(Error::NoBeatsDetected("less than 2 s of signal".into()));
    }
    let filtered = bandpass(lead_ii, fs);
    let deriv = five_point_derivative(&filtered, fs);
    let squared: Vec<f64> = deriv.iter().map(|d| d * d).collect();
    let mwi = moving_window_integral(&squared, ms_to_samples(MWI_MS, fs));

    let refractory = ms_to_samples(REFRACTORY_MS, fs);
    let t_guard = ms_to_samples(T_WAVE_GUARD_MS, fs);
    let slope_span = ms_to_samples(75.0, fs).max(1);
    let max_slope_before = |i: usize| {
        deriv[i.saturating_sub(slope_span)..=i]
            .iter()
            .fold(0.0f64, |m, d| m.max(d.abs()))
    };

    let learn = (2.0 * fs) as usize;
    let learn_max = mwi[..learn].iter().cloned().fold(0.0, f64::max);
    if learn_max <= 0.0 && mwi.iter().all(|&v| v <= 0.0) {
        return Err(Error::NoBeatsDetected("signal has no energy".into()));
    }
    let mut spki = 0.25 * mwi.iter().cloned().fold(0.0, f64::max).max(learn_max);
    let mut npki = 0.5 * mwi[..learn].iter().sum::<f64>() / learn as f64;

    // (index into mwi, value, max slope)
    let mut qrs: Vec<(usize, f64, f64)> = Vec::new();
    let mut noise_since_last: Vec<(usize, f64, f64)> = Vec::new();
    let mut rr_recent: Vec<usize> = Vec::new();

    for i in 1..mwi.len().saturating_sub(1) {
        let v = mwi[i];
        if !(v > mwi[i - 1] && v >= mwi[i + 1]) || v <= 0.0 {
            continue;
        }
        let threshold1 = npki + 0.25 * (spki - npki);
        let slope = max_slope_before(i);

        if let Some(&(last_i, last_v, last_slope)) = qrs.last() {
            if i - last_i < refractory {
                if v > last_v {
                    *qrs.last_mut().unwrap() = (i, v, slope.max(last_slope));
                }
                continue;
            }
            if v > threshold1 && i - last_i < t_guard && slope < 0.5 * last_slope {
                npki = 0.125 * v + 0.875 * npki;
                continue;
            }
        }

        if v > threshold1 {
            if let Some(&(last_i, ..)) = qrs.last() {
                rr_recent.push(i - last_i);
                if rr_recent.len() > 8 {
                    rr_recent.remove(0);
                }
            }
            spki = 0.125 * v + 0.875 * spki;
            qrs.push((i, v, slope));
            noise_since_last.clear();
        } else {
            npki = 0.125 * v + 0.875 * npki;
            noise_since_last.push((i, v, slope));
            // Search back for a missed beat.
            if let Some(&(last_i, ..)) = qrs.last() {
                if rr_recent.len() >= 2 {
                    let rr_avg = rr_recent.iter().sum::<usize>() as f64 / rr_recent.len() as f64;
                    if (i - last_i) as f64 > 1.66 * rr_avg {
                        let threshold2 = 0.5 * threshold1;
                        let best = noise_since_last
                            .iter()
                            .filter(|(j, nv, _)| *j >= last_i + refractory && *nv > threshold2)
                            .max_by(|a, b| a.1.total_cmp(&b.1))
                            .copied();
                        if let Some(found) = best {
                            spki = 0.25 * found.1 + 0.75 * spki;
                            rr_recent.push(found.0 - last_i);
                            if rr_recent.len() > 8 {
                                rr_recent.remove(0);
                            }
                            qrs.push(found);
                            noise_since_last.retain(|(j, ..)| *j > found.0);
                        }
                    }
                }
            }
        }
    }

    // Locate the R peak on the raw lead near each integrator peak.
    let back = ms_to_samples(250.0, fs);
    let fwd = ms_to_samples(50.0, fs);
    let mut peaks: Vec<usize> = Vec::with_capacity(qrs.len());
    for &(i, ..) in &qrs {
        let lo = i.saturating_sub(back);
        let hi = (i + fwd).min(lead_ii.len() - 1);
        let base = local_baseline(lead_ii, i, fs);
        let r = (lo..=hi)
            .max_by(|&a, &b| {
                (lead_ii[a] - base)
                    .abs()
                    .total_cmp(&(lead_ii[b] - base).abs())
                    .then(b.cmp(&a))
            })
            .unwrap();
        match peaks.last() {
            Some(&prev) if r <= prev || r - prev < refractory => {
                let prev_base = local_baseline(lead_ii, prev, fs);
                if (lead_ii[r] - base).abs() > (lead_ii[prev] - prev_base).abs() && r > prev {
                    *peaks.last_mut().unwrap() = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    // A replacement can pull a peak closer to its predecessor.
    let mut cleaned: Vec<usize> = Vec::with_capacity(peaks.len());
    for r in peaks {
        match cleaned.last() {
            Some(&prev) if r - prev < refractory => {}
            _ => cleaned.push(r),
        }
    }
    if cleaned.len() < 2 {
        return Err(Error::NoBeatsDetected(format!(
            "found {} R peak(s), need at least 2",
            cleaned.len()
        )));
    }
    Ok(cleaned)
}

/// Median of the lead within ±500 ms of `center`; only used to rank
/// candidate R locations.
fn local_baseline(x: &[f64], center: usize, fs: f64) -> f64 {
    let half = ms_to_samples(500.0, fs);
    let lo = center.saturating_sub(half);
    let hi = (center + half + 1).min(x.len());
    let mut window = x[lo..hi].to_vec();
    median(&mut window).unwrap_or(0.0)
}

fn centered_mean(x: &[f64], half: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let a = i.saturating_sub(half);
            let b = (i + half + 1).min(x.len());
            x[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect()
}

/// Isoelectric level of one beat: mean of the flattest 30 ms stretch of the
/// (10 ms smoothed) lead between 250 ms and 50 ms before R.
fn isoelectric_level(x: &[f64], r: usize, fs: f64) -> f64 {
    let width = ms_to_samples(30.0, fs).max(2);
    let smooth_half = ms_to_samples(5.0, fs);
    let hi = r.saturating_sub(ms_to_samples(50.0, fs));
    let lo = r.saturating_sub(ms_to_samples(250.0, fs));
    if hi < lo + width {
        return local_baseline(x, r, fs);
    }
    let smoothed: Vec<f64> = (lo..hi)
        .map(|i| {
            let a = i.saturating_sub(smooth_half);
            let b = (i + smooth_half + 1).min(x.len());
            x[a..b].iter().sum::<f64>() / (b - a) as f64
        })
        .collect();
    let best = (0..=smoothed.len() - width)
        .min_by(|&a, &b| {
            let tv = |s: usize| {
                smoothed[s..s + width]
                    .windows(2)
                    .map(|w| (w[1] - w[0]).abs())
                    .sum::<f64>()
            };
            tv(a).total_cmp(&tv(b))
        })
        .unwrap();
    let start = lo + best;
    x[start..start + width].iter().sum::<f64>() / width as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Wave {
    pub onset: usize,
    pub peak: usize,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beat {
    pub r: usize,
    /// Isoelectric level used for amplitudes of this beat.
    pub baseline: f64,
    pub p: Option<Wave>,
    pub qrs: Option<Wave>,
    pub t: Option<Wave>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeatAnnotations {
    pub fs: f64,
    pub n_samples: usize,
    pub beats: Vec<Beat>,
}

impl BeatAnnotations {
    pub fn r_indices(&self) -> Vec<usize> {
        self.beats.iter().map(|b| b.r).collect()
    }
}

/// Finds the interior extremum of `rel` within `[lo, hi]`; `None` when the
/// largest deviation sits on the window edge or is too small.
fn windowed_extremum(rel: &[f64], lo: usize, hi: usize, min_amp: f64) -> Option<usize> {
    if hi <= lo + 4 {
        return None;
    }
    let peak = (lo..=hi).max_by(|&a, &b| rel[a].abs().total_cmp(&rel[b].abs()).then(b.cmp(&a)))?;
    if peak <= lo + 1 || peak + 1 >= hi || rel[peak].abs() < min_amp {
        return None;
    }
    Some(peak)
}

/// Walks from `peak` forward or backward until the deviation drops below
/// `WALKOUT_FRACTION` of the peak, or bottoms out in a valley below half the
/// peak (an overlapping neighbour wave). `None` when `limit` is reached first.
fn walk_out(rel: &[f64], peak: usize, forward: bool, limit: usize) -> Option<usize> {
    let amp = rel[peak].abs();
    let thr = WALKOUT_FRACTION * amp;
    let mut i = peak;
    for _ in 0..=limit {
        let next = if forward {
            (i + 1 < rel.len()).then_some(i + 1)
        } else {
            i.checked_sub(1)
        };
        let v = rel[i].abs();
        if v < thr {
            return Some(i);
        }
        let next = next?;
        if v < 0.5 * amp && rel[next].abs() > v {
            return Some(i);
        }
        i = next;
    }
    None
}

/// Slope-and-amplitude walk away from R until the signal is flat and near
/// baseline.
fn qrs_bound(rel: &[f64], r: usize, fs: f64, forward: bool) -> Option<usize> {
    let h = ms_to_samples(8.0, fs).max(1);
    let slope = |i: usize| -> f64 {
        let lo = i.saturating_sub(h);
        let hi = (i + h).min(rel.len() - 1);
        (rel[hi] - rel[lo]) / (hi - lo).max(1) as f64
    };
    let reach = ms_to_samples(60.0, fs);
    let lo = r.saturating_sub(reach);
    let hi = (r + reach).min(rel.len() - 1);
    let max_slope = (lo..=hi).map(|i| slope(i).abs()).fold(0.0, f64::max);
    let amp_thr = 0.02 * rel[r].abs();
    let slope_thr = 0.02 * max_slope;
    let limit = ms_to_samples(QRS_MAX_HALF_MS, fs);
    let mut i = r;
    for _ in 0..limit {
        let next = if forward {
            if i + 1 >= rel.len() {
                return None;
            }
            i + 1
        } else {
            i.checked_sub(1)?
        };
        i = next;
        if rel[i].abs() < amp_thr && slope(i).abs() < slope_thr {
            return Some(i);
        }
    }
    None
}

/// Delineates P, QRS and T around each R peak. Waves that cannot be found
/// are left as `None` rather than guessed.
pub fn delineate(lead_ii: &[f64], fs: f64, r_indices: &[usize]) -> BeatAnnotations {
    let n = lead_ii.len();
    let at = |ms: f64| ms_to_samples(ms.abs(), fs);
    let mut beats: Vec<Beat> = Vec::with_capacity(r_indices.len());

    for (k, &r) in r_indices.iter().enumerate() {
        let baseline = isoelectric_level(lead_ii, r, fs);
        let rel: Vec<f64> = lead_ii.iter().map(|v| v - baseline).collect();
        let smooth = centered_mean(&rel, ms_to_samples(5.0, fs));
        let min_amp = MIN_WAVE_MV.max(0.02 * rel[r].abs());

        let qrs = match (qrs_bound(&rel, r, fs, false), qrs_bound(&rel, r, fs, true)) {
            (Some(onset), Some(offset)) => Some(Wave {
                onset,
                peak: r,
                offset,
            }),
            _ => None,
        };

        let t = {
            let lo = r + at(T_SEARCH_MS.0);
            let mut hi = r + at(T_SEARCH_MS.1);
            if let Some(&next) = r_indices.get(k + 1) {
                hi = hi.min(next.saturating_sub(at(200.0)));
            }
            if lo >= n {
                None
            } else {
                let hi = hi.min(n - 1);
                windowed_extremum(&rel, lo, hi, min_amp).and_then(|peak| {
                    let limit = at(WAVE_MAX_HALF_MS);
                    let onset = walk_out(&smooth, peak, false, limit)?;
                    let offset = walk_out(&smooth, peak, true, limit)?;
                    Some(Wave {
                        onset,
                        peak,
                        offset,
                    })
                })
            }
        };

        let p = {
            let hi = r.checked_sub(at(P_SEARCH_MS.1));
            let mut lo = r.saturating_sub(at(P_SEARCH_MS.0));
            if let Some(prev) = beats.last() {
                let guard = prev
                    .t
                    .map(|w| w.offset)
                    .unwrap_or(prev.r + at(T_SEARCH_MS.0));
                lo = lo.max(guard);
            }
            hi.and_then(|hi| {
                let peak = windowed_extremum(&rel, lo, hi, min_amp)?;
                let limit = at(WAVE_MAX_HALF_MS);
                let onset = walk_out(&smooth, peak, false, limit)?;
                let offset = walk_out(&smooth, peak, true, limit)?;
                Some(Wave {
                    onset,
                    peak,
                    offset,
                })
            })
        };

        beats.push(Beat {
            r,
            baseline,
            p,
            qrs,
            t,
        });
    }
    BeatAnnotations {
        fs,
        n_samples: n,
        beats,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformFeatures {
    pub rr_ms: f64,
    pub pr_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qtc_ms: Option<f64>,
    pub p_peak_mv: Option<f64>,
    pub r_peak_mv: f64,
    pub t_peak_mv: Option<f64>,
    pub heart_rate_bpm: f64,
    pub n_beats: usize,
}

/// Bazett-corrected QT, `QT / sqrt(RR in seconds)`.
pub fn bazett_qtc(qt_ms: f64, rr_ms: f64) -> f64 {
    qt_ms * (1000.0 / rr_ms).sqrt()
}

pub fn measure(ann: &BeatAnnotations, lead_ii: &[f64]) -> Result<WaveformFeatures> {
    if ann.beats.len() < 2 {
        return Err(Error::NoBeatsDetected(format!(
            "{} annotated beat(s), need at least 2",
            ann.beats.len()
        )));
    }
    let to_ms = |samples: usize| samples as f64 * 1000.0 / ann.fs;
    let mut rr: Vec<f64> = ann
        .beats
        .windows(2)
        .map(|w| to_ms(w[1].r - w[0].r))
        .collect();
    let rr_ms = median(&mut rr).expect("at least one RR");

    let collect = |f: &dyn Fn(&Beat) -> Option<f64>| -> Option<f64> {
        let mut v: Vec<f64> = ann.beats.iter().filter_map(f).collect();
        median(&mut v)
    };
    let pr_ms = collect(&|b| match (b.p, b.qrs) {
        (Some(p), Some(q)) if q.onset > p.onset => Some(to_ms(q.onset - p.onset)),
        _ => None,
    });
    let qrs_ms = collect(&|b| b.qrs.map(|q| to_ms(q.offset - q.onset)));
    let qt_ms = collect(&|b| match (b.qrs, b.t) {
        (Some(q), Some(t)) if t.offset > q.onset => Some(to_ms(t.offset - q.onset)),
        _ => None,
    });
    let amp = |i: usize, b: &Beat| lead_ii[i] - b.baseline;
    let p_peak_mv = collect(&|b| b.p.map(|w| amp(w.peak, b)));
    let t_peak_mv = collect(&|b| b.t.map(|w| amp(w.peak, b)));
    let r_peak_mv = collect(&|b| Some(amp(b.r, b))).expect("beats present");

    Ok(WaveformFeatures {
        rr_ms,
        pr_ms,
        qrs_ms,
        qt_ms,
        qtc_ms: qt_ms.map(|qt| bazett_qtc(qt, rr_ms)),
        p_peak_mv,
        r_peak_mv,
        t_peak_mv,
        heart_rate_bpm: 60_000.0 / rr_ms,
        n_beats: ann.beats.len(),
    })
}

/// Full chain on lead II of a record.
pub fn extract_features(record: &EcgRecord) -> Result<WaveformFeatures> {
    let lead = record.lead(LEAD_II);
    let fs = record.fs as f64;
    let r = detect_r_peaks(&lead, fs)?;
    let ann = delineate(&lead, fs, &r);
    measure(&ann, &lead)
}

fn fmt_ms(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{}", v.round_ties_even() as i64),
        None => "n/a".to_string(),
    }
}

fn fmt_mv(v: Option<f64>) -> String {
    match v {
        Some(v) => {
            let s = format!("{v:.2}");
            if s == "-0.00" {
                "0.00".into()
            } else {
                s
            }
        }
        None => "n/a".to_string(),
    }
}

/// Canonical waveform sentence; intervals as whole milliseconds (ties to
/// even) and amplitudes with two decimals.
pub fn features_to_text(f: &WaveformFeatures) -> String {
    let unit = |s: String, u: &str| if s == "n/a" { s } else { format!("{s} {u}") };
    let qt_pair = match (f.qt_ms, f.qtc_ms) {
        (None, None) => "n/a".to_string(),
        (qt, qtc) => format!("{}/{} ms", fmt_ms(qt), fmt_ms(qtc)),
    };
    format!(
        "RR interval: {}; PR interval: {}; QRS duration: {}; QT/QTc interval: {}; \
         P wave peak: {}; R wave peak: {}; T wave peak: {}.",
        unit(fmt_ms(Some(f.rr_ms)), "ms"),
        unit(fmt_ms(f.pr_ms), "ms"),
        unit(fmt_ms(f.qrs_ms), "ms"),
        qt_pair,
        unit(fmt_mv(f.p_peak_mv), "mV"),
        unit(fmt_mv(Some(f.r_peak_mv)), "mV"),
        unit(fmt_mv(f.t_peak_mv), "mV"),
    )
}

/// Appends the waveform sentence to a report, separated by one space.
pub fn augment_report(report: &str, f: &WaveformFeatures) -> Result<String> {
    let report = report.trim_end();
    if report.trim().is_empty() {
        return Err(Error::EmptyReport);
    }
    Ok(format!("{report} {}", features_to_text(f)))
}
