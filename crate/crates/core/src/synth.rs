//! Synthetic 12-lead ECG generator with known wave timings.
//!
//! Each beat is a sum of Gaussian bumps (P, Q, R, S, T) placed relative to the
//! R time. Lead II carries the waves at unit gain, so the generator parameters
//! are the ground truth for delineation on lead II. QT follows a Bazett-normal
//! 400 ms at 60 bpm so that the T wave moves with the rate.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::signal_io::{EcgRecord, N_LEADS};

const LEAD_GAINS: [f64; N_LEADS] = [0.8, 1.0, 0.4, -0.9, 0.3, 0.7, -0.5, 0.2, 0.6, 0.9, 1.0, 0.8];

const Q_OFFSET_MS: f64 = 22.0;
const Q_SIGMA_MS: f64 = 6.0;
const R_SIGMA_MS: f64 = 9.0;
const S_OFFSET_MS: f64 = 22.0;
const S_SIGMA_MS: f64 = 6.0;
const P_SIGMA_MS: f64 = 20.0;
const T_SIGMA_MS: f64 = 40.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub heart_rate_bpm: f64,
    pub fs: u32,
    pub duration_s: f64,
    /// Time of the first R peak.
    pub first_beat_s: f64,
    /// P peak amplitude, or `None` for beats without atrial activity.
    pub p_amp_mv: Option<f64>,
    /// Distance from the P peak to the R peak.
    pub p_to_r_ms: f64,
    pub r_amp_mv: f64,
    pub t_amp_mv: f64,
    /// QT at 60 bpm; scaled with sqrt(RR).
    pub qt60_ms: f64,
    pub noise_mv: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 60.0,
            fs: 500,
            duration_s: 10.0,
            first_beat_s: 0.5,
            p_amp_mv: Some(0.12),
            p_to_r_ms: 160.0,
            r_amp_mv: 1.0,
            t_amp_mv: 0.3,
            qt60_ms: 400.0,
            noise_mv: 0.0,
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn at_rate(heart_rate_bpm: f64) -> Self {
        Self {
            heart_rate_bpm,
            ..Self::default()
        }
    }

    pub fn rr_ms(&self) -> f64 {
        60_000.0 / self.heart_rate_bpm
    }
}

/// Ground truth implied by a [`SynthParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beat_times_s: Vec<f64>,
    pub rr_ms: f64,
    pub heart_rate_bpm: f64,
    /// P onset to QRS onset; onsets and offsets of Gaussian waves sit at 2σ
    /// (P, T) and 3σ (Q, S) from the bump centre.
    pub pr_ms: Option<f64>,
    pub qrs_ms: f64,
    pub qt_ms: f64,
    pub qtc_ms: f64,
    pub p_peak_offset_ms: Option<f64>,
    pub p_onset_offset_ms: Option<f64>,
    pub p_amp_mv: Option<f64>,
    pub r_amp_mv: f64,
    pub t_amp_mv: f64,
}

impl GroundTruth {
    pub fn r_indices(&self, fs: u32) -> Vec<usize> {
        self.beat_times_s
            .iter()
            .map(|t| (t * fs as f64).round() as usize)
            .collect()
    }
}

fn gaussian(t: f64, center: f64, sigma: f64) -> f64 {
    let z = (t - center) / sigma;
    (-0.5 * z * z).exp()
}

pub fn ground_truth(p: &SynthParams) -> GroundTruth {
    let rr_ms = p.rr_ms();
    let mut beat_times_s = Vec::new();
    let mut t = p.first_beat_s;
    while t < p.duration_s {
        beat_times_s.push(t);
        t += rr_ms / 1000.0;
    }
    let qrs_onset = -(Q_OFFSET_MS + 3.0 * Q_SIGMA_MS);
    let qrs_offset = S_OFFSET_MS + 3.0 * S_SIGMA_MS;
    let qt_ms = p.qt60_ms * (rr_ms / 1000.0).sqrt();
    let p_onset = p.p_amp_mv.map(|_| -(p.p_to_r_ms + 2.0 * P_SIGMA_MS));
    GroundTruth {
        beat_times_s,
        rr_ms,
        heart_rate_bpm: p.heart_rate_bpm,
        pr_ms: p_onset.map(|on| qrs_onset - on),
        qrs_ms: qrs_offset - qrs_onset,
        qt_ms,
        qtc_ms: qt_ms / (rr_ms / 1000.0).sqrt(),
        p_peak_offset_ms: p.p_amp_mv.map(|_| -p.p_to_r_ms),
        p_onset_offset_ms: p_onset,
        p_amp_mv: p.p_amp_mv,
        r_amp_mv: p.r_amp_mv,
        t_amp_mv: p.t_amp_mv,
    }
}

/// Lead-II waveform value at time `t_ms` relative to an R peak.
fn beat_value(p: &SynthParams, truth: &GroundTruth, t_ms: f64) -> f64 {
    let mut v = p.r_amp_mv * gaussian(t_ms, 0.0, R_SIGMA_MS)
        - 0.12 * p.r_amp_mv * gaussian(t_ms, -Q_OFFSET_MS, Q_SIGMA_MS)
        - 0.25 * p.r_amp_mv * gaussian(t_ms, S_OFFSET_MS, S_SIGMA_MS);
    if let Some(amp) = p.p_amp_mv {
        v += amp * gaussian(t_ms, -p.p_to_r_ms, P_SIGMA_MS);
    }
    let qrs_onset = -(Q_OFFSET_MS + 3.0 * Q_SIGMA_MS);
    let t_center = qrs_onset + truth.qt_ms - 2.0 * T_SIGMA_MS;
    v + p.t_amp_mv * gaussian(t_ms, t_center, T_SIGMA_MS)
}

pub fn generate(p: &SynthParams) -> (EcgRecord, GroundTruth) {
    let truth = ground_truth(p);
    let n = (p.duration_s * p.fs as f64).round() as usize;
    let mut lead_ii = vec![0.0f64; n];
    let reach_ms = 700.0;
    for &beat in &truth.beat_times_s {
        let lo = ((beat - reach_ms / 1000.0) * p.fs as f64).floor().max(0.0) as usize;
        let hi = (((beat + reach_ms / 1000.0) * p.fs as f64).ceil() as usize).min(n);
        for (i, slot) in lead_ii.iter_mut().enumerate().take(hi).skip(lo) {
            let t_ms = (i as f64 / p.fs as f64 - beat) * 1000.0;
            *slot += beat_value(p, &truth, t_ms);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_mv.max(0.0)).expect("finite std");
    let mut signal = Array2::<f32>::zeros((N_LEADS, n));
    for (lead, gain) in LEAD_GAINS.iter().enumerate() {
        for i in 0..n {
            let eps = if p.noise_mv > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            signal[[lead, i]] = (gain * lead_ii[i] + eps) as f32;
        }
    }
    let record = EcgRecord::new(format!("synth-{}", p.seed), signal, p.fs).expect("12 leads");
    (record, truth)
}

/// Base rhythm statement a cardiologist would write for a rate.
pub fn rhythm_statement(heart_rate_bpm: f64) -> &'static str {
    if heart_rate_bpm < 60.0 {
        "sinus bradycardia."
    } else if heart_rate_bpm > 100.0 {
        "sinus tachycardia."
    } else {
        "sinus rhythm."
    }
}

/// Randomized synthetic parameters for building toy training corpora.
pub fn random_params(seed: u64) -> SynthParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ec90);
    let has_p = rng.random_bool(0.85);
    SynthParams {
        heart_rate_bpm: rng.random_range(45.0..130.0),
        first_beat_s: rng.random_range(0.3..0.9),
        p_amp_mv: has_p.then(|| rng.random_range(0.06..0.25)),
        p_to_r_ms: rng.random_range(130.0..200.0),
        r_amp_mv: rng.random_range(0.5..1.8),
        t_amp_mv: rng.random_range(0.1..0.5),
        qt60_ms: rng.random_range(360.0..450.0),
        noise_mv: 0.01,
        seed,
        ..SynthParams::default()
    }
}
