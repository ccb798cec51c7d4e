//! Signal augmentations, gradient verification and the training loop.

use std::path::Path;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::delineation::{augment_report, extract_features};
use crate::error::{Error, Result};
use crate::model::{DualEncoder, LossWeights, ModelConfig};
use crate::params::{adamw_step, AdamWConfig, AdamWState, ParamSet};
use crate::signal_io::{load_record_auto, preprocess, DatasetManifest, EcgRecord, Split};
use crate::text::{tokenize, TokenSeq, Vocab, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WanderSpec {
    pub amplitude_mv: f64,
    pub min_freq_hz: f64,
    pub max_freq_hz: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutMixSpec {
    /// Fraction of the record swapped with another batch member.
    pub fraction: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_windows: usize,
    pub window_len: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub wander: WanderSpec,
    pub cutmix: CutMixSpec,
    pub mask: MaskSpec,
}

impl AugmentationSpec {
    /// No augmentation at all.
    pub fn none() -> Self {
        Self {
            wander: WanderSpec {
                prob: 0.0,
                ..Self::default().wander
            },
            cutmix: CutMixSpec {
                prob: 0.0,
                ..Self::default().cutmix
            },
            mask: MaskSpec {
                prob: 0.0,
                ..Self::default().mask
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("wander.prob", self.wander.prob),
            ("cutmix.prob", self.cutmix.prob),
            ("mask.prob", self.mask.prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.cutmix.fraction) {
            return Err(Error::InvalidConfig(
                "cutmix.fraction must be in [0, 0.5]".into(),
            ));
        }
        let w = &self.wander;
        if !(w.min_freq_hz > 0.0 && w.min_freq_hz <= w.max_freq_hz) || w.amplitude_mv < 0.0 {
            return Err(Error::InvalidConfig("invalid wander settings".into()));
        }
        Ok(())
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            wander: WanderSpec {
                amplitude_mv: 0.1,
                min_freq_hz: 0.05,
                max_freq_hz: 0.5,
                prob: 0.5,
            },
            cutmix: CutMixSpec {
                fraction: 0.1,
                prob: 0.25,
            },
            mask: MaskSpec {
                n_windows: 2,
                window_len: 250,
                prob: 0.25,
            },
        }
    }
}

/// Applies wander, then cutmix, then masking. Batch size and shapes are
/// preserved; with every probability at zero the batch is returned as is.
pub fn augment(batch: &[EcgRecord], spec: &AugmentationSpec, seed: u64) -> Vec<EcgRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.to_vec();

    for rec in out.iter_mut() {
        if spec.wander.prob > 0.0 && rng.random::<f64>() < spec.wander.prob {
            let w = &spec.wander;
            let f = rng.random_range(w.min_freq_hz..=w.max_freq_hz);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            let fs = rec.fs as f64;
            let wave: Vec<f32> = (0..rec.n_samples())
                .map(|i| {
                    (w.amplitude_mv * (std::f64::consts::TAU * f * i as f64 / fs + phi).sin())
                        as f32
                })
                .collect();
            for mut lead in rec.signal.rows_mut() {
                lead.iter_mut().zip(&wave).for_each(|(x, w)| *x += w);
            }
        }
    }

    if out.len() >= 2 && spec.cutmix.prob > 0.0 {
        for i in 0..out.len() {
            if rng.random::<f64>() >= spec.cutmix.prob {
                continue;
            }
            let mut j = rng.random_range(0..out.len() - 1);
            if j >= i {
                j += 1;
            }
            let n = out[i].n_samples().min(out[j].n_samples());
            let len = (spec.cutmix.fraction * n as f64).round() as usize;
            if len == 0 {
                continue;
            }
            let start = rng.random_range(0..=n - len);
            let a = out[i].signal.slice(s![.., start..start + len]).to_owned();
            let b = out[j].signal.slice(s![.., start..start + len]).to_owned();
            out[i]
                .signal
                .slice_mut(s![.., start..start + len])
                .assign(&b);
            out[j]
                .signal
                .slice_mut(s![.., start..start + len])
                .assign(&a);
        }
    }

    if spec.mask.prob > 0.0 {
        for rec in out.iter_mut() {
            if rng.random::<f64>() >= spec.mask.prob {
                continue;
            }
            let n = rec.n_samples();
            let len = spec.mask.window_len.min(n);
            for _ in 0..spec.mask.n_windows {
                let start = rng.random_range(0..=n - len);
                rec.signal.slice_mut(s![.., start..start + len]).fill(0.0);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_probes: usize,
    /// Worst coordinate as (tensor index, row, col).
    pub worst: (usize, usize, usize),
}

/// Denominator floor for relative error so exact-zero gradients compare on
/// absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient from `loss_fn` with central differences at
/// `n_probes` coordinates. Probes cycle through tensors so each one is
/// visited; the coordinate inside a tensor is random.
pub fn grad_check<F>(
    mut loss_fn: F,
    params: &ParamSet,
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> (f64, Vec<Array2<f64>>),
{
    let (_, grads) = loss_fn(params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_probes,
        worst: (0, 0, 0),
    };
    for k in 0..n_probes {
        let ti = k % params.len();
        let (rows, cols) = params.get(ti).dim();
        let (r, c) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let orig = params.get(ti)[[r, c]];
        work.get_mut(ti)[[r, c]] = orig + eps;
        let plus = loss_fn(&work).0;
        work.get_mut(ti)[[r, c]] = orig - eps;
        let minus = loss_fn(&work).0;
        work.get_mut(ti)[[r, c]] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let analytic = grads[ti][[r, c]];
        let rel =
            (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (ti, r, c);
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub lambda_con: f64,
    pub lambda_cap: f64,
    pub seed: u64,
    pub aug: AugmentationSpec,
    /// Fraction of the total steps spent on linear warmup.
    pub warmup_frac: f64,
    /// Stops early after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            lr: 1e-4,
            weight_decay: 0.1,
            epochs: 20,
            lambda_con: 1.0,
            lambda_cap: 2.0,
            seed: 0,
            aug: AugmentationSpec::default(),
            warmup_frac: 0.05,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.lambda_con < 0.0 || self.lambda_cap < 0.0 {
            return Err(Error::InvalidConfig(
                "loss weights must be non-negative".into(),
            ));
        }
        if self.weight_decay < 0.0 || !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::InvalidConfig(
                "invalid weight_decay or warmup_frac".into(),
            ));
        }
        self.aug.validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            contrastive: self.lambda_con,
            captioning: self.lambda_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_con: f64,
    pub l_cap: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingPair {
    pub record: EcgRecord,
    pub report: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualEncoder,
    pub vocab: Vocab,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        model_checkpoint(&self.model, &self.vocab, Some(cfg), self.log.len())
    }

    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).expect("log serializes") + "\n")
            .collect()
    }
}

pub const MODEL_KIND: &str = "dual_encoder";

pub fn model_checkpoint(
    model: &DualEncoder,
    vocab: &Vocab,
    cfg: Option<&TrainConfig>,
    steps: usize,
) -> Checkpoint {
    let vocab_json: serde_json::Value =
        serde_json::from_str(&vocab.to_json()).expect("vocab json is valid");
    let mut ckpt = Checkpoint::new(
        MODEL_KIND,
        serde_json::json!({
            "model_config": model.config(),
            "train_config": cfg,
            "steps": steps,
            "vocab": vocab_json,
        }),
    );
    ckpt.tensors = model.tensors();
    ckpt
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

/// Rebuilds the model and vocabulary stored by `model_checkpoint`.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(DualEncoder, Vocab)> {
    if ckpt.kind != MODEL_KIND {
        return Err(Error::CorruptCheckpoint(format!(
            "expected a {MODEL_KIND} checkpoint, found {}",
            ckpt.kind
        )));
    }
    let config: ModelConfig = serde_json::from_value(ckpt.meta["model_config"].clone())
        .map_err(|e| Error::CorruptCheckpoint(format!("model_config: {e}")))?;
    let vocab = Vocab::from_json(&ckpt.meta["vocab"].to_string())?;
    let model = DualEncoder::from_tensors(config, &ckpt.tensors)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    Ok((model, vocab))
}

/// Tokenizes and clips to `max_len`, keeping the closing EOS.
pub fn encode_report(report: &str, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let mut seq = tokenize(report, vocab);
    if seq.len() > max_len {
        log::warn!("report of {} tokens truncated to {max_len}", seq.len());
        seq.ids.truncate(max_len - 1);
        seq.ids.push(EOS);
    }
    seq
}

/// Loads and preprocesses one manifest split. With `wde` the measured
/// waveform description is appended to each report; records where no beats
/// are found keep the plain report.
pub fn load_pairs(
    manifest: &DatasetManifest,
    base_dir: &Path,
    split: Split,
    wde: bool,
) -> Result<Vec<TrainingPair>> {
    let mut out = Vec::new();
    for entry in manifest.split(split) {
        let path = base_dir.join(&entry.record_path);
        let record = preprocess(&load_record_auto(&path)?)?;
        let report = if wde {
            match extract_features(&record) {
                Ok(f) => augment_report(&entry.report, &f)?,
                Err(e) => {
                    log::warn!("{}: no waveform description ({e})", entry.record_path);
                    entry.report.clone()
                }
            }
        } else {
            entry.report.clone()
        };
        out.push(TrainingPair { record, report });
    }
    Ok(out)
}

/// Runs shuffled minibatch AdamW over `pairs`. Deterministic for a given
/// config and input order.
pub fn train(
    cfg: &TrainConfig,
    pairs: &[TrainingPair],
    vocab: &Vocab,
    model_cfg: ModelConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut model_cfg = model_cfg;
    model_cfg.vocab_size = vocab.len();
    let mut model = DualEncoder::new(model_cfg, cfg.seed)?;
    let texts: Vec<TokenSeq> = pairs
        .iter()
        .map(|p| encode_report(&p.report, vocab, model.config().max_text_len))
        .collect();

    let n = pairs.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut total_steps = steps_per_epoch * cfg.epochs;
    if let Some(m) = cfg.max_steps {
        total_steps = total_steps.min(m);
    }
    let warmup = ((total_steps as f64) * cfg.warmup_frac).ceil().max(1.0) as usize;
    let weights = cfg.weights();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_7a11);
    let mut state = AdamWState::new(model.params());
    let mut log = Vec::with_capacity(total_steps);
    let mut order: Vec<usize> = (0..n).collect();

    'outer: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let step = log.len();
            if step >= total_steps {
                break 'outer;
            }
            let batch: Vec<EcgRecord> = chunk.iter().map(|&i| pairs[i].record.clone()).collect();
            let batch = augment(&batch, &cfg.aug, rng.random());
            let recs: Vec<&EcgRecord> = batch.iter().collect();
            let toks: Vec<&TokenSeq> = chunk.iter().map(|&i| &texts[i]).collect();
            let (loss, grads) = model.loss_and_grad(&recs, &toks, weights)?;
            let opt = AdamWConfig {
                lr: cfg.lr * ((step + 1) as f64 / warmup as f64).min(1.0),
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            };
            adamw_step(model.params_mut(), &grads, &mut state, &opt)?;
            log::debug!(
                "epoch {epoch} step {step}: l_con {:.4} l_cap {:?} total {:.4}",
                loss.contrastive.total,
                loss.captioning,
                loss.total
            );
            log.push(StepLog {
                step,
                l_con: loss.contrastive.total,
                l_cap: loss.captioning,
                total: loss.total,
            });
        }
    }
    if !model.params().all_finite() {
        return Err(Error::InvalidConfig(
            "training diverged to non-finite parameters".into(),
        ));
    }
    Ok(TrainOutcome {
        model,
        vocab: vocab.clone(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn zero_record() -> EcgRecord {
        EcgRecord::new("z", Array2::zeros((12, 5000)), 500).unwrap()
    }

    #[test]
    fn zero_probabilities_are_identity() {
        let batch: Vec<_> = (0..3)
            .map(|s| synth::generate(&synth::random_params(s)).0)
            .collect();
        let out = augment(&batch, &AugmentationSpec::none(), 7);
        assert_eq!(out, batch);
    }

    #[test]
    fn full_mask_zeroes_record() {
        let batch = vec![synth::generate(&synth::random_params(1)).0];
        let mut spec = AugmentationSpec::none();
        spec.mask = MaskSpec {
            n_windows: 1,
            window_len: 5000,
            prob: 1.0,
        };
        let out = augment(&batch, &spec, 0);
        assert!(out[0].signal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wander_rms() {
        let a = 0.2;
        let mut spec = AugmentationSpec::none();
        spec.wander = WanderSpec {
            amplitude_mv: a,
            min_freq_hz: 0.5,
            max_freq_hz: 0.5,
            prob: 1.0,
        };
        for seed in 0..5 {
            let out = augment(&[zero_record()], &spec, seed);
            for lead in out[0].signal.rows() {
                let rms = (lead.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 5000.0).sqrt();
                let expect = a / 2f64.sqrt();
                assert!((rms - expect).abs() / expect < 0.02, "{rms}");
            }
        }
    }

    #[test]
    fn cutmix_swaps_segments() {
        let a = EcgRecord::new("a", Array2::from_elem((12, 1000), 1.0), 500).unwrap();
        let b = EcgRecord::new("b", Array2::from_elem((12, 1000), 2.0), 500).unwrap();
        let mut spec = AugmentationSpec::none();
        spec.cutmix = CutMixSpec {
            fraction: 0.2,
            prob: 1.0,
        };
        let out = augment(&[a, b], &spec, 3);
        assert_eq!(out.len(), 2);
        // Both records had a 200-sample swap; the totals are conserved.
        let total: f32 = out.iter().map(|r| r.signal.sum()).sum();
        assert_eq!(total, 12.0 * 1000.0 * 3.0);
        assert!(out[0].signal.iter().any(|&v| v == 2.0));
        assert!(out.iter().all(|r| r.signal.dim() == (12, 1000)));
    }

    fn quadratic() -> ParamSet {
        let mut p = ParamSet::default();
        p.add("x", ndarray::array![[1.0, -2.0, 0.5]], true);
        p.add("y", ndarray::array![[3.0], [0.25]], true);
        p
    }

    fn quad_loss(p: &ParamSet) -> (f64, Vec<Array2<f64>>) {
        let l = p.iter().map(|t| t.value.mapv(|v| 1.5 * v * v).sum()).sum();
        (l, p.iter().map(|t| t.value.mapv(|v| 3.0 * v)).collect())
    }

    #[test]
    fn grad_check_quadratic() {
        let r = grad_check(quad_loss, &quadratic(), 1e-4, 20, 0);
        assert!(r.max_rel_error < 1e-8, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_flags_corruption() {
        let bad = |p: &ParamSet| {
            let (l, g) = quad_loss(p);
            (l, g.into_iter().map(|g| g * 1.1).collect())
        };
        let r = grad_check(bad, &quadratic(), 1e-4, 20, 0);
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lambda_cap: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_dataset() {
        let v = Vocab::build(&["a"], 1).unwrap();
        let r = train(&TrainConfig::default(), &[], &v, ModelConfig::tiny(5));
        assert!(matches!(r, Err(Error::EmptyDataset)));
    }

    #[test]
    fn truncation_keeps_eos() {
        let v = Vocab::build(&["a b c d e f"], 1).unwrap();
        let s = encode_report("a b c d e f", &v, 4);
        assert_eq!(s.len(), 4);
        assert_eq!(*s.ids.last().unwrap(), EOS);
    }
}
