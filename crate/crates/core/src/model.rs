//! Dual encoder (ECG ViT + text transformer) with a multimodal caption
//! decoder, and the contrastive / captioning objectives.
//!
//! The ECG encoder cuts the 12-lead signal into non-overlapping windows of
//! `patch_size` samples; each token is the concatenation of all 12 leads over
//! one window (`12 * patch_size` values). A learned CLS token is prepended and
//! its final state is projected to the joint space. The text encoder reads
//! the token sequence and uses the BOS position as its CLS. The decoder is a
//! causal transformer that cross-attends to the full ECG token sequence.
//!
//! The temperature is learned through `logit_scale = ln(1/sigma)`.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamSet;
use crate::signal_io::EcgRecord;
use crate::text::{TokenSeq, BOS, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub n_leads: usize,
    pub signal_len: usize,
    pub ecg_layers: usize,
    pub text_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub init_temperature: f64,
}

impl ModelConfig {
    /// The full-size encoder: 1-D ViT with patch 50, hidden 768, 12 heads,
    /// MLP 3072, 512-d joint space, 6-layer decoder.
    pub fn full(vocab_size: usize) -> Self {
        Self {
            patch_size: 50,
            n_leads: 12,
            signal_len: 5000,
            ecg_layers: 12,
            text_layers: 12,
            dec_layers: 6,
            hidden: 768,
            heads: 12,
            mlp_dim: 3072,
            embed_dim: 512,
            vocab_size,
            max_text_len: 256,
            init_temperature: 0.07,
        }
    }

    /// Desk-scale configuration used by tests and demos.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            patch_size: 500,
            n_leads: 12,
            signal_len: 5000,
            ecg_layers: 2,
            text_layers: 2,
            dec_layers: 2,
            hidden: 32,
            heads: 4,
            mlp_dim: 64,
            embed_dim: 32,
            vocab_size,
            max_text_len: 96,
            init_temperature: 0.07,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("patch_size", self.patch_size),
            ("n_leads", self.n_leads),
            ("signal_len", self.signal_len),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("embed_dim", self.embed_dim),
            ("vocab_size", self.vocab_size),
            ("max_text_len", self.max_text_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden {} is not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if !self.signal_len.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidConfig(format!(
                "signal_len {} is not divisible by patch_size {}",
                self.signal_len, self.patch_size
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::InvalidConfig(
                "max_text_len must be at least 2".into(),
            ));
        }
        if !(self.init_temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.signal_len / self.patch_size
    }

    pub fn patch_dim(&self) -> usize {
        self.n_leads * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// A unit-norm vector in the joint ECG/text space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

pub const NORM_TOLERANCE: f64 = 1e-6;

impl EmbeddingVector {
    /// Scales `values` to unit length.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::NormViolation { index: 0, norm });
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Accepts `values` only if they already have unit norm.
    pub fn from_unit(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NormViolation { index: 0, norm });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_unit(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Result of the symmetric contrastive objective. `e2t` and `t2e` are the
/// summed diagonal log-probabilities (non-positive); `total` is
/// `-(e2t + t2e) / N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveLoss {
    pub total: f64,
    pub e2t: f64,
    pub t2e: f64,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Symmetric InfoNCE over a batch of paired unit embeddings, logits
/// `x_i . y_j / sigma`.
pub fn contrastive_loss(
    ecg: &[EmbeddingVector],
    text: &[EmbeddingVector],
    temperature: f64,
) -> Result<ContrastiveLoss> {
    if ecg.len() != text.len() || ecg.is_empty() {
        return Err(Error::BatchMismatch(ecg.len(), text.len()));
    }
    let n = ecg.len();
    let logits: Vec<Vec<f64>> = ecg
        .iter()
        .map(|x| text.iter().map(|y| x.dot(y) / temperature).collect())
        .collect();
    let e2t: f64 = (0..n).map(|i| log_softmax_row(&logits[i])[i]).sum();
    let t2e: f64 = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| logits[i][j]).collect();
            log_softmax_row(&col)[j]
        })
        .sum();
    Ok(ContrastiveLoss {
        total: -(e2t + t2e) / n as f64,
        e2t,
        t2e,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub contrastive: f64,
    pub captioning: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            contrastive: 1.0,
            captioning: 2.0,
        }
    }
}

pub fn total_loss(l_con: f64, l_cap: f64, w: LossWeights) -> f64 {
    w.contrastive * l_con + w.captioning * l_cap
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub contrastive: ContrastiveLoss,
    /// `None` when the captioning weight is zero and the decoder was skipped.
    pub captioning: Option<f64>,
    pub total: f64,
}

/// Row ranges of each sample inside a stacked activation matrix.
#[derive(Debug, Clone)]
struct Segments {
    starts: Vec<usize>,
    lens: Vec<usize>,
}

impl Segments {
    fn from_lens(lens: Vec<usize>) -> Self {
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            starts.push(acc);
            acc += l;
        }
        Self { starts, lens }
    }

    fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.starts.iter().copied().zip(self.lens.iter().copied())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    config: ModelConfig,
    params: ParamSet,
}

struct Init<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64, decay: bool) {
        let dist = Normal::new(0.0, std).expect("finite std");
        let v = Array2::from_shape_simple_fn((rows, cols), || dist.sample(&mut self.rng));
        self.params.add(name, v, decay);
    }

    fn constant(&mut self, name: String, rows: usize, cols: usize, value: f64) {
        self.params
            .add(name, Array2::from_elem((rows, cols), value), false);
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) {
        self.normal(
            format!("{prefix}.w"),
            fan_in,
            fan_out,
            (fan_in as f64).powf(-0.5),
            true,
        );
        self.constant(format!("{prefix}.b"), 1, fan_out, 0.0);
    }

    fn layer_norm(&mut self, prefix: &str, dim: usize) {
        self.constant(format!("{prefix}.g"), 1, dim, 1.0);
        self.constant(format!("{prefix}.b"), 1, dim, 0.0);
    }

    fn attention(&mut self, prefix: &str, hidden: usize) {
        for part in ["q", "k", "v", "o"] {
            self.linear(&format!("{prefix}.{part}"), hidden, hidden);
        }
    }

    fn mlp(&mut self, prefix: &str, hidden: usize, mlp: usize) {
        self.linear(&format!("{prefix}.fc1"), hidden, mlp);
        self.linear(&format!("{prefix}.fc2"), mlp, hidden);
    }
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::default();
        let mut init = Init {
            params: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let h = c.hidden;

        init.linear("ecg.patch", c.patch_dim(), h);
        init.normal("ecg.cls".into(), 1, h, 0.02, false);
        init.normal("ecg.pos".into(), c.n_patches() + 1, h, 0.02, false);
        for l in 0..c.ecg_layers {
            let p = format!("ecg.l{l}");
            init.layer_norm(&format!("{p}.ln1"), h);
            init.attention(&format!("{p}.attn"), h);
            init.layer_norm(&format!("{p}.ln2"), h);
            init.mlp(&format!("{p}.mlp"), h, c.mlp_dim);
        }
        init.layer_norm("ecg.ln_f", h);
        init.normal(
            "ecg.proj.w".into(),
            h,
            c.embed_dim,
            (h as f64).powf(-0.5),
            true,
        );

        init.normal("text.tok".into(), c.vocab_size, h, 0.02, false);
        init.normal("text.pos".into(), c.max_text_len, h, 0.02, false);
        for l in 0..c.text_layers {
            let p = format!("text.l{l}");
            init.layer_norm(&format!("{p}.ln1"), h);
            init.attention(&format!("{p}.attn"), h);
            init.layer_norm(&format!("{p}.ln2"), h);
            init.mlp(&format!("{p}.mlp"), h, c.mlp_dim);
        }
        init.layer_norm("text.ln_f", h);
        init.normal(
            "text.proj.w".into(),
            h,
            c.embed_dim,
            (h as f64).powf(-0.5),
            true,
        );

        init.normal("dec.tok".into(), c.vocab_size, h, 0.02, false);
        init.normal("dec.pos".into(), c.max_text_len, h, 0.02, false);
        for l in 0..c.dec_layers {
            let p = format!("dec.l{l}");
            init.layer_norm(&format!("{p}.ln1"), h);
            init.attention(&format!("{p}.self"), h);
            init.layer_norm(&format!("{p}.lnx"), h);
            init.attention(&format!("{p}.cross"), h);
            init.layer_norm(&format!("{p}.ln2"), h);
            init.mlp(&format!("{p}.mlp"), h, c.mlp_dim);
        }
        init.layer_norm("dec.ln_f", h);
        init.linear("dec.out", h, c.vocab_size);

        init.constant("logit_scale".into(), 1, 1, (1.0 / c.init_temperature).ln());
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors; names and shapes must match a
    /// freshly initialized model of the same configuration.
    pub fn from_tensors(config: ModelConfig, tensors: &[(String, Array2<f64>)]) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.params.load_values(tensors)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn tensors(&self) -> Vec<(String, Array2<f64>)> {
        self.params
            .iter()
            .map(|t| (t.name.clone(), t.value.clone()))
            .collect()
    }

    pub fn temperature(&self) -> f64 {
        (-self.params.by_name("logit_scale").expect("logit_scale")[[0, 0]]).exp()
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        g.param(&self.params, i)
    }

    fn linear(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let gain = self.p(g, &format!("{prefix}.g"));
        let bias = self.p(g, &format!("{prefix}.b"));
        let y = g.layer_norm(x);
        let y = g.mul_row(y, gain);
        g.add_row(y, bias)
    }

    fn attention(
        &self,
        g: &mut Graph,
        xq: Var,
        xkv: Var,
        seg_q: &Segments,
        seg_kv: &Segments,
        prefix: &str,
        causal: bool,
    ) -> Var {
        let q = self.linear(g, xq, &format!("{prefix}.q"));
        let k = self.linear(g, xkv, &format!("{prefix}.k"));
        let v = self.linear(g, xkv, &format!("{prefix}.v"));
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();
        let mut per_sample = Vec::with_capacity(seg_q.lens.len());
        for ((qs, ql), (ks, kl)) in seg_q.iter().zip(seg_kv.iter()) {
            let qi = g.slice_rows(q, qs, ql);
            let ki = g.slice_rows(k, ks, kl);
            let vi = g.slice_rows(v, ks, kl);
            let mut heads = Vec::with_capacity(self.config.heads);
            for h in 0..self.config.heads {
                let qh = g.slice_cols(qi, h * d, d);
                let kh = g.slice_cols(ki, h * d, d);
                let vh = g.slice_cols(vi, h * d, d);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.scale(scores, scale);
                let probs = g.softmax(scores, causal);
                heads.push(g.matmul(probs, vh));
            }
            per_sample.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)
            });
        }
        let o = if per_sample.len() == 1 {
            per_sample[0]
        } else {
            g.concat_rows(&per_sample)
        };
        self.linear(g, o, &format!("{prefix}.o"))
    }

    fn mlp(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let h = self.linear(g, x, &format!("{prefix}.fc1"));
        let h = g.gelu(h);
        self.linear(g, h, &format!("{prefix}.fc2"))
    }

    fn encoder_block(&self, g: &mut Graph, h: Var, seg: &Segments, prefix: &str) -> Var {
        let a = self.norm(g, h, &format!("{prefix}.ln1"));
        let a = self.attention(g, a, a, seg, seg, &format!("{prefix}.attn"), false);
        let h = g.add(h, a);
        let m = self.norm(g, h, &format!("{prefix}.ln2"));
        let m = self.mlp(g, m, &format!("{prefix}.mlp"));
        g.add(h, m)
    }

    fn patches(&self, records: &[&EcgRecord]) -> Result<Array2<f64>> {
        let c = &self.config;
        let n_p = c.n_patches();
        let mut out = Array2::zeros((records.len() * n_p, c.patch_dim()));
        for (s, rec) in records.iter().enumerate() {
            if rec.signal.dim() != (c.n_leads, c.signal_len) {
                return Err(Error::ShapeMismatch(format!(
                    "record {} is {:?}, model expects ({}, {})",
                    rec.id,
                    rec.signal.dim(),
                    c.n_leads,
                    c.signal_len
                )));
            }
            for t in 0..n_p {
                let mut row = out.row_mut(s * n_p + t);
                for lead in 0..c.n_leads {
                    for k in 0..c.patch_size {
                        row[lead * c.patch_size + k] =
                            rec.signal[[lead, t * c.patch_size + k]] as f64;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns (unit embeddings `B x D`, final token states, segments).
    fn ecg_forward(&self, g: &mut Graph, records: &[&EcgRecord]) -> Result<(Var, Var, Segments)> {
        let c = &self.config;
        let n_p = c.n_patches();
        let x = g.input(self.patches(records)?);
        let e = self.linear(g, x, "ecg.patch");
        let cls = self.p(g, "ecg.cls");
        let mut parts = Vec::with_capacity(records.len() * 2);
        for s in 0..records.len() {
            parts.push(cls);
            parts.push(g.slice_rows(e, s * n_p, n_p));
        }
        let tokens = g.concat_rows(&parts);
        let pos_table = self.p(g, "ecg.pos");
        let pos_ids: Vec<usize> = (0..records.len()).flat_map(|_| 0..=n_p).collect();
        let pos = g.gather(pos_table, &pos_ids);
        let mut h = g.add(tokens, pos);
        let seg = Segments::from_lens(vec![n_p + 1; records.len()]);
        for l in 0..c.ecg_layers {
            h = self.encoder_block(g, h, &seg, &format!("ecg.l{l}"));
        }
        let hf = self.norm(g, h, "ecg.ln_f");
        let cls_rows = g.gather(hf, &seg.starts);
        let w = self.p(g, "ecg.proj.w");
        let z = g.matmul(cls_rows, w);
        Ok((g.l2_normalize_rows(z), hf, seg))
    }

    fn check_len(&self, t: &TokenSeq) -> Result<()> {
        if t.len() > self.config.max_text_len {
            return Err(Error::SequenceTooLong {
                len: t.len(),
                max: self.config.max_text_len,
            });
        }
        if t.ids
            .iter()
            .any(|&id| id as usize >= self.config.vocab_size)
        {
            return Err(Error::ShapeMismatch(format!(
                "token id outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        if t.is_empty() {
            return Err(Error::ShapeMismatch("empty token sequence".into()));
        }
        Ok(())
    }

    fn text_forward(&self, g: &mut Graph, texts: &[&TokenSeq]) -> Result<Var> {
        for t in texts {
            self.check_len(t)?;
        }
        let ids: Vec<usize> = texts
            .iter()
            .flat_map(|t| t.ids.iter().map(|&i| i as usize))
            .collect();
        let pos_ids: Vec<usize> = texts.iter().flat_map(|t| 0..t.len()).collect();
        let tok_table = self.p(g, "text.tok");
        let pos_table = self.p(g, "text.pos");
        let tok = g.gather(tok_table, &ids);
        let pos = g.gather(pos_table, &pos_ids);
        let mut h = g.add(tok, pos);
        let seg = Segments::from_lens(texts.iter().map(|t| t.len()).collect());
        for l in 0..self.config.text_layers {
            h = self.encoder_block(g, h, &seg, &format!("text.l{l}"));
        }
        let hf = self.norm(g, h, "text.ln_f");
        let cls_rows = g.gather(hf, &seg.starts);
        let w = self.p(g, "text.proj.w");
        let z = g.matmul(cls_rows, w);
        Ok(g.l2_normalize_rows(z))
    }

    /// Decoder log-probabilities for teacher-forced inputs.
    fn decoder_forward(
        &self,
        g: &mut Graph,
        inputs: &[&[u32]],
        latents: Var,
        latent_seg: &Segments,
    ) -> Var {
        let ids: Vec<usize> = inputs
            .iter()
            .flat_map(|t| t.iter().map(|&i| i as usize))
            .collect();
        let pos_ids: Vec<usize> = inputs.iter().flat_map(|t| 0..t.len()).collect();
        let tok_table = self.p(g, "dec.tok");
        let pos_table = self.p(g, "dec.pos");
        let tok = g.gather(tok_table, &ids);
        let pos = g.gather(pos_table, &pos_ids);
        let mut h = g.add(tok, pos);
        let seg = Segments::from_lens(inputs.iter().map(|t| t.len()).collect());
        for l in 0..self.config.dec_layers {
            let p = format!("dec.l{l}");
            let a = self.norm(g, h, &format!("{p}.ln1"));
            let a = self.attention(g, a, a, &seg, &seg, &format!("{p}.self"), true);
            h = g.add(h, a);
            let x = self.norm(g, h, &format!("{p}.lnx"));
            let x = self.attention(
                g,
                x,
                latents,
                &seg,
                latent_seg,
                &format!("{p}.cross"),
                false,
            );
            h = g.add(h, x);
            let m = self.norm(g, h, &format!("{p}.ln2"));
            let m = self.mlp(g, m, &format!("{p}.mlp"));
            h = g.add(h, m);
        }
        let hf = self.norm(g, h, "dec.ln_f");
        let logits = self.linear(g, hf, "dec.out");
        g.log_softmax(logits)
    }

    /// Mean next-token NLL over all target positions of the batch.
    fn caption_nll(
        &self,
        g: &mut Graph,
        targets: &[&TokenSeq],
        latents: Var,
        latent_seg: &Segments,
    ) -> Result<Var> {
        for t in targets {
            self.check_len(t)?;
            if t.len() < 2 {
                return Err(Error::ShapeMismatch("caption needs BOS and EOS".into()));
            }
        }
        let inputs: Vec<&[u32]> = targets.iter().map(|t| &t.ids[..t.len() - 1]).collect();
        let logp = self.decoder_forward(g, &inputs, latents, latent_seg);
        let mut picks = Vec::new();
        let mut row = 0;
        for t in targets {
            for &next in &t.ids[1..] {
                picks.push((row, next as usize));
                row += 1;
            }
        }
        let n = picks.len() as f64;
        Ok(g.pick_sum(logp, &picks, -1.0 / n))
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        records: &[&EcgRecord],
        texts: &[&TokenSeq],
        weights: LossWeights,
    ) -> Result<(Var, Var, Var, Option<Var>)> {
        if records.len() != texts.len() || records.is_empty() {
            return Err(Error::BatchMismatch(records.len(), texts.len()));
        }
        let n = records.len();
        let (x, latents, latent_seg) = self.ecg_forward(g, records)?;
        let y = self.text_forward(g, texts)?;
        let sim = g.matmul_bt(x, y);
        let log_scale = self.p(g, "logit_scale");
        let scale = g.exp(log_scale);
        let logits = g.scale_by(sim, scale);
        let diag: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
        let lp_e2t = g.log_softmax(logits);
        let e2t = g.pick_sum(lp_e2t, &diag, 1.0);
        let logits_t = g.transpose(logits);
        let lp_t2e = g.log_softmax(logits_t);
        let t2e = g.pick_sum(lp_t2e, &diag, 1.0);
        let both = g.add(e2t, t2e);
        let l_con = g.scale(both, -1.0 / n as f64);

        let mut total = g.scale(l_con, weights.contrastive);
        let l_cap = if weights.captioning != 0.0 {
            let cap = self.caption_nll(g, texts, latents, &latent_seg)?;
            let weighted = g.scale(cap, weights.captioning);
            total = g.add(total, weighted);
            Some(cap)
        } else {
            None
        };
        Ok((total, e2t, t2e, l_cap))
    }

    fn breakdown(
        g: &Graph,
        n: usize,
        (total, e2t, t2e, cap): (Var, Var, Var, Option<Var>),
    ) -> LossBreakdown {
        let (e2t, t2e) = (g.scalar(e2t), g.scalar(t2e));
        LossBreakdown {
            contrastive: ContrastiveLoss {
                total: -(e2t + t2e) / n as f64,
                e2t,
                t2e,
            },
            captioning: cap.map(|c| g.scalar(c)),
            total: g.scalar(total),
        }
    }

    /// Forward pass only.
    pub fn loss(
        &self,
        records: &[&EcgRecord],
        texts: &[&TokenSeq],
        weights: LossWeights,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let vars = self.build_loss(&mut g, records, texts, weights)?;
        Ok(Self::breakdown(&g, records.len(), vars))
    }

    /// Loss and gradients for every parameter tensor (in `params()` order).
    pub fn loss_and_grad(
        &self,
        records: &[&EcgRecord],
        texts: &[&TokenSeq],
        weights: LossWeights,
    ) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let vars = self.build_loss(&mut g, records, texts, weights)?;
        let grads = g.backward(vars.0, &self.params);
        Ok((Self::breakdown(&g, records.len(), vars), grads))
    }

    pub fn encode_ecg(&self, record: &EcgRecord) -> Result<EmbeddingVector> {
        Ok(self.encode_ecg_batch(&[record])?.remove(0))
    }

    pub fn encode_ecg_batch(&self, records: &[&EcgRecord]) -> Result<Vec<EmbeddingVector>> {
        if records.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let (z, ..) = self.ecg_forward(&mut g, records)?;
        Ok(rows_to_embeddings(g.value(z)))
    }

    /// Final ECG token states (`(n_patches + 1) x hidden`, CLS first).
    pub fn ecg_latents(&self, record: &EcgRecord) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let (_, hf, _) = self.ecg_forward(&mut g, &[record])?;
        Ok(g.value(hf).clone())
    }

    pub fn encode_text(&self, seq: &TokenSeq) -> Result<EmbeddingVector> {
        Ok(self.encode_text_batch(&[seq])?.remove(0))
    }

    pub fn encode_text_batch(&self, seqs: &[&TokenSeq]) -> Result<Vec<EmbeddingVector>> {
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let z = self.text_forward(&mut g, seqs)?;
        Ok(rows_to_embeddings(g.value(z)))
    }

    /// Mean token NLL of `targets` given the paired records.
    pub fn captioning_loss(&self, records: &[&EcgRecord], targets: &[&TokenSeq]) -> Result<f64> {
        if records.len() != targets.len() || records.is_empty() {
            return Err(Error::BatchMismatch(records.len(), targets.len()));
        }
        let mut g = Graph::new();
        let (_, latents, seg) = self.ecg_forward(&mut g, records)?;
        let nll = self.caption_nll(&mut g, targets, latents, &seg)?;
        Ok(g.scalar(nll))
    }

    /// Greedy decoding from BOS until EOS or `max_len` generated tokens.
    pub fn generate_caption(&self, record: &EcgRecord, max_len: usize) -> Result<TokenSeq> {
        let latents = self.ecg_latents(record)?;
        let seg = Segments::from_lens(vec![latents.nrows()]);
        let max_len = max_len.min(self.config.max_text_len.saturating_sub(2));
        let mut ids = vec![BOS];
        while ids.len() <= max_len {
            let mut g = Graph::new();
            let lat = g.input(latents.clone());
            let logp = self.decoder_forward(&mut g, &[&ids], lat, &seg);
            let last = g.value(logp).row(ids.len() - 1).to_owned();
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i as u32)
                .expect("non-empty vocabulary");
            if next == EOS {
                break;
            }
            ids.push(next);
        }
        ids.push(EOS);
        Ok(TokenSeq { ids })
    }
}

fn rows_to_embeddings(z: &Array2<f64>) -> Vec<EmbeddingVector> {
    z.rows()
        .into_iter()
        .map(|r| EmbeddingVector(r.to_vec()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthParams};

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn identical_embeddings_give_two_ln_n() {
        for n in [2usize, 8, 64] {
            let e: Vec<_> = (0..n).map(|_| unit(&[0.6, 0.8])).collect();
            for sigma in [0.07, 1.0, 5.0] {
                let l = contrastive_loss(&e, &e, sigma).unwrap();
                assert!((l.total - 2.0 * (n as f64).ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_pair_is_zero() {
        let l = contrastive_loss(&[unit(&[1.0, 0.0])], &[unit(&[0.0, 1.0])], 0.1).unwrap();
        assert_eq!(l.total, 0.0);
    }

    #[test]
    fn two_by_two_hand_case() {
        let x = [unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let l = contrastive_loss(&x, &x, 1.0).unwrap();
        let e = std::f64::consts::E;
        let per_direction = -2.0 * (e / (e + 1.0)).ln();
        assert!((l.total - per_direction).abs() < 1e-12);
        assert!((l.total - 0.626523).abs() < 1e-6);
    }

    #[test]
    fn batch_mismatch() {
        let x = [unit(&[1.0, 0.0])];
        assert!(matches!(
            contrastive_loss(&x, &[], 1.0),
            Err(Error::BatchMismatch(1, 0))
        ));
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(total_loss(1.0, 1.0, w), 3.0);
        assert_eq!(
            total_loss(
                1.3,
                9.0,
                LossWeights {
                    contrastive: 1.0,
                    captioning: 0.0
                }
            ),
            1.3
        );
        assert_eq!(
            total_loss(
                7.0,
                2.5,
                LossWeights {
                    contrastive: 0.0,
                    captioning: 2.0
                }
            ),
            5.0
        );
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::tiny(50);
        assert!(c.validate().is_ok());
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(50);
        c.patch_size = 300;
        assert!(c.validate().is_err());
        assert!(ModelConfig::full(6000).validate().is_ok());
    }

    #[test]
    fn tiny_shapes_and_norms() {
        let model = DualEncoder::new(ModelConfig::tiny(50), 1).unwrap();
        let (rec, _) = synth::generate(&SynthParams::default());
        let lat = model.ecg_latents(&rec).unwrap();
        // 5000 / 500 = 10 patch tokens plus CLS, hidden 32.
        assert_eq!(lat.dim(), (11, 32));
        let e = model.encode_ecg(&rec).unwrap();
        assert_eq!(e.dim(), 32);
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, model.encode_ecg(&rec).unwrap());

        let t = TokenSeq {
            ids: vec![BOS, 7, 9, EOS],
        };
        let y = model.encode_text(&t).unwrap();
        assert!((y.norm() - 1.0).abs() < 1e-6);
        assert_eq!(y, model.encode_text(&t).unwrap());
    }

    #[test]
    fn same_seed_same_model() {
        let a = DualEncoder::new(ModelConfig::tiny(20), 3).unwrap();
        let b = DualEncoder::new(ModelConfig::tiny(20), 3).unwrap();
        let c = DualEncoder::new(ModelConfig::tiny(20), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn text_too_long() {
        let model = DualEncoder::new(ModelConfig::tiny(20), 0).unwrap();
        let t = TokenSeq { ids: vec![5; 97] };
        assert!(matches!(
            model.encode_text(&t),
            Err(Error::SequenceTooLong { len: 97, max: 96 })
        ));
    }

    #[test]
    fn wrong_record_shape() {
        let model = DualEncoder::new(ModelConfig::tiny(20), 0).unwrap();
        let rec = EcgRecord::new("x", Array2::zeros((12, 4000)), 500).unwrap();
        assert!(matches!(
            model.encode_ecg(&rec),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn graph_contrastive_matches_direct() {
        let model = DualEncoder::new(ModelConfig::tiny(30), 5).unwrap();
        let recs: Vec<_> = (0..3)
            .map(|s| synth::generate(&synth::random_params(s)).0)
            .collect();
        let texts: Vec<TokenSeq> = (0..3)
            .map(|s| TokenSeq {
                ids: vec![BOS, 4 + s, 10 + s, EOS],
            })
            .collect();
        let rr: Vec<&EcgRecord> = recs.iter().collect();
        let tr: Vec<&TokenSeq> = texts.iter().collect();
        let l = model.loss(&rr, &tr, LossWeights::default()).unwrap();
        let x = model.encode_ecg_batch(&rr).unwrap();
        let y = model.encode_text_batch(&tr).unwrap();
        let direct = contrastive_loss(&x, &y, model.temperature()).unwrap();
        assert!((l.contrastive.total - direct.total).abs() < 1e-10);
        assert!((l.contrastive.e2t - direct.e2t).abs() < 1e-10);
        let cap = model.captioning_loss(&rr, &tr).unwrap();
        assert!((l.captioning.unwrap() - cap).abs() < 1e-12);
        assert!((l.total - total_loss(direct.total, cap, LossWeights::default())).abs() < 1e-9);
    }

    #[test]
    fn uniform_decoder_gives_ln_v() {
        let mut model = DualEncoder::new(ModelConfig::tiny(40), 2).unwrap();
        for name in ["dec.out.w", "dec.out.b"] {
            let i = model.params().position(name).unwrap();
            model.params_mut().get_mut(i).fill(0.0);
        }
        let (rec, _) = synth::generate(&SynthParams::default());
        let t = TokenSeq {
            ids: vec![BOS, 5, 6, 7, EOS],
        };
        let l = model.captioning_loss(&[&rec], &[&t]).unwrap();
        assert!((l - 40f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_decoder_loss_vanishes() {
        // Output bias strongly favours the single target token.
        let mut model = DualEncoder::new(ModelConfig::tiny(10), 2).unwrap();
        let w = model.params().position("dec.out.w").unwrap();
        model.params_mut().get_mut(w).fill(0.0);
        let b = model.params().position("dec.out.b").unwrap();
        model.params_mut().get_mut(b)[[0, EOS as usize]] = 60.0;
        let (rec, _) = synth::generate(&SynthParams::default());
        let t = TokenSeq {
            ids: vec![BOS, EOS],
        };
        assert!(model.captioning_loss(&[&rec], &[&t]).unwrap() < 1e-20);
    }

    #[test]
    fn caption_bounds() {
        let model = DualEncoder::new(ModelConfig::tiny(12), 8).unwrap();
        let (rec, _) = synth::generate(&SynthParams::default());
        let c = model.generate_caption(&rec, 5).unwrap();
        assert_eq!(c.ids[0], BOS);
        assert_eq!(*c.ids.last().unwrap(), EOS);
        assert!(c.len() <= 5 + 2);
    }

    #[test]
    fn no_caption_weight_leaves_decoder_untouched() {
        let model = DualEncoder::new(ModelConfig::tiny(20), 9).unwrap();
        let recs: Vec<_> = (0..2)
            .map(|s| synth::generate(&synth::random_params(s)).0)
            .collect();
        let texts = [
            TokenSeq {
                ids: vec![BOS, 5, EOS],
            },
            TokenSeq {
                ids: vec![BOS, 6, 7, EOS],
            },
        ];
        let w = LossWeights {
            contrastive: 1.0,
            captioning: 0.0,
        };
        let (l, grads) = model
            .loss_and_grad(
                &recs.iter().collect::<Vec<_>>(),
                &texts.iter().collect::<Vec<_>>(),
                w,
            )
            .unwrap();
        assert!(l.captioning.is_none());
        for (t, g) in model.params().iter().zip(&grads) {
            if t.name.starts_with("dec.") {
                assert!(g.iter().all(|&v| v == 0.0), "{}", t.name);
            }
        }
        let patch = model.params().position("ecg.patch.w").unwrap();
        assert!(grads[patch].iter().any(|&v| v != 0.0));
    }
}
