//! Flat embedding index, top-k search, recall@k, zero-shot scoring and
//! linear probes.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::prf;
use crate::model::{EmbeddingVector, NORM_TOLERANCE};

pub const INDEX_KIND: &str = "index";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

/// Builds an index over unit-norm rows with unique ids.
pub fn build_index(vectors: Vec<Vec<f64>>, ids: Vec<String>) -> Result<EmbeddingIndex> {
    if vectors.len() != ids.len() {
        return Err(Error::LengthMismatch(vectors.len(), ids.len()));
    }
    let mut seen = HashSet::new();
    for id in &ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let dim = vectors.first().map_or(0, Vec::len);
    let mut rows = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.into_iter().enumerate() {
        if v.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "row {index} has dimension {}, expected {dim}",
                v.len()
            )));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::NormViolation { index, norm });
        }
        rows.push(EmbeddingVector::from_unit(v)?);
    }
    Ok(EmbeddingIndex { ids, vectors: rows })
}

impl EmbeddingIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[EmbeddingVector] {
        &self.vectors
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dim = self.vectors.first().map_or(0, EmbeddingVector::dim);
        let flat: Vec<f64> = self
            .vectors
            .iter()
            .flat_map(|v| v.as_slice().iter().copied())
            .collect();
        let mut c = Checkpoint::new(INDEX_KIND, serde_json::json!({ "ids": self.ids }));
        c.tensors.push((
            "index".into(),
            ndarray::Array2::from_shape_vec((self.len(), dim), flat).expect("rectangular index"),
        ));
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind != INDEX_KIND {
            return Err(Error::CorruptCheckpoint(format!(
                "expected an index checkpoint, found {}",
                c.kind
            )));
        }
        let ids: Vec<String> = serde_json::from_value(c.meta["ids"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("ids: {e}")))?;
        let m = c
            .tensor("index")
            .ok_or_else(|| Error::CorruptCheckpoint("missing tensor \"index\"".into()))?;
        let rows = m.rows().into_iter().map(|r| r.to_vec()).collect();
        build_index(rows, ids)
    }
}

/// The `k` best ids by dot product, best first; ties keep insertion order.
pub fn query_topk(
    q: &EmbeddingVector,
    index: &EmbeddingIndex,
    k: usize,
) -> Result<Vec<(String, f64)>> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut scored: Vec<(usize, f64)> =
        index.vectors.iter().map(|v| q.dot(v)).enumerate().collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored
        .into_iter()
        .take(k.max(1))
        .map(|(i, s)| (index.ids[i].clone(), s))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub ecg_to_text: f64,
    pub text_to_ecg: f64,
}

/// Whether partner `i` lands in the top `k` of `scores` under the
/// insertion-order tie rule.
fn partner_in_topk(scores: &[f64], i: usize, k: usize) -> bool {
    let s = scores[i];
    let ahead = scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > s || (v == s && j < i))
        .count();
    ahead < k
}

/// Fraction of queries whose paired item ranks in the top `k`, in both
/// directions. `ecg[i]` pairs with `text[i]`.
pub fn recall_at_k(ecg: &[EmbeddingVector], text: &[EmbeddingVector], k: usize) -> Result<Recall> {
    if ecg.len() != text.len() {
        return Err(Error::LengthMismatch(ecg.len(), text.len()));
    }
    if ecg.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let n = ecg.len();
    let sim: Vec<Vec<f64>> = ecg
        .iter()
        .map(|e| text.iter().map(|t| e.dot(t)).collect())
        .collect();
    let mut e2t = 0;
    let mut t2e = 0;
    for i in 0..n {
        if partner_in_topk(&sim[i], i, k) {
            e2t += 1;
        }
        let col: Vec<f64> = (0..n).map(|r| sim[r][i]).collect();
        if partner_in_topk(&col, i, k) {
            t2e += 1;
        }
    }
    Ok(Recall {
        ecg_to_text: e2t as f64 / n as f64,
        text_to_ecg: t2e as f64 / n as f64,
    })
}

/// Class prompt text used for zero-shot scoring.
pub fn zero_shot_prompt(description: &str) -> String {
    format!("this ECG shows {}.", description.trim().to_lowercase())
}

/// Cosine score of `ecg` against each class prompt embedding.
pub fn zero_shot_classify(
    ecg: &EmbeddingVector,
    class_prompts: &[(String, EmbeddingVector)],
) -> Result<Vec<(String, f64)>> {
    if class_prompts.is_empty() {
        return Err(Error::EmptyLabelSet);
    }
    Ok(class_prompts
        .iter()
        .map(|(label, p)| (label.clone(), ecg.dot(p)))
        .collect())
}

/// Per-class decision thresholds maximizing F1 on a calibration split.
/// `scores[s][c]` and `labels[s][c]` are sample-major. Candidate thresholds
/// are the observed scores; ties go to the lowest threshold.
pub fn calibrate_thresholds(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<Vec<f64>> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let n_classes = scores.first().map_or(0, Vec::len);
    if n_classes == 0 {
        return Err(Error::EmptyLabelSet);
    }
    let mut out = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let mut candidates: Vec<f64> = scores.iter().map(|s| s[c]).collect();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for &t in &candidates {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (s, l) in scores.iter().zip(labels) {
                match (s[c] >= t, l[c]) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            let f = prf(tp, fp, fn_).2;
            if f > best.0 {
                best = (f, t);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticUnit {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticUnit {
    pub fn prob(&self, x: &[f64]) -> f64 {
        let z: f64 = self.b + self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub steps: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            steps: 500,
            lr: 1.0,
        }
    }
}

/// Full-batch gradient descent on the L2-regularized logistic loss,
/// starting from zero weights.
pub fn fit_logistic(x: &[&[f64]], y: &[bool], cfg: &ProbeConfig) -> LogisticUnit {
    let dim = x.first().map_or(0, |r| r.len());
    let n = x.len().max(1) as f64;
    let mut unit = LogisticUnit {
        w: vec![0.0; dim],
        b: 0.0,
    };
    let mut gw = vec![0.0; dim];
    for _ in 0..cfg.steps {
        gw.iter_mut().for_each(|g| *g = 0.0);
        let mut gb = 0.0;
        for (row, &label) in x.iter().zip(y) {
            let err = unit.prob(row) - if label { 1.0 } else { 0.0 };
            gb += err;
            gw.iter_mut()
                .zip(row.iter())
                .for_each(|(g, v)| *g += err * v);
        }
        for (w, g) in unit.w.iter_mut().zip(&gw) {
            *w -= cfg.lr * (g / n + cfg.l2 * *w);
        }
        unit.b -= cfg.lr * gb / n;
    }
    unit
}

/// True when a label is all-positive or all-negative in `y`.
pub fn is_degenerate(y: &[bool]) -> bool {
    y.iter().all(|&v| v) || y.iter().all(|&v| !v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `None` for labels skipped as degenerate.
    pub classifiers: Vec<Option<LogisticUnit>>,
    pub per_label_f1: Vec<Option<f64>>,
    pub macro_f1: f64,
}

/// One logistic regression per label on frozen embeddings, evaluated on a
/// held-out split at threshold 0.5.
pub fn linear_probe(
    train_x: &[EmbeddingVector],
    train_y: &[Vec<bool>],
    test_x: &[EmbeddingVector],
    test_y: &[Vec<bool>],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() {
        return Err(Error::LengthMismatch(train_x.len(), train_y.len()));
    }
    if test_x.len() != test_y.len() {
        return Err(Error::LengthMismatch(test_x.len(), test_y.len()));
    }
    if train_x.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_labels = train_y[0].len();
    if n_labels == 0 {
        return Err(Error::EmptyLabelSet);
    }
    let xs: Vec<&[f64]> = train_x.iter().map(EmbeddingVector::as_slice).collect();
    let mut classifiers = Vec::with_capacity(n_labels);
    let mut per_label = Vec::with_capacity(n_labels);
    for l in 0..n_labels {
        let y: Vec<bool> = train_y.iter().map(|r| r[l]).collect();
        if is_degenerate(&y) {
            log::warn!("label {l} is degenerate in the training split; skipped");
            classifiers.push(None);
            per_label.push(None);
            continue;
        }
        let unit = fit_logistic(&xs, &y, cfg);
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (x, t) in test_x.iter().zip(test_y) {
            match (unit.prob(x.as_slice()) >= 0.5, t[l]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        per_label.push(Some(prf(tp, fp, fn_).2));
        classifiers.push(Some(unit));
    }
    let scored: Vec<f64> = per_label.iter().flatten().copied().collect();
    let macro_f1 = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    Ok(ProbeResult {
        classifiers,
        per_label_f1: per_label,
        macro_f1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::normalized(v.to_vec()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        EmbeddingVector::normalized(v).unwrap()
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("r{i}")).collect()
    }

    #[test]
    fn build_checks() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        assert_eq!(build_index(v.clone(), ids(3)).unwrap().len(), 3);
        let dup = vec!["a".to_string(), "b".into(), "a".into()];
        assert!(matches!(
            build_index(v.clone(), dup),
            Err(Error::DuplicateId(_))
        ));
        let mut bad = v;
        bad[1] = vec![0.0, 2.0];
        assert!(matches!(
            build_index(bad, ids(3)),
            Err(Error::NormViolation { index: 1, .. })
        ));
    }

    #[test]
    fn query_basics() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        let idx = build_index(v, ids(3)).unwrap();
        let top = query_topk(&unit(&[0.0, 1.0]), &idx, 1).unwrap();
        assert_eq!(top[0].0, "r1");
        assert_eq!(query_topk(&unit(&[0.0, 1.0]), &idx, 10).unwrap().len(), 3);
        let empty = build_index(vec![], vec![]).unwrap();
        assert!(matches!(
            query_topk(&unit(&[1.0]), &empty, 1),
            Err(Error::EmptyIndex)
        ));
    }

    #[test]
    fn ties_keep_insertion_order() {
        let v = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![1.0, 0.0]];
        let idx = build_index(v, vec!["z".into(), "b".into(), "a".into()]).unwrap();
        let top = query_topk(&unit(&[1.0, 0.0]), &idx, 2).unwrap();
        assert_eq!(top[0].0, "b");
        assert_eq!(top[1].0, "a");
    }

    #[test]
    fn topk_matches_exhaustive_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let vs: Vec<EmbeddingVector> = (0..8).map(|_| random_unit(&mut rng, 5)).collect();
        let idx = build_index(vs.iter().map(|v| v.as_slice().to_vec()).collect(), ids(8)).unwrap();
        let q = random_unit(&mut rng, 5);
        let mut oracle: Vec<(f64, usize)> = vs.iter().map(|v| q.dot(v)).zip(0..).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let got = query_topk(&q, &idx, 8).unwrap();
        for ((id, _), (_, j)) in got.iter().zip(&oracle) {
            assert_eq!(id, &format!("r{j}"));
        }
    }

    #[test]
    fn recall_trivial_cases() {
        let one = [unit(&[0.3, 0.4])];
        let r = recall_at_k(&one, &[unit(&[1.0, 0.0])], 1).unwrap();
        assert_eq!((r.ecg_to_text, r.text_to_ecg), (1.0, 1.0));
        let basis: Vec<_> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 4];
                v[i] = 1.0;
                unit(&v)
            })
            .collect();
        let r = recall_at_k(&basis, &basis, 1).unwrap();
        assert_eq!((r.ecg_to_text, r.text_to_ecg), (1.0, 1.0));
    }

    #[test]
    fn index_checkpoint_round_trip() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let idx = build_index(v, ids(2)).unwrap();
        let c = idx.to_checkpoint();
        assert!(c.tensor("index").is_some());
        let back = EmbeddingIndex::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap())
            .unwrap();
        assert_eq!(back, idx);
    }

    #[test]
    fn zero_shot_cases() {
        let p = vec![
            ("SR".to_string(), unit(&[1.0, 0.0])),
            ("AFIB".to_string(), unit(&[0.0, 1.0])),
        ];
        let s = zero_shot_classify(&unit(&[1.0, 0.0]), &p).unwrap();
        assert_eq!(s[0].1, 1.0);
        let s = zero_shot_classify(&unit(&[1.0, 1.0]), &p).unwrap();
        assert_eq!(s[0].1, s[1].1);
        assert!(matches!(
            zero_shot_classify(&unit(&[1.0]), &[]),
            Err(Error::EmptyLabelSet)
        ));
        assert_eq!(
            zero_shot_prompt("Sinus rhythm"),
            "this ECG shows sinus rhythm."
        );
    }

    #[test]
    fn zero_shot_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers: Vec<Vec<f64>> = (0..4)
            .map(|c| {
                let mut v = vec![0.0; 8];
                v[c] = 1.0;
                v
            })
            .collect();
        let prompts: Vec<_> = centers
            .iter()
            .enumerate()
            .map(|(c, v)| (format!("c{c}"), unit(v)))
            .collect();
        for _ in 0..40 {
            let c = rng.random_range(0..4);
            let v: Vec<f64> = centers[c]
                .iter()
                .map(|x| x + rng.random_range(-0.2..0.2))
                .collect();
            let scores = zero_shot_classify(&unit(&v), &prompts).unwrap();
            let best = scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
                .unwrap()
                .0;
            assert_eq!(best, c);
        }
    }

    #[test]
    fn calibration_finds_separating_threshold() {
        let scores = vec![vec![0.1], vec![0.2], vec![0.7], vec![0.9]];
        let labels = vec![vec![false], vec![false], vec![true], vec![true]];
        assert_eq!(calibrate_thresholds(&scores, &labels).unwrap(), vec![0.7]);
    }

    #[test]
    fn probe_separable() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut make = |n: usize| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for _ in 0..n {
                let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let e = unit(&v);
                y.push(vec![e.as_slice()[0] > 0.0, e.as_slice()[1] > 0.0]);
                x.push(e);
            }
            (x, y)
        };
        let (tx, ty) = make(200);
        let (vx, vy) = make(100);
        let cfg = ProbeConfig {
            steps: 2000,
            lr: 5.0,
            l2: 0.0,
        };
        let r = linear_probe(&tx, &ty, &vx, &vy, &cfg).unwrap();
        assert!(r.macro_f1 > 0.97, "{}", r.macro_f1);
    }

    #[test]
    fn probe_zero_steps_and_degenerate() {
        let x = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let y = vec![vec![true, true], vec![false, true]];
        let cfg = ProbeConfig {
            steps: 0,
            ..Default::default()
        };
        let r = linear_probe(&x, &y, &x, &y, &cfg).unwrap();
        let unit0 = r.classifiers[0].as_ref().unwrap();
        assert_eq!(unit0.prob(x[0].as_slice()), 0.5);
        assert!(r.classifiers[1].is_none());
        assert!(r.per_label_f1[1].is_none());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_full(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e: Vec<_> = (0..n).map(|_| random_unit(&mut rng, 3)).collect();
            let t: Vec<_> = (0..n).map(|_| random_unit(&mut rng, 3)).collect();
            let mut prev = Recall { ecg_to_text: 0.0, text_to_ecg: 0.0 };
            for k in 1..=n {
                let r = recall_at_k(&e, &t, k).unwrap();
                prop_assert!(r.ecg_to_text >= prev.ecg_to_text);
                prop_assert!(r.text_to_ecg >= prev.text_to_ecg);
                prev = r;
            }
            prop_assert_eq!(prev.ecg_to_text, 1.0);
            prop_assert_eq!(prev.text_to_ecg, 1.0);
        }

        #[test]
        fn topk_rotation_invariant(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let vs: Vec<_> = (0..6).map(|_| random_unit(&mut rng, 2)).collect();
            let q = random_unit(&mut rng, 2);
            let rot = |v: &EmbeddingVector| {
                let (x, y) = (v.as_slice()[0], v.as_slice()[1]);
                unit(&[x * angle.cos() - y * angle.sin(), x * angle.sin() + y * angle.cos()])
            };
            let a = build_index(vs.iter().map(|v| v.as_slice().to_vec()).collect(), ids(6)).unwrap();
            let b = build_index(vs.iter().map(|v| rot(v).as_slice().to_vec()).collect(), ids(6)).unwrap();
            let ra: Vec<String> = query_topk(&q, &a, 6).unwrap().into_iter().map(|p| p.0).collect();
            let rb: Vec<String> = query_topk(&rot(&q), &b, 6).unwrap().into_iter().map(|p| p.0).collect();
            // Scores may differ in the last bits; compare once near-ties are excluded.
            let sa: Vec<f64> = vs.iter().map(|v| q.dot(v)).collect();
            let mut sorted = sa.clone();
            sorted.sort_by(f64::total_cmp);
            if sorted.windows(2).all(|w| w[1] - w[0] > 1e-9) {
                prop_assert_eq!(ra, rb);
            }
        }
    }
}
