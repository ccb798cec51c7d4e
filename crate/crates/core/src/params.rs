//! Named parameter tensors and the AdamW optimizer.

use std::collections::HashMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether AdamW applies decoupled weight decay to this tensor.
    pub decay: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>, decay: bool) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.tensors.len());
        self.tensors.push(Tensor { name, value, decay });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i].value
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.position(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Flat coordinate -> (tensor index, row, col).
    pub fn locate(&self, mut flat: usize) -> Option<(usize, usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if flat < t.value.len() {
                let cols = t.value.ncols();
                return Some((i, flat / cols, flat % cols));
            }
            flat -= t.value.len();
        }
        None
    }

    /// Replaces values from `other`, which must have identical names and shapes.
    pub fn load_values(&mut self, other: &[(String, Array2<f64>)]) -> Result<()> {
        if other.len() != self.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tensors, got {}",
                self.tensors.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            let i = self
                .position(name)
                .ok_or_else(|| Error::ShapeMismatch(format!("unexpected tensor {name}")))?;
            if self.tensors[i].value.dim() != value.dim() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {name}: expected {:?}, got {:?}",
                    self.tensors[i].value.dim(),
                    value.dim()
                )));
            }
            self.tensors[i].value = value.clone();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|t| Array2::zeros(t.value.raw_dim()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update with decoupled weight decay:
/// `p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Array2<f64>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.dim() != params.get(i).dim() {
            return Err(Error::ShapeMismatch(format!(
                "gradient for {} has shape {:?}, parameter {:?}",
                params.tensors[i].name,
                g.dim(),
                params.get(i).dim()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let decay = if params.tensors[i].decay {
            cfg.lr * cfg.weight_decay
        } else {
            0.0
        };
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        let p = &mut params.tensors[i].value;
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= decay * *p;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar_param(v: f64) -> ParamSet {
        let mut p = ParamSet::default();
        p.add("w", array![[v]], true);
        p
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar_param(1.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[array![[0.0]]], &mut st, &cfg).unwrap();
        assert_eq!(p.get(0)[[0, 0]], 1.0);
    }

    #[test]
    fn zero_grad_decoupled_decay() {
        let mut p = scalar_param(1.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 1e-4,
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &[array![[0.0]]], &mut st, &cfg).unwrap();
        assert!((p.get(0)[[0, 0]] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // m = 0.1, v = 0.001; m_hat = 1, v_hat = 1; update = lr / (1 + eps)
        let mut p = scalar_param(0.5);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[array![[1.0]]], &mut st, &cfg).unwrap();
        let expected = 0.5 - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p.get(0)[[0, 0]] - expected).abs() < 1e-15);
        assert!((st.m[0][[0, 0]] - 0.1).abs() < 1e-15);
        assert!((st.v[0][[0, 0]] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let mut p = scalar_param(0.3);
        p.add("b", array![[1.0, -2.0]], false);
        let before = p.clone();
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &[array![[0.7]], array![[-1.0, 3.0]]], &mut st, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar_param(0.3);
        let mut st = AdamWState::new(&p);
        let err = adamw_step(
            &mut p,
            &[array![[0.7, 1.0]]],
            &mut st,
            &AdamWConfig::default(),
        );
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
        assert!(adamw_step(&mut p, &[], &mut st, &AdamWConfig::default()).is_err());
    }
}
