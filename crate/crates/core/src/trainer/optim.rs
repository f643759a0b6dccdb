use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments by parameter name, plus the number of updates taken.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn round_to_f32(&mut self) {
        for x in self.m.values_mut().chain(self.v.values_mut()) {
            for e in x.iter_mut() {
                *e = *e as f32 as f64;
            }
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Vec<f64>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam update after global-norm clipping.
/// Weight decay applies to matrices only. Returns the pre-clip gradient norm.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &mut BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<f64> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::Divergence {
            step: state.t,
            message: format!("non-finite gradient for {name}"),
        });
    }
    let norm = clip_grad_norm(grads, cfg.grad_clip);
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| TrainError::Config(format!("missing gradient for {name}")))?;
        if g.len() != p.numel() {
            return Err(TrainError::Config(format!(
                "gradient for {name} has {} entries, parameter has {}",
                g.len(),
                p.numel()
            )));
        }
        let decay = if p.shape().len() >= 2 { cfg.weight_decay } else { 0.0 };
        let n = p.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        for (i, w) in p.data_mut().iter_mut().enumerate() {
            *w *= 1.0 - lr * decay;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_a_no_op() {
        let mut p = ParamStore::new();
        p.insert("m", Tensor::from_rows(2, 2, vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let before = p.clone();
        let mut g = BTreeMap::from([("m".to_string(), vec![0.0; 4])]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &mut g, &mut AdamState::default(), 1e-3, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_store(0.0);
        let mut g = BTreeMap::from([("w".to_string(), vec![1.0])]);
        let cfg = AdamWConfig::default();
        adamw_step(&mut p, &mut g, &mut AdamState::default(), 1e-3, &cfg).unwrap();
        let w = p.get("w").unwrap().item();
        assert!((w + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15, "{w}");
    }

    #[test]
    fn clipping_scales_to_unit_norm() {
        let mut g = BTreeMap::from([("a".to_string(), vec![6.0]), ("b".to_string(), vec![8.0])]);
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 10.0);
        assert!((g["a"][0] - 0.6).abs() < 1e-15);
        assert!((g["b"][0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_diverges() {
        let mut p = scalar_store(0.0);
        let mut g = BTreeMap::from([("w".to_string(), vec![f64::NAN])]);
        let r = adamw_step(&mut p, &mut g, &mut AdamState::default(), 1e-3, &AdamWConfig::default());
        assert!(matches!(r, Err(TrainError::Divergence { .. })));
    }
}
