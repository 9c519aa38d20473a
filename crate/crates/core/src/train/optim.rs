use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Result};
use crate::params::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One bias-corrected AdamW update of `param` at step `t` (1-based).
///
/// Decoupled decay `p -= lr * wd * p` is applied only when `decay` is set.
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    state: &mut Moments<T>,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return dim_err("adamw_step", &[param.len()], &[grad.len()]);
    }
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let c1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
    let c2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let shrink = T::ONE - T::from_f64(cfg.lr * cfg.weight_decay);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::ONE - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::ONE - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        if decay {
            param[i] *= shrink;
        }
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// AdamW over the trainable subset of a [`ParamStore`], keyed by parameter name.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Names of the parameters that carry optimizer state.
    pub fn state_keys(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    /// Updates every trainable parameter from its accumulated gradient (zero
    /// when absent). Frozen parameters are never read or written.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let ids: Vec<_> = store.registry().trainable_ids().collect();
        for id in ids {
            let entry = store.registry().get(id);
            let decay = entry.role.decays();
            let name = entry.name.clone();
            let tensor = store.get_mut(id);
            let n = tensor.numel();
            let grad = tensor.grad().map(<[T]>::to_vec).unwrap_or_else(|| vec![T::ZERO; n]);
            let state = self.state.entry(name).or_insert_with(|| Moments {
                m: vec![T::ZERO; n],
                v: vec![T::ZERO; n],
            });
            adamw_update(tensor.data_mut(), &grad, state, self.step, &self.cfg, decay)?;
        }
        Ok(())
    }
}

/// Rescales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.registry().trainable_ids().collect();
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter().map(|v| v.to_f64() * v.to_f64()))
        .sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm > 0.0 {
        let s = T::from_f64(max_norm / norm);
        for id in ids {
            let t = store.get_mut(id);
            if let Some(g) = t.grad() {
                let scaled: Vec<T> = g.iter().map(|&v| v * s).collect();
                t.zero_grad();
                t.accumulate_grad(&scaled).expect("same shape");
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_matches_hand_evaluation() {
        // decay: 1 - 1e-3 * 0.01 = 0.99999; step: 1e-3 * 1 / (1 + 1e-8).
        let mut p = [1.0f64];
        let mut s = Moments { m: vec![0.0], v: vec![0.0] };
        adamw_update(&mut p, &[1.0], &mut s, 1, &AdamWConfig::default(), true).unwrap();
        assert!((p[0] - 0.998990).abs() <= 1e-6, "{}", p[0]);
        assert!((p[0] - (0.99999 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_zero_decay_is_fixed_point() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = [0.3f32, -2.0];
        let mut s = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        for t in 1..=5 {
            adamw_update(&mut p, &[0.0, 0.0], &mut s, t, &cfg, true).unwrap();
        }
        assert_eq!(p, [0.3, -2.0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = [1.0f32, 2.0];
        let mut s = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        assert!(adamw_update(&mut p, &[1.0], &mut s, 1, &AdamWConfig::default(), false).is_err());
    }
}
