use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, save_params};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect()
        };
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Writes both moment sets as parameter files named after `store`.
    pub fn save(&self, store: &ParamStore<T>, m_path: &Path, v_path: &Path) -> Result<()> {
        for (moments, path) in [(&self.m, m_path), (&self.v, v_path)] {
            let mut s = ParamStore::new();
            for (p, t) in store.iter().zip(moments) {
                s.insert(p.name.clone(), t.clone())?;
            }
            save_params(path, &s)?;
        }
        Ok(())
    }

    pub fn load(
        store: &ParamStore<T>,
        config: AdamConfig,
        step: u64,
        m_path: &Path,
        v_path: &Path,
    ) -> Result<Self> {
        let read = |path: &Path| -> Result<Vec<Tensor<T>>> {
            let s = load_params(path)?;
            store
                .iter()
                .map(|p| match s.by_name(&p.name) {
                    Some(q) if q.value.shape() == p.value.shape() => Ok(q.value.cast()),
                    _ => Err(Error::Input(format!(
                        "{}: no moment of shape {:?} for `{}`",
                        path.display(),
                        p.value.shape(),
                        p.name
                    ))),
                })
                .collect()
        };
        Ok(AdamState {
            config,
            m: read(m_path)?,
            v: read(v_path)?,
            step,
        })
    }
}

/// One bias-corrected Adam update of every trainable parameter from its
/// accumulated gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) {
    state.step += 1;
    let c = &state.config;
    let s = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let corr1 = T::lit(1.0 - c.beta1.powi(s));
    let corr2 = T::lit(1.0 - c.beta2.powi(s));
    let (lr, eps) = (T::lit(lr), T::lit(c.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.requires_grad {
            continue;
        }
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(x)).unwrap();
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: f64) {
        s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
    }

    #[test]
    fn two_step_trace() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let expected = [0.9000000001999999, 0.8653186040987564];
        for (g, want) in [0.5, -0.2].into_iter().zip(expected) {
            set_grad(&mut s, g);
            adam_step(&mut s, &mut st, 0.1);
            let x = s.iter().next().unwrap().value.item();
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
        assert_eq!(st.step, 2);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = scalar_store(0.7);
        let mut st = AdamState::new(&s, AdamConfig::default());
        for _ in 0..5 {
            set_grad(&mut s, 0.0);
            adam_step(&mut s, &mut st, 0.1);
        }
        assert_eq!(s.iter().next().unwrap().value.item(), 0.7);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let mut s = scalar_store(0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        let mut prev = 0.0;
        for _ in 0..200 {
            set_grad(&mut s, -3.0);
            adam_step(&mut s, &mut st, 0.01);
            let x = s.iter().next().unwrap().value.item();
            assert!((x - prev - 0.01).abs() < 1e-8);
            prev = x;
        }
    }
}
