use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::params::{ParamId, ParamStore};
use crate::kernel::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, store: &ParamStore<S>, ids: &[ParamId]) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape());
        AdamState {
            config,
            step: 0,
            ids: ids.to_vec(),
            m: ids.iter().map(zeros).collect(),
            v: ids.iter().map(zeros).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<S>, &Tensor<S>)> {
        let pos = self.ids.iter().position(|&i| i == id)?;
        Some((&self.m[pos], &self.v[pos]))
    }

    /// Restores moments and step count, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<()> {
        if m.len() != self.ids.len() || v.len() != self.ids.len() {
            return Err(Error::Invalid("moment count does not match parameter group".into()));
        }
        for ((old, new), (old_v, new_v)) in self.m.iter().zip(&m).zip(self.v.iter().zip(&v)) {
            if old.shape() != new.shape() || old_v.shape() != new_v.shape() {
                return Err(Error::dim("adam restore", "moment shape mismatch"));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One bias-corrected Adam update. Managed parameters absent from
    /// `grads` are treated as having a zero gradient.
    pub fn apply(&mut self, store: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)]) -> Result<()> {
        let next = self.step + 1;
        for (id, g) in grads {
            if !self.ids.contains(id) {
                return Err(Error::Invalid(format!(
                    "gradient for {} outside this optimizer group",
                    store.name(*id)
                )));
            }
            if !g.is_finite() {
                return Err(Error::Divergence {
                    step: next,
                    detail: format!("non-finite gradient for {}", store.name(*id)),
                });
            }
        }
        let c = self.config;
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let (lr, eps) = (S::from_f64_lossy(c.lr), S::from_f64_lossy(c.eps));
        let bc1 = S::one() - b1.powi(next as i32);
        let bc2 = S::one() - b2.powi(next as i32);
        for (pos, id) in self.ids.iter().enumerate() {
            let grad = grads.iter().find(|(gid, _)| gid == id).map(|(_, g)| g.data());
            let param = store.get_mut(*id).data_mut();
            let (m, v) = (self.m[pos].data_mut(), self.v[pos].data_mut());
            for j in 0..param.len() {
                let g = grad.map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                param[j] = param[j] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step = next;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(w: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w));
        (s, id)
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let (mut s, id) = store_with(1.5);
        let mut adam = AdamState::new(AdamConfig::default(), &s, &[id]);
        adam.apply(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        assert_eq!(s.get(id).data(), &[1.5]);
        assert_eq!(adam.step(), 1);
        let (m, v) = adam.moments(id).unwrap();
        assert_eq!((m.data()[0], v.data()[0]), (0.0, 0.0));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let (mut s, id) = store_with(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s, &[id]);
        adam.apply(&mut s, &[(id, Tensor::scalar(2.0))]).unwrap();
        let (m0, v0) = adam.moments(id).map(|(m, v)| (m.data()[0], v.data()[0])).unwrap();
        adam.apply(&mut s, &[(id, Tensor::scalar(0.0))]).unwrap();
        let (m1, v1) = adam.moments(id).map(|(m, v)| (m.data()[0], v.data()[0])).unwrap();
        assert!(m1.abs() < m0.abs() && v1 < v0);
    }

    #[test]
    fn descends_on_square() {
        let (mut s, id) = store_with(1.0);
        let config = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(config, &s, &[id]);
        let g = 2.0 * s.get(id).data()[0];
        adam.apply(&mut s, &[(id, Tensor::scalar(g))]).unwrap();
        assert!(s.get(id).data()[0] < 1.0);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let (mut s, id) = store_with(1.0);
        let mut adam = AdamState::new(AdamConfig::default(), &s, &[id]);
        adam.apply(&mut s, &[(id, Tensor::scalar(1.0))]).unwrap();
        let err = adam.apply(&mut s, &[(id, Tensor::scalar(f64::NAN))]).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 2, .. }));
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn matches_reference_recurrence_on_quadratic() {
        // f(w) = 0.5 * a * (w - c)^2 per coordinate
        let a = [1.0, 3.0, 0.25];
        let c = [0.5, -1.0, 2.0];
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(vec![0.0, 0.0, 0.0]));
        let config = AdamConfig { lr: 0.05, ..AdamConfig::default() };
        let mut adam = AdamState::new(config, &s, &[id]);

        let (mut w, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
        for t in 1..=3 {
            let grad: Vec<f64> = (0..3).map(|i| a[i] * (s.get(id).data()[i] - c[i])).collect();
            adam.apply(&mut s, &[(id, Tensor::vector(grad))]).unwrap();

            for i in 0..3 {
                let g = a[i] * (w[i] - c[i]);
                m[i] = 0.9 * m[i] + (1.0 - 0.9) * g;
                v[i] = 0.999 * v[i] + (1.0 - 0.999) * g * g;
                let m_hat = m[i] / (1.0 - 0.9f64.powi(t));
                let v_hat = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= 0.05 * m_hat / (v_hat.sqrt() + 1e-8);
            }
        }
        assert_eq!(s.get(id).data(), &w);
    }
}
