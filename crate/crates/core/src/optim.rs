//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdamMoments, Record};
use crate::error::{Error, Result};
use crate::nn::{ModelParams, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Rescale the whole gradient when its global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &ModelParams<T>) -> Self {
        AdamState {
            config,
            m: params.tensors.zeros_like(),
            v: params.tensors.zeros_like(),
            t: 0,
        }
    }

    /// Restores a saved optimizer; moment shapes must match `params`.
    pub fn from_moments(config: AdamConfig, params: &ModelParams<T>, moments: AdamMoments<T>) -> Result<Self> {
        params.tensors.check_matches(&moments.m)?;
        params.tensors.check_matches(&moments.v)?;
        Ok(AdamState {
            config,
            m: moments.m,
            v: moments.v,
            t: moments.t,
        })
    }

    /// One Adam update. Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &ParamSet<T>) -> Result<()> {
        params.tensors.check_matches(grads)?;
        params.tensors.check_matches(&self.m)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient contains NaN/Inf; step rejected".into()));
        }

        let mut clip = T::one();
        if let Some(max_norm) = self.config.clip_norm {
            let norm = grads.global_norm().to_f64_lossy();
            if norm > max_norm {
                clip = T::from_f64_lossy(max_norm / norm);
            }
        }

        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(self.t as i32));
        let one = T::one();

        let iter = params
            .tensors
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for (((_, p), (_, g)), ((_, m), (_, v))) in iter {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.bump_version();
        Ok(())
    }

    pub fn to_records(&self) -> Vec<Record> {
        let mut recs = self.m.to_records("adam.m.");
        recs.extend(self.v.to_records("adam.v."));
        recs.push(Record::scalar_f64("adam.t", self.t as f64));
        recs
    }
}
