//! Actor-critic learning rule: n-step returns, the combined
//! policy/value/entropy loss and its gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Network, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{Layout, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub gamma: f64,
    /// Steps memorized before a segment is closed with a bootstrapped return.
    pub local_t_max: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            gamma: 0.99,
            local_t_max: 5,
            entropy_coef: 0.01,
            value_coef: 0.5,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("agent.gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.local_t_max == 0 {
            return Err(Error::Config("agent.local_t_max must be at least 1".into()));
        }
        if !self.entropy_coef.is_finite() || !self.value_coef.is_finite() {
            return Err(Error::Config("loss coefficients must be finite".into()));
        }
        Ok(())
    }
}

/// One training example: a stacked `[h, w, c]` state, the action taken there
/// and its n-step return target.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Tensor<f32>,
    pub action: usize,
    pub return_target: f64,
}

/// `R_t = r_t + γ R_{t+1}`, seeded with 0 on terminal segments and with
/// `bootstrap` otherwise.
pub fn compute_returns(rewards: &[f64], bootstrap: f64, terminal: bool, gamma: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("compute_returns: empty reward list"));
    }
    let mut acc = if terminal { 0.0 } else { bootstrap };
    if !acc.is_finite() {
        return Err(Error::NonFinite(format!("bootstrap value {bootstrap}")));
    }
    let mut out = vec![0.0; rewards.len()];
    for (slot, &r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *slot = acc;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub policy_loss: T,
    pub value_loss: T,
    /// Mean policy entropy over the batch.
    pub entropy: T,
    /// `dL/dlogits`, `[B, n_actions]`.
    pub grad_logits: Tensor<T>,
    /// `dL/dV`, `[B]`.
    pub grad_value: Tensor<T>,
}

fn check_heads<T: Scalar>(policy: &Tensor<T>, value: &Tensor<T>, n: usize) -> Result<usize> {
    let &[b, a] = policy.shape() else {
        return Err(Error::shape(format!("policy must be [B, A], got {:?}", policy.shape())));
    };
    if b == 0 || b != n || value.len() != b {
        return Err(Error::shape(format!(
            "policy {:?}, value {:?}, batch of {n}",
            policy.shape(),
            value.shape()
        )));
    }
    Ok(a)
}

/// The A3C loss with the advantage supplied explicitly. `a3c_loss` passes
/// `A = R - V`; holding `A` fixed here is what makes the finite-difference
/// check of the analytic gradient well defined.
pub fn a3c_loss_with_advantage<T: Scalar>(
    policy: &Tensor<T>,
    value: &Tensor<T>,
    actions: &[usize],
    returns: &[T],
    advantages: &[T],
    cfg: &AgentConfig,
) -> Result<LossOutput<T>> {
    let n_actions = check_heads(policy, value, actions.len())?;
    if returns.len() != actions.len() || advantages.len() != actions.len() {
        return Err(Error::shape("actions, returns and advantages differ in length"));
    }
    let b = actions.len();
    let inv_b = T::one() / T::from_usize_lossy(b);
    let beta_e = T::from_f64_lossy(cfg.entropy_coef);
    let beta_v = T::from_f64_lossy(cfg.value_coef);
    let two = T::from_f64_lossy(2.0);

    let mut grad_logits = vec![T::zero(); b * n_actions];
    let mut grad_value = vec![T::zero(); b];
    let (mut pl, mut vl, mut ent) = (T::zero(), T::zero(), T::zero());
    for i in 0..b {
        let row = &policy.data()[i * n_actions..(i + 1) * n_actions];
        let a = actions[i];
        if a >= n_actions {
            return Err(Error::invalid(format!("action {a} out of range for {n_actions} actions")));
        }
        if row[a] <= T::zero() {
            return Err(Error::NonFinite(format!("zero probability at taken action {a} (sample {i})")));
        }
        let logp: Vec<T> = row.iter().map(|&p| if p > T::zero() { p.ln() } else { T::zero() }).collect();
        let h = -row.iter().zip(&logp).map(|(&p, &l)| p * l).sum::<T>();
        let adv = advantages[i];
        let diff = returns[i] - value.data()[i];

        pl += -logp[a] * adv;
        ent += h;
        vl += diff * diff;

        let g = &mut grad_logits[i * n_actions..(i + 1) * n_actions];
        for j in 0..n_actions {
            let onehot = if j == a { T::one() } else { T::zero() };
            let pg = -adv * (onehot - row[j]);
            let eg = beta_e * row[j] * (logp[j] + h);
            g[j] = (pg + eg) * inv_b;
        }
        grad_value[i] = -two * beta_v * diff * inv_b;
    }
    let (pl, vl, ent) = (pl * inv_b, vl * inv_b, ent * inv_b);
    let out = LossOutput {
        loss: pl - beta_e * ent + beta_v * vl,
        policy_loss: pl,
        value_loss: vl,
        entropy: ent,
        grad_logits: Tensor::from_vec(&[b, n_actions], Layout::Flat, grad_logits)?,
        grad_value: Tensor::from_vec(&[b], Layout::Flat, grad_value)?,
    };
    if !out.loss.is_finite() || !out.grad_logits.is_finite() || !out.grad_value.is_finite() {
        return Err(Error::NonFinite("a3c loss or its gradient is not finite".into()));
    }
    Ok(out)
}

/// Mean over the batch of `-log π(a|s)·A - β_e·H(π(·|s)) + β_v·(R - V(s))²`
/// with `A = R - V(s)` treated as a constant.
pub fn a3c_loss<T: Scalar>(
    policy: &Tensor<T>,
    value: &Tensor<T>,
    batch: &[Experience],
    cfg: &AgentConfig,
) -> Result<LossOutput<T>> {
    check_heads(policy, value, batch.len())?;
    let actions: Vec<usize> = batch.iter().map(|e| e.action).collect();
    let returns: Vec<T> = batch.iter().map(|e| T::from_f64_lossy(e.return_target)).collect();
    let adv: Vec<T> = returns.iter().zip(value.data()).map(|(&r, &v)| r - v).collect();
    a3c_loss_with_advantage(policy, value, &actions, &returns, &adv, cfg)
}

/// Stacks `[h, w, c]` states into an NHWC network input.
pub fn stack_states<T: Scalar>(states: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = states.first().ok_or_else(|| Error::invalid("empty state batch"))?;
    let &[h, w, c] = first.shape() else {
        return Err(Error::shape(format!("state must be [h, w, c], got {:?}", first.shape())));
    };
    let mut data = Vec::with_capacity(states.len() * h * w * c);
    for s in states {
        if s.shape() != first.shape() {
            return Err(Error::shape(format!("state {:?} vs {:?}", s.shape(), first.shape())));
        }
        data.extend(s.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec(&[states.len(), h, w, c], Layout::Nhwc, data)
}

/// Forward, loss and backward for one training batch.
pub fn loss_and_grads<T: Scalar>(
    net: &Network<T>,
    batch: &[Experience],
    cfg: &AgentConfig,
) -> Result<(LossOutput<T>, ParamSet<T>)> {
    let states: Vec<&Tensor<f32>> = batch.iter().map(|e| &e.state).collect();
    let x = stack_states::<T>(&states)?;
    let cache = net.forward_cached(&x)?;
    let out = a3c_loss(&cache.policy, &cache.value, batch, cfg)?;
    let grads = net.backward(&cache, &out.grad_logits, &out.grad_value)?;
    Ok((out, grads))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the policy (training).
    Sample,
    /// Most probable action, lowest index on ties (evaluation).
    Greedy,
}

pub fn select_action<T: Scalar>(policy_row: &[T], mode: ActionMode, rng: &mut impl Rng) -> usize {
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &p) in policy_row.iter().enumerate() {
                if p > policy_row[best] {
                    best = i;
                }
            }
            best
        }
        ActionMode::Sample => {
            let total: f64 = policy_row.iter().map(|p| p.to_f64_lossy()).sum();
            let u = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut last_nonzero = 0;
            for (i, p) in policy_row.iter().enumerate() {
                let p = p.to_f64_lossy();
                if p > 0.0 {
                    last_nonzero = i;
                }
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // rounding left `u` past the cumulative sum
            last_nonzero
        }
    }
}
