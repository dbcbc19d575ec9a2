use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PredictionRequest, PredictionResult};
use crate::agent::{compute_returns, select_action, ActionMode, AgentConfig, Experience};
use crate::config::EnvSetup;
use crate::env::{Environment, Preprocessor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seeds derived from the run seed, so every stream is reproducible on its own.
pub(crate) fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) const STREAM_ENV: u64 = 1;
pub(crate) const STREAM_ACTION: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;
pub(crate) const STREAM_INIT: u64 = 4;
pub(crate) const STREAM_SEARCH: u64 = 5;

/// What one environment step produced.
#[derive(Debug, Default)]
pub(crate) struct StepOutput {
    pub experiences: Vec<Experience>,
    pub episode_score: Option<f64>,
}

/// One environment and its memory of the current segment. Each call to
/// `on_result` consumes the prediction for `state` and advances one step.
pub(crate) struct Worker {
    pub id: usize,
    env: Box<dyn Environment>,
    pre: Preprocessor,
    rng: ChaCha8Rng,
    state: Tensor<f32>,
    memory: Vec<(Tensor<f32>, usize, f64)>,
    episode_return: f64,
    agent: AgentConfig,
}

impl Worker {
    pub fn new(id: usize, setup: &EnvSetup, agent: AgentConfig, seed: u64) -> Result<Self> {
        let mut env = setup.env_config().build(stream_seed(seed, STREAM_ENV, id as u64))?;
        let mut pre = setup.preprocessor();
        let first = env.reset();
        let state = pre.reset(&first)?;
        Ok(Worker {
            id,
            env,
            pre,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_ACTION, id as u64)),
            state,
            memory: Vec::with_capacity(agent.local_t_max),
            episode_return: 0.0,
            agent,
        })
    }

    pub fn state(&self) -> &Tensor<f32> {
        &self.state
    }

    pub fn request(&self) -> PredictionRequest {
        PredictionRequest {
            env_id: self.id,
            state: self.state.clone(),
            enqueue_time: None,
        }
    }

    /// Experiences still in memory; they are lost when the worker stops.
    pub fn pending(&self) -> usize {
        self.memory.len()
    }

    fn flush(&mut self, bootstrap: f64, terminal: bool) -> Result<Vec<Experience>> {
        if self.memory.is_empty() {
            return Ok(Vec::new());
        }
        let rewards: Vec<f64> = self.memory.iter().map(|m| m.2).collect();
        let returns = compute_returns(&rewards, bootstrap, terminal, self.agent.gamma)?;
        Ok(self
            .memory
            .drain(..)
            .zip(returns)
            .map(|((state, action, _), r)| Experience {
                state,
                action,
                return_target: r,
            })
            .collect())
    }

    pub fn on_result(&mut self, res: &PredictionResult) -> Result<StepOutput> {
        if res.env_id != self.id {
            return Err(Error::Pipeline(format!(
                "worker {} received the result for env {}",
                self.id, res.env_id
            )));
        }
        let mut out = StepOutput::default();
        if self.memory.len() >= self.agent.local_t_max {
            // the value of the state we are in closes the full segment
            out.experiences = self.flush(res.value, false)?;
        }
        let action = select_action(&res.policy, ActionMode::Sample, &mut self.rng);
        let step = self.env.step(action)?;
        self.episode_return += step.reward;
        let prev = std::mem::replace(&mut self.state, Tensor::zeros(&[1], crate::tensor::Layout::Flat)?);
        self.memory.push((prev, action, step.reward));
        if step.done {
            out.experiences.extend(self.flush(0.0, true)?);
            out.episode_score = Some(self.episode_return);
            self.episode_return = 0.0;
            let first = self.env.reset();
            self.state = self.pre.reset(&first)?;
        } else {
            self.state = self.pre.push(&step.obs)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};

    fn uniform(id: usize) -> PredictionResult {
        PredictionResult {
            env_id: id,
            policy: vec![1.0 / 3.0; 3],
            value: 0.5,
        }
    }

    #[test]
    fn segments_are_bootstrapped_or_terminal() {
        let cfg = RunConfig::for_profile(Profile::Desk);
        let agent = AgentConfig { local_t_max: 5, gamma: 0.5, ..cfg.agent };
        let mut w = Worker::new(0, &cfg.env, agent, 1).unwrap();
        let mut total = 0;
        let mut ends = 0;
        for _ in 0..23 * 3 {
            let out = w.on_result(&uniform(0)).unwrap();
            let n = out.experiences.len();
            assert!(n <= 5);
            if out.episode_score.is_some() {
                ends += 1;
                // 23 steps: four bootstrapped segments of 5, then a terminal one of 3
                assert_eq!(n, 3);
                let r = out.episode_score.unwrap();
                assert_eq!(out.experiences.last().unwrap().return_target, r);
            } else if n > 0 {
                assert_eq!(n, 5);
                // every reward inside the segment is zero until the ball lands
                let want = 0.5f64.powi(5) * 0.5;
                assert!((out.experiences[0].return_target - want).abs() < 1e-12);
            }
            total += n;
        }
        assert_eq!(ends, 3);
        assert_eq!(total, 69);
        assert_eq!(w.pending(), 0);
    }

    #[test]
    fn rejects_misrouted_result() {
        let cfg = RunConfig::for_profile(Profile::Desk);
        let mut w = Worker::new(2, &cfg.env, cfg.agent, 1).unwrap();
        assert!(w.on_result(&uniform(1)).is_err());
    }

    #[test]
    fn stream_seeds_differ() {
        let a = stream_seed(1, STREAM_ENV, 0);
        assert_ne!(a, stream_seed(1, STREAM_ENV, 1));
        assert_ne!(a, stream_seed(1, STREAM_ACTION, 0));
        assert_ne!(a, stream_seed(2, STREAM_ENV, 0));
        assert_eq!(a, stream_seed(1, STREAM_ENV, 0));
    }
}
