//! Environments: a small trait, two deterministic grid games, and the
//! observation preprocessing (nearest-neighbor rescale + frame stacking).

mod catch;
mod frames;
mod minipong;
mod trace;

use serde::{Deserialize, Serialize};

pub use catch::Catch;
pub use frames::{rescale, stack_frames, FrameStack, Preprocessor};
pub use minipong::MiniPong;
pub use trace::{TraceRecord, TraceWriter};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Static description of an environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub n_actions: usize,
    pub obs_h: usize,
    pub obs_w: usize,
    pub obs_channels: usize,
    pub max_episode_steps: usize,
}

/// One frame `[obs_h, obs_w, obs_channels]` with values in `[0, 1]`.
pub type Observation = Tensor<f32>;

#[derive(Debug, Clone)]
pub struct Step {
    pub obs: Observation,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment: Send {
    fn spec(&self) -> EnvSpec;

    /// Starts a new episode. Episodes are drawn from the environment's own
    /// seeded generator, so the sequence of resets is reproducible.
    fn reset(&mut self) -> Observation;

    /// Errors when `action` is out of range or the episode already ended.
    fn step(&mut self, action: usize) -> Result<Step>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvName {
    Catch,
    #[serde(rename = "minipong")]
    MiniPong,
}

impl std::str::FromStr for EnvName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "catch" => Ok(EnvName::Catch),
            "minipong" => Ok(EnvName::MiniPong),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

/// Environment selection (`env.*` config keys).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    /// Square grid side; `None` selects the game's default (24 Catch, 32 MiniPong).
    #[serde(default)]
    pub grid: Option<usize>,
    /// Episode cap; `None` selects the game's default.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            name: EnvName::Catch,
            grid: None,
            max_steps: None,
        }
    }
}

impl EnvConfig {
    pub fn build(&self, seed: u64) -> Result<Box<dyn Environment>> {
        Ok(match self.name {
            EnvName::Catch => {
                let grid = self.grid.unwrap_or(catch::DEFAULT_GRID);
                Box::new(Catch::new(grid, self.max_steps.unwrap_or(grid), seed)?)
            }
            EnvName::MiniPong => {
                let grid = self.grid.unwrap_or(minipong::DEFAULT_GRID);
                Box::new(MiniPong::new(grid, self.max_steps.unwrap_or(minipong::DEFAULT_MAX_STEPS), seed)?)
            }
        })
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        Ok(self.build(0)?.spec())
    }

    /// Lowest possible episode score, used as the score of diverged runs.
    pub fn min_score(&self) -> f64 {
        -1.0
    }

    /// Expected score of the uniformly random policy, where it is known in
    /// closed form.
    pub fn random_baseline(&self) -> Option<f64> {
        match self.name {
            EnvName::Catch => {
                let grid = self.grid.unwrap_or(catch::DEFAULT_GRID);
                let p = catch::PADDLE_WIDTH as f64 / grid as f64;
                Some(2.0 * p - 1.0)
            }
            EnvName::MiniPong => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rollout(env: &mut dyn Environment, actions: &[usize]) -> Vec<(Vec<u32>, f64, bool)> {
        let mut out = vec![(env.reset().data().iter().map(|v| v.to_bits()).collect(), 0.0, false)];
        for &a in actions {
            let s = match env.step(a) {
                Ok(s) => s,
                Err(_) => {
                    let o = env.reset();
                    out.push((o.data().iter().map(|v| v.to_bits()).collect(), 0.0, false));
                    continue;
                }
            };
            out.push((s.obs.data().iter().map(|v| v.to_bits()).collect(), s.reward, s.done));
            if s.done {
                env.reset();
            }
        }
        out
    }

    #[test]
    fn seeded_envs_are_deterministic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let actions: Vec<usize> = (0..300).map(|_| rng.gen_range(0..3)).collect();
        for name in [EnvName::Catch, EnvName::MiniPong] {
            let cfg = EnvConfig {
                name,
                ..EnvConfig::default()
            };
            let a = rollout(cfg.build(9).unwrap().as_mut(), &actions);
            let b = rollout(cfg.build(9).unwrap().as_mut(), &actions);
            assert_eq!(a, b);
            let c = rollout(cfg.build(10).unwrap().as_mut(), &actions);
            assert_ne!(a, c);
        }
    }

    #[test]
    fn episodes_respect_cap() {
        for (name, cap) in [(EnvName::Catch, 10), (EnvName::MiniPong, 37)] {
            let cfg = EnvConfig {
                name,
                grid: None,
                max_steps: Some(cap),
            };
            let mut env = cfg.build(1).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            for _ in 0..20 {
                env.reset();
                let mut steps = 0;
                loop {
                    let s = env.step(rng.gen_range(0..3)).unwrap();
                    steps += 1;
                    assert!(s.reward.is_finite());
                    if s.done {
                        break;
                    }
                }
                assert!(steps <= cap);
            }
        }
    }

    #[test]
    fn env_name_parsing() {
        assert_eq!("Catch".parse::<EnvName>().unwrap(), EnvName::Catch);
        assert_eq!("minipong".parse::<EnvName>().unwrap(), EnvName::MiniPong);
        assert!("pong".parse::<EnvName>().is_err());
    }
}
