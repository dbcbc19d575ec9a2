use serde::{Deserialize, Serialize};

use super::worker::{stream_seed, STREAM_EVAL};
use crate::agent::{select_action, stack_states, ActionMode};
use crate::config::EnvSetup;
use crate::env::{Environment, Preprocessor};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub mean: f64,
    pub max: f64,
    pub min: f64,
    pub games: usize,
    pub scores: Vec<f64>,
}

impl EvalResult {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("no evaluation games"));
        }
        Ok(EvalResult {
            mean: scores.iter().sum::<f64>() / scores.len() as f64,
            max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
            games: scores.len(),
            scores,
        })
    }
}

struct Game {
    env: Box<dyn Environment>,
    pre: Preprocessor,
    state: Tensor<f32>,
    score: f64,
    done: bool,
}

/// Plays `games` episodes with the greedy policy, all games advancing in
/// lockstep so each step is one batched forward pass. Game `i` always uses
/// the same environment seed for a given `seed`.
pub fn evaluate<T: Scalar>(net: &Network<T>, setup: &EnvSetup, games: usize, seed: u64) -> Result<EvalResult> {
    let mut all = Vec::with_capacity(games);
    for i in 0..games {
        let mut env = setup.env_config().build(stream_seed(seed, STREAM_EVAL, i as u64))?;
        let mut pre = setup.preprocessor();
        let first = env.reset();
        let state = pre.reset(&first)?;
        all.push(Game {
            env,
            pre,
            state,
            score: 0.0,
            done: false,
        });
    }
    // greedy selection never touches the generator
    let mut unused = rand::rngs::mock::StepRng::new(0, 0);
    let n_actions = net.n_actions();
    loop {
        let live: Vec<usize> = (0..games).filter(|&i| !all[i].done).collect();
        if live.is_empty() {
            break;
        }
        let states: Vec<&Tensor<f32>> = live.iter().map(|&i| &all[i].state).collect();
        let (policy, _) = net.forward(&stack_states::<T>(&states)?)?;
        for (row, &i) in policy.data().chunks(n_actions).zip(&live) {
            let g = &mut all[i];
            let action = select_action(row, ActionMode::Greedy, &mut unused);
            let step = g.env.step(action)?;
            g.score += step.reward;
            if step.done {
                g.done = true;
            } else {
                g.state = g.pre.push(&step.obs)?;
            }
        }
    }
    EvalResult::from_scores(all.into_iter().map(|g| g.score).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, RunConfig};
    use rand::SeedableRng;

    #[test]
    fn summary_statistics() {
        let r = EvalResult::from_scores(vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        assert_eq!((r.mean, r.max, r.min, r.games), (0.5, 1.0, -1.0, 4));
        assert!(EvalResult::from_scores(vec![]).is_err());
    }

    #[test]
    fn untrained_network_scores_are_episode_returns() {
        let cfg = RunConfig::for_profile(Profile::Desk);
        let net = Network::<f32>::new(cfg.network_spec().unwrap(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)).unwrap();
        let a = evaluate(&net, &cfg.env, 10, 3).unwrap();
        assert_eq!(a.games, 10);
        assert!(a.scores.iter().all(|&s| s == 1.0 || s == -1.0));
        assert_eq!(a, evaluate(&net, &cfg.env, 10, 3).unwrap());
    }
}
