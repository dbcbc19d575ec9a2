//! Catch: a ball drops one row per step from a random column of the top row;
//! a paddle on the bottom row moves left, stays, or moves right. Catching the
//! ball scores +1, missing it -1; either ends the episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, Observation, Step};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

pub const DEFAULT_GRID: usize = 24;
pub const PADDLE_WIDTH: usize = 3;

pub const LEFT: usize = 0;
pub const STAY: usize = 1;
pub const RIGHT: usize = 2;

#[derive(Debug, Clone)]
pub struct Catch {
    grid: usize,
    max_steps: usize,
    rng: ChaCha8Rng,
    ball_row: usize,
    ball_col: usize,
    /// Leftmost paddle column.
    paddle: usize,
    steps: usize,
    done: bool,
}

impl Catch {
    pub fn new(grid: usize, max_steps: usize, seed: u64) -> Result<Self> {
        if grid < PADDLE_WIDTH + 2 {
            return Err(Error::Env(format!("catch grid {grid} too small")));
        }
        if max_steps == 0 {
            return Err(Error::Env("max_steps must be positive".into()));
        }
        Ok(Catch {
            grid,
            max_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ball_row: 0,
            ball_col: 0,
            paddle: 0,
            steps: 0,
            done: true,
        })
    }

    /// Starts an episode with the ball over column `col`.
    pub fn reset_with_column(&mut self, col: usize) -> Observation {
        self.ball_row = 0;
        self.ball_col = col.min(self.grid - 1);
        self.paddle = (self.grid - PADDLE_WIDTH) / 2;
        self.steps = 0;
        self.done = false;
        self.render()
    }

    pub fn paddle_span(&self) -> std::ops::Range<usize> {
        self.paddle..self.paddle + PADDLE_WIDTH
    }

    fn render(&self) -> Observation {
        let g = self.grid;
        let mut data = vec![0.0f32; g * g];
        data[self.ball_row * g + self.ball_col] = 1.0;
        for c in self.paddle_span() {
            data[(g - 1) * g + c] = 1.0;
        }
        Tensor::from_vec(&[g, g, 1], Layout::Flat, data).expect("catch frame")
    }
}

impl Environment for Catch {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            n_actions: 3,
            obs_h: self.grid,
            obs_w: self.grid,
            obs_channels: 1,
            max_episode_steps: self.max_steps,
        }
    }

    fn reset(&mut self) -> Observation {
        let col = self.rng.gen_range(0..self.grid);
        self.reset_with_column(col)
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step after episode end; call reset".into()));
        }
        match action {
            LEFT => self.paddle = self.paddle.saturating_sub(1),
            STAY => {}
            RIGHT => self.paddle = (self.paddle + 1).min(self.grid - PADDLE_WIDTH),
            _ => return Err(Error::Env(format!("action {action} out of range for catch"))),
        }
        self.ball_row += 1;
        self.steps += 1;
        let mut reward = 0.0;
        if self.ball_row == self.grid - 1 {
            reward = if self.paddle_span().contains(&self.ball_col) { 1.0 } else { -1.0 };
            self.done = true;
        } else if self.steps >= self.max_steps {
            self.done = true;
        }
        Ok(Step {
            obs: self.render(),
            reward,
            done: self.done,
        })
    }
}
