//! MiniPong: single-player pong against three walls. The ball moves one cell
//! diagonally per step and bounces off the top, bottom and left walls; the
//! agent's paddle occupies part of the right-most column and moves up, stays,
//! or moves down. Every return scores +1 and the rally continues; a miss
//! scores -1 and ends the episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Environment, Observation, Step};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

pub const DEFAULT_GRID: usize = 32;
pub const DEFAULT_MAX_STEPS: usize = 200;
pub const PADDLE_HEIGHT: usize = 5;

pub const UP: usize = 0;
pub const STAY: usize = 1;
pub const DOWN: usize = 2;

#[derive(Debug, Clone)]
pub struct MiniPong {
    grid: usize,
    max_steps: usize,
    rng: ChaCha8Rng,
    row: i64,
    col: i64,
    d_row: i64,
    d_col: i64,
    /// Top paddle row.
    paddle: usize,
    steps: usize,
    done: bool,
}

impl MiniPong {
    pub fn new(grid: usize, max_steps: usize, seed: u64) -> Result<Self> {
        if grid < PADDLE_HEIGHT + 3 {
            return Err(Error::Env(format!("minipong grid {grid} too small")));
        }
        if max_steps == 0 {
            return Err(Error::Env("max_steps must be positive".into()));
        }
        Ok(MiniPong {
            grid,
            max_steps,
            rng: ChaCha8Rng::seed_from_u64(seed),
            row: 0,
            col: 0,
            d_row: 1,
            d_col: 1,
            paddle: 0,
            steps: 0,
            done: true,
        })
    }

    fn render(&self) -> Observation {
        let g = self.grid;
        let mut data = vec![0.0f32; g * g];
        data[self.row as usize * g + self.col as usize] = 1.0;
        for r in self.paddle..self.paddle + PADDLE_HEIGHT {
            data[r * g + g - 1] = 1.0;
        }
        Tensor::from_vec(&[g, g, 1], Layout::Flat, data).expect("pong frame")
    }
}

impl Environment for MiniPong {
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
        let g = self.grid as i64;
        self.row = self.rng.gen_range(1..g - 1);
        self.col = g / 2;
        self.d_row = if self.rng.gen_bool(0.5) { 1 } else { -1 };
        self.d_col = 1;
        self.paddle = (self.grid - PADDLE_HEIGHT) / 2;
        self.steps = 0;
        self.done = false;
        self.render()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        if self.done {
            return Err(Error::Env("step after episode end; call reset".into()));
        }
        let g = self.grid as i64;
        match action {
            UP => self.paddle = self.paddle.saturating_sub(1),
            STAY => {}
            DOWN => self.paddle = (self.paddle + 1).min(self.grid - PADDLE_HEIGHT),
            _ => return Err(Error::Env(format!("action {action} out of range for minipong"))),
        }

        self.row += self.d_row;
        if self.row < 0 || self.row > g - 1 {
            self.d_row = -self.d_row;
            self.row += 2 * self.d_row;
        }
        self.col += self.d_col;
        if self.col <= 0 {
            self.col = -self.col;
            self.d_col = 1;
        }

        let mut reward = 0.0;
        if self.col >= g - 1 {
            let r = self.row as usize;
            if (self.paddle..self.paddle + PADDLE_HEIGHT).contains(&r) {
                reward = 1.0;
                self.col = g - 2;
                self.d_col = -1;
            } else {
                reward = -1.0;
                self.col = g - 1;
                self.done = true;
            }
        }
        self.steps += 1;
        if self.steps >= self.max_steps {
            self.done = true;
        }
        Ok(Step {
            obs: self.render(),
            reward,
            done: self.done,
        })
    }
}
