use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::delay::DelayBuffer;
use super::eval::evaluate;
use super::throughput::ThroughputMeter;
use super::worker::{stream_seed, STREAM_INIT};
use super::{EvalPoint, MetricsRecord, QueueDepths, StalenessStats, TimingRecord, TrainingBatch};
use crate::agent::{loss_and_grads, AgentConfig};
use crate::config::{EnvSetup, RunConfig};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::optim::AdamState;
use crate::scalar::Scalar;

const THROUGHPUT_WINDOW_SECS: f64 = 10.0;

/// Owner of the master parameters. Batches pass through the delay buffer,
/// are checked against the staleness bound and applied with one Adam step.
pub(crate) struct Trainer<T> {
    pub net: Network<T>,
    pub adam: AdamState<T>,
    agent: AgentConfig,
    pub bound: u64,
    pub delay: DelayBuffer<TrainingBatch>,
    batch_size: usize,
    pub steps: u64,
    pub examples: u64,
    pub last_staleness: u64,
    pub max_staleness: u64,
    last_loss: f64,
    last_entropy: f64,

    setup: EnvSetup,
    eval_games: usize,
    eval_seed: u64,
    eval_interval: u64,
    budget: u64,
    next_eval: u64,
    pub evals: Vec<EvalPoint>,
    pub metrics: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    meter: ThroughputMeter,
    start: Instant,
    /// Wall-clock fields go into metrics only when runs are not meant to be
    /// bitwise reproducible.
    wall_in_metrics: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &RunConfig, wall_in_metrics: bool) -> Result<Self> {
        let spec = cfg.network_spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, STREAM_INIT, 0));
        let net = Network::new(spec, &mut rng)?;
        let adam = AdamState::new(cfg.optim, &net.params);
        let interval = cfg.train.eval_interval;
        let mut meter = ThroughputMeter::new(THROUGHPUT_WINDOW_SECS);
        meter.record(0.0, 0);
        Ok(Trainer {
            net,
            adam,
            agent: cfg.agent,
            bound: cfg.pipeline.staleness_bound(),
            delay: DelayBuffer::new(cfg.pipeline.delay_k),
            batch_size: cfg.pipeline.batch_size,
            steps: 0,
            examples: 0,
            last_staleness: 0,
            max_staleness: 0,
            last_loss: f64::NAN,
            last_entropy: f64::NAN,
            setup: cfg.env.clone(),
            eval_games: cfg.train.eval_games,
            eval_seed: cfg.seed,
            eval_interval: interval,
            budget: cfg.train.frames,
            next_eval: if interval == 0 { u64::MAX } else { interval },
            evals: Vec::new(),
            metrics: Vec::new(),
            timing: Vec::new(),
            meter,
            start: Instant::now(),
            wall_in_metrics,
        })
    }

    pub fn version(&self) -> u64 {
        self.net.params.version()
    }

    /// Routes a batch through the delay buffer; trains on whatever comes out.
    pub fn consume(&mut self, batch: TrainingBatch) -> Result<bool> {
        match self.delay.push(batch) {
            Some(b) => self.train(b).map(|_| true),
            None => Ok(false),
        }
    }

    pub fn train(&mut self, batch: TrainingBatch) -> Result<()> {
        if batch.experiences.len() != self.batch_size {
            return Err(Error::Pipeline(format!(
                "training batch of {} examples, expected {}",
                batch.experiences.len(),
                self.batch_size
            )));
        }
        let train_version = self.version();
        if batch.gen_version > train_version {
            return Err(Error::Pipeline(format!(
                "batch generated at version {} but the model is at {train_version}",
                batch.gen_version
            )));
        }
        let staleness = train_version - batch.gen_version;
        if staleness > self.bound {
            return Err(Error::Staleness {
                train_version,
                gen_version: batch.gen_version,
                bound: self.bound,
            });
        }
        let (out, grads) = loss_and_grads(&self.net, &batch.experiences, &self.agent)?;
        self.adam.step(&mut self.net.params, &grads)?;
        self.steps += 1;
        self.examples += batch.experiences.len() as u64;
        self.last_staleness = staleness;
        self.max_staleness = self.max_staleness.max(staleness);
        self.last_loss = out.loss.to_f64_lossy();
        self.last_entropy = out.entropy.to_f64_lossy();
        self.meter.record(self.start.elapsed().as_secs_f64(), self.examples);
        Ok(())
    }

    pub fn eval_due(&self, frames: u64) -> bool {
        frames >= self.next_eval && self.next_eval < self.budget
    }

    /// Evaluates when `frames` crossed the next milestone.
    pub fn maybe_eval(&mut self, frames: u64, depths: QueueDepths) -> Result<()> {
        if self.eval_due(frames) {
            while self.next_eval <= frames {
                self.next_eval = self.next_eval.saturating_add(self.eval_interval);
            }
            self.run_eval(frames, depths, false)?;
        }
        Ok(())
    }

    pub fn final_eval(&mut self, frames: u64, depths: QueueDepths) -> Result<()> {
        self.run_eval(frames, depths, true)
    }

    fn run_eval(&mut self, frames: u64, depths: QueueDepths, last: bool) -> Result<()> {
        let r = evaluate(&self.net, &self.setup, self.eval_games, self.eval_seed)?;
        let best = self.evals.iter().map(|e| e.mean).fold(r.mean, f64::max);
        self.evals.push(EvalPoint {
            frames,
            train_steps: self.steps,
            mean: r.mean,
            max: r.max,
        });
        let wall = self.start.elapsed().as_secs_f64();
        let timing = TimingRecord {
            frames,
            train_steps: self.steps,
            wall_time: wall,
            examples_per_s: self.meter.windowed(),
            examples_per_s_cumulative: self.meter.cumulative(),
        };
        let keep = |v: Option<f64>| if self.wall_in_metrics { v } else { None };
        let finite = |v: f64| v.is_finite().then_some(v);
        self.metrics.push(MetricsRecord {
            wall_time: keep(Some(wall)),
            frames,
            train_steps: self.steps,
            examples: self.examples,
            examples_per_s: keep(timing.examples_per_s),
            examples_per_s_cumulative: keep(timing.examples_per_s_cumulative),
            mean_score_50: r.mean,
            max_score: r.max,
            best_score: best,
            eval_games: r.games,
            loss: finite(self.last_loss),
            entropy: finite(self.last_entropy),
            queue_depths: depths,
            staleness: StalenessStats {
                last: self.last_staleness,
                max: self.max_staleness,
                bound: self.bound,
            },
            final_eval: last,
        });
        self.timing.push(timing);
        Ok(())
    }

    pub fn wall_secs(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn cumulative_rate(&self) -> Option<f64> {
        self.meter.cumulative()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Experience;
    use crate::config::{Profile, RunConfig};
    use crate::tensor::{Layout, Tensor};

    fn cfg(delay: usize) -> RunConfig {
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.pipeline.batch_size = 2;
        c.pipeline.train_queue_capacity = 1;
        c.pipeline.delay_k = delay;
        c
    }

    fn batch(gen_version: u64) -> TrainingBatch {
        let e = Experience {
            state: Tensor::new(&[24, 24, 4], Layout::Flat, 0.5).unwrap(),
            action: 1,
            return_target: 1.0,
        };
        TrainingBatch {
            experiences: vec![e.clone(), e],
            gen_version,
        }
    }

    #[test]
    fn stale_batch_is_rejected() {
        let mut t = Trainer::<f32>::new(&cfg(0), false).unwrap();
        assert_eq!(t.bound, 2);
        for _ in 0..3 {
            t.train(batch(0)).unwrap();
        }
        assert_eq!(t.max_staleness, 2);
        assert!(matches!(t.train(batch(0)), Err(Error::Staleness { train_version: 3, gen_version: 0, bound: 2 })));
        assert!(t.train(batch(99)).is_err());
        assert_eq!(t.version(), 3);
    }

    #[test]
    fn delay_holds_back_batches() {
        let mut t = Trainer::<f32>::new(&cfg(2), false).unwrap();
        assert!(!t.consume(batch(0)).unwrap());
        assert!(!t.consume(batch(0)).unwrap());
        assert!(t.consume(batch(0)).unwrap());
        assert_eq!(t.steps, 1);
    }

    #[test]
    fn wrong_batch_size_is_rejected() {
        let mut t = Trainer::<f32>::new(&cfg(0), false).unwrap();
        let mut b = batch(0);
        b.experiences.pop();
        assert!(t.train(b).is_err());
    }
}
