//! The batched actor-critic topology: environment workers feed a batching
//! predictor and a bounded training queue; one trainer applies the updates.
//!
//! Three ways to drive it:
//! - `run_async` with threads: n_envs workers, one predictor, one trainer,
//!   bounded blocking queues, a watchdog on the calling thread;
//! - `run_async` in deterministic mode: the same components scheduled
//!   round-robin on one thread (`BA3C_DETERMINISTIC=1` forces this);
//! - `run_sync`: the plain play-then-train loop on a single environment.
//!
//! A batch's `gen_version` is the published model version when the batch is
//! sealed. The trainer rejects any batch with
//! `train_version - gen_version > train_queue_capacity + delay_k + 1`.

mod delay;
mod deterministic;
mod eval;
mod predictor;
mod sync;
mod threaded;
mod throughput;
mod trainer;
mod worker;

pub(crate) use worker::{stream_seed, STREAM_SEARCH};

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use delay::{delay_push, DelayBuffer};
pub use eval::{evaluate, EvalResult};
pub use predictor::{predictor_loop, BatchPolicy, PredictorStats};
pub use throughput::{throughput_meter, ThroughputMeter};

use crate::agent::Experience;
use crate::checkpoint::save_checkpoint;
use crate::config::{deterministic_forced, RunConfig, TrainMode};
use crate::error::Result;
use crate::nn::Network;
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use trainer::Trainer;

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub env_id: usize,
    pub state: Tensor<f32>,
    pub enqueue_time: Option<Instant>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub env_id: usize,
    pub policy: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub experiences: Vec<Experience>,
    pub gen_version: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueDepths {
    pub prediction: usize,
    pub training: usize,
    /// Deepest the training queue has been so far.
    pub training_max: usize,
    pub delay: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessStats {
    pub last: u64,
    pub max: u64,
    pub bound: u64,
}

/// One line of `metrics.jsonl`, written at every evaluation. Wall-clock
/// fields are `null` in deterministic mode so that reruns are bitwise equal;
/// `timing.jsonl` always carries them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub wall_time: Option<f64>,
    pub frames: u64,
    pub train_steps: u64,
    pub examples: u64,
    pub examples_per_s: Option<f64>,
    pub examples_per_s_cumulative: Option<f64>,
    /// Mean score of the greedy policy over the evaluation games (50 by default).
    pub mean_score_50: f64,
    pub max_score: f64,
    pub best_score: f64,
    pub eval_games: usize,
    pub loss: Option<f64>,
    pub entropy: Option<f64>,
    pub queue_depths: QueueDepths,
    pub staleness: StalenessStats,
    pub final_eval: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub frames: u64,
    pub train_steps: u64,
    pub wall_time: f64,
    pub examples_per_s: Option<f64>,
    pub examples_per_s_cumulative: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub frames: u64,
    pub train_steps: u64,
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct RunCounters {
    pub frames: u64,
    pub episodes: u64,
    pub max_train_depth: usize,
    pub discarded_batches: u64,
    pub discarded_experiences: u64,
    pub final_depths: QueueDepths,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Threaded,
    Deterministic,
    Sync,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: RunMode,
    pub frames: u64,
    pub train_steps: u64,
    pub examples: u64,
    pub episodes: u64,
    /// Mean score of the last evaluation.
    pub final_score: f64,
    /// Best mean score over all evaluations.
    pub best_score: f64,
    pub evals: Vec<EvalPoint>,
    pub max_staleness: u64,
    pub staleness_bound: u64,
    pub max_train_queue_depth: usize,
    pub train_queue_capacity: usize,
    pub discarded_batches: u64,
    pub discarded_experiences: u64,
    pub wall_secs: Option<f64>,
    pub examples_per_s: Option<f64>,
}

pub struct RunOutcome<T> {
    pub summary: RunSummary,
    pub metrics: Vec<MetricsRecord>,
    pub timing: Vec<TimingRecord>,
    pub network: Network<T>,
    pub adam: AdamState<T>,
}

fn finish<T: Scalar>(
    cfg: &RunConfig,
    mode: RunMode,
    mut trainer: Trainer<T>,
    mut c: RunCounters,
) -> Result<RunOutcome<T>> {
    for b in trainer.delay.drain() {
        c.discarded_batches += 1;
        c.discarded_experiences += b.experiences.len() as u64;
    }
    c.final_depths.delay = 0;
    trainer.final_eval(c.frames, c.final_depths)?;
    let wall = mode != RunMode::Deterministic;
    let last = *trainer.evals.last().expect("final evaluation recorded");
    let summary = RunSummary {
        mode,
        frames: c.frames,
        train_steps: trainer.steps,
        examples: trainer.examples,
        episodes: c.episodes,
        final_score: last.mean,
        best_score: trainer.evals.iter().map(|e| e.mean).fold(f64::NEG_INFINITY, f64::max),
        evals: trainer.evals.clone(),
        max_staleness: trainer.max_staleness,
        staleness_bound: trainer.bound,
        max_train_queue_depth: c.max_train_depth,
        train_queue_capacity: cfg.pipeline.train_queue_capacity,
        discarded_batches: c.discarded_batches,
        discarded_experiences: c.discarded_experiences,
        wall_secs: wall.then(|| trainer.wall_secs()),
        examples_per_s: if wall { trainer.cumulative_rate() } else { None },
    };
    Ok(RunOutcome {
        summary,
        metrics: std::mem::take(&mut trainer.metrics),
        timing: std::mem::take(&mut trainer.timing),
        network: trainer.net,
        adam: trainer.adam,
    })
}

/// Deterministic when the config asks for it or `BA3C_DETERMINISTIC=1`.
pub fn is_deterministic(cfg: &RunConfig) -> bool {
    cfg.deterministic || deterministic_forced()
}

/// Trains with the asynchronous pipeline until `train.frames` environment
/// steps have been taken.
pub fn run_async<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let det = is_deterministic(cfg);
    let mut trainer = Trainer::new(cfg, !det)?;
    let (mode, counters) = if det {
        (RunMode::Deterministic, deterministic::run_round_robin(cfg, &mut trainer)?)
    } else {
        (RunMode::Threaded, threaded::run_threaded(cfg, &mut trainer)?)
    };
    finish(cfg, mode, trainer, counters)
}

/// The synchronous reference loop; always deterministic for a fixed seed.
pub fn run_sync<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<T>> {
    cfg.validate()?;
    let mut trainer = Trainer::new(cfg, false)?;
    let counters = sync::run_episodes(cfg, &mut trainer)?;
    finish(cfg, RunMode::Sync, trainer, counters)
}

/// Dispatches on `train.mode`.
pub fn run<T: Scalar>(cfg: &RunConfig) -> Result<RunOutcome<T>> {
    match cfg.train.mode {
        TrainMode::Async => run_async(cfg),
        TrainMode::Sync => run_sync(cfg),
    }
}

pub fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

impl<T: Scalar> RunOutcome<T> {
    /// Writes metrics.jsonl, timing.jsonl, summary.json, model.ckpt and
    /// model.arch.json into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("metrics.jsonl"), &self.metrics)?;
        write_jsonl(&dir.join("timing.jsonl"), &self.timing)?;
        let mut summary = self.summary.clone();
        // keep summary.json reproducible too
        if summary.mode == RunMode::Deterministic || summary.mode == RunMode::Sync {
            summary.wall_secs = None;
            summary.examples_per_s = None;
        }
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        save_checkpoint(&dir.join("model.ckpt"), &self.network.params, Some(&self.adam))?;
        std::fs::write(dir.join("model.arch.json"), self.network.spec().to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    fn small(frames: u64) -> RunConfig {
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.pipeline.n_envs = 4;
        c.pipeline.predict_min_batch = 2;
        c.pipeline.batch_size = 8;
        c.train.frames = frames;
        c.train.eval_interval = 200;
        c.train.eval_games = 4;
        c.deterministic = true;
        c
    }

    #[test]
    fn zero_budget_leaves_model_unchanged() {
        for mode in [TrainMode::Sync, TrainMode::Async] {
            let mut c = small(0);
            c.train.mode = mode;
            let out = run::<f32>(&c).unwrap();
            assert_eq!(out.network.params.version(), 0);
            assert_eq!(out.summary.train_steps, 0);
            assert_eq!(out.metrics.len(), 1);
        }
    }

    #[test]
    fn deterministic_runs_repeat_exactly() {
        let c = small(600);
        let a = run_async::<f32>(&c).unwrap();
        let b = run_async::<f32>(&c).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.network.params, b.network.params);
        assert_eq!(a.summary.frames, 600);
        assert!(a.summary.train_steps > 0);
        assert!(a.metrics.iter().all(|m| m.wall_time.is_none() && m.examples_per_s.is_none()));
        // evaluations at 200 and 400 frames plus the final one
        assert_eq!(a.metrics.len(), 3);
        assert!(a.summary.max_staleness <= a.summary.staleness_bound);
    }

    #[test]
    fn sync_runs_repeat_exactly() {
        let mut c = small(500);
        c.train.mode = TrainMode::Sync;
        c.train.sync_episodes = 2;
        let a = run::<f32>(&c).unwrap();
        let b = run::<f32>(&c).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.network.params, b.network.params);
        assert_eq!(a.summary.max_staleness, 0);
    }

    #[test]
    fn threaded_run_respects_bounds() {
        let mut c = small(2_000);
        c.deterministic = false;
        c.pipeline.delay_k = 2;
        c.pipeline.train_queue_capacity = 1;
        let out = run_async::<f32>(&c).unwrap();
        if !is_deterministic(&c) {
            assert_eq!(out.summary.mode, RunMode::Threaded);
            assert!(out.metrics.iter().all(|m| m.examples_per_s_cumulative.is_some()));
        }
        assert_eq!(out.summary.frames, 2_000);
        assert!(out.summary.max_staleness <= 4);
        assert!(out.summary.max_train_queue_depth <= 1);
        // every frame yields one experience: trained, discarded, or still in memory
        assert_eq!(out.summary.examples + out.summary.discarded_experiences, 2_000);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let out = run_async::<f32>(&small(300)).unwrap();
        out.write(dir.path()).unwrap();
        for f in ["metrics.jsonl", "timing.jsonl", "summary.json", "model.ckpt", "model.arch.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("examples_per_s").is_some());
        assert!(first.get("mean_score_50").is_some());
    }
}
