use std::collections::VecDeque;

use super::trainer::Trainer;
use super::worker::Worker;
use super::{PredictionResult, QueueDepths, RunCounters, TrainingBatch};
use crate::agent::{stack_states, Experience};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// The whole pipeline on the calling thread, in rounds: every live worker's
/// request goes through one batched forward pass, each worker then takes one
/// step in id order, and finally the trainer drains the training queue. A
/// worker that finds the queue full runs one trainer step first.
pub(crate) fn run_round_robin<T: Scalar>(cfg: &RunConfig, trainer: &mut Trainer<T>) -> Result<RunCounters> {
    let p = &cfg.pipeline;
    let budget = cfg.train.frames;
    let mut workers: Vec<Worker> = (0..p.n_envs)
        .map(|i| Worker::new(i, &cfg.env, cfg.agent, cfg.seed))
        .collect::<Result<_>>()?;
    let mut live: Vec<usize> = (0..p.n_envs).collect();
    let mut staged: Vec<Experience> = Vec::with_capacity(p.batch_size);
    let mut queue: VecDeque<TrainingBatch> = VecDeque::with_capacity(p.train_queue_capacity);
    let mut c = RunCounters::default();

    let depths = |queue: &VecDeque<TrainingBatch>, trainer: &Trainer<T>, c: &RunCounters| QueueDepths {
        prediction: 0,
        training: queue.len(),
        training_max: c.max_train_depth,
        delay: trainer.delay.len(),
    };

    while !live.is_empty() {
        // predictor
        let states: Vec<&Tensor<f32>> = live.iter().map(|&i| workers[i].state()).collect();
        let (policy, value) = trainer.net.forward(&stack_states::<T>(&states)?)?;
        let a = trainer.net.n_actions();
        let results: Vec<PredictionResult> = live
            .iter()
            .zip(policy.data().chunks(a).zip(value.data()))
            .map(|(&env_id, (row, v))| PredictionResult {
                env_id,
                policy: row.iter().map(|x| x.to_f64_lossy()).collect(),
                value: v.to_f64_lossy(),
            })
            .collect();

        // workers
        let mut still_live = Vec::with_capacity(live.len());
        for res in results {
            let w = &mut workers[res.env_id];
            if c.frames >= budget {
                c.discarded_experiences += w.pending() as u64;
                continue;
            }
            c.frames += 1;
            let out = w.on_result(&res)?;
            if out.episode_score.is_some() {
                c.episodes += 1;
            }
            still_live.push(res.env_id);
            for e in out.experiences {
                staged.push(e);
                if staged.len() < p.batch_size {
                    continue;
                }
                if queue.len() == p.train_queue_capacity {
                    let b = queue.pop_front().expect("full queue is non-empty");
                    trainer.consume(b)?;
                    trainer.maybe_eval(c.frames, depths(&queue, trainer, &c))?;
                }
                queue.push_back(TrainingBatch {
                    experiences: std::mem::take(&mut staged),
                    gen_version: trainer.version(),
                });
                c.max_train_depth = c.max_train_depth.max(queue.len());
                if queue.len() > p.train_queue_capacity {
                    return Err(Error::Pipeline("training queue over capacity".into()));
                }
            }
        }
        live = still_live;

        // trainer
        while let Some(b) = queue.pop_front() {
            trainer.consume(b)?;
            trainer.maybe_eval(c.frames, depths(&queue, trainer, &c))?;
        }
    }
    c.discarded_experiences += staged.len() as u64;
    c.final_depths = depths(&queue, trainer, &c);
    Ok(c)
}
