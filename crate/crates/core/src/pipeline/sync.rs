use super::trainer::Trainer;
use super::worker::Worker;
use super::{PredictionResult, QueueDepths, RunCounters, TrainingBatch};
use crate::agent::{stack_states, Experience};
use crate::config::RunConfig;
use crate::error::Result;
use crate::scalar::Scalar;

/// The basic synchronous scheme on a single environment: play
/// `train.sync_episodes` episodes with the current model, then train on
/// everything memorized, in order, one batch at a time.
pub(crate) fn run_episodes<T: Scalar>(cfg: &RunConfig, trainer: &mut Trainer<T>) -> Result<RunCounters> {
    let budget = cfg.train.frames;
    let batch_size = cfg.pipeline.batch_size;
    let mut worker = Worker::new(0, &cfg.env, cfg.agent, cfg.seed)?;
    let mut memory: Vec<Experience> = Vec::new();
    let mut c = RunCounters::default();
    let depths = |memory: &Vec<Experience>| QueueDepths {
        prediction: 0,
        training: memory.len() / batch_size,
        training_max: 0,
        delay: 0,
    };

    while c.frames < budget {
        let mut played = 0;
        while played < cfg.train.sync_episodes && c.frames < budget {
            let x = stack_states::<T>(&[worker.state()])?;
            let (policy, value) = trainer.net.forward(&x)?;
            let res = PredictionResult {
                env_id: 0,
                policy: policy.data().iter().map(|p| p.to_f64_lossy()).collect(),
                value: value.data()[0].to_f64_lossy(),
            };
            c.frames += 1;
            let out = worker.on_result(&res)?;
            memory.extend(out.experiences);
            if out.episode_score.is_some() {
                played += 1;
                c.episodes += 1;
            }
        }
        let full = memory.len() / batch_size * batch_size;
        let rest = memory.split_off(full);
        for chunk in memory.chunks(batch_size) {
            trainer.train(TrainingBatch {
                experiences: chunk.to_vec(),
                gen_version: trainer.version(),
            })?;
            trainer.maybe_eval(c.frames, depths(&rest))?;
        }
        memory = rest;
    }
    c.discarded_experiences = (memory.len() + worker.pending()) as u64;
    c.final_depths = depths(&memory);
    Ok(c)
}
