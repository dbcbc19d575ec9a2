use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};

use super::predictor::{predictor_loop, BatchPolicy, POLL};
use super::trainer::Trainer;
use super::worker::Worker;
use super::{PredictionRequest, PredictionResult, QueueDepths, RunCounters, TrainingBatch};
use crate::agent::{stack_states, Experience};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Shared<T> {
    stop: AtomicBool,
    frames: AtomicU64,
    budget: u64,
    snapshot: RwLock<Arc<Network<T>>>,
    progress: AtomicU64,
    workers_alive: AtomicUsize,
    failure: Mutex<Option<Error>>,
    /// Experiences waiting to fill the next batch. Sealing and enqueueing a
    /// batch happen under this lock, so at most one sealed batch is ever
    /// outside the training queue.
    staged: Mutex<Vec<Experience>>,
    batch_size: usize,
    train_capacity: usize,
    max_train_depth: AtomicUsize,
    delay_depth: AtomicUsize,
    discarded_experiences: AtomicU64,
    episodes: AtomicU64,
}

impl<T: Scalar> Shared<T> {
    fn fail(&self, e: Error) {
        let mut f = self.failure.lock().unwrap_or_else(|p| p.into_inner());
        if f.is_none() {
            *f = Some(e);
        }
        self.stop.store(true, Ordering::SeqCst);
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    fn claim_frame(&self) -> bool {
        self.frames.fetch_add(1, Ordering::SeqCst) < self.budget
    }

    fn frames(&self) -> u64 {
        self.frames.load(Ordering::SeqCst).min(self.budget)
    }

    /// Adds experiences to the staging batch, sealing and enqueueing each
    /// full batch. Returns false when the run is stopping.
    fn push_experiences(&self, exps: Vec<Experience>, tx: &Sender<TrainingBatch>) -> Result<bool> {
        let mut staged = self.staged.lock().unwrap_or_else(|p| p.into_inner());
        let mut it = exps.into_iter();
        while let Some(e) = it.next() {
            staged.push(e);
            if staged.len() < self.batch_size {
                continue;
            }
            let gen_version = self.snapshot.read().unwrap_or_else(|p| p.into_inner()).params.version();
            let mut batch = TrainingBatch {
                experiences: std::mem::take(&mut *staged),
                gen_version,
            };
            loop {
                match tx.send_timeout(batch, POLL) {
                    Ok(()) => break,
                    Err(SendTimeoutError::Timeout(b)) if !self.stopped() => batch = b,
                    Err(SendTimeoutError::Timeout(b) | SendTimeoutError::Disconnected(b)) => {
                        let lost = b.experiences.len() + it.len();
                        self.discarded_experiences.fetch_add(lost as u64, Ordering::Relaxed);
                        return Ok(false);
                    }
                }
            }
            let depth = tx.len();
            self.max_train_depth.fetch_max(depth, Ordering::Relaxed);
            if depth > self.train_capacity {
                return Err(Error::Pipeline(format!(
                    "training queue depth {depth} exceeds capacity {}",
                    self.train_capacity
                )));
            }
        }
        Ok(true)
    }
}

fn send_polling<M>(tx: &Sender<M>, mut msg: M, stop: &AtomicBool) -> bool {
    loop {
        match tx.send_timeout(msg, POLL) {
            Ok(()) => return true,
            Err(SendTimeoutError::Timeout(m)) if !stop.load(Ordering::Relaxed) => msg = m,
            Err(_) => return false,
        }
    }
}

fn recv_polling<M>(rx: &Receiver<M>, stop: &AtomicBool) -> Option<M> {
    loop {
        match rx.recv_timeout(POLL) {
            Ok(m) => return Some(m),
            Err(RecvTimeoutError::Timeout) if !stop.load(Ordering::Relaxed) => continue,
            Err(_) => return None,
        }
    }
}

fn worker_loop<T: Scalar>(
    mut w: Worker,
    shared: &Shared<T>,
    req_tx: &Sender<PredictionRequest>,
    res_rx: &Receiver<PredictionResult>,
    train_tx: &Sender<TrainingBatch>,
) -> Result<()> {
    while !shared.stopped() {
        let mut req = w.request();
        req.enqueue_time = Some(Instant::now());
        if !send_polling(req_tx, req, &shared.stop) {
            break;
        }
        let Some(res) = recv_polling(res_rx, &shared.stop) else { break };
        if !shared.claim_frame() {
            break;
        }
        let out = w.on_result(&res)?;
        if out.episode_score.is_some() {
            shared.episodes.fetch_add(1, Ordering::Relaxed);
        }
        if !shared.push_experiences(out.experiences, train_tx)? {
            break;
        }
    }
    shared.discarded_experiences.fetch_add(w.pending() as u64, Ordering::Relaxed);
    Ok(())
}

fn predict_batch<T: Scalar>(net: &Network<T>, batch: &[PredictionRequest]) -> Result<Vec<(Vec<f64>, f64)>> {
    let states: Vec<&Tensor<f32>> = batch.iter().map(|r| &r.state).collect();
    let (policy, value) = net.forward(&stack_states::<T>(&states)?)?;
    let a = net.n_actions();
    Ok(policy
        .data()
        .chunks(a)
        .zip(value.data())
        .map(|(row, v)| (row.iter().map(|p| p.to_f64_lossy()).collect(), v.to_f64_lossy()))
        .collect())
}

/// Workers, one predictor and one trainer on their own threads; the calling
/// thread is the watchdog.
pub(crate) fn run_threaded<T: Scalar>(cfg: &RunConfig, trainer: &mut Trainer<T>) -> Result<RunCounters> {
    let p = &cfg.pipeline;
    let workers: Vec<Worker> = (0..p.n_envs)
        .map(|i| Worker::new(i, &cfg.env, cfg.agent, cfg.seed))
        .collect::<Result<_>>()?;
    let shared = Shared {
        stop: AtomicBool::new(false),
        frames: AtomicU64::new(0),
        budget: cfg.train.frames,
        snapshot: RwLock::new(Arc::new(trainer.net.clone())),
        progress: AtomicU64::new(0),
        workers_alive: AtomicUsize::new(p.n_envs),
        failure: Mutex::new(None),
        staged: Mutex::new(Vec::with_capacity(p.batch_size)),
        batch_size: p.batch_size,
        train_capacity: p.train_queue_capacity,
        max_train_depth: AtomicUsize::new(0),
        delay_depth: AtomicUsize::new(0),
        discarded_experiences: AtomicU64::new(0),
        episodes: AtomicU64::new(0),
    };
    let (req_tx, req_rx) = bounded::<PredictionRequest>(p.n_envs);
    let (train_tx, train_rx) = bounded::<TrainingBatch>(p.train_queue_capacity);
    let (res_txs, res_rxs): (Vec<_>, Vec<_>) = (0..p.n_envs).map(|_| bounded::<PredictionResult>(1)).unzip();
    let batch_policy = BatchPolicy {
        min_batch: p.predict_min_batch,
        max_batch: p.n_envs,
        timeout: p.predict_timeout(),
    };
    let depths = |shared: &Shared<T>| QueueDepths {
        prediction: req_tx.len(),
        training: train_tx.len(),
        training_max: shared.max_train_depth.load(Ordering::Relaxed),
        delay: shared.delay_depth.load(Ordering::Relaxed),
    };
    let mut discarded_batches = 0u64;

    std::thread::scope(|s| {
        for (w, res_rx) in workers.into_iter().zip(&res_rxs) {
            let (shared, req_tx, train_tx) = (&shared, &req_tx, &train_tx);
            std::thread::Builder::new()
                .name(format!("env-{}", w.id))
                .spawn_scoped(s, move || {
                    if let Err(e) = worker_loop(w, shared, req_tx, res_rx, train_tx) {
                        shared.fail(e);
                    }
                    shared.workers_alive.fetch_sub(1, Ordering::SeqCst);
                })
                .expect("spawn worker thread");
        }

        let shared_ref = &shared;
        let (req_rx, res_txs) = (&req_rx, &res_txs);
        std::thread::Builder::new()
            .name("predictor".into())
            .spawn_scoped(s, move || {
                let r = predictor_loop(req_rx, res_txs, batch_policy, &shared_ref.stop, |batch| {
                    let net = shared_ref.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone();
                    predict_batch(&net, batch)
                });
                if let Err(e) = r {
                    shared_ref.fail(e);
                }
            })
            .expect("spawn predictor thread");

        let train_rx = &train_rx;
        let trainer_handle = std::thread::Builder::new()
            .name("trainer".into())
            .spawn_scoped(s, || -> Result<()> {
                let sh = &shared;
                loop {
                    if sh.stopped() {
                        break;
                    }
                    match train_rx.recv_timeout(POLL) {
                        Ok(batch) => {
                            if trainer.consume(batch)? {
                                *sh.snapshot.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(trainer.net.clone());
                                sh.progress.fetch_add(1, Ordering::SeqCst);
                            }
                            sh.delay_depth.store(trainer.delay.len(), Ordering::Relaxed);
                            trainer.maybe_eval(sh.frames(), depths(sh))?;
                        }
                        Err(RecvTimeoutError::Timeout) => {
                            if sh.workers_alive.load(Ordering::SeqCst) == 0 && train_rx.is_empty() {
                                break;
                            }
                        }
                        Err(RecvTimeoutError::Disconnected) => break,
                    }
                }
                Ok(())
            })
            .expect("spawn trainer thread");

        // watchdog
        let watchdog = p.watchdog();
        let mut last_progress = (0u64, Instant::now());
        while !trainer_handle.is_finished() {
            std::thread::sleep(POLL);
            let now = shared.progress.load(Ordering::SeqCst);
            if now != last_progress.0 {
                last_progress = (now, Instant::now());
            } else if !shared.stopped() && last_progress.1.elapsed() > watchdog {
                let d = depths(&shared);
                let staged = shared.staged.try_lock().map(|g| g.len().to_string()).unwrap_or_else(|_| "locked".into());
                shared.fail(Error::Deadlock {
                    idle_secs: last_progress.1.elapsed().as_secs_f64(),
                    diagnostic: format!(
                        "prediction queue {}/{}, training queue {}/{} (max {}), delay buffer {}/{}, staged {staged}/{}, \
                         workers alive {}, frames {}, train steps {}",
                        d.prediction,
                        p.n_envs,
                        d.training,
                        p.train_queue_capacity,
                        d.training_max,
                        d.delay,
                        p.delay_k,
                        p.batch_size,
                        shared.workers_alive.load(Ordering::SeqCst),
                        shared.frames(),
                        now
                    ),
                });
            }
        }
        match trainer_handle.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => shared.fail(e),
            Err(_) => shared.fail(Error::Pipeline("trainer thread panicked".into())),
        }
        shared.stop.store(true, Ordering::SeqCst);
    });

    if let Some(e) = shared.failure.lock().unwrap_or_else(|p| p.into_inner()).take() {
        return Err(e);
    }
    // whatever is still queued after the trainer finished is dropped explicitly
    while let Ok(b) = train_rx.try_recv() {
        discarded_batches += 1;
        shared.discarded_experiences.fetch_add(b.experiences.len() as u64, Ordering::Relaxed);
    }
    let staged = shared.staged.lock().unwrap_or_else(|p| p.into_inner()).len() as u64;
    Ok(RunCounters {
        frames: shared.frames(),
        episodes: shared.episodes.load(Ordering::Relaxed),
        max_train_depth: shared.max_train_depth.load(Ordering::Relaxed),
        discarded_batches,
        discarded_experiences: shared.discarded_experiences.load(Ordering::Relaxed) + staged,
        final_depths: depths(&shared),
    })
}
