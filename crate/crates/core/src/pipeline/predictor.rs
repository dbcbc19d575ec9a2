use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, SendTimeoutError, Sender, TryRecvError};

use super::{PredictionRequest, PredictionResult};
use crate::error::{Error, Result};

/// How often blocked contexts wake up to check the stop flag.
pub(crate) const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy)]
pub struct BatchPolicy {
    /// Run as soon as this many requests are pending.
    pub min_batch: usize,
    /// Never put more than this many requests in one forward pass.
    pub max_batch: usize,
    /// Run with fewer than `min_batch` once the oldest request waited this long.
    pub timeout: Duration,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictorStats {
    pub batches: u64,
    pub requests: u64,
    pub largest_batch: usize,
}

/// Pops one batch: blocks for the first request, then takes what is queued
/// until `min_batch` is reached or the timeout expires, capped at
/// `max_batch`. `None` once stopped or disconnected.
pub(crate) fn collect_batch(
    rx: &Receiver<PredictionRequest>,
    policy: &BatchPolicy,
    stop: &AtomicBool,
) -> Option<Vec<PredictionRequest>> {
    let first = loop {
        if stop.load(Ordering::Relaxed) {
            return None;
        }
        match rx.recv_timeout(POLL) {
            Ok(r) => break r,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return None,
        }
    };
    let deadline = Instant::now() + policy.timeout;
    let mut batch = vec![first];
    while batch.len() < policy.max_batch {
        if batch.len() >= policy.min_batch {
            match rx.try_recv() {
                Ok(r) => batch.push(r),
                Err(TryRecvError::Empty | TryRecvError::Disconnected) => break,
            }
        } else {
            match rx.recv_deadline(deadline) {
                Ok(r) => batch.push(r),
                Err(_) => break,
            }
        }
    }
    Some(batch)
}

/// Main loop of the prediction context. `predict` maps a batch of requests
/// to `(policy_row, value)` pairs in request order; each result goes back on
/// the channel of its `env_id`.
pub fn predictor_loop(
    rx: &Receiver<PredictionRequest>,
    results: &[Sender<PredictionResult>],
    policy: BatchPolicy,
    stop: &AtomicBool,
    mut predict: impl FnMut(&[PredictionRequest]) -> Result<Vec<(Vec<f64>, f64)>>,
) -> Result<PredictorStats> {
    let mut stats = PredictorStats::default();
    let mut in_flight = vec![false; results.len()];
    while let Some(batch) = collect_batch(rx, &policy, stop) {
        for r in &batch {
            match in_flight.get_mut(r.env_id) {
                None => return Err(Error::Pipeline(format!("request from unknown env {}", r.env_id))),
                Some(true) => {
                    return Err(Error::Pipeline(format!("env {} has two requests in flight", r.env_id)));
                }
                Some(slot) => *slot = true,
            }
        }
        let outputs = predict(&batch)?;
        if outputs.len() != batch.len() {
            return Err(Error::Pipeline(format!("{} predictions for {} requests", outputs.len(), batch.len())));
        }
        stats.batches += 1;
        stats.requests += batch.len() as u64;
        stats.largest_batch = stats.largest_batch.max(batch.len());
        for (req, (policy_row, value)) in batch.iter().zip(outputs) {
            in_flight[req.env_id] = false;
            let mut msg = PredictionResult {
                env_id: req.env_id,
                policy: policy_row,
                value,
            };
            loop {
                match results[req.env_id].send_timeout(msg, POLL) {
                    Ok(()) => break,
                    Err(SendTimeoutError::Timeout(m)) if !stop.load(Ordering::Relaxed) => msg = m,
                    // the worker is gone or we are shutting down
                    Err(_) => break,
                }
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Layout, Tensor};
    use crossbeam_channel::bounded;

    fn req(env_id: usize) -> PredictionRequest {
        PredictionRequest {
            env_id,
            state: Tensor::new(&[1], Layout::Flat, env_id as f32).unwrap(),
            enqueue_time: None,
        }
    }

    #[test]
    fn batch_respects_min_and_max() {
        let (tx, rx) = bounded(16);
        for i in 0..10 {
            tx.send(req(i)).unwrap();
        }
        let stop = AtomicBool::new(false);
        let p = BatchPolicy {
            min_batch: 2,
            max_batch: 4,
            timeout: Duration::from_millis(1),
        };
        assert_eq!(collect_batch(&rx, &p, &stop).unwrap().len(), 4);
        assert_eq!(collect_batch(&rx, &p, &stop).unwrap().len(), 4);
        assert_eq!(collect_batch(&rx, &p, &stop).unwrap().len(), 2);
    }

    #[test]
    fn timeout_releases_small_batch() {
        let (tx, rx) = bounded(4);
        tx.send(req(0)).unwrap();
        let stop = AtomicBool::new(false);
        let p = BatchPolicy {
            min_batch: 3,
            max_batch: 4,
            timeout: Duration::from_millis(5),
        };
        let t = Instant::now();
        assert_eq!(collect_batch(&rx, &p, &stop).unwrap().len(), 1);
        assert!(t.elapsed() >= Duration::from_millis(5));
    }

    #[test]
    fn stop_flag_ends_collection() {
        let (_tx, rx) = bounded::<PredictionRequest>(1);
        let stop = AtomicBool::new(true);
        let p = BatchPolicy {
            min_batch: 1,
            max_batch: 1,
            timeout: Duration::ZERO,
        };
        assert!(collect_batch(&rx, &p, &stop).is_none());
    }

    #[test]
    fn duplicate_in_flight_request_is_an_error() {
        let (tx, rx) = bounded(4);
        let (rtx, _rrx) = bounded(4);
        tx.send(req(0)).unwrap();
        tx.send(req(0)).unwrap();
        drop(tx);
        let stop = AtomicBool::new(false);
        let p = BatchPolicy {
            min_batch: 2,
            max_batch: 2,
            timeout: Duration::from_millis(1),
        };
        let r = predictor_loop(&rx, &[rtx], p, &stop, |b| Ok(b.iter().map(|_| (vec![1.0], 0.0)).collect()));
        assert!(r.is_err());
    }
}
