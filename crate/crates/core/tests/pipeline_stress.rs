//! Request/result pairing under load: many workers with random think times
//! hammer one predictor for a fixed wall time (60 s by default, override with
//! `BA3C_STRESS_SECS`). Every request must get exactly one result, routed to
//! the right worker.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ba3c::pipeline::{predictor_loop, BatchPolicy, PredictionRequest};
use ba3c::{Layout, Tensor};

#[test]
fn every_request_gets_exactly_one_result() {
    let secs: u64 = std::env::var("BA3C_STRESS_SECS").ok().and_then(|s| s.parse().ok()).unwrap_or(60);
    let n_workers = 24;
    let (req_tx, req_rx) = bounded::<PredictionRequest>(n_workers);
    let (res_txs, res_rxs): (Vec<_>, Vec<_>) = (0..n_workers).map(|_| bounded(1)).unzip();
    let stop = AtomicBool::new(false);
    let sent = AtomicU64::new(0);
    let received = AtomicU64::new(0);
    let deadline = Instant::now() + Duration::from_secs(secs);

    let stats = std::thread::scope(|s| {
        let predictor = s.spawn(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let policy = BatchPolicy {
                min_batch: 4,
                max_batch: 16,
                timeout: Duration::from_millis(2),
            };
            predictor_loop(&req_rx, &res_txs, policy, &stop, |batch| {
                // variable service time
                std::thread::sleep(Duration::from_micros(rng.gen_range(0..500)));
                Ok(batch
                    .iter()
                    .map(|r| (vec![r.env_id as f64, 1.0], r.state.data()[0] as f64))
                    .collect())
            })
        });

        let workers: Vec<_> = res_rxs
            .into_iter()
            .enumerate()
            .map(|(id, rx)| {
                let req_tx = req_tx.clone();
                let (sent, received) = (&sent, &received);
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(id as u64);
                    let mut counter = 0u32;
                    while Instant::now() < deadline {
                        counter += 1;
                        let state = Tensor::from_vec(&[1, 1, 1], Layout::Flat, vec![counter as f32]).unwrap();
                        req_tx
                            .send(PredictionRequest {
                                env_id: id,
                                state,
                                enqueue_time: Some(Instant::now()),
                            })
                            .unwrap();
                        sent.fetch_add(1, Ordering::Relaxed);
                        let res = match rx.recv_timeout(Duration::from_secs(10)) {
                            Ok(r) => r,
                            Err(RecvTimeoutError::Timeout) => panic!("worker {id}: request {counter} lost"),
                            Err(RecvTimeoutError::Disconnected) => panic!("worker {id}: predictor gone"),
                        };
                        received.fetch_add(1, Ordering::Relaxed);
                        assert_eq!(res.env_id, id, "result routed to the wrong worker");
                        assert_eq!(res.policy[0], id as f64);
                        assert_eq!(res.value, counter as f64, "worker {id}: stale or duplicated result");
                        std::thread::sleep(Duration::from_micros(rng.gen_range(0..2000)));
                    }
                    // nothing extra may arrive after the last answer
                    std::thread::sleep(Duration::from_millis(20));
                    assert!(rx.try_recv().is_err(), "worker {id}: duplicated result");
                    counter as u64
                })
            })
            .collect();
        drop(req_tx);
        let per_worker: Vec<u64> = workers.into_iter().map(|w| w.join().unwrap()).collect();
        stop.store(true, Ordering::Relaxed);
        let stats = predictor.join().unwrap().unwrap();
        (stats, per_worker)
    });

    let (stats, per_worker) = stats;
    let total: u64 = per_worker.iter().sum();
    assert_eq!(sent.load(Ordering::Relaxed), total);
    assert_eq!(received.load(Ordering::Relaxed), total);
    assert_eq!(stats.requests, total);
    assert!(stats.largest_batch <= 16);
    assert!(stats.batches > 0 && stats.batches <= total);
    println!(
        "{secs}s: {total} requests in {} batches (largest {}), min per worker {}",
        stats.batches,
        stats.largest_batch,
        per_worker.iter().min().unwrap()
    );
}
