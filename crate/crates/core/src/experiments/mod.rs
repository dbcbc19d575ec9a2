//! Experiment drivers: the artificial-delay sweep and the loguniform random
//! search over learning rate and batch size.

mod plot;

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use plot::{line_chart, log_heatmap, Series};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::pipeline::{is_deterministic, run_async, RunOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRange {
    pub lo: f64,
    pub hi: f64,
}

impl LogRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::invalid(format!("log range needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        Ok(LogRange { lo, hi })
    }

    /// `exp(ln lo + u (ln hi - ln lo))`
    pub fn at(&self, u: f64) -> f64 {
        (self.lo.ln() + u * (self.hi.ln() - self.lo.ln())).exp()
    }

    /// Position of `x` on the log scale, 0 at `lo` and 1 at `hi`.
    pub fn unit(&self, x: f64) -> f64 {
        (x.ln() - self.lo.ln()) / (self.hi.ln() - self.lo.ln())
    }
}

pub fn sample_loguniform(range: &LogRange, rng: &mut impl Rng) -> f64 {
    range.at(rng.gen::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub lr: LogRange,
    pub batch: LogRange,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            lr: LogRange { lo: 1e-4, hi: 1e-2 },
            batch: LogRange { lo: 2.0, hi: 1024.0 },
        }
    }
}

impl SearchSpace {
    /// Hyperparameters at unit coordinates `(u_lr, u_batch)`. The batch size
    /// is rounded to the nearest integer and kept within the range.
    pub fn point(&self, u_lr: f64, u_batch: f64) -> (f64, usize) {
        let lr = self.lr.at(u_lr);
        let b = self.batch.at(u_batch).round();
        let b = b.clamp(self.batch.lo.ceil().max(2.0), self.batch.hi.floor());
        (lr, b as usize)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> (f64, usize) {
        let (u1, u2) = (rng.gen::<f64>(), rng.gen::<f64>());
        self.point(u1, u2)
    }
}

/// Kolmogorov-Smirnov distance between the empirical distribution of
/// `samples` and U[0, 1].
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let x = x.clamp(0.0, 1.0);
            (((i + 1) as f64 / n) - x).max(x - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Mean of the final evaluation.
    pub score_mean: f64,
    /// Best single game of the final evaluation.
    pub score_max: f64,
    pub seed: u64,
    pub frames: u64,
    pub error: Option<String>,
}

fn trial_seed(base: u64, i: usize) -> u64 {
    crate::pipeline::stream_seed(base, crate::pipeline::STREAM_SEARCH, i as u64)
}

/// Runs `n_trials` trainings with `(lr, batch)` drawn from `space`; the
/// draws and every trial seed derive from `base.seed`. Failed trials get the
/// environment's minimum score. Results come back best first.
pub fn random_search(
    space: &SearchSpace,
    n_trials: usize,
    base: &RunConfig,
    mut progress: impl FnMut(&TrialResult),
) -> Result<Vec<TrialResult>> {
    if n_trials == 0 {
        return Err(Error::invalid("random search needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let min_score = base.env.env_config().min_score();
    let mut results = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let (lr, batch_size) = space.sample(&mut rng);
        let mut cfg = base.clone();
        cfg.optim.learning_rate = lr;
        cfg.pipeline.batch_size = batch_size;
        cfg.seed = trial_seed(base.seed, trial);
        let r = match run_async::<f32>(&cfg) {
            Ok(out) => {
                let last = out.metrics.last().expect("final evaluation");
                TrialResult {
                    trial,
                    lr,
                    batch_size,
                    score_mean: last.mean_score_50,
                    score_max: last.max_score,
                    seed: cfg.seed,
                    frames: out.summary.frames,
                    error: None,
                }
            }
            Err(e) => TrialResult {
                trial,
                lr,
                batch_size,
                score_mean: min_score,
                score_max: min_score,
                seed: cfg.seed,
                frames: 0,
                error: Some(e.to_string()),
            },
        };
        progress(&r);
        results.push(r);
    }
    results.sort_by(|a, b| b.score_mean.total_cmp(&a.score_mean).then(a.trial.cmp(&b.trial)));
    Ok(results)
}

/// Min-max normalized scores: the best trial maps to 1 and the worst to 0.
/// All ones when every score is equal.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|&s| if hi > lo { (s - lo) / (hi - lo) } else { 1.0 })
        .collect()
}

pub fn write_search(dir: &Path, results: &[TrialResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("trial,lr,batch,score_mean,score_max,seed\n");
    for r in results {
        csv += &format!(
            "{},{:e},{},{},{},{}\n",
            r.trial, r.lr, r.batch_size, r.score_mean, r.score_max, r.seed
        );
    }
    std::fs::write(dir.join("search.csv"), csv)?;
    let norm = normalize_scores(&results.iter().map(|r| r.score_mean).collect::<Vec<_>>());
    let mut heat = String::from("lr,batch,normalized_score\n");
    let mut points = Vec::new();
    for (r, n) in results.iter().zip(&norm) {
        heat += &format!("{:e},{},{}\n", r.lr, r.batch_size, n);
        points.push((r.lr, r.batch_size as f64, *n));
    }
    std::fs::write(dir.join("search_heatmap.csv"), heat)?;
    std::fs::write(
        dir.join("search.svg"),
        log_heatmap("Random search (1 = best score)", "learning rate", "batch size", &points),
    )?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub delay: usize,
    pub seed: u64,
    pub best_score: f64,
    pub final_score: f64,
    pub max_staleness: u64,
    pub error: Option<String>,
}

/// Count of adjacent pairs where the value goes up.
pub fn trend_inversions(values: &[f64]) -> usize {
    values.windows(2).filter(|w| w[1] > w[0]).count()
}

/// Trains once per `(delay, seed)`, `seeds` runs per delay; a failed run is
/// recorded and the sweep moves on.
pub fn delay_sweep(
    delays: &[usize],
    base: &RunConfig,
    seeds: usize,
    mut progress: impl FnMut(&DelayRow),
) -> Result<Vec<DelayRow>> {
    if delays.is_empty() || seeds == 0 {
        return Err(Error::invalid("delay sweep needs delays and at least one seed"));
    }
    let mut rows = Vec::new();
    for &k in delays {
        for s in 0..seeds {
            let mut cfg = base.clone();
            cfg.pipeline.delay_k = k;
            cfg.seed = base.seed + s as u64;
            let row = match run_async::<f32>(&cfg) {
                Ok(out) => DelayRow {
                    delay: k,
                    seed: cfg.seed,
                    best_score: out.summary.best_score,
                    final_score: out.summary.final_score,
                    max_staleness: out.summary.max_staleness,
                    error: None,
                },
                Err(e) => DelayRow {
                    delay: k,
                    seed: cfg.seed,
                    best_score: f64::NAN,
                    final_score: f64::NAN,
                    max_staleness: 0,
                    error: Some(e.to_string()),
                },
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayPoint {
    pub delay: usize,
    pub runs: usize,
    pub mean_best: f64,
    pub mean_final: f64,
}

/// Per-delay means over the successful runs, in sweep order.
pub fn summarize_sweep(rows: &[DelayRow]) -> Vec<DelayPoint> {
    let mut out: Vec<DelayPoint> = Vec::new();
    for r in rows.iter().filter(|r| r.error.is_none()) {
        match out.iter_mut().find(|p| p.delay == r.delay) {
            Some(p) => {
                p.mean_best += r.best_score;
                p.mean_final += r.final_score;
                p.runs += 1;
            }
            None => out.push(DelayPoint {
                delay: r.delay,
                runs: 1,
                mean_best: r.best_score,
                mean_final: r.final_score,
            }),
        }
    }
    for p in &mut out {
        p.mean_best /= p.runs as f64;
        p.mean_final /= p.runs as f64;
    }
    out
}

/// Training throughput at two training-queue capacities on otherwise equal
/// runs without artificial delay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueThroughputCheck {
    pub frames: u64,
    pub deterministic: bool,
    pub small_capacity: usize,
    pub large_capacity: usize,
    pub small_examples_per_s: f64,
    pub large_examples_per_s: f64,
    /// `small / large`.
    pub ratio: f64,
    pub within_15_percent: bool,
}

pub fn queue_throughput_check(base: &RunConfig, frames: u64) -> Result<QueueThroughputCheck> {
    let measure = |cap: usize| -> Result<f64> {
        let mut cfg = base.clone();
        cfg.pipeline.delay_k = 0;
        cfg.pipeline.train_queue_capacity = cap;
        cfg.train.frames = frames;
        cfg.train.eval_interval = 0;
        let t = Instant::now();
        let out: RunOutcome<f32> = run_async(&cfg)?;
        Ok(out.summary.examples as f64 / t.elapsed().as_secs_f64())
    };
    let small = measure(3)?;
    let large = measure(8)?;
    let ratio = small / large;
    Ok(QueueThroughputCheck {
        frames,
        deterministic: is_deterministic(base),
        small_capacity: 3,
        large_capacity: 8,
        small_examples_per_s: small,
        large_examples_per_s: large,
        ratio,
        within_15_percent: (ratio - 1.0).abs() <= 0.15,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub env: String,
    pub frames: u64,
    pub seeds: usize,
    pub points: Vec<DelayPoint>,
    pub best_trend_inversions: usize,
    pub random_baseline: Option<f64>,
    pub throughput: Option<QueueThroughputCheck>,
}

pub fn sweep_report(base: &RunConfig, rows: &[DelayRow], seeds: usize, throughput: Option<QueueThroughputCheck>) -> SweepReport {
    let points = summarize_sweep(rows);
    let best: Vec<f64> = points.iter().map(|p| p.mean_best).collect();
    SweepReport {
        env: format!("{:?}", base.env.name).to_lowercase(),
        frames: base.train.frames,
        seeds,
        best_trend_inversions: trend_inversions(&best),
        points,
        random_baseline: base.env.env_config().random_baseline(),
        throughput,
    }
}

fn report_markdown(r: &SweepReport, rows: &[DelayRow]) -> String {
    let mut md = format!(
        "# Delay sweep\n\nenv: {}, {} frames per run, {} seed(s) per delay\n\n| delay | runs | mean best | mean final |\n|---|---|---|---|\n",
        r.env, r.frames, r.seeds
    );
    for p in &r.points {
        md += &format!("| {} | {} | {:.3} | {:.3} |\n", p.delay, p.runs, p.mean_best, p.mean_final);
    }
    md += &format!("\nbest-score trend inversions across delays: {}\n", r.best_trend_inversions);
    if let Some(b) = r.random_baseline {
        md += &format!("random-policy baseline score: {b:.3}\n");
    }
    let failed: Vec<&DelayRow> = rows.iter().filter(|r| r.error.is_some()).collect();
    if !failed.is_empty() {
        md += "\n## Failed runs\n\n";
        for f in failed {
            md += &format!("- delay {} seed {}: {}\n", f.delay, f.seed, f.error.as_deref().unwrap_or(""));
        }
    }
    md += "\nReference point: on Atari Breakout with batch 128, a delay of more than 10 batches prevents \
           convergence entirely. The breakpoint for this environment is the one measured above.\n";
    if let Some(t) = &r.throughput {
        md += &format!(
            "\n## Training-queue capacity and throughput\n\ncapacity {}: {:.1} examples/s, capacity {}: {:.1} examples/s, \
             ratio {:.3} ({} 15%; {} frames per run{})\n",
            t.small_capacity,
            t.small_examples_per_s,
            t.large_capacity,
            t.large_examples_per_s,
            t.ratio,
            if t.within_15_percent { "within" } else { "NOT within" },
            t.frames,
            if t.deterministic { ", single-context deterministic mode" } else { "" }
        );
    }
    md
}

pub fn write_sweep(dir: &Path, rows: &[DelayRow], report: &SweepReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("delay,seed,best_score,final_score\n");
    for r in rows {
        csv += &format!("{},{},{},{}\n", r.delay, r.seed, r.best_score, r.final_score);
    }
    std::fs::write(dir.join("delay_sweep.csv"), csv)?;
    let series = vec![
        Series {
            name: "mean best".into(),
            points: report.points.iter().map(|p| (p.delay as f64, p.mean_best)).collect(),
        },
        Series {
            name: "mean final".into(),
            points: report.points.iter().map(|p| (p.delay as f64, p.mean_final)).collect(),
        },
    ];
    std::fs::write(
        dir.join("delay_sweep.svg"),
        line_chart("Evaluation score vs artificial delay", "delay (batches)", "mean score", &series),
    )?;
    std::fs::write(dir.join("delay_sweep_report.json"), serde_json::to_string_pretty(report)?)?;
    std::fs::write(dir.join("delay_sweep_report.md"), report_markdown(report, rows))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Profile, TrainMode};

    #[test]
    fn loguniform_endpoints_and_midpoint() {
        let s = SearchSpace::default();
        assert!((s.lr.at(0.0) - 1e-4).abs() < 1e-18);
        assert!((s.lr.at(1.0 - 1e-12) - 1e-2).abs() < 1e-12);
        let (lr, batch) = s.point(0.5, 0.5);
        assert!((lr - 1e-3).abs() < 1e-15);
        assert_eq!(batch, 45);
        assert_eq!(s.point(0.0, 0.0).1, 2);
        assert_eq!(s.point(1.0, 1.0).1, 1024);
        assert!(LogRange::new(0.0, 1.0).is_err());
        assert!(LogRange::new(2.0, 1.0).is_err());
    }

    #[test]
    fn ks_statistic_examples() {
        assert!((ks_uniform(&[0.5]) - 0.5).abs() < 1e-12);
        let even: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&even) <= 0.0005 + 1e-12);
        let skewed: Vec<f64> = even.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skewed) > 0.2);
    }

    #[test]
    fn normalization_spans_unit_interval() {
        assert_eq!(normalize_scores(&[-1.0, 0.0, 1.0]), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_scores(&[0.3, 0.3]), vec![1.0, 1.0]);
    }

    #[test]
    fn inversions_counted() {
        assert_eq!(trend_inversions(&[1.0, 0.9, 0.9, 0.2, -0.7]), 0);
        assert_eq!(trend_inversions(&[1.0, 0.5, 0.7, -0.7]), 1);
        assert_eq!(trend_inversions(&[]), 0);
    }

    #[test]
    fn sweep_summary_skips_failures() {
        let row = |delay, best, err: Option<&str>| DelayRow {
            delay,
            seed: 0,
            best_score: best,
            final_score: best,
            max_staleness: 0,
            error: err.map(String::from),
        };
        let rows = vec![row(0, 1.0, None), row(0, 0.5, None), row(5, f64::NAN, Some("boom")), row(5, 0.2, None)];
        let pts = summarize_sweep(&rows);
        assert_eq!(pts.len(), 2);
        assert_eq!((pts[0].runs, pts[0].mean_best), (2, 0.75));
        assert_eq!((pts[1].runs, pts[1].mean_best), (1, 0.2));
    }

    fn tiny() -> RunConfig {
        let mut c = RunConfig::for_profile(Profile::Desk);
        c.pipeline.n_envs = 2;
        c.pipeline.predict_min_batch = 1;
        c.pipeline.batch_size = 4;
        c.train.frames = 120;
        c.train.eval_interval = 0;
        c.train.eval_games = 2;
        c.train.mode = TrainMode::Async;
        c.deterministic = true;
        c
    }

    #[test]
    fn search_is_reproducible_and_in_range() {
        let c = tiny();
        let a = random_search(&SearchSpace::default(), 3, &c, |_| {}).unwrap();
        let b = random_search(&SearchSpace::default(), 3, &c, |_| {}).unwrap();
        assert_eq!(a, b);
        for r in &a {
            assert!((1e-4..=1e-2).contains(&r.lr));
            assert!((2..=1024).contains(&r.batch_size));
        }
        assert!(a.windows(2).all(|w| w[0].score_mean >= w[1].score_mean));
        let dir = tempfile::tempdir().unwrap();
        write_search(dir.path(), &a).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("search.csv")).unwrap();
        assert!(csv.starts_with("trial,lr,batch,score_mean,score_max,seed\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn zero_delay_entry_equals_plain_run() {
        let c = tiny();
        let rows = delay_sweep(&[0, 2], &c, 1, |_| {}).unwrap();
        let plain = run_async::<f32>(&c).unwrap();
        assert_eq!(rows[0].best_score, plain.summary.best_score);
        assert_eq!(rows[0].final_score, plain.summary.final_score);
        assert_eq!(rows[1].delay, 2);
        let report = sweep_report(&c, &rows, 1, None);
        let dir = tempfile::tempdir().unwrap();
        write_sweep(dir.path(), &rows, &report).unwrap();
        for f in ["delay_sweep.csv", "delay_sweep.svg", "delay_sweep_report.json", "delay_sweep_report.md"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
