//! Convolution and layout-conversion micro-benchmarks on the Atari trunk's
//! four layer shapes.
//!
//! Every group of cases passes a correctness gate (each implementation
//! against the naive kernel, 1e-5 relative) before anything is timed; a
//! failing gate aborts the whole run.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{conv_backward_data, conv_backward_filter, conv_forward, ConvImpl};
use crate::tensor::{ConvShape, Layout, Tensor};

/// Input `(N, H, W, C)` and kernel `(C_in, C_out, K_h, K_w)` of the four
/// conv layers at batch 128.
pub const CANONICAL: [([usize; 4], [usize; 4]); 4] = [
    ([128, 84, 84, 16], [16, 32, 5, 5]),
    ([128, 40, 40, 32], [32, 32, 5, 5]),
    ([128, 18, 18, 32], [32, 64, 5, 5]),
    ([128, 7, 7, 64], [64, 64, 3, 3]),
];

pub const GATE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BenchOp {
    Forward,
    BwdData,
    BwdFilter,
    Convert,
}

impl std::fmt::Display for BenchOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BenchOp::Forward => "FORWARD",
            BenchOp::BwdData => "BWD_DATA",
            BenchOp::BwdFilter => "BWD_FILTER",
            BenchOp::Convert => "CONVERT",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchCase {
    pub conv_shape: ConvShape,
    pub op: BenchOp,
    pub impl_select: ConvImpl,
    pub repeats: usize,
    pub warmup: usize,
}

impl BenchCase {
    pub fn validate(&self) -> Result<()> {
        if self.repeats < 3 {
            return Err(Error::invalid(format!("bench repeats must be >= 3, got {}", self.repeats)));
        }
        if self.op == BenchOp::Convert {
            return Err(Error::invalid("conversion cases go through run_convert_bench"));
        }
        self.conv_shape.validate()
    }
}

pub fn canonical_shapes(batch: usize) -> Result<Vec<ConvShape>> {
    CANONICAL
        .iter()
        .map(|&(i, k)| Ok(ConvShape::from_table(i, k)?.with_batch(batch)))
        .collect()
}

/// Whether `s` is the first trunk layer at any batch size. Its input
/// gradient is never needed, so BWD_DATA is not measured there.
pub fn is_first_layer(s: &ConvShape) -> bool {
    let (i, k) = CANONICAL[0];
    (s.in_h, s.in_w, s.in_c, s.out_c, s.k_h, s.k_w) == (i[1], i[2], i[3], k[1], k[2], k[3])
}

/// The four shapes times {FORWARD, BWD_DATA, BWD_FILTER} times both
/// implementations, naive first within each group.
pub fn canonical_cases(batch: usize, repeats: usize, warmup: usize) -> Result<Vec<BenchCase>> {
    let mut cases = Vec::new();
    for s in canonical_shapes(batch)? {
        for op in [BenchOp::Forward, BenchOp::BwdData, BenchOp::BwdFilter] {
            for impl_select in [ConvImpl::Naive, ConvImpl::Optimized] {
                cases.push(BenchCase {
                    conv_shape: s,
                    op,
                    impl_select,
                    repeats,
                    warmup,
                });
            }
        }
    }
    Ok(cases)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
    pub samples: usize,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Timing {
    pub fn from_samples(ms: &[f64]) -> Result<Self> {
        if ms.is_empty() {
            return Err(Error::invalid("no timing samples"));
        }
        let mut s = ms.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Timing {
            median_ms: percentile(&s, 0.5),
            p10_ms: percentile(&s, 0.1),
            p90_ms: percentile(&s, 0.9),
            samples: s.len(),
        })
    }
}

fn time_ms(warmup: usize, repeats: usize, mut f: impl FnMut() -> Result<()>) -> Result<Timing> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        f()?;
        // keep medians strictly positive even below timer resolution
        ms.push((t.elapsed().as_secs_f64() * 1e3).max(1e-6));
    }
    Timing::from_samples(&ms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub op: BenchOp,
    pub input_shape: [usize; 4],
    pub kernel_shape: [usize; 4],
    /// `NAIVE`/`OPTIMIZED` for convolutions, `NHWC->NCHW` style for conversions.
    pub impl_name: String,
    /// `None` for rows reported as N/A.
    pub timing: Option<Timing>,
    /// Naive median over this row's median; `None` without a naive row.
    pub speedup: Option<f64>,
    pub note: Option<String>,
}

fn kernel_of(s: &ConvShape) -> [usize; 4] {
    [s.in_c, s.out_c, s.k_h, s.k_w]
}

fn random_tensor(shape: &[usize], layout: Layout, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, layout, (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
}

struct Inputs {
    x: Tensor<f32>,
    w: Tensor<f32>,
    b: Tensor<f32>,
    g: Tensor<f32>,
}

fn run_op(op: BenchOp, s: &ConvShape, inp: &Inputs, imp: ConvImpl) -> Result<Tensor<f32>> {
    match op {
        BenchOp::Forward => conv_forward(&inp.x, &inp.w, &inp.b, s, imp),
        BenchOp::BwdData => conv_backward_data(&inp.g, &inp.w, s, imp),
        BenchOp::BwdFilter => conv_backward_filter(&inp.x, &inp.g, s, imp),
        BenchOp::Convert => Err(Error::invalid("not a convolution op")),
    }
}

/// Benchmarks the cases group by group (same shape and op), in first
/// appearance order. The gate's own call to each implementation counts as
/// its first warmup iteration.
pub fn run_bench(cases: &[BenchCase], seed: u64) -> Result<Vec<BenchRow>> {
    let mut groups: Vec<(ConvShape, BenchOp, Vec<BenchCase>)> = Vec::new();
    for c in cases {
        c.validate()?;
        match groups.iter_mut().find(|g| g.0 == c.conv_shape && g.1 == c.op) {
            Some(g) if !g.2.iter().any(|d| d.impl_select == c.impl_select) => g.2.push(*c),
            Some(_) => return Err(Error::invalid(format!("duplicate bench case {c:?}"))),
            None => groups.push((c.conv_shape, c.op, vec![*c])),
        }
    }

    let mut rows = Vec::new();
    for (gi, (s, op, group)) in groups.iter().enumerate() {
        let row = |c: &BenchCase, timing, speedup, note: Option<&str>| BenchRow {
            op: *op,
            input_shape: s.input_shape(),
            kernel_shape: kernel_of(s),
            impl_name: c.impl_select.to_string(),
            timing,
            speedup,
            note: note.map(String::from),
        };
        if *op == BenchOp::BwdData && is_first_layer(s) {
            rows.extend(group.iter().map(|c| row(c, None, None, Some("N/A: first layer needs no input gradient"))));
            continue;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (gi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let inputs = Inputs {
            x: random_tensor(&s.input_shape(), Layout::Nhwc, &mut rng)?,
            w: random_tensor(&s.weight_shape(), Layout::Nchw, &mut rng)?,
            b: random_tensor(&[s.out_c], Layout::Flat, &mut rng)?,
            g: random_tensor(&s.output_shape(), Layout::Nhwc, &mut rng)?,
        };

        let reference = run_op(*op, s, &inputs, ConvImpl::Naive)?;
        for c in group.iter().filter(|c| c.impl_select != ConvImpl::Naive) {
            let err = run_op(*op, s, &inputs, c.impl_select)?.rel_error(&reference);
            if !(err <= GATE_TOL) {
                return Err(Error::Bench(format!(
                    "{} {op} on {:?}/{:?} disagrees with NAIVE: rel error {err:e} > {GATE_TOL:e}",
                    c.impl_select,
                    s.input_shape(),
                    kernel_of(s)
                )));
            }
        }
        drop(reference);

        let mut timed = Vec::with_capacity(group.len());
        for c in group {
            let t = time_ms(c.warmup.saturating_sub(1), c.repeats, || run_op(*op, s, &inputs, c.impl_select).map(drop))?;
            timed.push((c, t));
        }
        let naive = timed.iter().find(|(c, _)| c.impl_select == ConvImpl::Naive).map(|(_, t)| t.median_ms);
        for (c, t) in timed {
            rows.push(row(c, Some(t), naive.map(|n| n / t.median_ms), None));
        }
    }
    Ok(rows)
}

/// Times layout conversion of each shape's input tensor in both directions
/// plus the same-layout copy, which is flagged as identity. A bitwise round
/// trip is checked before timing.
pub fn run_convert_bench(shapes: &[ConvShape], repeats: usize, warmup: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(Error::invalid(format!("bench repeats must be >= 3, got {repeats}")));
    }
    let mut rows = Vec::new();
    for (i, s) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let nhwc = random_tensor(&s.input_shape(), Layout::Nhwc, &mut rng)?;
        let nchw = nhwc.convert_layout(Layout::Nchw)?;
        let back = nchw.convert_layout(Layout::Nhwc)?;
        if back.data() != nhwc.data() || back.layout() != Layout::Nhwc {
            return Err(Error::Bench(format!("layout round trip not bitwise exact on {:?}", s.input_shape())));
        }
        for (src, target, note) in [
            (&nhwc, Layout::Nchw, None),
            (&nchw, Layout::Nhwc, None),
            (&nhwc, Layout::Nhwc, Some("identity")),
        ] {
            let t = time_ms(warmup, repeats, || src.convert_layout(target).map(drop))?;
            rows.push(BenchRow {
                op: BenchOp::Convert,
                input_shape: s.input_shape(),
                kernel_shape: kernel_of(s),
                impl_name: format!("{}->{}", src.layout(), target),
                timing: Some(t),
                speedup: None,
                note: note.map(String::from),
            });
        }
    }
    Ok(rows)
}

fn dims(d: &[usize; 4]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn ms(v: Option<f64>) -> String {
    v.map_or_else(|| "N/A".to_string(), |v| format!("{v:.4}"))
}

pub const CSV_HEADER: &str = "op,input_shape,kernel_shape,impl,median_ms,p10_ms,p90_ms,speedup";

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.op,
            dims(&r.input_shape),
            dims(&r.kernel_shape),
            r.impl_name,
            ms(r.timing.map(|t| t.median_ms)),
            ms(r.timing.map(|t| t.p10_ms)),
            ms(r.timing.map(|t| t.p90_ms)),
            r.speedup.map_or_else(|| "N/A".to_string(), |v| format!("{v:.3}")),
        );
    }
    out
}

pub fn to_markdown(rows: &[BenchRow], threads: usize) -> String {
    let mut out = format!("# Convolution benchmarks\n\nworker threads: {threads}\n");
    let mut ops: Vec<BenchOp> = Vec::new();
    for r in rows {
        if !ops.contains(&r.op) {
            ops.push(r.op);
        }
    }
    for op in ops {
        let _ = write!(
            out,
            "\n## {op} [ms]\n\n| input size | kernel size | impl | median | p10 | p90 | speedup | note |\n|---|---|---|---|---|---|---|---|\n"
        );
        for r in rows.iter().filter(|r| r.op == op) {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {} | {} | {} | {} |",
                r.input_shape.map(|v| v.to_string()).join(","),
                r.kernel_shape.map(|v| v.to_string()).join(","),
                r.impl_name,
                ms(r.timing.map(|t| t.median_ms)),
                ms(r.timing.map(|t| t.p10_ms)),
                ms(r.timing.map(|t| t.p90_ms)),
                r.speedup.map_or_else(|| "N/A".to_string(), |v| format!("{v:.2}x")),
                r.note.as_deref().unwrap_or(""),
            );
        }
    }
    out
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_case_set() {
        let cases = canonical_cases(128, 20, 3).unwrap();
        assert_eq!(cases.len(), 4 * 3 * 2);
        let s = canonical_shapes(128).unwrap();
        assert_eq!(s[0].output_shape(), [128, 80, 80, 32]);
        assert_eq!(s[3].output_shape(), [128, 5, 5, 64]);
        assert!(is_first_layer(&s[0].with_batch(2)));
        assert!(!is_first_layer(&s[1]));
    }

    #[test]
    fn percentiles_interpolate() {
        let t = Timing::from_samples(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!(t.median_ms, 3.0);
        assert!((t.p10_ms - 1.4).abs() < 1e-12);
        assert!((t.p90_ms - 4.6).abs() < 1e-12);
    }

    #[test]
    fn small_canonical_run_has_fixed_structure() {
        let cases = canonical_cases(1, 3, 1).unwrap();
        let rows = run_bench(&cases, 7).unwrap();
        assert_eq!(rows.len(), 24);
        let na: Vec<_> = rows.iter().filter(|r| r.timing.is_none()).collect();
        assert_eq!(na.len(), 2);
        assert!(na.iter().all(|r| r.op == BenchOp::BwdData && r.input_shape == [1, 84, 84, 16]));
        for r in rows.iter().filter(|r| r.timing.is_some()) {
            let t = r.timing.unwrap();
            assert!(t.median_ms > 0.0 && t.median_ms.is_finite());
            assert!(t.p10_ms <= t.median_ms && t.median_ms <= t.p90_ms);
        }
        for r in rows.iter().filter(|r| r.impl_name == "NAIVE" && r.timing.is_some()) {
            assert_eq!(r.speedup, Some(1.0));
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 25);
        assert!(csv.contains("BWD_DATA,1x84x84x16,16x32x5x5,NAIVE,N/A"));
        assert!(to_markdown(&rows, 1).contains("## BWD_FILTER [ms]"));
    }

    #[test]
    fn repeats_below_three_rejected() {
        let mut c = canonical_cases(1, 3, 0).unwrap();
        c[0].repeats = 2;
        assert!(run_bench(&c, 0).is_err());
        assert!(run_convert_bench(&canonical_shapes(1).unwrap(), 2, 0, 0).is_err());
    }

    #[test]
    fn convert_rows_flag_identity() {
        let rows = run_convert_bench(&canonical_shapes(2).unwrap(), 3, 0, 1).unwrap();
        assert_eq!(rows.len(), 12);
        let ids: Vec<_> = rows.iter().filter(|r| r.note.as_deref() == Some("identity")).collect();
        assert_eq!(ids.len(), 4);
        assert!(ids.iter().all(|r| r.impl_name == "NHWC->NHWC"));
        assert_eq!(rows[0].impl_name, "NHWC->NCHW");
    }

    #[test]
    fn self_speedup_near_one() {
        let s = ConvShape::new(2, (9, 9, 3), 4, (3, 3)).unwrap();
        let c = BenchCase {
            conv_shape: s,
            op: BenchOp::Forward,
            impl_select: ConvImpl::Naive,
            repeats: 15,
            warmup: 2,
        };
        let rows = run_bench(&[c], 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].speedup, Some(1.0));
    }
}
