//! Forward-pass timing of the chunked scan against naive self-attention.

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scan::{scan_chunked, ScanParams, DEFAULT_CHUNK};
use crate::tensor::{matmul_nt, matmul_raw, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Channel width shared by both operators.
    pub dim: usize,
    pub state: usize,
    pub chunk: usize,
    /// Timed repetitions per point; the minimum is reported.
    pub reps: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { dim: 64, state: 16, chunk: DEFAULT_CHUNK, reps: 5, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub len: usize,
    pub scan_secs: f64,
    pub attention_secs: f64,
}

/// Single-head softmax attention with Q, K, V and output projections.
/// `x: [L, D]`, each weight `[D, D]`.
pub fn naive_attention(x: &[f32], w: [&[f32]; 4], l: usize, d: usize) -> Vec<f32> {
    let q = matmul_raw(x, w[0], l, d, d);
    let k = matmul_raw(x, w[1], l, d, d);
    let v = matmul_raw(x, w[2], l, d, d);
    let mut s = matmul_nt(&q, &k, l, d, l);
    let scale = 1.0 / (d as f32).sqrt();
    for row in s.chunks_mut(l) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - m) * scale).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    let ctx = matmul_raw(&s, &v, l, l, d);
    matmul_raw(&ctx, w[3], l, d, d)
}

/// Minimum wall time of `reps` runs after one warm-up run.
pub fn time_min<R>(reps: usize, mut f: impl FnMut() -> R) -> Duration {
    black_box(f());
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            black_box(f());
            t.elapsed()
        })
        .min()
        .expect("at least one repetition")
}

/// Times both operators at each sequence length. Lengths must be ascending.
///
/// Repetitions run in rounds over all lengths, so a transient slowdown
/// lands on every length rather than skewing one ratio; each length keeps its
/// fastest run.
pub fn run_scaling(lens: &[usize], cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if lens.is_empty() || lens.windows(2).any(|w| w[0] >= w[1]) || lens[0] == 0 {
        return Err(Error::Value(format!("sequence lengths must be positive and strictly ascending, got {lens:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dim;
    let params = ScanParams::<f32>::init(d, cfg.state, d.div_ceil(16), &mut rng);
    let w: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::randn(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng)).collect();
    let inputs: Vec<Tensor<f32>> = lens.iter().map(|&l| Tensor::uniform(&[l, d], -1.0, 1.0, &mut rng)).collect();
    let scan = |x: &Tensor<f32>| -> Result<Vec<f32>> { scan_chunked(&params.terms(x)?, cfg.chunk) };
    let attn = |x: &Tensor<f32>, l| naive_attention(x.data(), [w[0].data(), w[1].data(), w[2].data(), w[3].data()], l, d);
    let mut best = vec![(Duration::MAX, Duration::MAX); lens.len()];
    for _ in 0..cfg.reps.max(1) {
        for (i, (&l, x)) in lens.iter().zip(&inputs).enumerate() {
            best[i].0 = best[i].0.min(time_min(1, || scan(x)));
            best[i].1 = best[i].1.min(time_min(1, || attn(x, l)));
        }
    }
    Ok(lens
        .iter()
        .zip(best)
        .map(|(&len, (s, a))| BenchRow { len, scan_secs: s.as_secs_f64(), attention_secs: a.as_secs_f64() })
        .collect())
}

/// `(L, scan ratio, attention ratio)` for each consecutive pair of rows.
pub fn growth_ratios(rows: &[BenchRow]) -> Vec<(usize, f64, f64)> {
    rows.windows(2).map(|p| (p[1].len, p[1].scan_secs / p[0].scan_secs, p[1].attention_secs / p[0].attention_secs)).collect()
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,scan_seconds,attention_seconds\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.6e},{:.6e}", r.len, r.scan_secs, r.attention_secs);
    }
    s
}
