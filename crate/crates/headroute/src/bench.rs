//! Wall-clock timing of the attention patterns.

use std::hint::black_box;
use std::time::Instant;

use headroute_core::attention::{
    global_attention, intra_frame_attention, window_attention, HeadTensors, Pattern, WindowSpec,
};
use headroute_core::cost::{attention_macs, pattern_label, BenchTiming};
use headroute_core::{rng, Grid3};
use rand::Rng;

use crate::error::{Error, Result};

pub const MIN_REPEATS: usize = 5;

/// Seeded standard-normal-ish head tensors (uniform in [-1, 1]).
pub fn random_head(grid: Grid3, d: usize, seed: u64) -> Result<HeadTensors<f32>> {
    let n = grid.tokens() * d;
    let mut r = rng::stream(seed, "bench-head", 0);
    let mut draw = || (0..n).map(|_| r.random_range(-1.0f32..=1.0)).collect::<Vec<_>>();
    let (q, k, v) = (draw(), draw(), draw());
    Ok(HeadTensors::new(q, k, v, d, grid)?)
}

fn run(ht: &HeadTensors<f32>, pattern: Pattern, spec: &WindowSpec) -> Result<Vec<f32>> {
    Ok(match pattern {
        Pattern::Global => global_attention(ht)?,
        Pattern::Intra => intra_frame_attention(ht)?,
        Pattern::Window => window_attention(ht, spec)?,
    })
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times one head under `pattern`: one warm-up, then `repeats` samples.
pub fn time_pattern(
    ht: &HeadTensors<f32>,
    pattern: Pattern,
    spec: &WindowSpec,
    repeats: usize,
) -> Result<BenchTiming> {
    if repeats < MIN_REPEATS {
        return Err(Error::Usage(format!("bench needs at least {MIN_REPEATS} repeats, got {repeats}")));
    }
    black_box(run(ht, pattern, spec)?);
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        black_box(run(black_box(ht), pattern, spec)?);
        samples.push(t0.elapsed().as_secs_f64());
    }
    Ok(BenchTiming {
        label: pattern_label(pattern, spec),
        macs: attention_macs(pattern, &ht.grid(), ht.head_dim(), Some(spec))?,
        median_seconds: median(&samples),
        samples,
    })
}

pub fn bench_patterns(grid: Grid3, d: usize, spec: &WindowSpec, repeats: usize, seed: u64) -> Result<Vec<BenchTiming>> {
    let ht = random_head(grid, d, seed)?;
    Pattern::ALL
        .iter()
        .map(|&p| time_pattern(&ht, p, spec, repeats))
        .collect()
}

pub fn format_table(timings: &[BenchTiming]) -> String {
    let mut s = format!("{:<18} {:>16} {:>14} {:>8}\n", "pattern", "MACs", "median_ms", "repeats");
    for t in timings {
        s.push_str(&format!(
            "{:<18} {:>16} {:>14.3} {:>8}\n",
            t.label,
            t.macs,
            t.median_seconds * 1e3,
            t.samples.len()
        ));
    }
    s
}
