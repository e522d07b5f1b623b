//! Wall-clock measurement of the alignment stage, comparing the fused
//! deformable pass against the pairwise flow backend.

use std::time::Instant;

use ndarray::Array4;

use crate::generator::Generator;
use crate::nn::Params;

/// Latency summary of one backend's alignment stage.
#[derive(Debug, Clone)]
pub struct AlignBenchRow {
    pub backend: String,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub runs: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
}

/// Time `gen`'s alignment stage on a fixed input: `warmup` unmeasured
/// passes, then the median and mean of `runs` measured passes.
pub fn time_alignment(
    gen: &Generator,
    params: &Params<f32>,
    frames: &Array4<f32>,
    warmup: usize,
    runs: usize,
) -> AlignBenchRow {
    assert!(runs >= 1);
    for _ in 0..warmup {
        let (z, _) = gen.align.forward(params, frames);
        std::hint::black_box(&z);
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let (z, _) = gen.align.forward(params, frames);
        std::hint::black_box(&z);
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ms = if runs % 2 == 1 {
        samples[runs / 2]
    } else {
        0.5 * (samples[runs / 2 - 1] + samples[runs / 2])
    };
    let mean_ms = samples.iter().sum::<f64>() / runs as f64;
    let (n, _, h, w) = frames.dim();
    AlignBenchRow {
        backend: gen.align.backend().to_string(),
        median_ms,
        mean_ms,
        runs,
        batch: n,
        height: h,
        width: w,
    }
}
