//! Latency and throughput measurement. Timing wraps the full forward call,
//! including input quantization (INT8) and binary16 conversion (FP16),
//! because that is the cost a deployment pays per image.

use super::{HarnessError, RunConfig};
use crate::backbone::{
    fold::fold_graph, forward, memory_footprint, presets::build_preset, Precision, WeightStore,
};
use crate::bev::BevImage;
use crate::quant::{collect_stats, forward_fp16_images, forward_int8, quantize_model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BenchResult {
    pub model: String,
    pub precision: Precision,
    pub batch: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub throughput_ips: f64,
    pub param_count: usize,
    pub memory_mib: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub batches: Vec<usize>,
    pub warmup: usize,
    pub iterations: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            batches: vec![1, 32],
            warmup: 2,
            iterations: 10,
        }
    }
}

/// Nearest-rank percentile of an unsorted latency sample.
pub fn percentile(latencies_ms: &[f64], p: f64) -> f64 {
    assert!(!latencies_ms.is_empty());
    let mut sorted = latencies_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Runs `warmup` discarded passes, then times `iterations` passes on the
/// monotonic clock. Returns per-iteration latencies in milliseconds.
pub fn measure<F: FnMut()>(warmup: usize, iterations: usize, mut f: F) -> Vec<f64> {
    for _ in 0..warmup {
        f();
    }
    let mut latencies = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        f();
        latencies.push(start.elapsed().as_secs_f64() * 1e3);
    }
    latencies
}

pub fn summarize(
    model: &str,
    precision: Precision,
    batch: usize,
    param_count: usize,
    latencies_ms: &[f64],
) -> BenchResult {
    let mean_ms = latencies_ms.iter().sum::<f64>() / latencies_ms.len() as f64;
    let total_s: f64 = latencies_ms.iter().sum::<f64>() / 1e3;
    BenchResult {
        model: model.to_string(),
        precision,
        batch,
        mean_ms,
        p50_ms: percentile(latencies_ms, 50.0),
        p95_ms: percentile(latencies_ms, 95.0),
        throughput_ips: (batch * latencies_ms.len()) as f64 / total_s,
        param_count,
        memory_mib: memory_footprint(param_count, precision),
    }
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<BevImage> {
    (0..n)
        .map(|i| {
            let plane: Vec<f32> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut pixels = plane.clone();
            pixels.extend_from_slice(&plane);
            pixels.extend_from_slice(&plane);
            BevImage {
                width: w,
                height: h,
                pixels,
                source_frame_id: i as u64,
            }
        })
        .collect()
}

/// Benchmarks one preset across the configured precision set and batch
/// sizes. Weights are randomly initialized; timing does not depend on
/// parameter values.
pub fn run_benchmark(
    config: &RunConfig,
    bench: &BenchConfig,
) -> Result<Vec<BenchResult>, HarnessError> {
    if bench.iterations < 10 {
        return Err(HarnessError::InvalidConfig {
            line: 0,
            message: "bench needs at least 10 timed iterations".into(),
        });
    }
    if bench.warmup < 1 {
        return Err(HarnessError::InvalidConfig {
            line: 0,
            message: "bench needs at least 1 warmup pass".into(),
        });
    }
    let mut graph =
        build_preset(&config.preset, config.descriptor_dim).map_err(super::stage("model"))?;
    graph.input_shape = [3, config.bev.height, config.bev.width];
    let weights = WeightStore::init_random(&graph, 0);
    let (graph, weights) = fold_graph(&graph, &weights).map_err(super::stage("fold"))?;
    let param_count = graph.param_count();

    let mut rng = ChaCha8Rng::seed_from_u64(0xbe9c);
    let max_batch = bench.batches.iter().copied().max().unwrap_or(1);
    let images = random_images(&mut rng, max_batch, config.bev.height, config.bev.width);

    let qmodel = if config.eval.precisions.contains(&Precision::Int8) {
        let calib: Vec<&BevImage> = images.iter().collect();
        let stats = collect_stats(&graph, &weights, &calib, config.calib_seed)
            .map_err(super::stage("calibrate"))?;
        Some(quantize_model(&graph, &weights, &stats).map_err(super::stage("quantize"))?)
    } else {
        None
    };

    let mut results = Vec::new();
    for &batch in &bench.batches {
        let refs: Vec<&BevImage> = images.iter().take(batch).collect();
        for &precision in &config.eval.precisions {
            let latencies = match precision {
                Precision::Fp32 => {
                    let input = crate::bev::batch_tensor(&refs);
                    measure(bench.warmup, bench.iterations, || {
                        forward(&graph, &weights, &input).expect("fp32 forward");
                    })
                }
                Precision::Fp16 => measure(bench.warmup, bench.iterations, || {
                    forward_fp16_images(&graph, &weights, &refs).expect("fp16 forward");
                }),
                Precision::Int8 => {
                    let qmodel = qmodel.as_ref().expect("quantized model present");
                    measure(bench.warmup, bench.iterations, || {
                        forward_int8(qmodel, &refs).expect("int8 forward");
                    })
                }
            };
            results.push(summarize(
                &config.preset,
                precision,
                batch,
                param_count,
                &latencies,
            ));
        }
    }
    Ok(results)
}
