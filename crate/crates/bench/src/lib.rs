//! Shared fixtures for the pipeline benchmarks.

use fd_core::data::{SampleMeta, SequenceBatch};
use fd_core::denoiser::{DenoiserConfig, DenoiserModel};
use fd_core::schedule::{build_schedule, Schedule};

/// Denoiser at the default production geometry.
pub fn bench_denoiser() -> (DenoiserModel, Schedule) {
    let model = DenoiserModel::new(DenoiserConfig::default()).expect("bench model");
    let sched = build_schedule(1000, 1e-4, 0.02).expect("bench schedule");
    (model, sched)
}

/// Deterministic pseudo-batch of `n` samples shaped like the default model
/// input.
pub fn bench_batch(n: usize) -> SequenceBatch {
    let cfg = DenoiserConfig::default();
    let (k, d) = (cfg.seq_len, cfg.input_dim);
    let x: Vec<f64> = (0..n * k * d).map(|i| ((i * 2654435761) as f64).sin()).collect();
    SequenceBatch {
        k,
        d,
        x,
        y: (0..n).map(|i| 0.01 * ((i % 7) as f64 - 3.0)).collect(),
        meta: (0..n)
            .map(|i| SampleMeta {
                stock_id: (i % 50) as u32,
                date: (i / 50) as u32,
                sector: (i % 5) as u32,
            })
            .collect(),
        norm: None,
    }
}
