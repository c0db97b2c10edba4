//! Multi-timescale self-supervised representation learning for behavioral
//! time series.
//!
//! The crate trains a three-branch causal temporal-convolution pyramid on
//! windowed behavioral features. Each branch covers a different receptive
//! field (recent past, short term, long term); per-frame branch embeddings
//! are concatenated and trained with two pretext tasks (future-action
//! prediction, hidden-feature prediction) plus timescale-specific latent
//! bootstrapping losses with stop-gradient targets. A synthetic generator
//! produces multi-timescale surrogate data with ground-truth global and
//! regime labels, and a linear-probe harness measures how decodable each
//! label is from each branch of the frozen embedding.
//!
//! Modules:
//! - [`nn`]: tensors, reverse-mode autodiff, layers, checkpoint container
//! - [`data`]: trajectories, pose features, splits, window sampling, I/O
//! - [`synth`]: regime-switching sinusoid-mixture data generator
//! - [`model`]: the three-branch encoder and its heads
//! - [`objectives`]: loss terms and temporal offset sampling
//! - [`trainer`]: Adam loop, checkpointing, JSONL logging
//! - [`eval`]: group pooling, linear probes, ablation reports

pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Tool identity embedded in every artifact this crate writes.
pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Worker-thread budget: the smaller of the machine's parallelism and the
/// MBL_THREADS environment variable (when set and positive).
pub fn worker_threads() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("MBL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        Some(cap) if cap >= 1 => hw.min(cap),
        _ => hw,
    }
}

/// Runs `f` over the items on up to `worker_threads()` threads and returns
/// results in input order. Falls back to a sequential loop for one worker.
pub fn parallel_map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = worker_threads().min(items.len().max(1));
    if workers <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = items.iter().map(|_| None).collect();
    let jobs: Vec<(usize, T)> = items.into_iter().enumerate().collect();
    let queue = std::sync::Mutex::new(jobs.into_iter());
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap().next();
                let Some((idx, item)) = job else { break };
                let out = f(item);
                results.lock().unwrap()[idx] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}
