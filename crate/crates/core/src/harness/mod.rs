//! Experiment runner: configuration, execution and artifact output.

pub mod config;
pub mod experiments;
pub mod invariants;
pub mod output;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub use config::{ExperimentConfig, ExperimentKind};
pub use output::{execute, run_experiment, ExperimentOutput, RunSummary};

/// Evaluates `f(0..n)` on up to `available_parallelism` threads, preserving
/// order. `REVHMC_THREADS` caps the thread count.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = std::env::var("REVHMC_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let v = f(i);
                slots.lock().expect("worker panicked")[i] = Some(v);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|v| v.expect("every index evaluated")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let v = par_map(37, |i| i * i);
        assert_eq!(v, (0..37).map(|i| i * i).collect::<Vec<_>>());
        assert!(par_map(0, |i| i).is_empty());
    }
}
