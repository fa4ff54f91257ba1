//! Multi-threaded sensitivity columns.

use std::num::NonZeroUsize;
use std::thread;

use facecap_core::capture::ColumnSolver;
use facecap_core::sensitivity::{SensitivityError, SensitivitySystem};

pub const THREADS_ENV: &str = "FACECAP_THREADS";

/// `FACECAP_THREADS` if set and positive, else the available parallelism.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            thread::available_parallelism()
                .map(NonZeroUsize::get)
                .unwrap_or(1)
        })
}

/// Solves columns on up to `threads` scoped threads. Each column is an
/// independent back-substitution against the shared factor, so the result is
/// bitwise identical to the sequential solver.
#[derive(Debug, Clone, Copy)]
pub struct Threaded {
    pub threads: usize,
}

impl ColumnSolver for Threaded {
    fn solve_all(&self, system: &SensitivitySystem) -> Result<Vec<Vec<f64>>, SensitivityError> {
        solve_columns(system, self.threads)
    }
}

pub fn solve_columns(
    system: &SensitivitySystem,
    threads: usize,
) -> Result<Vec<Vec<f64>>, SensitivityError> {
    let n = system.num_params();
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(|p| system.solve_column(p)).collect();
    }
    let mut slots: Vec<Option<Result<Vec<f64>, SensitivityError>>> = vec![None; n];
    thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                s.spawn(move || {
                    (t..n)
                        .step_by(threads)
                        .map(|p| (p, system.solve_column(p)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (p, col) in h.join().expect("sensitivity worker panicked") {
                slots[p] = Some(col);
            }
        }
    });
    slots
        .into_iter()
        .map(|c| c.expect("every column assigned"))
        .collect()
}
