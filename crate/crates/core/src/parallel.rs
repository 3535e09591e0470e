//! Scoped worker pool for read-only evaluation passes.

use std::ops::Range;

use crate::error::{CtrlError, Result};

/// Environment variable capping intra-run worker threads.
pub const THREADS_ENV: &str = "CTRL_ALIGN_THREADS";

/// Worker count from `CTRL_ALIGN_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Splits `0..n` into chunks of `chunk` rows and maps them on up to
/// `threads` workers. Results come back in chunk order.
pub fn map_chunks<T, F>(n: usize, chunk: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(Range<usize>) -> Result<T> + Sync,
{
    if chunk == 0 {
        return Err(CtrlError::Config("chunk size must be positive".into()));
    }
    let ranges: Vec<Range<usize>> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let threads = threads.clamp(1, ranges.len().max(1));
    if threads == 1 {
        return ranges.into_iter().map(&f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..ranges.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let per = ranges.len().div_ceil(threads);
        for (slot_group, range_group) in slots.chunks_mut(per).zip(ranges.chunks(per)) {
            let f = &f;
            scope.spawn(move || {
                for (slot, r) in slot_group.iter_mut().zip(range_group) {
                    *slot = Some(f(r.clone()));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every chunk is visited")).collect()
}
