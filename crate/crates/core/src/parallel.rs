//! Worker-thread control. `BOLTPOSE_THREADS` caps parallelism for the
//! per-point map loops; 0 (the default) runs them sequentially so CI output
//! is reproducible by construction. Parallel results are written into
//! index-addressed slots, so they are bit-identical to the sequential order
//! either way.

use std::sync::OnceLock;

use rayon::prelude::*;

static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();

pub fn worker_threads() -> usize {
    match std::env::var("BOLTPOSE_THREADS") {
        Ok(v) => v.trim().parse().unwrap_or(0),
        Err(_) => 0,
    }
}

fn pool() -> &'static Option<rayon::ThreadPool> {
    POOL.get_or_init(|| {
        let threads = worker_threads();
        if threads == 0 {
            None
        } else {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .ok()
        }
    })
}

/// Maps `f` over `0..n`, in parallel when a worker pool is configured.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match pool() {
        Some(p) => p.install(|| (0..n).into_par_iter().map(&f).collect()),
        None => (0..n).map(f).collect(),
    }
}
