//! Shared worker pools, one per requested worker count.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rayon::{ThreadPool, ThreadPoolBuilder};

pub fn available_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Returns the pool with exactly `workers` threads, building it on first use.
pub fn pool(workers: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let workers = workers.max(1);
    let mut pools = POOLS.get_or_init(Default::default).lock().unwrap();
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(move |i| format!("pararnn-{workers}-{i}"))
                    .build()
                    .expect("failed to build worker pool"),
            )
        })
        .clone()
}
