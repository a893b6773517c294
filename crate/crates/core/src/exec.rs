//! Sequential or pooled data-parallel execution of indexed maps.
//!
//! Every parallel section in the crate is an order-preserving map whose
//! results are reduced sequentially by the caller, so output never depends
//! on the worker count.

use std::sync::Arc;

use rayon::prelude::*;

/// Smallest run of consecutive items handed to one worker.
const MIN_GRAIN: usize = 64;

#[derive(Clone, Default)]
pub enum Executor {
    #[default]
    Sequential,
    Pool(Arc<rayon::ThreadPool>),
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Executor::Sequential => write!(f, "Sequential"),
            Executor::Pool(p) => write!(f, "Pool({})", p.current_num_threads()),
        }
    }
}

impl Executor {
    /// `workers <= 1` yields the sequential executor.
    pub fn with_workers(workers: usize) -> Self {
        if workers <= 1 {
            return Executor::Sequential;
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("localmap-worker-{i}"))
            .build()
            .expect("failed to build worker pool");
        Executor::Pool(Arc::new(pool))
    }

    pub fn workers(&self) -> usize {
        match self {
            Executor::Sequential => 1,
            Executor::Pool(p) => p.current_num_threads(),
        }
    }

    /// `(0..n).map(f).collect()`, evaluated on the pool when there is one.
    pub fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Executor::Sequential => (0..n).map(f).collect(),
            Executor::Pool(pool) => pool.install(|| (0..n).into_par_iter().with_min_len(MIN_GRAIN).map(f).collect()),
        }
    }
}
