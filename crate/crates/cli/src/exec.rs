//! Parallel replica scheduling on a rayon pool.

use std::sync::Arc;

use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};
use spde_averaging_core::Executor;

/// Runs replicas on rayon; indexed collection keeps results in index order,
/// so outputs do not depend on the thread count.
#[derive(Clone, Default)]
pub struct Parallel {
    pool: Option<Arc<ThreadPool>>,
}

impl Parallel {
    /// `None` uses the global pool.
    pub fn new(threads: Option<usize>) -> Result<Self, rayon::ThreadPoolBuildError> {
        let pool = match threads {
            Some(n) => Some(Arc::new(ThreadPoolBuilder::new().num_threads(n).build()?)),
            None => None,
        };
        Ok(Self { pool })
    }
}

impl Executor for Parallel {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let run = || (0..n).into_par_iter().map(&f).collect();
        match &self.pool {
            Some(p) => p.install(run),
            None => run(),
        }
    }
}
