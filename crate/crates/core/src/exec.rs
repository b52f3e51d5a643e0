//! Replica scheduling abstraction.
//!
//! Estimators fan out over independent replicas through [`Executor`]; every
//! implementation must return results in index order so that reductions are
//! performed in the same order regardless of how work was scheduled.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// `(0..n).map(f)` collected in index order.
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs replicas one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map_indexed<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
