use brainscl_core::exec::{Executor, Sequential};
use rayon::prelude::*;

/// Sequential or rayon-backed executor. Results come back in index order and
/// are reduced by the caller in that order, so both modes give identical
/// numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Exec {
    pub fn new(single_thread: bool) -> Self {
        if single_thread {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

impl Executor for Exec {
    fn map<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match self {
            Exec::Sequential => Sequential.map(n, f),
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
        }
    }
}
