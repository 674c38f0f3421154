//! Execution strategy for the data-parallel loops.
//!
//! Every parallel loop in the crate maps an index range to independent
//! results and reduces them in index order afterwards, so the sequential and
//! parallel strategies agree bit for bit.

/// Work below this many multiply-adds stays on the calling thread.
pub const PARALLEL_GRAIN: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

impl Execution {
    /// Picks the default strategy, downgraded to sequential for small jobs.
    pub fn for_work(work: usize) -> Self {
        if work < PARALLEL_GRAIN {
            Execution::Sequential
        } else {
            Execution::default()
        }
    }

    /// Maps `0..n` through `f`, preserving index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    /// Fills consecutive `chunk`-sized pieces of `out`; `f` receives the chunk index.
    pub fn for_each_chunk<F>(self, out: &mut [f64], chunk: usize, f: F)
    where
        F: Fn(usize, &mut [f64]) + Sync + Send,
    {
        if chunk == 0 {
            return;
        }
        match self {
            #[cfg(feature = "parallel")]
            Execution::Parallel => {
                use rayon::prelude::*;
                out.par_chunks_mut(chunk)
                    .enumerate()
                    .for_each(|(i, c)| f(i, c));
            }
            _ => out
                .chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c)),
        }
    }
}
