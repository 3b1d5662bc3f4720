//! Execution policy for the data-parallel loops (per-layer probe fits,
//! per-prompt forward passes, per-question evaluation, per-example
//! gradients).
//!
//! With the `parallel` feature (default) [`Exec::Parallel`] fans work out
//! over the rayon pool. Without it every policy runs sequentially. Results
//! are always collected in index order, so reductions over them are
//! deterministic regardless of policy.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Maps `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => (0..n).into_par_iter().map(f).collect(),
            _ => (0..n).map(f).collect(),
        }
    }

    /// Like [`Exec::map`] over a slice.
    pub fn map_slice<'a, S, T, F>(self, items: &'a [S], f: F) -> Vec<T>
    where
        S: Sync,
        T: Send,
        F: Fn(&'a S) -> T + Sync + Send,
    {
        self.map(items.len(), |i| f(&items[i]))
    }

    pub fn is_parallel_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Caps the global worker pool. Only the first call has an effect; returns
/// `false` when the pool was already initialized or parallelism is compiled
/// out.
pub fn init_threads(n: usize) -> bool {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .is_ok()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
        false
    }
}
