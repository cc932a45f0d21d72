//! Data-parallel helpers. With the `parallel` feature these run on the rayon
//! pool; without it (or with [`Execution::Sequential`]) they run inline.
//! Results are always returned in index order, so callers that reduce them
//! sequentially get the same bits at any thread count.

/// How an indexed map is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    #[cfg_attr(not(feature = "parallel"), default)]
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// `(0..n).map(f).collect()` under the default execution mode.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_with(Execution::default(), n, f)
}

pub fn map_indexed_with<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Execution::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
    }
}
