//! Data-parallel helpers.
//!
//! Every batch-shaped loop in the crate (trajectory generation, per-sample
//! network passes, per-seed sampling) goes through [`map_indexed`]. Results
//! are always collected in index order, so output never depends on the
//! execution strategy.

/// How an index-parallel loop is executed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` degrades to sequential when the `parallel` feature is off.
    pub fn effective(self) -> Self {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec.effective() {
        Execution::Sequential => (0..n).map(f).collect(),
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        #[cfg(not(feature = "parallel"))]
        Execution::Parallel => unreachable!(),
    }
}

/// Fallible variant of [`map_indexed`]; the first error by index wins.
pub fn try_map_indexed<T, E, F>(exec: Execution, n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    map_indexed(exec, n, f).into_iter().collect()
}
