//! Execution policy for data-parallel loops.
//!
//! Every parallel loop in the crate is a pure per-item map whose results are
//! collected in index order; reductions happen afterwards on the calling
//! thread. The policy therefore changes wall-clock time only, never bits.

use std::cell::Cell;
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is compiled in, otherwise
    /// behaves like `Sequential`.
    Parallel,
}

thread_local! {
    static MODE: Cell<Execution> = const { Cell::new(Execution::Parallel) };
}

/// The policy in effect on the current thread.
pub fn current() -> Execution {
    MODE.with(|m| m.get())
}

/// Runs `f` with `mode` as the policy for loops started on this thread.
pub fn with_execution<R>(mode: Execution, f: impl FnOnce() -> R) -> R {
    struct Restore(Execution);
    impl Drop for Restore {
        fn drop(&mut self) {
            MODE.with(|m| m.set(self.0));
        }
    }
    let _restore = Restore(MODE.with(|m| m.replace(mode)));
    f()
}

pub fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// `(0..n).map(f).collect()`, possibly on the rayon pool.
pub fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match current() {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `0..n` into fixed chunks of `chunk` items and maps each chunk.
///
/// Chunk boundaries depend only on `n` and `chunk`, never on the thread
/// count, so chunk-level partial sums are reproducible.
pub fn map_chunks<T, F>(n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    let chunk = chunk.max(1);
    let count = n.div_ceil(chunk);
    map_indices(count, |c| {
        let start = c * chunk;
        f(start..(start + chunk).min(n))
    })
}
