//! Data-parallel execution helpers.
//!
//! With the `parallel` feature the helpers fan out over rayon's pool;
//! without it (or with [`Execution::Sequential`]) they run inline on the
//! calling thread. Every helper preserves input order, so results do not
//! depend on the number of worker threads.

use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Maps a worker-thread count onto an execution mode; one thread means sequential.
    pub fn from_threads(threads: usize) -> Self {
        if threads <= 1 {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

static KERNELS_PARALLEL: AtomicBool = AtomicBool::new(true);

/// Selects whether dense tensor kernels (matmul, im2col) split work across threads.
pub fn set_kernel_execution(mode: Execution) {
    KERNELS_PARALLEL.store(mode == Execution::Parallel, Ordering::Relaxed);
}

pub fn kernel_execution() -> Execution {
    if KERNELS_PARALLEL.load(Ordering::Relaxed) {
        Execution::Parallel
    } else {
        Execution::Sequential
    }
}

/// Runs `f` with data-parallel helpers limited to `threads` workers (0 = all cores).
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    if threads > 1 {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => return pool.install(f),
            Err(e) => log::warn!("could not start {threads} worker threads: {e}"),
        }
    }
    let _ = threads;
    f()
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(items: &[T], mode: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = mode;
    items.iter().map(f).collect()
}

/// Order-preserving map over `0..n`.
pub fn map_range<R, F>(n: usize, mode: Execution, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Runs `f(chunk_index, chunk)` over disjoint mutable chunks of `buf`.
pub fn for_each_chunk_mut<T, F>(buf: &mut [T], chunk: usize, mode: Execution, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    assert!(chunk > 0, "chunk size must be positive");
    #[cfg(feature = "parallel")]
    if mode.is_parallel() {
        use rayon::prelude::*;
        buf.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    let _ = mode;
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u32> = (0..1000).collect();
        let seq = map(&xs, Execution::Sequential, |x| x * 3);
        let par = map(&xs, Execution::Parallel, |x| x * 3);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 2997);
    }

    #[test]
    fn chunks_cover_buffer() {
        let mut buf = vec![0usize; 103];
        for_each_chunk_mut(&mut buf, 10, Execution::Parallel, |i, c| {
            for v in c.iter_mut() {
                *v = i;
            }
        });
        assert_eq!(buf[0], 0);
        assert_eq!(buf[102], 10);
    }

    #[test]
    fn one_thread_is_sequential() {
        assert_eq!(Execution::from_threads(1), Execution::Sequential);
        assert_eq!(Execution::from_threads(0), Execution::Sequential);
        assert_eq!(Execution::from_threads(8), Execution::Parallel);
    }
}
