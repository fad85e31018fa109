//! Execution-mode switch for the data-parallel loops.
//!
//! All helpers return results in input order and never reduce across
//! workers, so callers that fold the outputs sequentially get the same bits
//! whichever mode is active.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static SEQUENTIAL: AtomicBool = AtomicBool::new(false);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

/// Forces every helper in this module onto the calling thread.
pub fn set_exec(exec: Exec) {
    SEQUENTIAL.store(exec == Exec::Sequential, Ordering::SeqCst);
}

pub fn exec() -> Exec {
    if cfg!(feature = "parallel") && !SEQUENTIAL.load(Ordering::SeqCst) {
        Exec::Parallel
    } else {
        Exec::Sequential
    }
}

/// Maps `f` over `0..n`, collecting in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Maps `f` over a slice, collecting in order.
pub fn map_slice<S, T, F>(items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        return items.par_iter().map(f).collect();
    }
    items.iter().map(f).collect()
}

/// Runs `f` on consecutive `chunk`-sized pieces of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    if exec() == Exec::Parallel {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
        return;
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_range_preserves_order() {
        let out = map_range(100, |i| i * i);
        assert_eq!(out, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn chunked_writes_cover_everything() {
        let mut v = vec![0usize; 10];
        for_each_chunk_mut(&mut v, 3, |ci, c| {
            for (j, x) in c.iter_mut().enumerate() {
                *x = ci * 3 + j;
            }
        });
        assert_eq!(v, (0..10).collect::<Vec<_>>());
    }
}
