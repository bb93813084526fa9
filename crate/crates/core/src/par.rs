//! Batch-level data parallelism.
//!
//! With the `parallel` feature the helpers fan work out over rayon; without it
//! (or when switched off at runtime) they run the same closures in order.
//! Results are always collected in index order and reduced sequentially by
//! callers, so both paths are bitwise identical.

use std::sync::atomic::{AtomicBool, Ordering};

static SEQUENTIAL_OVERRIDE: AtomicBool = AtomicBool::new(false);

/// Forces the sequential path even when the `parallel` feature is compiled in.
pub fn set_sequential(on: bool) {
    SEQUENTIAL_OVERRIDE.store(on, Ordering::SeqCst);
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !SEQUENTIAL_OVERRIDE.load(Ordering::Relaxed)
}

/// Evaluates `f(0..n)` and returns the results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && n > 1 {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Runs `f` over fixed-size chunks of `data`, passing the chunk index.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        if is_parallel() && data.len() > chunk {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}
