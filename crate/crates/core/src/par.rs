//! Data-parallel helpers used by the risk, verification and rollout loops.
//!
//! Work is always split into fixed-size chunks whose partial results are
//! combined sequentially in chunk order, so the parallel and sequential paths
//! produce bit-identical floating point results.

use std::sync::atomic::{AtomicBool, Ordering};

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Chunk length used by [`chunked_fold`] callers that have no better choice.
pub const DEFAULT_CHUNK: usize = 64;

/// Toggle the parallel path at runtime. Has no effect without the `parallel` feature.
pub fn set_parallel(on: bool) {
    PARALLEL.store(on && cfg!(feature = "parallel"), Ordering::Relaxed);
}

pub fn is_parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Configure the global worker count. `0` keeps the runtime default, `1`
/// switches to the sequential path.
pub fn init_threads(threads: usize) {
    if threads == 1 {
        set_parallel(false);
        return;
    }
    #[cfg(feature = "parallel")]
    if threads > 1 {
        // A second initialization (tests, repeated CLI calls in-process) is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

/// `(0..n).map(f).collect()` with order preserved.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}

/// Fold `0..n` in chunks of `chunk` indices, then reduce the per-chunk
/// accumulators left to right.
pub fn chunked_fold<A, I, F, R>(n: usize, chunk: usize, init: I, fold: F, reduce: R) -> A
where
    A: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) + Sync + Send,
    R: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_indexed(n_chunks, |c| {
        let mut acc = init();
        for i in c * chunk..((c + 1) * chunk).min(n) {
            fold(&mut acc, i);
        }
        acc
    });
    partials.into_iter().fold(init(), reduce)
}

/// Like [`chunked_fold`] but the fold may fail; the error from the lowest
/// index wins.
pub fn try_chunked_fold<A, E, I, F, R>(n: usize, chunk: usize, init: I, fold: F, reduce: R) -> Result<A, E>
where
    A: Send,
    E: Send,
    I: Fn() -> A + Sync + Send,
    F: Fn(&mut A, usize) -> Result<(), E> + Sync + Send,
    R: Fn(A, A) -> A,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let partials = map_indexed(n_chunks, |c| {
        let mut acc = init();
        for i in c * chunk..((c + 1) * chunk).min(n) {
            fold(&mut acc, i)?;
        }
        Ok(acc)
    });
    let mut out = init();
    for p in partials {
        out = reduce(out, p?);
    }
    Ok(out)
}
