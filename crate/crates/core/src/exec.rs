//! Data-parallel execution over independent work items.
//!
//! Batch items, SmoothGrad samples and image decodes are independent; with
//! the `parallel` feature (default) they run on the rayon pool, otherwise on
//! the calling thread. Results are always collected in item order, so any
//! reduction downstream sums in a fixed order and outputs are bit-identical
//! across thread counts and across the two modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
#[cfg(feature = "parallel")]
use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !FORCE_SEQUENTIAL.load(Ordering::Relaxed) {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map `f` over a slice, returning results in item order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    map_indexed(items.len(), |i| f(&items[i]))
}

/// Run `f` with the parallel path disabled, for apples-to-apples timing in
/// the bench suite. Without the `parallel` feature this is a plain call.
pub fn with_sequential<R>(f: impl FnOnce() -> R) -> R {
    #[cfg(feature = "parallel")]
    {
        let prev = FORCE_SEQUENTIAL.swap(true, Ordering::SeqCst);
        let out = f();
        FORCE_SEQUENTIAL.store(prev, Ordering::SeqCst);
        out
    }
    #[cfg(not(feature = "parallel"))]
    f()
}
