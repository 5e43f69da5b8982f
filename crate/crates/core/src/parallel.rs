//! Thin dispatch layer between rayon and sequential execution.
//!
//! Every parallel loop in the crate goes through these helpers, which split
//! work over independent output slices only. Each slice is filled by a pure
//! function of its index, so results are bit-identical whether the `parallel`
//! feature is enabled, disabled, or throttled via `MASKGIT_THREADS`.

/// Env var bounding the rayon worker count.
pub const THREADS_ENV: &str = "MASKGIT_THREADS";

/// Configure the global worker pool from `MASKGIT_THREADS`, if set.
///
/// Returns the applied bound. Calling this after the pool already exists is
/// a no-op (rayon ignores late configuration), so binaries call it first.
pub fn configure_from_env() -> Option<usize> {
    let n: usize = std::env::var(THREADS_ENV).ok()?.parse().ok()?;
    if n == 0 {
        return None;
    }
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Some(n)
}

/// Number of workers the dispatch layer will use.
pub fn current_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Map `0..n` through `f`, in parallel when available.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Fill disjoint `chunk`-sized slices of `data`, `f(chunk_index, slice)`.
pub fn fill_chunks<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
    }
}

/// Sequential reference version of [`fill_chunks`]; benchmarks compare both.
pub fn fill_chunks_seq<T, F>(data: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    data.chunks_mut(chunk).enumerate().for_each(|(i, s)| f(i, s));
}
