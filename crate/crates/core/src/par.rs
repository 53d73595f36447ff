//! Data-parallel helpers. With the `parallel` feature the work is spread over
//! the rayon pool; without it every call runs sequentially. Results always
//! come back in index order, so callers stay deterministic either way.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    #[default]
    Sequential,
    /// Use the rayon pool when compiled with `parallel`; sequential otherwise.
    Parallel,
}

impl Parallelism {
    pub fn is_available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// `(0..n).map(f)` collected in order, optionally in parallel.
pub fn map_indexed<T, F>(n: usize, parallelism: Parallelism, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match parallelism {
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Runs `f` inside a pool of `threads` workers (rayon), or directly when
/// `threads <= 1` or the `parallel` feature is off.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    if threads > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            return pool.install(f);
        }
        log::warn!("could not build a {threads}-thread pool, running sequentially");
    }
    #[cfg(not(feature = "parallel"))]
    if threads > 1 {
        log::warn!("built without the `parallel` feature; ignoring --threads {threads}");
    }
    f()
}
