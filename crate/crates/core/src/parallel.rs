//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature the work is spread over a rayon pool; without
//! it everything runs on the calling thread. Results keep input order either
//! way, so downstream reductions are identical.

/// Number of worker threads to use; `0` means "all available".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Workers(pub usize);

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], workers: Workers, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    if workers.0 == 1 || items.len() <= 1 {
        return seq_map(items, f);
    }
    let run = || {
        items
            .par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect()
    };
    if workers.0 == 0 {
        run()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(workers.0).build() {
            Ok(pool) => pool.install(run),
            Err(_) => seq_map(items, f),
        }
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], _workers: Workers, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    seq_map(items, f)
}

pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(usize, &T) -> R,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
