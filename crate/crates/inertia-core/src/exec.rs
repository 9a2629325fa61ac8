//! Data-parallel map helpers. With the `parallel` feature (default) the
//! batch entry points fan out over rayon's thread pool; without it they
//! fall back to the sequential loop. `*_seq` variants are always compiled
//! so benchmarks can compare the two paths in one build.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is on.
/// Output order always matches input order.
pub fn map<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_seq(items, f)
    }
}

/// Sequential map with the same signature as [`map`].
pub fn map_seq<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}
