//! Seed sweeps: the same closure mapped over many independent inputs.
//!
//! With the `parallel` feature the map fans out over a rayon pool, capped by
//! `SALT_MPC_THREADS` when set. Results always come back in input order.

/// Environment variable capping the number of sweep workers.
pub const THREADS_ENV: &str = "SALT_MPC_THREADS";

/// Worker cap from the environment; `None` when unset, zero or unparsable.
pub fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
}

pub fn map_sequential<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_parallel<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let go = || items.par_iter().map(&f).collect();
    match thread_cap() {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(go),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                go()
            }
        },
        None => go(),
    }
}

/// Parallel when the feature is on, sequential otherwise.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        map_parallel(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_sequential(items, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..100).collect();
        let sq = |x: &u64| x * x;
        assert_eq!(map(&xs, sq), map_sequential(&xs, sq));
    }

    #[test]
    fn empty_input() {
        let xs: Vec<u8> = Vec::new();
        assert!(map(&xs, |x| *x).is_empty());
    }
}
