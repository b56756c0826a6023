//! Data-parallel helpers with a sequential fallback.
//!
//! Work is always split into chunks whose boundaries depend only on the
//! input length, never on the number of worker threads, and partial
//! results come back in chunk order. Reductions over those partials are
//! therefore bit-identical whether the `parallel` feature is enabled or
//! not, and for any rayon pool size.

/// Rows per chunk for reductions over pseudo-table rows.
pub const ROW_CHUNK: usize = 4096;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items `map_indexed` stays on the calling thread.
pub const SEQUENTIAL_BELOW: usize = 256;

fn map_all<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map `f` over `0..n`, returning results in index order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    if n < SEQUENTIAL_BELOW {
        return (0..n).map(f).collect();
    }
    map_all(n, f)
}

/// Apply `f` to each fixed-size chunk of `0..n` (given as a range) and
/// return the per-chunk results in order.
pub fn map_chunks<R, F>(n: usize, chunk: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(std::ops::Range<usize>) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    let run = |c: usize| {
        let start = c * chunk;
        f(start..(start + chunk).min(n))
    };
    if n_chunks <= 1 {
        return (0..n_chunks).map(run).collect();
    }
    map_all(n_chunks, run)
}

/// Deterministic sum of `f(i)` over `0..n`: fixed chunks, compensated
/// summation inside each chunk, chunk partials added in order.
pub fn sum_indexed<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let partials = map_chunks(n, ROW_CHUNK, |range| {
        let mut acc = NeumaierSum::default();
        for i in range {
            acc.add(f(i));
        }
        acc.value()
    });
    let mut total = NeumaierSum::default();
    for p in partials {
        total.add(p);
    }
    total.value()
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Number of worker threads available to the data-parallel helpers.
pub fn current_num_threads() -> usize {
    #[cfg(feature = "parallel")]
    {
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}

/// Run `f` on a pool with `threads` workers (ignored without the
/// `parallel` feature).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build thread pool ({e}); using the global pool");
                f()
            }
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        let parts = map_chunks(10, 3, |r| r.collect::<Vec<_>>());
        assert_eq!(parts.len(), 4);
        assert_eq!(parts.concat(), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sum_matches_across_pool_sizes() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e3;
        let a = with_threads(1, || sum_indexed(20_000, f));
        let b = with_threads(4, || sum_indexed(20_000, f));
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn neumaier_recovers_small_terms() {
        let mut s = NeumaierSum::default();
        s.add(1e16);
        s.add(1.0);
        s.add(-1e16);
        assert_eq!(s.value(), 1.0);
    }
}
