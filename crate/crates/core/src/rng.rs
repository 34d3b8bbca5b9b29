//! Seeded, splittable random streams.
//!
//! Every Monte-Carlo loop splits its work over a fixed number of streams and
//! reduces the per-stream results in stream order, so values depend on the
//! seed and the stream count but never on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub type Stream = ChaCha8Rng;

/// Stream count used by the Monte-Carlo helpers.
pub const DEFAULT_STREAMS: usize = 16;

/// Stream `index` of the family rooted at `seed`.
pub fn stream(seed: u64, index: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Splits `n` samples over `streams` streams seeded from one draw of `rng`
/// and returns `f(stream, count)` for each stream, in stream order.
pub fn par_streams<R, T, F>(rng: &mut R, n: usize, streams: usize, f: F) -> Vec<T>
where
    R: Rng + ?Sized,
    T: Send,
    F: Fn(&mut Stream, usize) -> T + Sync,
{
    let seed: u64 = rng.random();
    let streams = streams.max(1);
    (0..streams)
        .into_par_iter()
        .map(|i| {
            let count = n / streams + usize::from(i < n % streams);
            let mut s = stream(seed, i as u64);
            f(&mut s, count)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = stream(7, 0).random();
        let b: u64 = stream(7, 1).random();
        let c: u64 = stream(7, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn counts_cover_all_samples() {
        let mut rng = stream(1, 0);
        let counts = par_streams(&mut rng, 103, 16, |_, k| k);
        assert_eq!(counts.iter().sum::<usize>(), 103);
        assert_eq!(counts.len(), 16);
    }

    #[test]
    fn independent_of_pool_size() {
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                let mut rng = stream(42, 0);
                par_streams(&mut rng, 1000, 8, |s, k| {
                    (0..k).map(|_| s.random::<u32>() as u64).sum::<u64>()
                })
            })
        };
        assert_eq!(run(1), run(3));
    }
}
