// SPDX-License-Identifier: Apache-2.0

//! Batch execution over fixed-size chunks of work.
//!
//! Work is always cut into the same chunks and every chunk derives its own
//! seed from the batch seed and its index, so a batch produces identical
//! results on either executor. Without the `parallel` feature the parallel
//! executor runs on the calling thread.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Executor {
    Sequential,
    #[default]
    Parallel,
}

impl Executor {
    /// Applies `f(chunk_index, items)` to consecutive ranges of at most
    /// `chunk` items covering `0..total`, returning results in chunk order.
    pub fn map_chunks<T, F>(&self, total: u64, chunk: u64, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(u64, Range<u64>) -> T + Sync + Send,
    {
        assert!(chunk > 0, "chunk size must be positive");
        let n = total.div_ceil(chunk);
        let range = move |i: u64| i * chunk..((i + 1) * chunk).min(total);
        match self {
            Executor::Sequential => (0..n).map(|i| f(i, range(i))).collect(),
            Executor::Parallel => parallel_map(n, |i| f(i, range(i))),
        }
    }
}

#[cfg(feature = "parallel")]
fn parallel_map<T: Send, F: Fn(u64) -> T + Sync + Send>(n: u64, f: F) -> Vec<T> {
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn parallel_map<T: Send, F: Fn(u64) -> T + Sync + Send>(n: u64, f: F) -> Vec<T> {
    (0..n).map(f).collect()
}

/// SplitMix64 finalizer over `seed` and `index`; distinct indices give
/// well-separated chunk seeds.
pub fn chunk_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_cover_range_in_order() {
        for exec in [Executor::Sequential, Executor::Parallel] {
            let parts = exec.map_chunks(10, 4, |i, r| (i, r));
            assert_eq!(parts, vec![(0, 0..4), (1, 4..8), (2, 8..10)]);
        }
        assert!(Executor::Sequential.map_chunks(0, 4, |_, r| r).is_empty());
    }

    #[test]
    fn executors_agree() {
        let f = |i: u64, r: Range<u64>| r.map(|x| chunk_seed(7, x) ^ i).fold(0u64, u64::wrapping_add);
        assert_eq!(Executor::Sequential.map_chunks(1000, 33, f), Executor::Parallel.map_chunks(1000, 33, f));
    }

    #[test]
    fn seeds_differ() {
        let seeds: std::collections::HashSet<u64> = (0..10_000).map(|i| chunk_seed(1, i)).collect();
        assert_eq!(seeds.len(), 10_000);
    }
}
