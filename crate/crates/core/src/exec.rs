//! Batch-level data parallelism.
//!
//! Work is split into fixed-size chunks whose boundaries do not depend on the
//! thread count, and per-chunk results are returned in chunk order. Callers
//! reduce them sequentially, so parallel and sequential runs produce the same
//! floating-point results bit for bit.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// Whether this build can actually run work in parallel.
    pub fn parallel_available() -> bool {
        cfg!(feature = "parallel")
    }

    /// Apply `f` to consecutive chunks of `items`, returning results in order.
    pub fn map_chunks<T, R, F>(self, items: &[T], chunk: usize, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(usize, &[T]) -> R + Sync + Send,
    {
        let chunk = chunk.max(1);
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                items
                    .par_chunks(chunk)
                    .enumerate()
                    .map(|(i, c)| f(i, c))
                    .collect()
            }
            _ => items
                .chunks(chunk)
                .enumerate()
                .map(|(i, c)| f(i, c))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_results_keep_order() {
        let xs: Vec<u32> = (0..103).collect();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let sums = exec.map_chunks(&xs, 10, |i, c| (i, c.iter().sum::<u32>()));
            assert_eq!(sums.len(), 11);
            assert_eq!(sums[0], (0, 45));
            assert_eq!(sums[10], (10, 100 + 101 + 102));
        }
    }
}
