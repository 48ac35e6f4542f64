use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfab_core::Dataset;

use crate::error::{Error, Result};

/// Shuffles sample indices by `seed` and deals them into `workers` contiguous
/// blocks whose sizes differ by at most one (larger blocks first).
pub fn partition_indices(n: usize, workers: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::Config("at least one worker is required".into()));
    }
    if n < workers {
        return Err(Error::Config(format!("{n} samples cannot feed {workers} workers")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / workers, n % workers);
    let mut blocks = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let len = base + usize::from(w < extra);
        blocks.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(blocks)
}

/// One dataset slice per worker, each with the global indices of its rows.
pub fn partition_dataset(data: &Dataset, workers: usize, seed: u64) -> Result<Vec<(Dataset, Vec<usize>)>> {
    Ok(partition_indices(data.len(), workers, seed)?
        .into_iter()
        .map(|ids| (data.select(&ids), ids))
        .collect())
}
