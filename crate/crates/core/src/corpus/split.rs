use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Result};

/// Patient-level partition into (train, val, test).
///
/// Validation and test sizes are `floor(n·ratio)`; every remaining patient
/// goes to train. The shuffle depends only on `seed`.
pub fn split_corpus(corpus: &Corpus, ratios: (f64, f64, f64), seed: u64) -> Result<(Corpus, Corpus, Corpus)> {
    let (tr, va, te) = ratios;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(CorpusError::InvalidSplit(format!("ratios must be positive, got {ratios:?}")));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(CorpusError::InvalidSplit(format!("ratios sum to {}", tr + va + te)));
    }
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::InvalidSplit(format!("need at least 3 patients, got {n}")));
    }
    // the epsilon absorbs representation error such as 100·0.09 = 8.999…
    let n_val = (n as f64 * va + 1e-9).floor() as usize;
    let n_test = (n as f64 * te + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize], suffix: &str| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        Corpus {
            name: format!("{}_{suffix}", corpus.name),
            seed: Some(seed),
            records: idx.iter().map(|&i| corpus.records[i].clone()).collect(),
        }
    };
    let val = take(&order[..n_val], "val");
    let test = take(&order[n_val..n_val + n_test], "test");
    let train = take(&order[n_val + n_test..], "train");
    Ok((train, val, test))
}
