//! Counter-based seed splitting.
//!
//! Every random stream in the crate is a ChaCha8 generator keyed by the run
//! seed and addressed by a stream index, so resample `i` of a bootstrap (or
//! iteration `i` of prompt sampling) draws the same numbers no matter which
//! thread evaluates it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw on the closed interval `[lo, hi]`; returns `lo` when the
/// range is collapsed.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    use rand::Rng as _;
    if hi <= lo {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn uniform_int(rng: &mut Rng, lo: i64, hi: i64) -> i64 {
    use rand::Rng as _;
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}
