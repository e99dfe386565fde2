//! Counter-based random-number streams.
//!
//! Every consumer of randomness derives its own generator from a
//! `(master seed, path index, event type, purpose)` tuple, so disabling one
//! event type or reordering parallel work never perturbs another stream.
//! Re-running with the same master seed reproduces the shared randomness,
//! which is what makes coupled channel-off counterfactuals meaningful.

use rand::Rng;
use rand_pcg::Pcg64Mcg;

/// Stream purposes, kept distinct so one logical consumer never reads
/// another's draws.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Purpose {
    FirmArrivals = 1,
    CandidateGaps = 2,
    AcceptTests = 3,
    ThinningReplicate = 4,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic 64-bit seed for one stream.
pub(crate) fn stream_seed(master: u64, path_index: u64, type_idx: u64, purpose: Purpose) -> u64 {
    let mut state = master;
    let mut out = splitmix64(&mut state);
    for word in [path_index, type_idx, purpose as u64] {
        state ^= word.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        out ^= splitmix64(&mut state);
    }
    out
}

/// Generator for one `(path, type, purpose)` stream.
pub(crate) fn stream_rng(
    master: u64,
    path_index: u64,
    type_idx: u64,
    purpose: Purpose,
) -> Pcg64Mcg {
    Pcg64Mcg::new(stream_seed(master, path_index, type_idx, purpose) as u128 | 1)
}

/// Exponential waiting time with the given rate, strictly positive.
pub(crate) fn exp_gap(rng: &mut Pcg64Mcg, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    // 1 - U lies in (0, 1], keeping the logarithm finite.
    -(1.0 - rng.gen::<f64>()).ln() / rate
}
