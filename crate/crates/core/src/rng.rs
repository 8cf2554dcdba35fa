//! Named seed streams.
//!
//! Every random draw in the simulator comes from a ChaCha8 generator keyed by
//! a SHA-256 digest of `(seed, stream name)`. Streams are platform independent
//! and never touch ambient entropy.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Stream names used by the simulator, recorded in run manifests.
pub const STREAM_DATA: &str = "data";
pub const STREAM_PARTITION: &str = "partition";
pub const STREAM_INIT: &str = "init";
pub const STREAM_SELECTION: &str = "selection";
pub const STREAM_SKETCH: &str = "sketch";

pub const ALL_STREAMS: [&str; 5] = [
    STREAM_DATA,
    STREAM_PARTITION,
    STREAM_INIT,
    STREAM_SELECTION,
    STREAM_SKETCH,
];

fn digest(seed: u64, name: &str, extra: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(extra);
    h.finalize().into()
}

/// Generator for the named stream under `seed`.
pub fn stream(seed: u64, name: &str) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, name, &[]))
}

/// Generator for a per-round substream, e.g. the selection draw at round `t`.
pub fn round_stream(seed: u64, name: &str, round: usize) -> StreamRng {
    ChaCha8Rng::from_seed(digest(seed, name, &(round as u64).to_le_bytes()))
}

/// Generator keyed by an arbitrary label, used for projection matrices.
pub fn labeled_stream(seed: u64, name: &str, round: usize, label: &str) -> StreamRng {
    let mut extra = (round as u64).to_le_bytes().to_vec();
    extra.extend_from_slice(&(label.len() as u64).to_le_bytes());
    extra.extend_from_slice(label.as_bytes());
    ChaCha8Rng::from_seed(digest(seed, name, &extra))
}
