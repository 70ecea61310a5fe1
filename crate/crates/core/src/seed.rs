//! Named random streams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const SCENARIO: &str = "scenario";
pub const MASKS: &str = "masks";
pub const MEMBER: &str = "member";
pub const EPSILON: &str = "epsilon";
pub const INIT: &str = "init";
pub const PRIOR: &str = "prior";
pub const MINIBATCH: &str = "minibatch";
pub const SUITE: &str = "suite";

/// First eight bytes of `sha256(master || stream || index)`.
pub fn derive(master: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng(master: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, stream, index))
}
