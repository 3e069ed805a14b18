//! Seed plumbing.
//!
//! One root seed fans out into named child seeds (`derive_seed`), and each
//! child seed into independent per-row streams (`stream_rng`). Row `i` of any
//! sampler always draws from stream `i`, so results do not depend on batch
//! layout or on whether rows are produced in parallel.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SeedRng = ChaCha8Rng;

/// Child seed for `role` under `root`. Stable across platforms and releases.
pub fn derive_seed(root: u64, role: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(role.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn seeded(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator keyed by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeedRng {
    let mut rng = SeedRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
