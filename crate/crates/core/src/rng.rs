//! Named, indexable RNG substreams derived from one root seed.
//!
//! Every random decision in the crate draws from `substream(root, name, idx)`,
//! so results depend only on the root seed and the position of the decision,
//! never on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(root);
    for b in name.bytes() {
        h = splitmix(h ^ u64::from(b));
    }
    for &i in indices {
        h = splitmix(h ^ splitmix(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn substream(root: u64, name: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, indices))
}
