//! Derivation of component seeds from one master seed.
//!
//! `derive_seed(master, tag, index)` hashes the tag with 64-bit FNV-1a,
//! combines it with the master seed and index, and finishes with the
//! SplitMix64 mixer. Tags used by the crate:
//!
//! | tag        | index         | consumer                       |
//! |------------|---------------|--------------------------------|
//! | `synth`    | image index   | per-image generation           |
//! | `split`    | 0             | train/val/test shuffle         |
//! | `init`     | 0             | parameter initialization       |
//! | `shuffle`  | epoch         | batch order                    |
//! | `augment`  | epoch         | augmentation draws             |

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, tag: &str, index: u64) -> u64 {
    splitmix(splitmix(master ^ fnv1a(tag.as_bytes())).wrapping_add(index))
}

pub fn rng_for(master: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
