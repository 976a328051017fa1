//! Seed architecture: one master seed fans out into independent, named
//! random streams. A stream seed is `splitmix64(master ^ splitmix64(tag))`
//! where `tag = (stream id << 32) | index`, so changing one stream (say the
//! zap stream) never perturbs another (say data order).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Stream {
    ModelInit = 1,
    Zap = 2,
    DataOrder = 3,
    Split = 4,
    TaskOrder = 5,
    Synthetic = 6,
    AsbChoice = 7,
    TransferHead = 8,
    Replicate = 9,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(master: u64, stream: Stream, index: u32) -> u64 {
    let tag = ((stream as u64) << 32) | index as u64;
    splitmix64(master ^ splitmix64(tag))
}

pub fn rng(master: u64, stream: Stream, index: u32) -> Rng {
    Rng::seed_from_u64(derive(master, stream, index))
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
