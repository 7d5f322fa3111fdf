//! Seed derivation for reproducible, order-independent sampling.

/// Streams keep seeds of different purposes apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Train = 2,
    Validation = 3,
    Test = 4,
    Export = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of `epoch` in `stream` of a run.
pub fn derive(run_seed: u64, stream: Stream, epoch: u64, index: u64) -> u64 {
    let mut h = splitmix64(run_seed);
    for part in [stream as u64, epoch, index] {
        h = splitmix64(h ^ part);
    }
    h
}
