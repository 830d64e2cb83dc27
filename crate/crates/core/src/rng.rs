//! Seed derivation for independent, reproducible random streams.

/// splitmix64 mix of a base seed and a stream tag; gives every consumer
/// (init, batch shuffling, triplet mining, splits, ...) its own stream
/// while staying a pure function of the run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e3779b97f4a7c15)
        .wrapping_add(stream)
        .wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
