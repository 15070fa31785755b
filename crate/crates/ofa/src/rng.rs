//! Deterministic RNG streams derived from (seed, purpose, indices).
//!
//! Every stochastic site in the codebase draws from its own stream, so
//! parallel and serial execution produce identical bytes and adding a new
//! consumer never shifts an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// ChaCha20 stream keyed by the global seed, a purpose tag, and any number
/// of stream indices (sample index, epoch, ...).
pub fn stream(seed: u64, purpose: &str, indices: &[u64]) -> ChaCha20Rng {
    let mut lanes = [seed, fnv1a(purpose), 0x243f_6a88_85a3_08d3, 0x1319_8a2e_0370_7344];
    for (i, &idx) in indices.iter().enumerate() {
        let lane = 2 + (i % 2);
        lanes[lane] = splitmix(lanes[lane] ^ splitmix(idx ^ (i as u64).wrapping_mul(0xff51_afd7_ed55_8ccd)));
    }
    // Avalanche across lanes so nearby (seed, index) pairs decorrelate.
    for round in 0..2 {
        for i in 0..4 {
            let prev = lanes[(i + 3) % 4];
            lanes[i] = splitmix(lanes[i] ^ prev.rotate_left(17 + round));
        }
    }
    let mut key = [0u8; 32];
    for (i, lane) in lanes.iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&lane.to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_deterministic() {
        let mut a = stream(1, "x", &[2, 3]);
        let mut b = stream(1, "x", &[2, 3]);
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn streams_differ_by_any_component() {
        let base: Vec<u64> = {
            let mut r = stream(1, "x", &[2, 3]);
            (0..4).map(|_| r.next_u64()).collect()
        };
        for mut other in [
            stream(2, "x", &[2, 3]),
            stream(1, "y", &[2, 3]),
            stream(1, "x", &[3, 3]),
            stream(1, "x", &[2, 4]),
            stream(1, "x", &[2]),
            stream(1, "x", &[3, 2]),
        ] {
            let vals: Vec<u64> = (0..4).map(|_| other.next_u64()).collect();
            assert_ne!(base, vals);
        }
    }
}
