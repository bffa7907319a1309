//! Seed derivation. Every random stream in the simulator is keyed by the
//! run seed plus a tuple of stage/round/client identifiers.

/// Domain tags keep streams for different purposes apart.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SAMPLING: u64 = 2;
    pub const LOCAL: u64 = 3;
    pub const CHANNELS: u64 = 4;
    pub const ANCHOR: u64 = 5;
    pub const RANDOM_GROUPS: u64 = 6;
    pub const ATTACK: u64 = 7;
    pub const PARTITION: u64 = 8;
    pub const DATA: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `base` with each part in order.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_order_sensitive_and_stable() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
    }
}
