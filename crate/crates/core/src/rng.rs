//! SplitMix64, the generator behind seeded mask schedules.
//!
//! Kept in-tree so schedules are reproducible from the documented algorithm
//! alone: `state += 0x9E3779B97F4A7C15`, then the output is `state` mixed by
//! `z ^= z >> 30; z *= 0xBF58476D1CE4E5B9; z ^= z >> 27;
//! z *= 0x94D049BB133111EB; z ^= z >> 31` (wrapping arithmetic).

#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Value in `[0, bound)` by multiply-shift: `(next_u64 · bound) >> 64`.
    pub fn below(&mut self, bound: u64) -> u64 {
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }
}

/// Derives the seed of item `index` in stream `stream` from a master seed.
///
/// `SplitMix64::new(master ^ stream.wrapping_mul(0xD1B54A32D192ED03))` is
/// advanced `index + 1` times; the last output is the derived seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut g = SplitMix64::new(master ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    let mut out = 0;
    for _ in 0..=index {
        out = g.next_u64();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_outputs() {
        // First outputs for seed 0 of the published SplitMix64 reference.
        let mut g = SplitMix64::new(0);
        assert_eq!(g.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(g.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(g.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn below_stays_in_range() {
        let mut g = SplitMix64::new(42);
        assert!((0..1000).all(|_| g.below(7) < 7));
        assert_eq!(g.below(1), 0);
    }
}
