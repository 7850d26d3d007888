//! 64-bit FNV-1a, the stable hash behind split membership and digests.

const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const PRIME: u64 = 0x0000_0100_0000_01b3;

/// Incremental FNV-1a hasher.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(OFFSET_BASIS)
    }
}

impl Fnv1a {
    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(PRIME);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    Fnv1a::default().update(bytes).finish()
}

/// Seed for an independent random stream keyed by `(base, label, index)`.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    Fnv1a::default()
        .update(&base.to_le_bytes())
        .update(label.as_bytes())
        .update(&index.to_le_bytes())
        .finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_input_is_offset_basis() {
        assert_eq!(fnv1a(b""), OFFSET_BASIS);
    }

    #[test]
    fn incremental_matches_one_shot() {
        let mut h = Fnv1a::default();
        h.update(b"scene-").update(b"0042");
        assert_eq!(h.finish(), fnv1a(b"scene-0042"));
    }
}
