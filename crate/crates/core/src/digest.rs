//! Content digests and seed derivation shared by the caches and the bootstrap.

use sha2::{Digest, Sha256};

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Digest over a sequence of fields, each length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` never collide.
pub fn sha256_fields<I, B>(fields: I) -> String
where
    I: IntoIterator<Item = B>,
    B: AsRef<[u8]>,
{
    let mut hasher = Sha256::new();
    for field in fields {
        let field = field.as_ref();
        hasher.update((field.len() as u64).to_le_bytes());
        hasher.update(field);
    }
    hex::encode(hasher.finalize())
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the seed of stream `index` from a base seed. Serial and parallel
/// consumers that agree on `(seed, index)` see the same stream.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index.wrapping_add(0xD1B5_4A32_D192_ED03)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_digest_is_length_prefixed() {
        assert_ne!(sha256_fields(["ab", "c"]), sha256_fields(["a", "bc"]));
    }

    #[test]
    fn known_sha256() {
        assert_eq!(
            sha256_hex(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn mixed_seeds_differ_per_index() {
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|b| mix_seed(7, b)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
    }
}
