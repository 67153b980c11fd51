//! 64-bit FNV-1a fingerprints used to bind traces to calibration runs.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// FNV-1a over a byte slice.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over the little-endian encoding of a sequence of 64-bit reals.
///
/// Matches hashing the payload bytes of a serialized 64-bit tensor, so
/// in-memory fingerprints agree with on-disk manifest entries.
pub fn fingerprint_f64(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vectors() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn f64_matches_byte_encoding() {
        let values = [1.5f64, -2.25, 0.0, 1e-8];
        let mut bytes = Vec::new();
        for v in &values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(fingerprint_f64(&values), fnv1a64(&bytes));
    }

    #[test]
    fn sensitive_to_single_byte() {
        let a = fnv1a64(&[1, 2, 3, 4]);
        let b = fnv1a64(&[1, 2, 3, 5]);
        assert_ne!(a, b);
    }
}
