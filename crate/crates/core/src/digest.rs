//! SHA-256 content digests, hex-lowercase.

use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of the canonical JSON form of `value`.
pub fn digest_json<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = crate::domain::canonical_json_bytes(value)
        .expect("serializable value must convert to JSON");
    sha256_hex(&bytes)
}

/// Returns true when `s` looks like a 64-character lowercase hex digest.
pub fn is_digest(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert!(is_digest(&sha256_hex(b"")));
        assert!(!is_digest("ABC"));
    }
}
