//! Content digests and canonical JSON.
//!
//! Everything persisted for provenance (inventories, manifests, spec bodies)
//! is hashed as SHA-256 over a canonical byte form: UTF-8, object keys
//! sorted, no insignificant whitespace, trailing newline.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of raw bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Canonical JSON text for any serializable value.
///
/// Round-trips through `serde_json::Value`, whose object map is ordered, so
/// key order in the source struct is irrelevant.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v: Value = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// Canonical bytes: canonical JSON plus the trailing newline.
pub fn canonical_bytes<T: Serialize>(value: &T) -> serde_json::Result<Vec<u8>> {
    let mut s = canonical_json(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}

/// Digest of the canonical byte form.
pub fn canonical_hash<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(&canonical_bytes(value)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn key_order_does_not_change_hash() {
        let a = json!({"b": 1, "a": {"y": 2, "x": [3, 4]}});
        let b = json!({"a": {"x": [3, 4], "y": 2}, "b": 1});
        assert_eq!(canonical_hash(&a).unwrap(), canonical_hash(&b).unwrap());
    }

    #[test]
    fn canonical_text_is_compact_and_sorted() {
        let v = json!({"z": 1, "a": 2});
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":2,"z":1}"#);
    }

    #[test]
    fn one_byte_difference_changes_hash() {
        assert_ne!(sha256_hex(b"abc"), sha256_hex(b"abd"));
    }
}
