//! Canonical JSON: object keys sorted, compact separators, shortest
//! round-trip float formatting, one trailing newline.

use serde::Serialize;

use crate::error::Result;

/// Canonical single-line rendering without the trailing newline.
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    // serde_json's `Value` keeps object keys in a BTreeMap, so going through it sorts them.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Canonical document bytes (with trailing newline).
pub fn to_canonical_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut s = to_canonical_string(value)?;
    s.push('\n');
    Ok(s.into_bytes())
}
