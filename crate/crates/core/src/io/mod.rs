//! On-disk formats: the `VXC1` array container, cohort directories,
//! binary PGM/PPM images and config hashing.

mod container;
mod pnm;

pub use container::{decode_array, encode_array, read_array, write_array, DTYPE_F32, MAGIC};
pub use pnm::{decode_pnm, encode_pnm, read_pnm, read_pnm_dir, write_pnm, PnmImage};

use serde::Serialize;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Canonical JSON text: object keys sorted, no insignificant whitespace.
pub fn canonical_json<S: Serialize>(value: &S) -> crate::Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so they come out sorted
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// FNV-1a of the canonical JSON form.
pub fn config_hash<S: Serialize>(value: &S) -> crate::Result<u64> {
    Ok(fnv1a64(canonical_json(value)?.as_bytes()))
}
