//! Byte-stable serialization: atomic file writes, canonical JSON, the binary
//! subject checkpoint and the content-addressed run registry.

mod checkpoint;
mod registry;

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{
    load_subject, read_checkpoint, save_subject, vocab_sidecar, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use registry::{RunKind, RunRecord, RunRegistry};

/// Writes `bytes` to a sibling temp file, syncs it, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("path", format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Canonical JSON: object keys sorted, no insignificant whitespace, floats
/// in shortest round-trip form.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    // `serde_json::Value` keeps object keys in a BTreeMap, so converting
    // first sorts every nested object.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_vec(&v)?)
}

pub fn canonical_json_string<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(String::from_utf8(canonical_json(value)?).expect("serde_json emits UTF-8"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    write_atomic(path.as_ref(), &canonical_json(value)?)
}

pub fn load_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let bytes = fs::read(path.as_ref())?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Refuses a load when an artifact's recorded upstream hash differs from the
/// object it is being paired with.
pub fn check_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::integrity(what, expected, found));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn canonical_json_sorts_keys_and_is_compact() {
        let mut m = HashMap::new();
        m.insert("zeta", vec![1.5, 0.1]);
        m.insert("alpha", vec![]);
        let s = canonical_json_string(&m).unwrap();
        assert_eq!(s, r#"{"alpha":[],"zeta":[1.5,0.1]}"#);
    }

    #[test]
    fn floats_round_trip_exactly() {
        let xs = vec![0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.5e-310, 123456789.12345679];
        let bytes = canonical_json(&xs).unwrap();
        let back: Vec<f64> = serde_json::from_slice(&bytes).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/a.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let entries: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(entries.len(), 1);
    }

    #[test]
    fn hash_check_names_both_values() {
        let e = check_hash("vocab_hash", "aa", "bb").unwrap_err().to_string();
        assert!(e.contains("aa") && e.contains("bb"), "{e}");
    }
}
