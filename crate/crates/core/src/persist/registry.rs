//! Content-addressed run registry: one immutable JSON record per run, named
//! by the SHA-256 of its canonical config and input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::persist::{canonical_json, load_json, save_json, sha256_hex};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    SubjectTrain,
    Decompose,
    SingleImage,
    Manipulate,
    Study,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub kind: RunKind,
    pub config: Value,
    /// Input name to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output paths, relative to the registry's parent directory where possible.
    pub outputs: Vec<String>,
    pub created_unix_ms: u64,
}

impl RunRecord {
    pub fn new(kind: RunKind, config: &impl Serialize, inputs: BTreeMap<String, String>) -> Result<Self> {
        let config = serde_json::to_value(config)?;
        let run_id = Self::compute_id(kind, &config, &inputs)?;
        let created_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Ok(Self {
            run_id,
            kind,
            config,
            inputs,
            outputs: Vec::new(),
            created_unix_ms,
        })
    }

    pub fn compute_id(kind: RunKind, config: &Value, inputs: &BTreeMap<String, String>) -> Result<String> {
        let key = serde_json::json!({ "kind": kind, "config": config, "inputs": inputs });
        Ok(sha256_hex(&canonical_json(&key)?))
    }

    pub fn with_outputs(mut self, outputs: impl IntoIterator<Item = impl Into<String>>) -> Self {
        self.outputs = outputs.into_iter().map(Into::into).collect();
        self
    }

    /// Whether `run_id` matches the record's content.
    pub fn verify(&self) -> Result<()> {
        let id = Self::compute_id(self.kind, &self.config, &self.inputs)?;
        if id != self.run_id {
            return Err(Error::integrity("run record id", id, self.run_id.clone()));
        }
        Ok(())
    }
}

/// A directory of `<run_id>.json` files.
#[derive(Clone, Debug)]
pub struct RunRegistry {
    root: PathBuf,
}

impl RunRegistry {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path_of(&self, run_id: &str) -> Result<PathBuf> {
        if run_id.len() != 64 || !run_id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::invalid("run_id", "expected 64 hex characters"));
        }
        Ok(self.root.join(format!("{run_id}.json")))
    }

    /// Stores `record` unless a record with the same id exists, in which case
    /// the existing one is returned untouched.
    pub fn put(&self, record: &RunRecord) -> Result<RunRecord> {
        record.verify()?;
        let path = self.path_of(&record.run_id)?;
        if path.exists() {
            return self.get(&record.run_id);
        }
        save_json(&path, record)?;
        Ok(record.clone())
    }

    pub fn get(&self, run_id: &str) -> Result<RunRecord> {
        let rec: RunRecord = load_json(self.path_of(run_id)?)?;
        rec.verify()?;
        Ok(rec)
    }

    pub fn contains(&self, run_id: &str) -> bool {
        self.path_of(run_id).map(|p| p.exists()).unwrap_or(false)
    }

    /// All records, ordered by run id.
    pub fn list(&self) -> Result<Vec<RunRecord>> {
        let mut ids: Vec<String> = std::fs::read_dir(&self.root)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".json")).map(str::to_string))
            .filter(|id| self.path_of(id).is_ok())
            .collect();
        ids.sort();
        ids.iter().map(|id| self.get(id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> BTreeMap<String, String> {
        BTreeMap::from([("subject".to_string(), "ab".repeat(32))])
    }

    #[test]
    fn id_is_independent_of_key_order_and_time() {
        let a = RunRecord::new(RunKind::Decompose, &serde_json::json!({"n": 8, "lr": 1e-3}), inputs()).unwrap();
        let v: Value = serde_json::from_str(r#"{"lr":0.001,"n":8}"#).unwrap();
        let b = RunRecord::new(RunKind::Decompose, &v, inputs()).unwrap();
        assert_eq!(a.run_id, b.run_id);
        let c = RunRecord::new(RunKind::Study, &v, inputs()).unwrap();
        assert_ne!(a.run_id, c.run_id);
    }

    #[test]
    fn records_are_immutable_once_written() {
        let dir = tempfile::tempdir().unwrap();
        let reg = RunRegistry::open(dir.path()).unwrap();
        let rec = RunRecord::new(RunKind::Decompose, &serde_json::json!({"n": 8}), inputs())
            .unwrap()
            .with_outputs(["a.json"]);
        reg.put(&rec).unwrap();
        let again = reg.put(&rec.clone().with_outputs(["b.json"])).unwrap();
        assert_eq!(again.outputs, vec!["a.json"]);
        assert_eq!(reg.list().unwrap(), vec![rec.clone()]);
        let bytes = std::fs::read(dir.path().join(format!("{}.json", rec.run_id))).unwrap();
        let reparsed: RunRecord = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(reparsed.run_id, rec.run_id);
        reparsed.verify().unwrap();
    }

    #[test]
    fn tampered_record_is_refused() {
        let mut rec = RunRecord::new(RunKind::Decompose, &serde_json::json!({"n": 8}), inputs()).unwrap();
        rec.config = serde_json::json!({"n": 9});
        assert!(rec.verify().is_err());
        assert!(RunRegistry::open(tempfile::tempdir().unwrap().path()).unwrap().get("xyz").is_err());
    }
}
