//! Directory layout shared by the CLI and the service.
//!
//! ```text
//! <root>/subject.cpsm (+ .vocab.json)
//! <root>/decompositions/<content id>.json
//! <root>/images/<content hash>.png
//! <root>/registry/<run id>.json
//! ```

use std::path::{Path, PathBuf};

use concept_lab::conceptor::Decomposition;
use concept_lab::image::Image;
use concept_lab::persist::{write_atomic, RunRecord, RunRegistry};
use concept_lab::{Error, Result};

#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn subject_path(&self) -> PathBuf {
        self.root.join("subject.cpsm")
    }

    pub fn decompositions_dir(&self) -> PathBuf {
        self.root.join("decompositions")
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn registry(&self) -> Result<RunRegistry> {
        RunRegistry::open(self.root.join("registry"))
    }

    pub fn decomposition_path(&self, id: &str) -> PathBuf {
        self.decompositions_dir().join(format!("{id}.json"))
    }

    /// Saves under its content id; returns the id and path.
    pub fn save_decomposition(&self, dec: &Decomposition) -> Result<(String, PathBuf)> {
        let id = dec.content_id()?;
        std::fs::create_dir_all(self.decompositions_dir())?;
        let path = self.decomposition_path(&id);
        dec.save(&path)?;
        Ok((id, path))
    }

    /// Loads by content id; ids are hex digests, anything else is unknown.
    pub fn load_decomposition(&self, id: &str) -> Result<Option<Decomposition>> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit()) {
            return Ok(None);
        }
        let path = self.decomposition_path(id);
        if !path.exists() {
            return Ok(None);
        }
        Decomposition::load(path).map(Some)
    }

    /// Ids of stored decompositions, sorted.
    pub fn decomposition_ids(&self) -> Result<Vec<String>> {
        let dir = self.decompositions_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".json").map(str::to_string))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Content-addressed PNG; returns the hash.
    pub fn store_image(&self, image: &Image) -> Result<String> {
        let bytes = image.encode_png()?;
        let hash = concept_lab::persist::sha256_hex(&bytes);
        let dir = self.images_dir();
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{hash}.png"));
        if !path.exists() {
            write_atomic(&path, &bytes)?;
        }
        Ok(hash)
    }

    pub fn image_path(&self, hash: &str) -> Option<PathBuf> {
        if hash.len() != 64 || !hash.chars().all(|c| c.is_ascii_hexdigit()) {
            return None;
        }
        let p = self.images_dir().join(format!("{hash}.png"));
        p.exists().then_some(p)
    }

    pub fn record(&self, record: RunRecord) -> Result<RunRecord> {
        record.verify()?;
        self.registry()?.put(&record)
    }
}

/// Loads a subject, naming the path when it is missing.
pub fn load_subject(path: &Path) -> Result<concept_lab::subject::Subject> {
    if !path.exists() {
        return Err(Error::invalid("subject", format!("no checkpoint at {}", path.display())));
    }
    concept_lab::persist::load_subject(path)
}
