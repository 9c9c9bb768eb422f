//! Flat JSON config files overlaid on a type's defaults.

use std::path::Path;

use concept_lab::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Overlays the keys of `overlay` on `base`; unknown keys are a validation
/// error naming the key.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, overlay: &Value) -> Result<T> {
    let mut merged = serde_json::to_value(base)?;
    let (Value::Object(m), Value::Object(o)) = (&mut merged, overlay) else {
        return Err(Error::invalid("config", "expected a JSON object"));
    };
    for (k, v) in o {
        if !m.contains_key(k) {
            return Err(Error::invalid(k.as_str(), "unknown config key"));
        }
        m.insert(k.clone(), v.clone());
    }
    serde_json::from_value(merged).map_err(|e| Error::invalid("config", e.to_string()))
}

/// `T::default()` with the file's keys applied, if a file is given.
pub fn load<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let base = T::default();
    match path {
        None => Ok(base),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::invalid("config", e.to_string()))?;
            overlay(&base, &v)
        }
    }
}
