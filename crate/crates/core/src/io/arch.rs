use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::blocks::ArchitectureSpec;
use crate::error::{Error, Result};

/// Parses JSON, reporting the failing field path and position.
pub fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        Error::Json {
            path: origin.display().to_string(),
            message: format!("at `{path}` (line {}, column {}): {inner}", inner.line(), inner.column()),
        }
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text, path)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_arch(path: &Path) -> Result<ArchitectureSpec> {
    let arch: ArchitectureSpec = read_json(path)?;
    arch.validate()?;
    Ok(arch)
}

pub fn save_arch(arch: &ArchitectureSpec, path: &Path) -> Result<()> {
    write_json(arch, path)
}
