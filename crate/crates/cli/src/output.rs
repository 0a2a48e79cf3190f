//! Layered settings (flag over config file over default) and the files every
//! run leaves in its output directory.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const PROVENANCE: &str = "provenance.json";

/// Parses a TOML or JSON settings file; the format follows the extension,
/// anything other than `.json` is read as TOML.
pub fn read_config_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        serde_json::to_value(table)?
    };
    if !value.is_object() {
        bail!("config {} must be a table of settings", path.display());
    }
    Ok(value)
}

/// Starts from `T::default()` and overlays the file's keys, recursing into
/// nested tables. Keys that the defaults do not have are rejected.
pub fn layered<T: Serialize + DeserializeOwned + Default>(file: Option<&Value>) -> Result<T> {
    let mut base = serde_json::to_value(T::default())?;
    if let Some(file) = file {
        overlay(&mut base, file, "")?;
    }
    Ok(serde_json::from_value(base)?)
}

fn overlay(base: &mut Value, file: &Value, prefix: &str) -> Result<()> {
    let (Some(dst), Some(src)) = (base.as_object_mut(), file.as_object()) else {
        *base = file.clone();
        return Ok(());
    };
    for (key, value) in src {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match dst.get_mut(key) {
            Some(slot) if slot.is_object() && value.is_object() => overlay(slot, value, &path)?,
            Some(slot) => *slot = value.clone(),
            None => bail!("unknown config key `{path}`"),
        }
    }
    Ok(())
}

/// Writes `resolved_config.json` and `provenance.json` into `dir`.
pub fn write_run_files<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let resolved = serde_json::to_string_pretty(config)?;
    let digest: String = Sha256::digest(resolved.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    std::fs::write(dir.join(RESOLVED_CONFIG), &resolved).with_context(|| format!("writing {RESOLVED_CONFIG}"))?;
    let mut prov = Map::new();
    prov.insert("command".into(), command.into());
    prov.insert("args".into(), std::env::args().collect::<Vec<_>>().into());
    prov.insert("seed".into(), seed.into());
    prov.insert("config_digest".into(), digest.into());
    prov.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    prov.insert("timestamp_unix".into(), now.into());
    std::fs::write(dir.join(PROVENANCE), serde_json::to_string_pretty(&Value::Object(prov))?)
        .with_context(|| format!("writing {PROVENANCE}"))?;
    Ok(())
}

/// Directory that holds a file output; the working directory for bare names.
pub fn parent_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Serialize, Deserialize, Default, PartialEq)]
    struct Inner {
        a: u32,
        b: u32,
    }

    #[derive(Debug, Serialize, Deserialize, Default, PartialEq)]
    struct Outer {
        x: f64,
        inner: Inner,
    }

    #[test]
    fn overlay_keeps_unset_nested_defaults() {
        let file = serde_json::json!({"inner": {"b": 7}});
        let got: Outer = layered(Some(&file)).unwrap();
        assert_eq!(
            got,
            Outer {
                x: 0.0,
                inner: Inner { a: 0, b: 7 }
            }
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let file = serde_json::json!({"inner": {"c": 1}});
        let err = layered::<Outer>(Some(&file)).unwrap_err().to_string();
        assert!(err.contains("inner.c"), "{err}");
    }

    #[test]
    fn toml_and_json_files_agree() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("c.toml");
        let j = dir.path().join("c.json");
        std::fs::write(&t, "x = 1.5\n[inner]\na = 2\n").unwrap();
        std::fs::write(&j, r#"{"x": 1.5, "inner": {"a": 2}}"#).unwrap();
        assert_eq!(read_config_file(&t).unwrap(), read_config_file(&j).unwrap());
    }
}
