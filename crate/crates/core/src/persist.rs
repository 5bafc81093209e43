//! Versioned JSON documents.
//!
//! Every artifact on disk is wrapped as `{"format": .., "version": .., "body": ..}`;
//! readers refuse unknown formats or versions before touching the body.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{BatsError, Result};

#[derive(Serialize)]
struct EnvelopeRef<'a, T> {
    format: &'a str,
    version: u32,
    body: &'a T,
}

pub fn to_versioned_string<T: Serialize>(format: &str, version: u32, body: &T) -> Result<String> {
    Ok(serde_json::to_string(&EnvelopeRef {
        format,
        version,
        body,
    })?)
}

pub fn from_versioned_str<T: DeserializeOwned>(format: &str, version: u32, text: &str) -> Result<T> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    let found_format = value.get("format").and_then(|v| v.as_str()).unwrap_or("<missing>");
    let found_version = value.get("version").and_then(|v| v.as_u64());
    if found_format != format || found_version != Some(version as u64) {
        return Err(BatsError::Version {
            expected: format.to_string(),
            supported: version,
            found: format!(
                "{found_format} v{}",
                found_version.map_or("?".to_string(), |v| v.to_string())
            ),
        });
    }
    let body = value
        .get_mut("body")
        .map(serde_json::Value::take)
        .ok_or_else(|| BatsError::Input(format!("{format} document has no body")))?;
    Ok(serde_json::from_value(body)?)
}

pub fn save_versioned<T: Serialize>(path: &Path, format: &str, version: u32, body: &T) -> Result<()> {
    fs::write(path, to_versioned_string(format, version, body)?)?;
    Ok(())
}

pub fn load_versioned<T: DeserializeOwned>(path: &Path, format: &str, version: u32) -> Result<T> {
    let text = fs::read_to_string(path)?;
    from_versioned_str(format, version, &text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_version_and_format() {
        let text = to_versioned_string("thing", 2, &vec![1.0, 2.5]).unwrap();
        let back: Vec<f64> = from_versioned_str("thing", 2, &text).unwrap();
        assert_eq!(back, vec![1.0, 2.5]);
        assert!(matches!(
            from_versioned_str::<Vec<f64>>("thing", 3, &text),
            Err(BatsError::Version { .. })
        ));
        assert!(matches!(
            from_versioned_str::<Vec<f64>>("other", 2, &text),
            Err(BatsError::Version { .. })
        ));
        assert!(from_versioned_str::<Vec<f64>>("thing", 2, "{not json").is_err());
    }
}
