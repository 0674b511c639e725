//! JSON report output.
//!
//! Reports are serialized with pretty printing and a trailing newline.
//! Struct field order fixes the key order, so equal inputs produce
//! byte-identical files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::FormatError;

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String, FormatError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), FormatError> {
    Ok(std::fs::write(path, to_json_string(value)?)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, FormatError> {
    let bytes = std::fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| FormatError::InvalidUtf8)?;
    Ok(serde_json::from_str(text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Demo {
        name: String,
        score: f64,
        classes: Vec<usize>,
    }

    #[test]
    fn round_trip_and_determinism() {
        let value = Demo { name: "run".into(), score: 0.625, classes: vec![3, 1, 4] };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_json(&path, &value).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(read_json::<Demo>(&path).unwrap(), value);
        assert_eq!(to_json_string(&value).unwrap(), text);
    }

    #[test]
    fn malformed_json_is_a_typed_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        std::fs::write(&path, b"{\"name\": ").unwrap();
        assert!(matches!(read_json::<Demo>(&path), Err(FormatError::Json(_))));
        std::fs::write(&path, [0xff, 0xfe]).unwrap();
        assert!(matches!(read_json::<Demo>(&path), Err(FormatError::InvalidUtf8)));
    }
}
