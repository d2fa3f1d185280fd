//! Versioned JSON container shared by every on-disk format.
//!
//! Each file is a single JSON object whose first two fields are `format`
//! (a fixed string naming the payload) and `version`. Unknown fields are
//! accepted and reported as warnings so newer writers stay readable.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u64,
}

/// Parses `text` as a `format` container at `version`, returning the payload
/// and the dotted paths of any ignored fields.
pub fn from_str<T: DeserializeOwned>(text: &str, format: &str, version: u64) -> Result<(T, Vec<String>)> {
    let header: Header = serde_json::from_str(text)?;
    if header.format != format {
        return Err(Error::Parse {
            line: 1,
            column: 1,
            message: format!("expected format `{format}`, found `{}`", header.format),
        });
    }
    if header.version != version {
        return Err(Error::Version {
            format: format.to_string(),
            found: header.version,
            expected: version,
        });
    }
    let mut ignored = Vec::new();
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_ignored::deserialize(&mut de, |path| ignored.push(path.to_string()))?;
    de.end()?;
    for path in &ignored {
        log::warn!("{format}: ignoring unknown field `{path}`");
    }
    Ok((value, ignored))
}

pub fn read<T: DeserializeOwned>(path: &Path, format: &str, version: u64) -> Result<(T, Vec<String>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text, format, version)
}

pub fn to_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_string(value)?).map_err(|e| Error::io(path, e))
}

/// Error for a structurally valid file whose contents break an invariant.
pub(crate) fn schema_error(field: impl std::fmt::Display, message: impl std::fmt::Display) -> Error {
    Error::Parse {
        line: 0,
        column: 0,
        message: format!("field `{field}`: {message}"),
    }
}

pub(crate) fn flatten(points: &[crate::geometry::Vec3]) -> Vec<f64> {
    points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub(crate) fn unflatten(field: &str, flat: &[f64], n: usize) -> Result<Vec<crate::geometry::Vec3>> {
    if flat.len() != 3 * n {
        return Err(schema_error(field, format!("expected {} values, found {}", 3 * n, flat.len())));
    }
    Ok(flat
        .chunks_exact(3)
        .map(|c| crate::geometry::Vec3::new(c[0], c[1], c[2]))
        .collect())
}
