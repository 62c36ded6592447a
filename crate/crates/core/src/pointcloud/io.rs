//! `xyz_text` and `xyz_bin` point cloud files.
//!
//! Text: one point per line as three decimal reals separated by single
//! spaces, LF line endings, lines starting with `#` ignored.
//!
//! Binary: magic `PCXZ`, little-endian `u32` point count, then
//! `count * 3` little-endian `f32` coordinates.

use std::fmt::Write as _;
use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

pub const BIN_MAGIC: &[u8; 4] = b"PCXZ";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    XyzText,
    XyzBin,
}

impl Format {
    /// `.xyz` is text, `.xyzb` is binary.
    pub fn from_path(path: &Path) -> Option<Format> {
        match path.extension()?.to_str()? {
            "xyz" => Some(Format::XyzText),
            "xyzb" => Some(Format::XyzBin),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            Format::XyzText => "xyz",
            Format::XyzBin => "xyzb",
        }
    }
}

pub fn load(path: &Path, format: Format) -> Result<PointCloud> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let points = match format {
        Format::XyzText => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
                source_name: name.clone(),
                location: format!("byte {}", e.valid_up_to()),
                message: "file is not valid UTF-8".into(),
            })?;
            parse_text(text, &name)?
        }
        Format::XyzBin => parse_bin(&bytes, &name)?,
    };
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(PointCloud::new(points)?.with_source(stem))
}

/// Loads a file, picking the format from its extension.
pub fn load_auto(path: &Path) -> Result<PointCloud> {
    let format = Format::from_path(path).ok_or_else(|| {
        Error::contract(format!(
            "cannot infer point cloud format of {} (expected .xyz or .xyzb)",
            path.display()
        ))
    })?;
    load(path, format)
}

pub fn save(pc: &PointCloud, path: &Path, format: Format) -> Result<()> {
    let bytes = match format {
        Format::XyzText => encode_text(pc.points()).into_bytes(),
        Format::XyzBin => encode_bin(pc.points())?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_text(points: &[Point3]) -> String {
    let mut out = String::with_capacity(points.len() * 48);
    for p in points {
        // `{}` is the shortest representation that round-trips exactly.
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}

pub fn parse_text(text: &str, source_name: &str) -> Result<Vec<Point3>> {
    let mut points = Vec::new();
    for (lineno, line) in text.split_terminator('\n').enumerate() {
        if line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            location: format!("line {}", lineno + 1),
            message,
        };
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 space-separated values, found {}",
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (slot, field) in p.iter_mut().zip(&fields) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("invalid coordinate {field:?}")))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(Error::Parse {
            source_name: source_name.to_string(),
            location: "line 1".into(),
            message: "no points".into(),
        });
    }
    Ok(points)
}

pub fn encode_bin(points: &[Point3]) -> Result<Vec<u8>> {
    let count = u32::try_from(points.len())
        .map_err(|_| Error::contract("too many points for xyz_bin"))?;
    let mut out = Vec::with_capacity(8 + points.len() * 12);
    out.extend_from_slice(BIN_MAGIC);
    out.extend_from_slice(&count.to_le_bytes());
    for p in points {
        for &c in p {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn parse_bin(bytes: &[u8], source_name: &str) -> Result<Vec<Point3>> {
    let err = |offset: usize, message: String| Error::Parse {
        source_name: source_name.to_string(),
        location: format!("byte {offset}"),
        message,
    };
    if bytes.len() < 8 {
        return Err(err(bytes.len(), "truncated header".into()));
    }
    if &bytes[..4] != BIN_MAGIC {
        return Err(err(0, "bad magic, expected PCXZ".into()));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    if count == 0 {
        return Err(err(4, "point count is zero".into()));
    }
    let payload = &bytes[8..];
    let expected = count
        .checked_mul(12)
        .ok_or_else(|| err(4, "point count overflows".into()))?;
    if payload.len() != expected {
        return Err(err(
            8,
            format!(
                "header declares {count} points ({expected} bytes) but payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let mut points = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(12).enumerate() {
        let mut p = [0.0; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            let v = f32::from_le_bytes(chunk[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(err(8 + 12 * i + 4 * k, "non-finite coordinate".into()));
            }
            *slot = f64::from(v);
        }
        points.push(p);
    }
    Ok(points)
}

/// Loads every `.xyz`/`.xyzb` file in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<PointCloud>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if Format::from_path(&path).is_some() {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| load_auto(p)).collect()
}
