//! 16-bit binary PGM (P5) reading and writing for likelihood channels.
//!
//! One file per class channel, named `<patch_id>.<class>.pgm`; maxval is
//! fixed at 65535 with big-endian samples, and a stored sample s encodes the
//! value s / 65535.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::detection::{Grid, LikelihoodMap};
use crate::error::{Error, Result};
use crate::model::TaskClass;

const MAXVAL: u32 = 65535;

pub fn write_pgm(grid: &Grid, path: &Path) -> Result<()> {
    let mut body = format!("P5\n{} {}\n{}\n", grid.width(), grid.height(), MAXVAL).into_bytes();
    body.reserve(grid.values().len() * 2);
    for &v in grid.values() {
        let s = (v.clamp(0.0, 1.0) * MAXVAL as f64).round() as u16;
        body.extend_from_slice(&s.to_be_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&body))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_pgm(path: &Path) -> Result<Grid> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> Result<String> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while pos < raw.len() && raw[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < raw.len() && raw[pos] == b'#' {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Config(format!(
                "{}: truncated header",
                path.display()
            )));
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };

    if token(&raw)? != "P5" {
        return Err(bad("not a binary PGM (expected magic P5)"));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: u32 = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != MAXVAL {
        return Err(bad(&format!("maxval must be {MAXVAL}, got {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the samples.
    pos += 1;
    let expected = width * height * 2;
    if raw.len() < pos + expected {
        return Err(bad(&format!(
            "payload has {} bytes, expected {expected}",
            raw.len().saturating_sub(pos)
        )));
    }
    let data: Vec<f64> = raw[pos..pos + expected]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / MAXVAL as f64)
        .collect();
    Grid::from_values(width, height, data)
}

pub fn channel_filename(patch_id: &str, class: TaskClass) -> String {
    format!("{patch_id}.{class}.pgm")
}

/// Splits `<patch_id>.<class>.pgm` (patch ids may themselves contain dots).
pub fn parse_channel_filename(name: &str) -> Option<(String, TaskClass)> {
    let stem = name.strip_suffix(".pgm")?;
    let (patch_id, class_tok) = stem.rsplit_once('.')?;
    let class = TaskClass::parse_token(class_tok)?;
    Some((patch_id.to_string(), class))
}

/// Writes every channel of a map into `dir`.
pub fn save_map(map: &LikelihoodMap, patch_id: &str, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (&class, grid) in &map.channels {
        let path = dir.join(channel_filename(patch_id, class));
        write_pgm(grid, &path)?;
        written.push(path);
    }
    Ok(written)
}
