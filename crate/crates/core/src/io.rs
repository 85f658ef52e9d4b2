//! On-disk formats: binary PGM (P5), raw little-endian f32 maps with a JSON
//! sidecar, and atomic file replacement.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BScan, BinaryMask, Grid};
use crate::uncertainty::{UncertaintyKind, UncertaintyMap};

/// Writes `bytes` to a temporary sibling and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// `round(255 * v)` per pixel.
pub fn quantize(scan: &BScan) -> Grid<u8> {
    scan.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn dequantize(bytes: &Grid<u8>) -> BScan {
    bytes.map(|&b| b as f32 / 255.0)
}

pub fn mask_to_bytes(mask: &BinaryMask) -> Grid<u8> {
    mask.map(|&b| if b { 255 } else { 0 })
}

pub fn bytes_to_mask(bytes: &Grid<u8>) -> BinaryMask {
    bytes.map(|&b| b != 0)
}

pub fn encode_pgm(image: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.cols(), image.rows()).into_bytes();
    out.extend_from_slice(image.as_slice());
    out
}

pub fn write_pgm(path: &Path, image: &Grid<u8>) -> Result<()> {
    write_atomic(path, &encode_pgm(image))
}

pub fn read_pgm(path: &Path) -> Result<Grid<u8>> {
    decode_pgm(&read_bytes(path)?)
}

/// Parses an 8-bit binary PGM. Comments in the header are accepted.
pub fn decode_pgm(bytes: &[u8]) -> Result<Grid<u8>> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format("pgm", "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
    }
    if fields[0] != "P5" {
        return Err(Error::format("pgm", format!("magic {:?}, expected P5", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pgm", format!("bad header number {s:?}")))
    };
    let (cols, rows, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::format("pgm", format!("maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let data = bytes
        .get(pos..pos + rows * cols)
        .ok_or_else(|| Error::format("pgm", "raster shorter than header claims"))?;
    Grid::from_vec(rows, cols, data.to_vec())
}

/// JSON sidecar of a raw uncertainty map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapHeader {
    pub rows: usize,
    pub cols: usize,
    pub n: usize,
    pub dropout: f64,
    pub kind: UncertaintyKind,
}

/// Writes `<stem>.f32` (row-major little-endian f32) and `<stem>.json`.
pub fn write_uncertainty(dir: &Path, stem: &str, map: &UncertaintyMap) -> Result<()> {
    let payload: Vec<u8> = map
        .values
        .as_slice()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    write_atomic(&dir.join(format!("{stem}.f32")), &payload)?;
    let header = MapHeader {
        rows: map.values.rows(),
        cols: map.values.cols(),
        n: map.samples,
        dropout: map.dropout,
        kind: map.kind,
    };
    write_atomic(
        &dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )
}

pub fn read_uncertainty(dir: &Path, stem: &str) -> Result<UncertaintyMap> {
    let json_path = dir.join(format!("{stem}.json"));
    let header: MapHeader = serde_json::from_slice(&read_bytes(&json_path)?)?;
    let raw = read_bytes(&dir.join(format!("{stem}.f32")))?;
    if raw.len() != header.rows * header.cols * 4 {
        return Err(Error::format(
            "uncertainty map",
            format!("{} bytes for {}x{}", raw.len(), header.rows, header.cols),
        ));
    }
    let values = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(UncertaintyMap {
        values: Grid::from_vec(header.rows, header.cols, values)?,
        samples: header.n,
        dropout: header.dropout,
        kind: header.kind,
    })
}
