//! Reader for locally supplied IDX files (the MNIST distribution format).

use crate::format::{checked_product, FormatError, Result};
use std::path::Path;

/// Images scaled to `[0, 1]`, one flattened row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
}

fn be_u32(b: &[u8], off: usize) -> Result<u32> {
    b.get(off..off + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| FormatError::Truncated {
            offset: b.len(),
            needed: (off + 4).saturating_sub(b.len()),
            what: "idx header",
        })
}

fn payload(b: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    b.get(start..start + len).ok_or_else(|| FormatError::Truncated {
        offset: b.len(),
        needed: (start + len).saturating_sub(b.len()),
        what: "idx payload",
    })
}

pub fn parse_idx_images(b: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(b, 0)?;
    if magic != 0x0000_0803 {
        return Err(FormatError::BadMagic {
            expected: "0x00000803".into(),
            found: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(b, 4)? as usize;
    let rows = be_u32(b, 8)? as usize;
    let cols = be_u32(b, 12)? as usize;
    let len = checked_product(&[count, rows, cols], "idx images")?;
    let data = payload(b, 16, len)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: data.iter().map(|&p| p as f64 / 255.0).collect(),
    })
}

pub fn parse_idx_labels(b: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(b, 0)?;
    if magic != 0x0000_0801 {
        return Err(FormatError::BadMagic {
            expected: "0x00000801".into(),
            found: format!("{magic:#010x}"),
        });
    }
    let count = be_u32(b, 4)? as usize;
    Ok(payload(b, 8, count)?.iter().map(|&l| l as usize).collect())
}

pub fn read_idx_images(path: &Path) -> Result<IdxImages> {
    parse_idx_images(&std::fs::read(path)?)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    parse_idx_labels(&std::fs::read(path)?)
}
