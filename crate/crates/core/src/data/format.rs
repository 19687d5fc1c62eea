use std::path::Path;

use super::{Record, Split};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSIM";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 6 * 4;

/// Header, `n` row-major little-endian `f32` images, then one manifest line per image.
pub fn split_to_bytes(split: &Split) -> Vec<u8> {
    let n = split.len();
    let px = split.size * split.size;
    let mut out = Vec::with_capacity(HEADER_LEN + n * px * 4 + n * 24);
    out.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        n as u32,
        split.size as u32,
        split.size as u32,
        split.num_classes as u32,
        split.num_confounds as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for img in &split.images {
        for &v in img.values() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for (i, r) in split.records.iter().enumerate() {
        let line = format!(
            "{i},{},{},{},{},{},{}\n",
            r.label, r.confound, r.disc.0, r.disc.1, r.conf.0, r.conf.1
        );
        out.extend_from_slice(line.as_bytes());
    }
    out
}

/// Inverse of [`split_to_bytes`]; `origin` names the source in errors.
pub fn split_from_bytes(bytes: &[u8], origin: &Path) -> Result<Split> {
    let bad = |d: String| Error::format(origin, d);
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(bad("missing CSIM header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (version, n, h, w, k, m) = (word(0), word(1), word(2), word(3), word(4), word(5));
    if version != FORMAT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    if h != w || h == 0 {
        return Err(bad(format!("images must be square and non-empty, got {h}x{w}")));
    }
    let pixel_bytes = n
        .checked_mul(h * w * 4)
        .ok_or_else(|| bad("image block size overflows".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < pixel_bytes {
        return Err(bad(format!("expected {pixel_bytes} bytes of pixels, found {}", body.len())));
    }
    let mut images = Vec::with_capacity(n);
    for chunk in body[..pixel_bytes].chunks_exact(h * w * 4) {
        let vals = chunk
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        images.push(Tensor::new(vec![h, w], vals)?);
    }
    let text = std::str::from_utf8(&body[pixel_bytes..]).map_err(|e| bad(format!("manifest is not UTF-8: {e}")))?;
    let mut records = Vec::with_capacity(n);
    for (line_no, line) in text.lines().enumerate() {
        let f: Vec<usize> = line
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("manifest line {}: {e}", line_no + 1)))?;
        if f.len() != 7 || f[0] != line_no {
            return Err(bad(format!("manifest line {} is malformed: {line:?}", line_no + 1)));
        }
        if f[1] >= k || f[2] >= m {
            return Err(bad(format!("manifest line {}: label or confound out of range", line_no + 1)));
        }
        records.push(Record {
            label: f[1],
            confound: f[2],
            disc: (f[3], f[4]),
            conf: (f[5], f[6]),
        });
    }
    if records.len() != n {
        return Err(bad(format!("header says {n} images, manifest has {} lines", records.len())));
    }
    Ok(Split {
        size: h,
        num_classes: k,
        num_confounds: m,
        images,
        records,
    })
}

pub fn write_split(split: &Split, path: &Path) -> Result<()> {
    std::fs::write(path, split_to_bytes(split)).map_err(|e| Error::io(path, e))
}

pub fn read_split(path: &Path) -> Result<Split> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    split_from_bytes(&bytes, path)
}
