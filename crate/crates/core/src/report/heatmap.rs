//! Cross similarity heatmaps: per-pair maps and the class-by-class grid, as CSV and binary PGM.

use std::path::Path;

use serde::Serialize;

use crate::autograd::Tensor;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::model::{Model, LEVELS};

/// Normalization applied to every emitted map, recorded in metadata.
pub const NORMALIZATION: &str = "per-map min-max";
pub const MAP_HEADER: &str = "row,col,raw,normalized";
pub const GRID_HEADER: &str = "key_class,query_class,row,col,raw,normalized";

/// Rescale to [0, 1]; a constant map becomes all zeros.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    v.iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect()
}

/// One `side × side` map.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Heatmap {
    pub name: String,
    pub level: usize,
    pub side: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl Heatmap {
    pub fn new(name: impl Into<String>, level: usize, raw: Vec<f64>) -> Result<Self> {
        let side = (raw.len() as f64).sqrt().round() as usize;
        if side * side != raw.len() || raw.is_empty() {
            return Err(Error::dim("heatmap", format!("{} values do not form a square grid", raw.len())));
        }
        if raw.iter().any(|x| !x.is_finite()) {
            return Err(Error::Evaluation(format!("heatmap {} has non-finite values", name.into())));
        }
        Ok(Self {
            name: name.into(),
            level,
            side,
            normalized: min_max_normalize(&raw),
            raw,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{MAP_HEADER}\n");
        for (i, (r, n)) in self.raw.iter().zip(&self.normalized).enumerate() {
            s.push_str(&format!("{},{},{r},{n}\n", i / self.side, i % self.side));
        }
        s
    }

    /// Binary greyscale image, each cell drawn as a `scale × scale` block.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        pgm(&self.normalized, self.side, self.side, scale)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 image of a row-major `width × height` map in [0, 1], each value a `scale × scale` block.
pub fn pgm(values: &[f64], width: usize, height: usize, scale: usize) -> Vec<u8> {
    let scale = scale.max(1);
    let (w, h) = (width * scale, height * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            out.push(to_byte(values[(y / scale) * width + x / scale]));
        }
    }
    out
}

/// All key- and query-side S and D maps for one image pair at every level.
pub fn pair_heatmaps(model: &Model, key: &Tensor, query: &Tensor) -> Result<Vec<Heatmap>> {
    let mut maps = Vec::new();
    for level in 0..LEVELS {
        let m = model.pair_maps(key, query, level)?;
        for (name, raw) in [("s_key", m.s_key), ("s_query", m.s_query), ("d_key", m.d_key), ("d_query", m.d_query)] {
            maps.push(Heatmap::new(name, level, raw)?);
        }
    }
    Ok(maps)
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Metadata<'a> {
    normalization: &'a str,
    maps: Vec<String>,
    pgm_scale: usize,
}

/// Writes `{prefix}_{name}_l{level}.csv` and `.pgm` for each map plus `{prefix}_meta.json`.
pub fn write_heatmaps(dir: &Path, prefix: &str, maps: &[Heatmap], scale: usize) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for m in maps {
        let stem = format!("{prefix}_{}_l{}", m.name, m.level);
        let csv = dir.join(format!("{stem}.csv"));
        write(&csv, m.to_csv().as_bytes())?;
        let img = dir.join(format!("{stem}.pgm"));
        write(&img, &m.to_pgm(scale))?;
        written.extend([csv, img]);
    }
    let meta = Metadata {
        normalization: NORMALIZATION,
        maps: maps.iter().map(|m| format!("{}_l{}", m.name, m.level)).collect(),
        pgm_scale: scale,
    };
    let path = dir.join(format!("{prefix}_meta.json"));
    write(&path, serde_json::to_string_pretty(&meta).expect("metadata").as_bytes())?;
    written.push(path);
    Ok(written)
}

/// Key-side S maps for every (key class, query class) combination.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeatmapGrid {
    pub classes: usize,
    pub level: usize,
    /// `cells[key_class][query_class]`, `None` where the split lacks the needed images.
    pub cells: Vec<Vec<Option<Heatmap>>>,
}

/// Key image: the first image of the key class. Query: the first image of the
/// query class, or the second one on the diagonal so a class is never paired with itself.
pub fn heatmap_grid(model: &Model, split: &Split, level: usize) -> Result<HeatmapGrid> {
    let k = split.num_classes;
    let members: Vec<Vec<usize>> = (0..k)
        .map(|c| split.records.iter().enumerate().filter(|(_, r)| r.label == c).map(|(i, _)| i).collect())
        .collect();
    let mut cells = vec![vec![None; k]; k];
    for (kc, row) in cells.iter_mut().enumerate() {
        for (qc, cell) in row.iter_mut().enumerate() {
            let pick = if kc == qc { 1 } else { 0 };
            let (Some(&ki), Some(&qi)) = (members[kc].first(), members[qc].get(pick)) else {
                continue;
            };
            let m = model.pair_maps(&split.images[ki], &split.images[qi], level)?;
            *cell = Some(Heatmap::new(format!("s_key_{kc}_{qc}"), level, m.s_key)?);
        }
    }
    Ok(HeatmapGrid {
        classes: k,
        level,
        cells,
    })
}

impl HeatmapGrid {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{GRID_HEADER}\n");
        for (kc, row) in self.cells.iter().enumerate() {
            for (qc, cell) in row.iter().enumerate() {
                let Some(m) = cell else { continue };
                for (i, (r, n)) in m.raw.iter().zip(&m.normalized).enumerate() {
                    s.push_str(&format!("{kc},{qc},{},{},{r},{n}\n", i / m.side, i % m.side));
                }
            }
        }
        s
    }

    /// All maps tiled key class by row, query class by column, separated by one white cell.
    pub fn to_pgm(&self, scale: usize) -> Vec<u8> {
        let side = self
            .cells
            .iter()
            .flatten()
            .flatten()
            .map(|m| m.side)
            .next()
            .unwrap_or(1);
        let stride = side + 1;
        let n = self.classes * stride - 1;
        let mut canvas = vec![1.0; n * n];
        for (kc, row) in self.cells.iter().enumerate() {
            for (qc, cell) in row.iter().enumerate() {
                let Some(m) = cell else { continue };
                for i in 0..side * side {
                    let (y, x) = (kc * stride + i / side, qc * stride + i % side);
                    canvas[y * n + x] = m.normalized[i];
                }
            }
        }
        pgm(&canvas, n, n, scale)
    }

    /// Writes `grid_l{level}.csv`, `grid_l{level}.pgm` and `grid_l{level}_meta.json`.
    pub fn write(&self, dir: &Path, scale: usize) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = format!("grid_l{}", self.level);
        write(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())?;
        write(&dir.join(format!("{stem}.pgm")), &self.to_pgm(scale))?;
        let meta = serde_json::json!({
            "normalization": NORMALIZATION,
            "layout": "rows are key classes, columns are query classes",
            "map": "key-side S weights",
            "level": self.level,
            "pgm_scale": scale,
        });
        write(
            &dir.join(format!("{stem}_meta.json")),
            serde_json::to_string_pretty(&meta).expect("metadata").as_bytes(),
        )
    }
}

/// Parse a P5 header and return `(width, height, pixels)`.
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = |d: &str| Error::Evaluation(format!("invalid PGM: {d}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let px = bytes.get(pos..).ok_or_else(|| bad("missing pixels"))?;
    if px.len() != w * h {
        return Err(bad("pixel count does not match the header"));
    }
    Ok((w, h, px))
}
