//! Output files: CSV tables, binary PPM images and hashed run directories.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::data::{write_file, Image};
use crate::error::{Error, Result};

/// Formats like C's `%g` with 6 significant digits.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

/// A CSV table with a fixed header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// One CSV cell.
pub enum Cell {
    Num(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::dim("csv row", &[self.header.len()], &[row.len()]));
        }
        self.rows.push(
            row.into_iter()
                .map(|c| match c {
                    Cell::Num(v) => sig6(v),
                    Cell::Int(v) => v.to_string(),
                    Cell::Text(s) => s,
                })
                .collect(),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(vec![]);
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }
}

/// Binary PPM (P6, 8-bit) bytes.
pub fn ppm_bytes(width: usize, height: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != width * height * 3 {
        return Err(Error::dim("ppm", &[width * height * 3], &[rgb.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Interleaved RGB of a 3-channel image (1-channel images are replicated),
/// each pixel repeated `zoom × zoom` times.
pub fn image_rgb(image: &Image, zoom: usize) -> Vec<u8> {
    let (h, w, z) = (image.height, image.width, zoom.max(1));
    let mut out = Vec::with_capacity(h * w * z * z * 3);
    for y in 0..h * z {
        for x in 0..w * z {
            for c in 0..3 {
                let ch = if image.channels == 3 { c } else { 0 };
                out.push(to_byte(image.get(ch, y / z, x / z)));
            }
        }
    }
    out
}

pub fn image_ppm(image: &Image, zoom: usize) -> Result<Vec<u8>> {
    let z = zoom.max(1);
    ppm_bytes(image.width * z, image.height * z, &image_rgb(image, z))
}

/// Min-max scales `values`; a constant input maps to zeros.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Heat map (`map_h × map_w`, min-max normalized) blended in red over a
/// grayscale copy of `image`; the map is upsampled by nearest neighbor.
pub fn heat_overlay(image: &Image, map: &[f64], map_h: usize, map_w: usize, zoom: usize) -> Result<Vec<u8>> {
    if map.len() != map_h * map_w {
        return Err(Error::dim("heat_overlay", &[map_h * map_w], &[map.len()]));
    }
    let heat = min_max(map);
    let (h, w, z) = (image.height, image.width, zoom.max(1));
    let mut rgb = Vec::with_capacity(h * w * z * z * 3);
    for y in 0..h * z {
        for x in 0..w * z {
            let (py, px) = (y / z, x / z);
            let gray = (0..image.channels).map(|c| image.get(c, py, px)).sum::<f64>() / image.channels as f64;
            let t = heat[(py * map_h / h) * map_w + px * map_w / w];
            let base = 0.5 * gray;
            rgb.extend_from_slice(&[to_byte(base + 0.5 * t), to_byte(base), to_byte(base + 0.5 * (1.0 - t) * 0.3)]);
        }
    }
    ppm_bytes(w * z, h * z, &rgb)
}

/// An output directory that remembers the SHA-256 of every file it writes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    files: &'a BTreeMap<String, String>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        write_file(&path, bytes)?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(bytes)));
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    /// Records a file written by other means (e.g. a dataset directory).
    pub fn record_existing(&mut self, rel: &str) -> Result<()> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.files.insert(rel.to_string(), hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    /// Writes `manifest.json` listing every file with its hash.
    pub fn finish(self) -> Result<BTreeMap<String, String>> {
        let mut text = serde_json::to_string_pretty(&Manifest { files: &self.files })?;
        text.push('\n');
        write_file(&self.root.join("manifest.json"), text.as_bytes())?;
        Ok(self.files)
    }
}
