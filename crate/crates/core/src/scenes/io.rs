//! PFM depth maps, P6 images and the on-disk dataset layout.

use std::fs;
use std::path::{Path, PathBuf};

use super::{generate_scene, SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::par::{self, Execution};

pub const MANIFEST: &str = "manifest.txt";

fn format_err(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

/// Header tokens are separated by single whitespace bytes; returns the token
/// and the offset just past its terminator.
fn token<'a>(bytes: &'a [u8], start: usize, path: &Path, what: &str) -> Result<(&'a str, usize)> {
    let rest = bytes.get(start..).unwrap_or(&[]);
    let len = rest
        .iter()
        .position(|b| b.is_ascii_whitespace())
        .ok_or_else(|| format_err(path, bytes.len(), format!("truncated header while reading {what}")))?;
    if len == 0 {
        return Err(format_err(path, start, format!("empty {what}")));
    }
    let s = std::str::from_utf8(&rest[..len]).map_err(|_| format_err(path, start, format!("{what} is not ASCII")))?;
    Ok((s, start + len + 1))
}

fn dim(bytes: &[u8], start: usize, path: &Path, what: &str) -> Result<(usize, usize)> {
    let (s, next) = token(bytes, start, path, what)?;
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok((v, next)),
        _ => Err(format_err(path, start, format!("bad {what} `{s}`"))),
    }
}

/// Grayscale PFM, little-endian, rows stored bottom to top.
pub fn encode_pfm(depth: &Tensor) -> Result<Vec<u8>> {
    let s = depth.shape();
    if s.len() != 2 {
        return Err(Error::shape("write_pfm", format!("expected [H, W], got {s:?}")));
    }
    if !depth.all_finite() {
        return Err(Error::InvalidInput("PFM values must be finite".into()));
    }
    let (h, w) = (s[0], s[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for &v in &depth.data()[y * w..(y + 1) * w] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (magic, at) = token(bytes, 0, path, "magic")?;
    if magic != "Pf" {
        return Err(format_err(path, 0, format!("expected grayscale `Pf`, found `{magic}`")));
    }
    let (w, at) = dim(bytes, at, path, "width")?;
    let (h, at) = dim(bytes, at, path, "height")?;
    let scale_at = at;
    let (scale, at) = token(bytes, at, path, "scale")?;
    let scale: f32 = scale
        .parse()
        .map_err(|_| format_err(path, scale_at, format!("bad scale `{scale}`")))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err(path, scale_at, format!("bad scale {scale}")));
    }
    if scale > 0.0 {
        return Err(Error::UnsupportedEndianness {
            path: path.to_path_buf(),
            scale,
        });
    }
    let need = 4 * w * h;
    let payload = bytes
        .get(at..at + need)
        .ok_or_else(|| format_err(path, bytes.len(), format!("payload needs {need} bytes, {} available", bytes.len() - at)))?;
    if bytes.len() > at + need {
        return Err(format_err(path, at + need, "trailing bytes after payload"));
    }
    let mut data = vec![0.0; w * h];
    for (row, chunk) in payload.chunks_exact(4 * w).enumerate() {
        let y = h - 1 - row;
        for (x, c) in chunk.chunks_exact(4).enumerate() {
            data[y * w + x] = f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes")));
        }
    }
    Tensor::new(vec![h, w], data)
}

pub fn write_pfm(path: &Path, depth: &Tensor) -> Result<()> {
    fs::write(path, encode_pfm(depth)?).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}

/// Number of samples clamped into `[0, 1]` while encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PpmReport {
    pub clamped: usize,
}

fn p6(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary P6 from a `[3, H, W]` image; `round()` rounds halves away from zero.
pub fn encode_ppm(image: &Tensor) -> Result<(Vec<u8>, PpmReport)> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("write_ppm", format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let n = h * w;
    let mut report = PpmReport::default();
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            let v = image.data()[c * n + i];
            let clamped = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if clamped != v {
                report.clamped += 1;
            }
            rgb.push((clamped * 255.0).round() as u8);
        }
    }
    Ok((p6(w, h, &rgb), report))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<PpmReport> {
    let (bytes, report) = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(report)
}

/// One gray byte per pixel, written as P6 with equal channels.
pub fn write_ppm_gray(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::shape("write_ppm_gray", format!("{} bytes for {width}x{height}", gray.len())));
    }
    let rgb: Vec<u8> = gray.iter().flat_map(|&g| [g, g, g]).collect();
    fs::write(path, p6(width, height, &rgb)).map_err(|e| Error::io(path, e))
}

/// P6 with maxval 255 to a `[3, H, W]` image in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (magic, at) = token(bytes, 0, path, "magic")?;
    if magic != "P6" {
        return Err(format_err(path, 0, format!("expected `P6`, found `{magic}`")));
    }
    let (w, at) = dim(bytes, at, path, "width")?;
    let (h, at) = dim(bytes, at, path, "height")?;
    let max_at = at;
    let (maxval, at) = token(bytes, at, path, "maxval")?;
    if maxval != "255" {
        return Err(format_err(path, max_at, format!("only maxval 255 is supported, found `{maxval}`")));
    }
    let n = w * h;
    let payload = bytes
        .get(at..at + 3 * n)
        .ok_or_else(|| format_err(path, bytes.len(), format!("payload needs {} bytes, {} available", 3 * n, bytes.len() - at)))?;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f64::from(payload[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetEntry {
    pub name: String,
    pub seed: u64,
}

fn entry_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{name}.ppm")),
        dir.join(format!("{name}.pfm")),
        dir.join(format!("{name}.mask.pfm")),
    )
}

fn write_sample(dir: &Path, name: &str, sample: &SceneSample) -> Result<PpmReport> {
    let (ppm, pfm, mask) = entry_paths(dir, name);
    let report = write_ppm(&ppm, &sample.image)?;
    write_pfm(&pfm, &sample.depth)?;
    if !sample.all_valid() {
        let m = sample.mask.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        write_pfm(&mask, &Tensor::new(sample.depth.shape().to_vec(), m)?)?;
    }
    Ok(report)
}

/// Writes `NNNN.ppm` + `NNNN.pfm` (+ `NNNN.mask.pfm` when some pixel is
/// invalid) for samples `0..n`, then the manifest of names and seeds.
pub fn write_dataset(dir: &Path, spec: &SceneSpec, n: usize, exec: Execution) -> Result<Vec<DatasetEntry>> {
    spec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entries: Vec<DatasetEntry> = (0..n)
        .map(|i| DatasetEntry {
            name: format!("{i:04}"),
            seed: spec.for_index(i).seed,
        })
        .collect();
    par::map_indexed(exec, &entries, |i, e| {
        let sample = generate_scene(&spec.for_index(i))?;
        write_sample(dir, &e.name, &sample)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut manifest = format!("samples {n}\n");
    for e in &entries {
        manifest.push_str(&format!("{} {}\n", e.name, e.seed));
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}

/// Names and seeds listed in the manifest of `dir`.
pub fn read_manifest(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut offset = 0;
    let mut entries = Vec::new();
    let mut declared = None;
    for line in text.lines() {
        let bad = |detail: &str| format_err(&path, offset, detail.to_string());
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (None, _, _) => {}
            (Some("samples"), Some(n), None) => declared = Some(n.parse::<usize>().map_err(|_| bad("bad sample count"))?),
            (Some(name), Some(seed), None) => entries.push(DatasetEntry {
                name: name.to_string(),
                seed: seed.parse().map_err(|_| bad("bad seed"))?,
            }),
            _ => return Err(bad("expected `name seed`")),
        }
        offset += line.len() + 1;
    }
    match declared {
        Some(n) if n == entries.len() => Ok(entries),
        Some(n) => Err(format_err(&path, 0, format!("manifest declares {n} samples but lists {}", entries.len()))),
        None => Err(format_err(&path, 0, "missing `samples` line")),
    }
}

/// Loads every sample listed in the manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    read_manifest(dir)?
        .iter()
        .map(|e| {
            let (ppm, pfm, mask_path) = entry_paths(dir, &e.name);
            let image = read_ppm(&ppm)?;
            let depth = read_pfm(&pfm)?;
            if image.shape()[1..] != *depth.shape() {
                return Err(Error::shape("read_dataset", format!("{}: image {:?} vs depth {:?}", e.name, image.shape(), depth.shape())));
            }
            let mask = if mask_path.exists() {
                let m = read_pfm(&mask_path)?;
                if m.shape() != depth.shape() {
                    return Err(Error::shape("read_dataset", format!("{}: mask {:?} vs depth {:?}", e.name, m.shape(), depth.shape())));
                }
                m.data().iter().map(|&v| v > 0.5).collect()
            } else {
                vec![true; depth.len()]
            };
            Ok(SceneSample { image, depth, mask })
        })
        .collect()
}
