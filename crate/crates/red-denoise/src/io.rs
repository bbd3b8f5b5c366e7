//! File formats: RTF1 raw tensors, 16-bit PGM images, dataset manifests,
//! and the key=value config syntax.
//!
//! RTF1 layout: 8-byte magic `RTENSOR1`, u32 rank, u32 extents
//! (little-endian), then row-major 64-bit floats.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RTF1_MAGIC: &[u8; 8] = b"RTENSOR1";

/// Serializes a tensor into an in-memory RTF1 blob.
pub fn rtf1_to_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 + 4 * tensor.shape().len() + 8 * tensor.numel());
    out.extend_from_slice(RTF1_MAGIC);
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses one RTF1 blob from the front of `bytes`; returns the tensor and
/// the number of bytes consumed.
pub fn rtf1_from_bytes(bytes: &[u8], origin: &Path) -> Result<(Tensor, usize)> {
    let bad = |reason: &str| Error::format("RTF1", origin, reason);
    if bytes.len() < 12 {
        return Err(bad("truncated header"));
    }
    if &bytes[..8] != RTF1_MAGIC {
        return Err(Error::VersionMismatch);
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(bad(&format!("rank {rank} out of range")));
    }
    let mut offset = 12;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        if bytes.len() < offset + 4 {
            return Err(bad("truncated extents"));
        }
        shape.push(u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap()) as usize);
        offset += 4;
    }
    let numel: usize = shape.iter().product();
    if bytes.len() < offset + 8 * numel {
        return Err(bad("truncated payload"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let at = offset + 8 * i;
        data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
    }
    offset += 8 * numel;
    let tensor = Tensor::from_vec(&shape, data).map_err(|e| bad(&format!("invalid shape: {e}")))?;
    Ok((tensor, offset))
}

pub fn write_rtf1(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, rtf1_to_bytes(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read_rtf1(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (tensor, used) = rtf1_from_bytes(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::format("RTF1", path, "trailing bytes after tensor"));
    }
    Ok(tensor)
}

// ── PGM ─────────────────────────────────────────────────────────────

/// Writes a `[1, H, W]` image with values in [0, 1] as a binary PGM (P5)
/// with maxval 65535; samples are `round(pixel · 65535)`, big-endian.
pub fn write_pgm16(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.chw()?;
    if c != 1 {
        return Err(Error::ShapeMismatch(format!(
            "PGM export needs a single channel, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(32 + 2 * h * w);
    out.extend_from_slice(format!("P5\n{w} {h}\n65535\n").as_bytes());
    for &v in image.data() {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM (P5) into a `[1, H, W]` tensor, dividing by maxval.
/// Accepts both 8-bit and 16-bit sample depth.
pub fn read_pgm16(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::format("PGM", path, reason);
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::VersionMismatch);
    }
    // Header: three whitespace-separated fields after the magic, with
    // optional '#' comment lines.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        while pos < bytes.len() {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("missing header field"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("unparsable header field"))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        return Err(bad("bad dimensions or maxval"));
    }
    // Exactly one whitespace byte separates the header from the samples.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let wide = maxval > 255;
    let sample_bytes = if wide { 2 } else { 1 };
    if bytes.len() < pos + sample_bytes * w * h {
        return Err(bad("truncated sample data"));
    }
    let scale = 1.0 / maxval as f64;
    let mut data = Vec::with_capacity(w * h);
    for i in 0..w * h {
        let raw = if wide {
            u16::from_be_bytes([bytes[pos + 2 * i], bytes[pos + 2 * i + 1]]) as f64
        } else {
            bytes[pos + i] as f64
        };
        data.push(raw * scale);
    }
    Tensor::from_vec(&[1, h, w], data)
}

// ── Dataset manifest ────────────────────────────────────────────────

/// One simulated pair: generation parameters plus file names relative to
/// the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub photons: f64,
    pub views: usize,
    pub clean: String,
    pub noisy: String,
}

/// Dataset manifest: one tab-separated line per pair.
#[derive(Clone, Debug)]
pub struct Manifest {
    /// Directory that entry paths are resolved against.
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::format(
                    "manifest",
                    path,
                    format!("line {}: expected 5 tab-separated fields", lineno + 1),
                ));
            }
            let parse_err = |what: &str| {
                Error::format("manifest", path, format!("line {}: bad {what}", lineno + 1))
            };
            entries.push(ManifestEntry {
                seed: fields[0].parse().map_err(|_| parse_err("seed"))?,
                photons: fields[1].parse().map_err(|_| parse_err("photons"))?,
                views: fields[2].parse().map_err(|_| parse_err("views"))?,
                clean: fields[3].to_string(),
                noisy: fields[4].to_string(),
            });
        }
        let dir = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .to_path_buf();
        Ok(Manifest { dir, entries })
    }

    pub fn write(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
        let mut text = String::from("# seed\tphotons\tviews\tclean\tnoisy\n");
        for e in entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.seed, e.photons, e.views, e.clean, e.noisy
            ));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads the (clean, noisy) RTF1 tensors of entry `index`.
    pub fn load_pair(&self, index: usize) -> Result<(Tensor, Tensor)> {
        let entry = &self.entries[index];
        let clean = read_rtf1(&self.dir.join(&entry.clean))?;
        let noisy = read_rtf1(&self.dir.join(&entry.noisy))?;
        Ok((clean, noisy))
    }

    /// Stable identifier for entry `index`, derived from the clean file name.
    pub fn entry_id(&self, index: usize) -> String {
        let name = &self.entries[index].clean;
        let stem = name
            .rsplit('/')
            .next()
            .unwrap_or(name)
            .trim_end_matches(".rtf")
            .trim_end_matches("_clean");
        if stem.is_empty() {
            format!("pair{index:04}")
        } else {
            stem.to_string()
        }
    }
}

// ── key=value configs ───────────────────────────────────────────────

/// Parses `key=value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value", lineno + 1));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// 64-bit FNV-1a, used for checkpoint checksums and patch-sequence hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
