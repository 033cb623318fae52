//! On-disk dataset: P6 PPM frames, 16-bit big-endian P5 PGM depth with a
//! per-sequence JSON sidecar holding the affine de-normalization, and a
//! manifest JSON listing sequences, actions, intrinsics and split.

use crate::config::{Action, Config};
use crate::error::{Error, Result};
use crate::pointcloud::Intrinsics;
use crate::tensor::Tensor;
use crate::world::{generate, SceneSequence, SceneSpec};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

pub const SKY_CODE: u16 = u16::MAX;

// ── PPM / PGM ───────────────────────────────────────────────────────

/// Write `[3,H,W]` values in [0,1] as binary P6 with maxval 255.
pub fn write_ppm(path: &Path, rgb: &Tensor) -> Result<()> {
    if rgb.shape.len() != 3 || rgb.shape[0] != 3 {
        return Err(Error::invalid("write_ppm", format!("expected [3,H,W], got {:?}", rgb.shape)));
    }
    let (h, w) = (rgb.shape[1], rgb.shape[2]);
    let plane = h * w;
    let mut buf = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            buf.push((rgb.data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(&buf)?;
    Ok(())
}

fn read_header_token(reader: &mut impl BufRead) -> Result<String> {
    // PNM headers are whitespace-separated tokens; comments start with '#'
    let mut tok = String::new();
    loop {
        let mut byte = [0u8; 1];
        reader.read_exact(&mut byte)?;
        let ch = byte[0] as char;
        if ch == '#' {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            continue;
        }
        if ch.is_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(ch);
    }
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let magic = read_header_token(&mut reader)?;
    if magic != "P6" {
        return Err(Error::Format(format!("{}: expected P6, got {magic}", path.display())));
    }
    let w: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    let h: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    let maxval: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    if maxval != 255 {
        return Err(Error::Format(format!("{}: only maxval 255 supported", path.display())));
    }
    let mut buf = vec![0u8; 3 * h * w];
    reader.read_exact(&mut buf)?;
    let plane = h * w;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = buf[3 * i + c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Write 16-bit big-endian binary P5.
pub fn write_pgm16(path: &Path, values: &[u16], h: usize, w: usize) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::invalid("write_pgm16", "value count does not match extent"));
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P5\n{w} {h}\n65535\n")?;
    for &v in values {
        out.write_all(&v.to_be_bytes())?;
    }
    Ok(())
}

pub fn read_pgm16(path: &Path) -> Result<(Vec<u16>, usize, usize)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let magic = read_header_token(&mut reader)?;
    if magic != "P5" {
        return Err(Error::Format(format!("{}: expected P5, got {magic}", path.display())));
    }
    let w: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    let h: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    let maxval: usize = read_header_token(&mut reader)?.parse().map_err(|e| Error::Format(format!("{e}")))?;
    if maxval != 65535 {
        return Err(Error::Format(format!("{}: only maxval 65535 supported", path.display())));
    }
    let mut buf = vec![0u8; 2 * h * w];
    reader.read_exact(&mut buf)?;
    let values = buf.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    Ok((values, h, w))
}

// ── depth scaling sidecar ───────────────────────────────────────────

/// Affine scaling used to pack metric depth into 16 bits, one per sequence.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DepthMeta {
    pub min: f64,
    pub max: f64,
    pub sky_code: u16,
}

impl DepthMeta {
    /// Range over the finite depths of all frames.
    pub fn fit(frames: &[Tensor]) -> DepthMeta {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for f in frames {
            for &d in &f.data {
                if d.is_finite() {
                    min = min.min(d);
                    max = max.max(d);
                }
            }
        }
        if !min.is_finite() {
            (min, max) = (0.0, 1.0); // all-sky frame set
        }
        DepthMeta { min, max, sky_code: SKY_CODE }
    }

    pub fn encode(&self, depth: &Tensor) -> Vec<u16> {
        let range = self.max - self.min;
        depth
            .data
            .iter()
            .map(|&d| {
                if !d.is_finite() {
                    self.sky_code
                } else if range <= 0.0 {
                    0
                } else {
                    (((d - self.min) / range) * (SKY_CODE - 1) as f64).round().clamp(0.0, (SKY_CODE - 1) as f64)
                        as u16
                }
            })
            .collect()
    }

    pub fn decode(&self, values: &[u16], h: usize, w: usize) -> Tensor {
        let range = self.max - self.min;
        let data = values
            .iter()
            .map(|&v| {
                if v == self.sky_code {
                    f64::INFINITY
                } else {
                    self.min + (v as f64 / (SKY_CODE - 1) as f64) * range
                }
            })
            .collect();
        Tensor::new(vec![1, h, w], data)
    }
}

// ── manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub action: Action,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub intrinsics: Intrinsics,
    pub sequences: Vec<ManifestEntry>,
}

/// Generate and write the full dataset; returns the manifest.
pub fn write_dataset(dir: &Path, cfg: &Config) -> Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let n = cfg.data.sequences;
    let n_val = ((cfg.data.val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let n_train = n - n_val;

    let mut entries = Vec::with_capacity(n);
    let mut intrinsics = None;
    for i in 0..n {
        let spec = SceneSpec::sample(cfg.seed, i as u64, &cfg.data)?;
        let seq = generate(&spec);
        let sub = format!("seq_{i:04}");
        let seq_dir = dir.join(&sub);
        std::fs::create_dir_all(&seq_dir)?;
        let meta = DepthMeta::fit(&seq.depth);
        for (m, rgb) in seq.rgb.iter().enumerate() {
            write_ppm(&seq_dir.join(format!("rgb_{m:02}.ppm")), rgb)?;
        }
        for (m, depth) in seq.depth.iter().enumerate() {
            write_pgm16(
                &seq_dir.join(format!("depth_{m:02}.pgm")),
                &meta.encode(depth),
                cfg.data.height,
                cfg.data.width,
            )?;
        }
        std::fs::write(seq_dir.join("depth_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
        intrinsics = Some(seq.intrinsics);
        entries.push(ManifestEntry {
            dir: sub,
            action: spec.action,
            split: if i < n_train { Split::Train } else { Split::Val },
        });
    }
    let manifest = Manifest {
        seed: cfg.seed,
        height: cfg.data.height,
        width: cfg.data.width,
        frames: cfg.data.frames,
        intrinsics: intrinsics.expect("at least one sequence"),
        sequences: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// A dataset rooted at a directory, loaded lazily per sequence.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(root.join("manifest.json"))?)?;
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.manifest
            .sequences
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn load_sequence(&self, index: usize) -> Result<SceneSequence> {
        let entry = self
            .manifest
            .sequences
            .get(index)
            .ok_or_else(|| Error::invalid("dataset", format!("sequence {index} out of range")))?;
        let dir = self.root.join(&entry.dir);
        let meta: DepthMeta =
            serde_json::from_str(&std::fs::read_to_string(dir.join("depth_meta.json"))?)?;
        let mut rgb = Vec::with_capacity(self.manifest.frames);
        let mut depth = Vec::with_capacity(self.manifest.frames);
        for m in 0..self.manifest.frames {
            rgb.push(read_ppm(&dir.join(format!("rgb_{m:02}.ppm")))?);
            let (vals, h, w) = read_pgm16(&dir.join(format!("depth_{m:02}.pgm")))?;
            depth.push(meta.decode(&vals, h, w));
        }
        Ok(SceneSequence { rgb, depth, action: entry.action, intrinsics: self.manifest.intrinsics })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip_is_exact_at_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut rgb = Tensor::zeros(&[3, 4, 5]);
        for (i, v) in rgb.data.iter_mut().enumerate() {
            *v = (i as f64 / 59.0 * 255.0).round() / 255.0; // representable at 8 bits
        }
        let path = dir.path().join("x.ppm");
        write_ppm(&path, &rgb).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape, rgb.shape);
        for (a, b) in back.data.iter().zip(&rgb.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_meta_roundtrip_preserves_sky_and_range() {
        let mut d = Tensor::zeros(&[1, 2, 3]);
        d.data = vec![1.5, 2.0, f64::INFINITY, 7.25, 1.5, 3.0];
        let meta = DepthMeta::fit(std::slice::from_ref(&d));
        assert_eq!(meta.min, 1.5);
        assert_eq!(meta.max, 7.25);
        let enc = meta.encode(&d);
        assert_eq!(enc[2], SKY_CODE);
        let back = meta.decode(&enc, 2, 3);
        assert!(back.data[2].is_infinite());
        for i in [0usize, 1, 3, 4, 5] {
            let step = (meta.max - meta.min) / (SKY_CODE - 1) as f64;
            assert!((back.data[i] - d.data[i]).abs() <= step, "{} vs {}", back.data[i], d.data[i]);
        }
    }

    #[test]
    fn dataset_write_then_open_roundtrips_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::toy();
        cfg.data.sequences = 6;
        cfg.data.val_fraction = 0.34; // 2 val sequences
        let manifest = write_dataset(dir.path(), &cfg).unwrap();
        assert_eq!(manifest.sequences.len(), 6);

        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.indices(Split::Val).len(), 2);
        assert_eq!(ds.indices(Split::Train).len(), 4);
        let seq = ds.load_sequence(0).unwrap();
        assert_eq!(seq.rgb.len(), cfg.data.frames);
        assert_eq!(seq.rgb[0].shape, vec![3, cfg.data.height, cfg.data.width]);
        assert_eq!(seq.depth[0].shape, vec![1, cfg.data.height, cfg.data.width]);
        // sky must survive the file roundtrip as +inf
        assert!(seq.depth[0].data.iter().any(|d| d.is_infinite()));
    }
}
