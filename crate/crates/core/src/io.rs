//! On-disk formats: trajectory sets (`TSET`), embedding tables (`EOBS`),
//! raw observation dumps (`ROBS`), CSV tables, and content hashing.
//!
//! Everything is little-endian f32 payloads behind a magic + version header,
//! written in one deterministic pass so byte-identical reruns are possible.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::RawObservation;
use crate::error::{Error, Result};

const VERSION: u32 = 1;

fn fmt_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

// ── byte cursor ──────────────────────────────────────────────────────

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    format: &'static str,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], format: &'static str, magic: &[u8; 4]) -> Result<Self> {
        let mut c = Self { bytes, pos: 0, format };
        if c.take(4)? != magic {
            return Err(fmt_err(format, "bad magic"));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(fmt_err(format, format!("unsupported version {version}")));
        }
        Ok(c)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(fmt_err(self.format, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(fmt_err(self.format, format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn push_f32s(buf: &mut Vec<u8>, xs: &[f64]) {
    for &x in xs {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

// ── TSET: per-observation trajectory sets ────────────────────────────

/// K trajectories of shape `[H, D]` for each of `count` observations,
/// flattened row-major. `sets[i][k]` has `H·D` values.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajSetFile {
    pub k: usize,
    pub horizon: usize,
    pub dim: usize,
    pub sets: Vec<Vec<Vec<f64>>>,
}

impl TrajSetFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TSET");
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.sets.len(), self.k, self.horizon, self.dim] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let per = self.horizon * self.dim;
        for set in &self.sets {
            if set.len() != self.k {
                return Err(fmt_err("TSET", format!("set has {} trajectories, expected {}", set.len(), self.k)));
            }
            for traj in set {
                if traj.len() != per {
                    return Err(fmt_err("TSET", format!("trajectory length {} ≠ {per}", traj.len())));
                }
                push_f32s(&mut buf, traj);
            }
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let mut c = Cursor::new(&bytes, "TSET", b"TSET")?;
        let count = c.u32()? as usize;
        let k = c.u32()? as usize;
        let horizon = c.u32()? as usize;
        let dim = c.u32()? as usize;
        let per = horizon * dim;
        let mut sets = Vec::with_capacity(count);
        for _ in 0..count {
            let mut set = Vec::with_capacity(k);
            for _ in 0..k {
                set.push(c.f32s(per)?);
            }
            sets.push(set);
        }
        c.finish()?;
        Ok(Self { k, horizon, dim, sets })
    }

    /// Keeps only the first `k` trajectories of every set.
    pub fn truncate_k(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.k {
            return Err(Error::Config {
                field: "k".to_string(),
                reason: format!("cannot truncate {} sets to k={k}", self.k),
            });
        }
        Ok(Self {
            k,
            horizon: self.horizon,
            dim: self.dim,
            sets: self.sets.iter().map(|s| s[..k].to_vec()).collect(),
        })
    }
}

// ── EOBS: embedding table ────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

impl EmbeddingFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"EOBS");
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows.len() as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for row in &self.rows {
            if row.len() != self.dim {
                return Err(fmt_err("EOBS", format!("row length {} ≠ {}", row.len(), self.dim)));
            }
            push_f32s(&mut buf, row);
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let mut c = Cursor::new(&bytes, "EOBS", b"EOBS")?;
        let count = c.u32()? as usize;
        let dim = c.u32()? as usize;
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            rows.push(c.f32s(dim)?);
        }
        c.finish()?;
        Ok(Self { dim, rows })
    }
}

// ── ROBS: raw observation dump ───────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFile {
    pub raster: usize,
    pub n_points: usize,
    pub state_dim: usize,
    pub observations: Vec<RawObservation>,
}

impl ObservationFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"ROBS");
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for v in [self.observations.len(), self.raster, self.n_points, self.state_dim] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let r2 = self.raster * self.raster;
        for obs in &self.observations {
            if obs.rgb.len() != r2 * 3
                || obs.depth.len() != r2
                || obs.points.len() != self.n_points
                || obs.state.len() != self.state_dim
            {
                return Err(fmt_err("ROBS", "observation fields do not match header dims"));
            }
            push_f32s(&mut buf, &obs.rgb);
            push_f32s(&mut buf, &obs.depth);
            for p in &obs.points {
                push_f32s(&mut buf, p);
            }
            push_f32s(&mut buf, &obs.state);
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_all(path)?;
        let mut c = Cursor::new(&bytes, "ROBS", b"ROBS")?;
        let count = c.u32()? as usize;
        let raster = c.u32()? as usize;
        let n_points = c.u32()? as usize;
        let state_dim = c.u32()? as usize;
        let r2 = raster * raster;
        let mut observations = Vec::with_capacity(count);
        for _ in 0..count {
            let rgb = c.f32s(r2 * 3)?;
            let depth = c.f32s(r2)?;
            let mut points = Vec::with_capacity(n_points);
            for _ in 0..n_points {
                let p = c.f32s(3)?;
                points.push([p[0], p[1], p[2]]);
            }
            let state = c.f32s(state_dim)?;
            observations.push(RawObservation { rgb, depth, points, state });
        }
        c.finish()?;
        Ok(Self { raster, n_points, state_dim, observations })
    }
}

// ── CSV ──────────────────────────────────────────────────────────────

/// Writes a CSV with a fixed float format (9 significant digits) so reruns
/// are byte-identical.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.iter().map(|x| format_float(*x)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn format_float(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.1}")
    } else {
        format!("{x:.9}")
    }
}

// ── hashing ──────────────────────────────────────────────────────────

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&read_all(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tset_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tset");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let file = TrajSetFile {
            k: 3,
            horizon: 4,
            dim: 2,
            sets: (0..5)
                .map(|_| {
                    (0..3)
                        .map(|_| (0..8).map(|_| (rng.gen_range(-1.0..1.0f64) as f32) as f64).collect())
                        .collect()
                })
                .collect(),
        };
        file.save(&path).unwrap();
        let back = TrajSetFile::load(&path).unwrap();
        assert_eq!(file, back);
        let t1 = back.truncate_k(1).unwrap();
        assert_eq!(t1.k, 1);
        assert_eq!(t1.sets[2][0], back.sets[2][0]);
        assert!(back.truncate_k(4).is_err());
        assert!(back.truncate_k(0).is_err());
    }

    #[test]
    fn eobs_roundtrip_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.eobs");
        let file = EmbeddingFile {
            dim: 3,
            rows: vec![vec![0.25, -1.5, 3.0], vec![0.0, 0.5, -0.125]],
        };
        file.save(&path).unwrap();
        assert_eq!(EmbeddingFile::load(&path).unwrap(), file);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[1] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(EmbeddingFile::load(&path).is_err());
    }

    #[test]
    fn robs_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.robs");
        let raster = 4;
        let obs = RawObservation {
            rgb: (0..raster * raster * 3).map(|i| (i as f32 / 10.0) as f64).collect(),
            depth: (0..raster * raster).map(|i| (-(i as f32) / 7.0) as f64).collect(),
            points: vec![[0.5, -0.5, 0.25]; 6],
            state: vec![1.0, 2.0, 3.0, 4.0],
        };
        let file = ObservationFile {
            raster,
            n_points: 6,
            state_dim: 4,
            observations: vec![obs.clone(), obs],
        };
        file.save(&path).unwrap();
        assert_eq!(ObservationFile::load(&path).unwrap(), file);
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.eobs");
        let b = dir.path().join("b.eobs");
        let file = EmbeddingFile { dim: 2, rows: vec![vec![0.1, 0.2]; 7] };
        file.save(&a).unwrap();
        file.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(hash_file(&a).unwrap(), hash_file(&b).unwrap());
    }

    #[test]
    fn sha256_known_value() {
        // sha256("abc") from the FIPS 180-2 appendix
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn csv_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&path, &["epoch", "loss"], &[vec![0.0, 0.5], vec![1.0, 0.25]]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,loss\n0.0,0.500000000\n1.0,0.250000000\n");
    }
}
