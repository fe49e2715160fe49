//! On-disk containers: the versioned raster format, network/train-state
//! checkpoints, and atomic file writes.

use crate::error::{data_err, Error, Result};
use crate::numcore::Tensor;
use crate::raster::{Mask, NormCoeffs, Raster, BAND_NAMES, RGB_BANDS};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const RASTER_MAGIC: &[u8; 8] = b"SFRASTER";
const RASTER_VERSION: u16 = 1;
const CKPT_MAGIC: &[u8; 8] = b"SFLOWCKP";
const CKPT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

// ── Atomic writes ────────────────────────────────────────────────────

/// Write bytes to a sibling temp file then rename into place, so failed
/// commands never leave partial outputs.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile_path(path);
    let mut attempts = 0;
    let mut file = loop {
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&tmp)
        {
            Ok(f) => break f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists && attempts < 16 => {
                attempts += 1;
                tmp = tempfile_path(path);
            }
            Err(e) => return Err(e.into()),
        }
    };
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn tempfile_path(path: &Path) -> std::path::PathBuf {
    use std::time::{SystemTime, UNIX_EPOCH};
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    let name = format!(
        ".{}.tmp-{}-{nanos}",
        path.file_name().map(|s| s.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    );
    path.with_file_name(name)
}

// ── Little-endian primitives ─────────────────────────────────────────

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("invalid utf-8 string in container".into()))
    }
}

fn push_f32s(out: &mut Vec<u8>, vals: &[f32]) {
    out.reserve(vals.len() * 4);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

// ── Raster container ─────────────────────────────────────────────────

pub fn raster_to_bytes(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + r.data().len() * 4);
    out.extend_from_slice(RASTER_MAGIC);
    out.extend_from_slice(&RASTER_VERSION.to_le_bytes());
    out.extend_from_slice(&(r.h as u32).to_le_bytes());
    out.extend_from_slice(&(r.w as u32).to_le_bytes());
    out.extend_from_slice(&(r.c as u32).to_le_bytes());
    out.push(r.c as u8);
    for b in 0..r.c {
        let name = if r.c == BAND_NAMES.len() {
            BAND_NAMES[b]
        } else if r.c == 1 {
            "mask"
        } else {
            "band"
        };
        out.push(name.len() as u8);
        out.extend_from_slice(name.as_bytes());
    }
    out.push(DTYPE_F32);
    push_f32s(&mut out, r.data());
    out
}

pub fn raster_from_bytes(bytes: &[u8]) -> Result<Raster> {
    let mut c = Cursor::new(bytes);
    if c.take(8)? != RASTER_MAGIC {
        return Err(Error::Format("not a raster file (bad magic)".into()));
    }
    let version = c.u16()?;
    if version != RASTER_VERSION {
        return Err(Error::Format(format!("unsupported raster version {version}")));
    }
    let h = c.u32()? as usize;
    let w = c.u32()? as usize;
    let bands = c.u32()? as usize;
    let n_names = c.u8()? as usize;
    if n_names != bands {
        return Err(Error::Format(format!(
            "band name count {n_names} does not match channel count {bands}"
        )));
    }
    for _ in 0..n_names {
        let len = c.u8()? as usize;
        let _ = c.string(len)?;
    }
    let dtype = c.u8()?;
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
    }
    let data = c.f32s(h * w * bands)?;
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after raster data".into()));
    }
    Raster::new(h, w, bands, data)
}

pub fn write_raster(path: &Path, r: &Raster) -> Result<()> {
    write_atomic(path, &raster_to_bytes(r))
}

pub fn read_raster(path: &Path) -> Result<Raster> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    raster_from_bytes(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Masks travel as single-band rasters holding exactly 0.0 or 1.0.
pub fn write_mask(path: &Path, m: &Mask) -> Result<()> {
    let data: Vec<f32> = m.data().iter().map(|&v| v as f32).collect();
    write_raster(path, &Raster::new(m.h, m.w, 1, data)?)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let r = read_raster(path)?;
    if r.c != 1 {
        return Err(data_err(format!(
            "{}: mask must be single-band, has {} bands",
            path.display(),
            r.c
        )));
    }
    let mut data = Vec::with_capacity(r.h * r.w);
    for &v in r.data() {
        if v == 0.0 {
            data.push(0);
        } else if v == 1.0 {
            data.push(1);
        } else {
            return Err(data_err(format!(
                "{}: mask value {v} is not binary",
                path.display()
            )));
        }
    }
    Mask::new(r.h, r.w, data)
}

/// 8-bit RGB preview with a fixed 2-98 percentile stretch. For human
/// inspection only; metrics never touch this path.
pub fn write_rgb_png(path: &Path, r: &Raster) -> Result<()> {
    if r.c < 3 {
        return Err(data_err("PNG export needs at least 3 bands"));
    }
    let (lo, hi) = {
        let mut vals: Vec<f32> = RGB_BANDS
            .iter()
            .flat_map(|&b| r.band(b).iter().copied())
            .collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let pick = |q: f64| vals[((vals.len() - 1) as f64 * q) as usize];
        (pick(0.02), pick(0.98))
    };
    let span = (hi - lo).max(1e-6);
    let mut img = image::RgbImage::new(r.w as u32, r.h as u32);
    for y in 0..r.h {
        for x in 0..r.w {
            let px: Vec<u8> = RGB_BANDS
                .iter()
                .map(|&b| {
                    let v = ((r.get(b, y, x) - lo) / span).clamp(0.0, 1.0);
                    (v * 255.0).round() as u8
                })
                .collect();
            img.put_pixel(x as u32, y as u32, image::Rgb([px[0], px[1], px[2]]));
        }
    }
    let mut bytes: Vec<u8> = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Format(format!("png encode: {e}")))?;
    write_atomic(path, &bytes)
}

// ── Checkpoint container ─────────────────────────────────────────────

/// TOML header carried inside every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub net: crate::unet::NetConfig,
    pub norm: NormCoeffs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainMeta>,
}

/// Optimizer bookkeeping for exact training resume.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMeta {
    pub step: u64,
    pub sample_ordinal: u64,
    pub rng_seed_hex: String,
    pub rng_stream: u64,
    pub rng_word_pos_hex: String,
    pub train: crate::flowmatch::TrainConfig,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let meta = toml::to_string(&ckpt.meta)
        .map_err(|e| Error::Format(format!("checkpoint meta encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor::new(bytes);
    if c.take(8)? != CKPT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta_str = c.string(meta_len)?;
    let meta: CheckpointMeta = toml::from_str(&meta_str)
        .map_err(|e| Error::Format(format!("checkpoint meta decode: {e}")))?;
    let n = c.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let name_len = c.u16()? as usize;
        let name = c.string(name_len)?;
        let dtype = c.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let ndim = c.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(c.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = c.f32s(numel)?;
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &checkpoint_to_bytes(ckpt)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    checkpoint_from_bytes(&buf).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Serialize any TOML-able record atomically.
pub fn write_toml<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let body = toml::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("toml encode: {e}")))?;
    write_atomic(path, body.as_bytes())
}

pub fn read_toml<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let body = std::fs::read_to_string(path)?;
    toml::from_str(&body).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raster_roundtrip_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = Raster::zeros(5, 7, 6);
        for v in r.data_mut() {
            *v = rng.gen::<f32>() * 2.0 - 1.0;
        }
        let bytes = raster_to_bytes(&r);
        let back = raster_from_bytes(&bytes).unwrap();
        assert_eq!(r, back);
    }

    #[test]
    fn raster_rejects_garbage() {
        assert!(raster_from_bytes(b"not a raster").is_err());
        let mut bytes = raster_to_bytes(&Raster::zeros(2, 2, 1));
        bytes.truncate(bytes.len() - 3);
        assert!(raster_from_bytes(&bytes).is_err());
    }

    #[test]
    fn mask_roundtrip_and_binary_enforcement() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::new(3, 3, vec![0, 1, 0, 1, 1, 0, 0, 0, 1]).unwrap();
        let path = dir.path().join("m.sfr");
        write_mask(&path, &m).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);

        let bad = Raster::new(2, 2, 1, vec![0.0, 0.5, 1.0, 0.0]).unwrap();
        let bad_path = dir.path().join("bad.sfr");
        write_raster(&bad_path, &bad).unwrap();
        assert!(read_mask(&bad_path).is_err());
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        write_atomic(&path, b"first").unwrap();
        write_atomic(&path, b"second").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"second");
        // No temp litter left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp-"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
