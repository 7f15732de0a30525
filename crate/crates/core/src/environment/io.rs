//! Scene split files and PGM/PBM exports.
//!
//! A split file stores the generator config once, then per scene its seed,
//! dimensions, instance count and bit-packed masks. Images are regenerated
//! from the seed on load and the masks are checked against the stored ones.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::scene::{generate_scene, Scene, SceneConfig, ShapeKind};
use crate::error::{Error, Result};
use crate::scoring::BinaryMask;

const MAGIC: &[u8; 5] = b"ACSS1";

fn pack(mask: &BinaryMask) -> Vec<u8> {
    let mut out = vec![0u8; mask.bits().len().div_ceil(8)];
    for (i, &b) in mask.bits().iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack(h: usize, w: usize, bytes: &[u8]) -> BinaryMask {
    BinaryMask::new(h, w, (0..h * w).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn encode_split(cfg: &SceneConfig, scenes: &[Scene]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    for v in [cfg.height, cfg.width, cfg.n_min, cfg.n_max] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(cfg.shape_kinds.iter().fold(0, |acc, k| acc | k.bit()));
    out.extend_from_slice(&cfg.overlap_prob.to_le_bytes());
    for s in scenes {
        out.extend_from_slice(&s.seed.to_le_bytes());
        for v in [s.height(), s.width(), s.instance_count()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for m in &s.gt_masks {
            out.extend(pack(m));
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::SceneFile(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_split(bytes: &[u8]) -> Result<(SceneConfig, Vec<Scene>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::SceneFile("bad magic".into()));
    }
    let (height, width, n_min, n_max) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let kinds = r.take(1)?[0];
    let overlap_prob = f64::from_bits(r.u64()?);
    let cfg = SceneConfig {
        height,
        width,
        n_min,
        n_max,
        shape_kinds: ShapeKind::ALL.into_iter().filter(|k| kinds & k.bit() != 0).collect(),
        overlap_prob,
    };
    cfg.validate().map_err(|e| Error::SceneFile(format!("invalid header: {e}")))?;
    let mut scenes = Vec::new();
    while r.pos < bytes.len() {
        let seed = r.u64()?;
        let (h, w, n) = (r.u32()?, r.u32()?, r.u32()?);
        if (h, w) != (cfg.height, cfg.width) {
            return Err(Error::SceneFile(format!("scene {seed}: {h}x{w} disagrees with the header")));
        }
        let stride = (h * w).div_ceil(8);
        let masks: Vec<BinaryMask> = (0..n).map(|_| r.take(stride).map(|b| unpack(h, w, b))).collect::<Result<_>>()?;
        let scene = generate_scene(seed, &cfg)?;
        if scene.gt_masks != masks {
            return Err(Error::SceneFile(format!("scene {seed}: stored masks do not match regeneration")));
        }
        scenes.push(scene);
    }
    Ok((cfg, scenes))
}

pub fn save_split(path: &Path, cfg: &SceneConfig, scenes: &[Scene]) -> Result<()> {
    fs::write(path, encode_split(cfg, scenes))?;
    Ok(())
}

pub fn load_split(path: &Path) -> Result<(SceneConfig, Vec<Scene>)> {
    decode_split(&fs::read(path)?)
}

/// Binary greyscale PGM (P5, maxval 255) of values in `[0, 1]`.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    assert_eq!(values.len(), height * width);
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{width} {height}\n255\n")?;
    let bytes: Vec<u8> = values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Binary bitmap PBM (P4); set pixels are written as 1 (black).
pub fn write_pbm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = (mask.height(), mask.width());
    let mut f = fs::File::create(path)?;
    write!(f, "P4\n{w} {h}\n")?;
    let row_bytes = w.div_ceil(8);
    let mut bytes = vec![0u8; row_bytes * h];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) {
                bytes[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    f.write_all(&bytes)?;
    Ok(())
}

/// Writes `scene_XXXX.pgm` and `scene_XXXX_maskK.pbm` files into `dir`.
pub fn export_scenes(dir: &Path, scenes: &[Scene]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        write_pgm(&dir.join(format!("scene_{i:04}.pgm")), s.height(), s.width(), s.image.data())?;
        for (k, m) in s.gt_masks.iter().enumerate() {
            write_pbm(&dir.join(format!("scene_{i:04}_mask{k}.pbm")), m)?;
        }
    }
    Ok(())
}
