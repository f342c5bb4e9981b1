//! On-disk dataset: `manifest.json` plus one `TCSQ` container per sequence.
//!
//! Container layout (little-endian):
//!
//! ```text
//! b"TCSQ" | version u32 | n u32 | H u32 | W u32
//! frames   f32[n·H·W·3]
//! poses    f64[n·16·6]
//! shape    f64[10]
//! j3d      f64[n·21·3]
//! j2d      f64[n·21·2]
//! camera   f64[3]        (s, t_x, t_y)
//! fps      f64
//! ```

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::generate::{generate_sequence, SequenceRecord, SynthConfig};
use super::SynthError;
use crate::hand::{
    CameraWeakPerspective, HandPose, HandShape, Keypoints2D, Keypoints3D, KinematicTemplate,
    NUM_JOINTS, NUM_SHAPE, POSE_DIM,
};
use crate::image::Image;

pub const SEQUENCE_MAGIC: &[u8; 4] = b"TCSQ";
pub const SEQUENCE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub seq_id: String,
    pub file: String,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub n_sequences: usize,
    pub fps: f64,
    pub image_size: usize,
    pub config: SynthConfig,
    pub template: KinematicTemplate,
    pub sequences: Vec<SequenceEntry>,
}

/// A loaded dataset held fully in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub template: KinematicTemplate,
    pub sequences: Vec<SequenceRecord>,
}

impl Dataset {
    pub fn n_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.len()).sum()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.len()).collect()
    }
}

/// Per-sequence seeds are `seed + index`; generation runs in parallel but
/// each sequence depends only on its own seed.
pub fn generate_sequences(
    n_sequences: usize,
    cfg: &SynthConfig,
    tmpl: &KinematicTemplate,
    seed: u64,
) -> Result<Vec<SequenceRecord>, SynthError> {
    cfg.validate()?;
    (0..n_sequences)
        .into_par_iter()
        .map(|i| generate_sequence(cfg, tmpl, seed.wrapping_add(i as u64)))
        .collect()
}

pub fn make_dataset(
    dir: &Path,
    n_sequences: usize,
    cfg: &SynthConfig,
    tmpl: &KinematicTemplate,
    seed: u64,
) -> Result<Manifest, SynthError> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let entries: Vec<SequenceEntry> = (0..n_sequences)
        .into_par_iter()
        .map(|i| -> Result<SequenceEntry, SynthError> {
            let seq = generate_sequence(cfg, tmpl, seed.wrapping_add(i as u64))?;
            let file = format!("seq_{i:05}.tcsq");
            write_sequence(&dir.join(&file), &seq)?;
            Ok(SequenceEntry {
                seq_id: seq.seq_id,
                file,
                n_frames: seq.frames.len(),
            })
        })
        .collect::<Result<_, _>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed,
        n_sequences,
        fps: cfg.fps,
        image_size: cfg.image_size,
        config: cfg.clone(),
        template: tmpl.clone(),
        sequences: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, SynthError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(SynthError::UnsupportedVersion(manifest.version));
    }
    if manifest.sequences.len() != manifest.n_sequences {
        return Err(SynthError::Corrupt("manifest sequence count mismatch".into()));
    }
    manifest
        .template
        .validate()
        .map_err(|e| SynthError::Corrupt(e.to_string()))?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SynthError> {
    let manifest = read_manifest(dir)?;
    let sequences = manifest
        .sequences
        .iter()
        .map(|e| read_sequence(&dir.join(&e.file), &e.seq_id))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        template: manifest.template,
        sequences,
    })
}

fn put_f64s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_sequence(path: &Path, seq: &SequenceRecord) -> Result<(), SynthError> {
    seq.validate()?;
    let n = seq.len();
    let (h, w) = (seq.frames[0].height, seq.frames[0].width);
    let mut buf = Vec::with_capacity(20 + n * h * w * 12 + n * 1000);
    buf.extend_from_slice(SEQUENCE_MAGIC);
    for v in [SEQUENCE_VERSION, n as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for f in &seq.frames {
        if f.height != h || f.width != w {
            return Err(SynthError::Corrupt("frames differ in size".into()));
        }
        for v in &f.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    put_f64s(&mut buf, seq.poses.iter().flat_map(|p| p.to_flat()));
    put_f64s(&mut buf, seq.shape.beta);
    put_f64s(&mut buf, seq.j3d.iter().flat_map(|k| k.0.into_iter().flatten()));
    put_f64s(&mut buf, seq.j2d.iter().flat_map(|k| k.0.into_iter().flatten()));
    put_f64s(&mut buf, [seq.cam.s, seq.cam.t[0], seq.cam.t[1]]);
    put_f64s(&mut buf, [seq.fps]);
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SynthError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(SynthError::Corrupt("truncated sequence container".into()));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, SynthError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, SynthError> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_sequence(path: &Path, seq_id: &str) -> Result<SequenceRecord, SynthError> {
    let mut raw = Vec::new();
    fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut cur = Cursor { buf: &raw, pos: 0 };
    if cur.take(4)? != SEQUENCE_MAGIC {
        return Err(SynthError::BadMagic(PathBuf::from(path)));
    }
    let version = cur.u32()?;
    if version != SEQUENCE_VERSION {
        return Err(SynthError::UnsupportedVersion(version));
    }
    let n = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let w = cur.u32()? as usize;
    let mut frames = Vec::with_capacity(n);
    for _ in 0..n {
        let data = cur
            .take(h * w * 3 * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Image {
            height: h,
            width: w,
            data,
        });
    }
    let poses = cur
        .f64s(n * POSE_DIM)?
        .chunks_exact(POSE_DIM)
        .map(HandPose::from_flat)
        .collect();
    let mut beta = [0.0; NUM_SHAPE];
    beta.copy_from_slice(&cur.f64s(NUM_SHAPE)?);
    let j3d = cur
        .f64s(n * NUM_JOINTS * 3)?
        .chunks_exact(NUM_JOINTS * 3)
        .map(|c| {
            let mut k = [[0.0; 3]; NUM_JOINTS];
            for (j, p) in k.iter_mut().enumerate() {
                p.copy_from_slice(&c[j * 3..j * 3 + 3]);
            }
            Keypoints3D(k)
        })
        .collect();
    let j2d = cur
        .f64s(n * NUM_JOINTS * 2)?
        .chunks_exact(NUM_JOINTS * 2)
        .map(|c| {
            let mut k = [[0.0; 2]; NUM_JOINTS];
            for (j, p) in k.iter_mut().enumerate() {
                p.copy_from_slice(&c[j * 2..j * 2 + 2]);
            }
            Keypoints2D(k)
        })
        .collect();
    let cam = cur.f64s(3)?;
    let fps = cur.f64s(1)?[0];
    if cur.pos != raw.len() {
        return Err(SynthError::Corrupt("trailing bytes in sequence container".into()));
    }
    let seq = SequenceRecord {
        seq_id: seq_id.to_string(),
        fps,
        shape: HandShape::new(beta),
        cam: CameraWeakPerspective {
            s: cam[0],
            t: [cam[1], cam[2]],
        },
        poses,
        j3d,
        j2d,
        frames,
    };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_frames: 6,
            image_size: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let t = KinematicTemplate::standard();
        make_dataset(dir.path(), 0, &small_cfg(), &t, 3).unwrap();
        let m = read_manifest(dir.path()).unwrap();
        assert_eq!(m.n_sequences, 0);
        assert!(load_dataset(dir.path()).unwrap().sequences.is_empty());
    }

    #[test]
    fn round_trip_and_byte_identical_regeneration() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let t = KinematicTemplate::standard();
        let cfg = small_cfg();
        let m = make_dataset(a.path(), 3, &cfg, &t, 10).unwrap();
        make_dataset(b.path(), 3, &cfg, &t, 10).unwrap();
        assert_eq!(read_manifest(a.path()).unwrap().sequences.len(), 3);
        for name in std::iter::once(MANIFEST_FILE.to_string())
            .chain(m.sequences.iter().map(|e| e.file.clone()))
        {
            assert_eq!(
                fs::read(a.path().join(&name)).unwrap(),
                fs::read(b.path().join(&name)).unwrap()
            );
        }
        let ds = load_dataset(a.path()).unwrap();
        let expect = generate_sequences(3, &cfg, &t, 10).unwrap();
        assert_eq!(ds.sequences, expect);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tcsq");
        fs::write(&p, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_sequence(&p, "x"), Err(SynthError::BadMagic(_))));
        fs::write(&p, b"TCSQ\x01\x00\x00\x00\x05\x00").unwrap();
        assert!(matches!(read_sequence(&p, "x"), Err(SynthError::Corrupt(_))));
    }
}
