//! On-disk dataset: `manifest.toml` plus, per sequence, `NN_seq.ramc`
//! (radar cube) and `NN_seq.ann` (annotations).
//!
//! `.ramc` layout, little-endian: magic `RAMC`, u16 version, five u32
//! extents `(2, T, C, H, W)`, then `2*T*C*H*W` f32 values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::confmap::{format_annotations, read_annotations, Annotation};
use crate::error::{config_err, CoreError, Result};
use crate::synth::{self, Scenario, SynthConfig};

pub const CUBE_MAGIC: &[u8; 4] = b"RAMC";
pub const CUBE_VERSION: u16 = 1;
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.toml";
const HEADER_LEN: usize = 4 + 2 + 5 * 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceMeta {
    pub name: String,
    pub frames: u32,
    pub scenario: Scenario,
    pub split: Split,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub chirps: u32,
    pub height: u32,
    pub width: u32,
    pub total_frames: u64,
    pub sequences: Vec<SequenceMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub meta: SequenceMeta,
    /// `[2, T, C, H, W]` row-major.
    pub cube: Vec<f32>,
    pub annotations: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    /// Frame-major view helpers need the cube geometry.
    pub fn frame_shape(&self) -> [usize; 3] {
        let m = &self.manifest;
        [m.chirps as usize, m.height as usize, m.width as usize]
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sequence> {
        self.sequences.iter().filter(move |s| s.meta.split == split)
    }
}

pub fn cube_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ramc"))
}

pub fn ann_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.ann"))
}

pub fn encode_cube(extents: [u32; 5], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    for e in extents {
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a cube file image; errors carry the byte offset of the problem.
pub fn decode_cube(bytes: &[u8], file: &Path) -> Result<([u32; 5], Vec<f32>)> {
    if bytes.len() < HEADER_LEN {
        return Err(CoreError::format(file, bytes.len() as u64, format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != CUBE_MAGIC {
        return Err(CoreError::format(file, 0, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CUBE_VERSION {
        return Err(CoreError::format(file, 4, format!("unsupported version {version}")));
    }
    let mut extents = [0u32; 5];
    for (i, e) in extents.iter_mut().enumerate() {
        let o = 6 + 4 * i;
        *e = u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if *e == 0 {
            return Err(CoreError::format(file, o as u64, format!("zero extent in axis {i}")));
        }
    }
    if extents[0] != 2 {
        return Err(CoreError::format(file, 6, format!("first extent must be 2, got {}", extents[0])));
    }
    let n = extents.iter().try_fold(1usize, |acc, &e| acc.checked_mul(e as usize));
    let n = n.ok_or_else(|| CoreError::format(file, 6, "extent product overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(CoreError::format(
            file,
            (HEADER_LEN + payload.len().min(4 * n)) as u64,
            format!("payload holds {} bytes, extents {extents:?} need {}", payload.len(), 4 * n),
        ));
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((extents, data))
}

/// Writes all sequences plus the manifest; returns the manifest.
pub fn write_dataset(dir: &Path, sequences: &[Sequence], frame_shape: [usize; 3]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let [c, h, w] = frame_shape;
    for s in sequences {
        let t = s.meta.frames as usize;
        if s.cube.len() != 2 * t * c * h * w {
            return Err(config_err!("sequence {} cube size does not match its geometry", s.meta.name));
        }
        let path = cube_path(dir, &s.meta.name);
        let bytes = encode_cube([2, t as u32, c as u32, h as u32, w as u32], &s.cube);
        fs::write(&path, bytes).map_err(|e| CoreError::io(&path, e))?;
        let path = ann_path(dir, &s.meta.name);
        fs::write(&path, format_annotations(&s.annotations)).map_err(|e| CoreError::io(&path, e))?;
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        chirps: c as u32,
        height: h as u32,
        width: w as u32,
        total_frames: sequences.iter().map(|s| s.meta.frames as u64).sum(),
        sequences: sequences.iter().map(|s| s.meta.clone()).collect(),
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let m: DatasetManifest = toml::from_str(&text).map_err(|e| {
        let offset = e.span().map(|s| s.start as u64).unwrap_or(0);
        CoreError::format(&path, offset, e.message().to_string())
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(CoreError::format(&path, 0, format!("unsupported format_version {}", m.format_version)));
    }
    let sum: u64 = m.sequences.iter().map(|s| s.frames as u64).sum();
    if sum != m.total_frames {
        return Err(CoreError::format(&path, 0, format!("total_frames {} != sum of sequences {sum}", m.total_frames)));
    }
    Ok(m)
}

pub fn read_sequence(dir: &Path, manifest: &DatasetManifest, meta: &SequenceMeta) -> Result<Sequence> {
    let path = cube_path(dir, &meta.name);
    let bytes = fs::read(&path).map_err(|e| CoreError::io(&path, e))?;
    let (ext, cube) = decode_cube(&bytes, &path)?;
    let want = [2, meta.frames, manifest.chirps, manifest.height, manifest.width];
    if ext != want {
        return Err(CoreError::format(&path, 6, format!("extents {ext:?} disagree with manifest {want:?}")));
    }
    let apath = ann_path(dir, &meta.name);
    let annotations = read_annotations(&apath)?;
    for a in &annotations {
        if a.frame_id >= meta.frames || a.range_bin >= manifest.height as usize || a.azimuth_bin >= manifest.width as usize
        {
            return Err(CoreError::format(&apath, 0, format!("annotation {a:?} outside the sequence grid")));
        }
    }
    Ok(Sequence { meta: meta.clone(), cube, annotations })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let sequences = manifest.sequences.iter().map(|m| read_sequence(dir, &manifest, m)).collect::<Result<_>>()?;
    Ok(Dataset { manifest, sequences })
}

/// Renders `count` sequences cycling through the scenarios; every fifth
/// sequence is held out for validation.
pub fn synthesize(cfg: &SynthConfig, seed: u64, count: usize) -> Result<Vec<Sequence>> {
    (0..count)
        .map(|i| {
            let scenario = Scenario::ALL[i % Scenario::ALL.len()];
            let s = synth::sequence_seed(seed, i);
            let scene = synth::generate_scene(s, scenario, cfg)?;
            let (cube, annotations) = synth::render_ramap(&scene);
            Ok(Sequence {
                meta: SequenceMeta {
                    name: format!("{i:02}_seq"),
                    frames: cfg.frames as u32,
                    scenario,
                    split: if i % 5 == 4 { Split::Val } else { Split::Train },
                    seed: s,
                },
                cube,
                annotations,
            })
        })
        .collect()
}
