//! Trajectory files.
//!
//! Layout, all little-endian:
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 4            | magic `RGF1`                                         |
//! | 4            | `u32` length `H` of the JSON header                  |
//! | H            | JSON header: `frames`, `dt`, per-object `vertices`, `physics`, `shape`, optional `frame_indices` and `step_size` |
//! | 12·ΣNv       | `f32` reference vertices, object by object, xyz      |
//! | 48·F·M       | `f32` `[R | t]` rows (3×4 row-major) per frame per object |

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::RigidTransform;
use crate::scene::Physics;

use super::{ObjectRecord, SceneConfig, Shape, Trajectory};

const MAGIC: &[u8; 4] = b"RGF1";

#[derive(Debug, thiserror::Error)]
pub enum TrajectoryError {
    #[error("trajectory io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic at byte 0: expected RGF1, found {0:?}")]
    Magic(Vec<u8>),
    #[error("truncated {section} at byte {offset}: need {needed} more bytes, {available} available")]
    Truncated {
        section: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("malformed header at byte 8: {0}")]
    Header(String),
    #[error("{0} trailing bytes after the transform section")]
    Trailing(usize),
}

#[derive(Serialize, Deserialize)]
struct ObjectHeader {
    vertices: usize,
    physics: Physics,
    shape: Shape,
}

#[derive(Serialize, Deserialize)]
struct Header {
    frames: usize,
    dt: f64,
    objects: Vec<ObjectHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_size: Option<usize>,
}

pub fn trajectory_to_bytes(t: &Trajectory) -> Vec<u8> {
    let header = Header {
        frames: t.frames(),
        dt: t.dt,
        objects: t
            .objects
            .iter()
            .map(|o| ObjectHeader {
                vertices: o.reference.len(),
                physics: o.physics,
                shape: o.shape,
            })
            .collect(),
        frame_indices: t.frame_indices.clone(),
        step_size: t.step_size,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for o in &t.objects {
        for p in &o.reference {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    for frame in &t.transforms {
        for tf in frame {
            for v in tf.to_rt_rows() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], TrajectoryError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(TrajectoryError::Truncated {
                section,
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats(&mut self, n: usize, section: &'static str) -> Result<Vec<f64>, TrajectoryError> {
        let b = self.take(n * 4, section)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn trajectory_from_bytes(bytes: &[u8]) -> Result<Trajectory, TrajectoryError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(TrajectoryError::Magic(magic.to_vec()));
    }
    let len = r.take(4, "header length")?;
    let len = u32::from_le_bytes([len[0], len[1], len[2], len[3]]) as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?).map_err(|e| TrajectoryError::Header(e.to_string()))?;
    if let Some(f) = &header.frame_indices {
        if f.len() != header.frames {
            return Err(TrajectoryError::Header(format!("{} frame indices for {} frames", f.len(), header.frames)));
        }
    }
    let mut objects = Vec::with_capacity(header.objects.len());
    for o in &header.objects {
        let v = r.floats(o.vertices * 3, "reference vertices")?;
        objects.push(ObjectRecord {
            shape: o.shape,
            physics: o.physics,
            reference: v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        });
    }
    let mut transforms = Vec::with_capacity(header.frames);
    for _ in 0..header.frames {
        let v = r.floats(12 * objects.len(), "transforms")?;
        transforms.push(v.chunks_exact(12).map(RigidTransform::from_rt_rows).collect());
    }
    if r.pos != bytes.len() {
        return Err(TrajectoryError::Trailing(bytes.len() - r.pos));
    }
    Ok(Trajectory {
        dt: header.dt,
        objects,
        transforms,
        frame_indices: header.frame_indices,
        step_size: header.step_size,
    })
}

pub fn write_trajectory(path: &Path, t: &Trajectory) -> Result<(), TrajectoryError> {
    std::fs::write(path, trajectory_to_bytes(t))?;
    Ok(())
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, TrajectoryError> {
    trajectory_from_bytes(&std::fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub seed: u64,
}

/// Dataset index written next to the trajectory files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SceneConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }
}

pub fn write_manifest(path: &Path, m: &Manifest) -> Result<(), TrajectoryError> {
    let s = serde_json::to_string_pretty(m).map_err(|e| TrajectoryError::Header(e.to_string()))?;
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, TrajectoryError> {
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| TrajectoryError::Header(e.to_string()))
}
