//! `.skel` and `.rig` text formats (TOML with a version field).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitting::CameraView;
use crate::se3::{Skeleton, Vec3};

use super::container::write_atomic;

pub const SKEL_VERSION: u32 = 1;
pub const RIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointEntry {
    name: String,
    /// Absent for the root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<usize>,
    offset: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkelFile {
    version: u32,
    id: String,
    head: usize,
    pelvis: usize,
    feet: Vec<usize>,
    hands: Vec<usize>,
    joints: Vec<JointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    version: u32,
    cameras: Vec<CameraView>,
}

fn check_version(found: u32, expected: u32) -> Result<()> {
    if found != expected {
        return Err(Error::Version { found, expected });
    }
    Ok(())
}

/// Reads the `version` key before full parsing so a future file reports a
/// version error rather than an unknown-field error.
fn peek_version(text: &str) -> Result<u32> {
    let value: toml::Table = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    value
        .get("version")
        .and_then(|v| v.as_integer())
        .map(|v| v as u32)
        .ok_or_else(|| Error::Format("missing integer 'version'".into()))
}

pub fn skeleton_to_toml(skel: &Skeleton) -> Result<String> {
    let file = SkelFile {
        version: SKEL_VERSION,
        id: skel.id.clone(),
        head: skel.head_index,
        pelvis: skel.pelvis_index,
        feet: skel.foot_indices.clone(),
        hands: skel.hand_indices.clone(),
        joints: (0..skel.num_joints())
            .map(|j| JointEntry {
                name: skel.joint_names[j].clone(),
                parent: skel.parents[j],
                offset: [
                    skel.bind_offsets[j].x,
                    skel.bind_offsets[j].y,
                    skel.bind_offsets[j].z,
                ],
            })
            .collect(),
    };
    toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))
}

pub fn skeleton_from_toml(text: &str) -> Result<Skeleton> {
    check_version(peek_version(text)?, SKEL_VERSION)?;
    let f: SkelFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    Skeleton::new(
        f.id,
        f.joints.iter().map(|j| j.name.clone()).collect(),
        f.joints.iter().map(|j| j.parent).collect(),
        f.joints.iter().map(|j| Vec3::from(j.offset)).collect(),
        f.head,
        f.pelvis,
        f.feet,
        f.hands,
    )
}

pub fn write_skeleton(skel: &Skeleton, path: &Path) -> Result<()> {
    write_atomic(path, skeleton_to_toml(skel)?.as_bytes())
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton> {
    skeleton_from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn rig_to_toml(cameras: &[CameraView]) -> Result<String> {
    toml::to_string(&RigFile {
        version: RIG_VERSION,
        cameras: cameras.to_vec(),
    })
    .map_err(|e| Error::Format(e.to_string()))
}

pub fn rig_from_toml(text: &str) -> Result<Vec<CameraView>> {
    check_version(peek_version(text)?, RIG_VERSION)?;
    let f: RigFile = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
    for c in &f.cameras {
        c.validate()?;
    }
    Ok(f.cameras)
}

pub fn write_rig(cameras: &[CameraView], path: &Path) -> Result<()> {
    write_atomic(path, rig_to_toml(cameras)?.as_bytes())
}

pub fn read_rig(path: &Path) -> Result<Vec<CameraView>> {
    rig_from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
