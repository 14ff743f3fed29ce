//! `.eem` container: magic, manifest length, JSON manifest, then 64-byte
//! aligned little-endian `f32` arrays. See `docs/formats.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const MAGIC: [u8; 4] = *b"EEM\x01";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Rounds to `f32`.
    pub fn from_mat(m: &Mat) -> Self {
        Self {
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| v as f32).collect())
    }

    /// Views the array as a matrix; rank-1 arrays become one row, higher
    /// ranks fold trailing axes into columns.
    pub fn to_mat(&self) -> Result<Mat> {
        let (r, c) = match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        Mat::new(r, c, self.data.iter().map(|&v| v as f64).collect())
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub skeleton_id: String,
    pub fps: f64,
    pub n_frames: usize,
    pub payload_bytes: usize,
    pub arrays: BTreeMap<String, ArrayEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
}

/// In-memory contents of one `.eem` file.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub skeleton_id: String,
    pub fps: f64,
    pub n_frames: usize,
    pub arrays: BTreeMap<String, Array>,
    pub meta: BTreeMap<String, String>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(skeleton_id: impl Into<String>, fps: f64, n_frames: usize) -> Self {
        Self {
            skeleton_id: skeleton_id.into(),
            fps,
            n_frames,
            ..Default::default()
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    pub fn insert_mat(&mut self, name: impl Into<String>, m: &Mat) {
        self.insert(name, Array::from_mat(m));
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing array '{name}'")))
    }

    pub fn mat(&self, name: &str) -> Result<Mat> {
        self.get(name)?.to_mat()
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("missing meta key '{key}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0;
        for (name, a) in &self.arrays {
            entries.insert(
                name.clone(),
                ArrayEntry {
                    dtype: "f32".into(),
                    shape: a.shape.clone(),
                    offset,
                },
            );
            offset = align_up(offset + a.byte_len());
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            skeleton_id: self.skeleton_id.clone(),
            fps: self.fps,
            n_frames: self.n_frames,
            payload_bytes: offset,
            arrays: entries,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        let header = MAGIC.len() + 4 + json.len();
        let payload_start = align_up(header);
        let mut out = Vec::with_capacity(payload_start + offset);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.resize(payload_start, 0);
        for (name, a) in &self.arrays {
            let start = payload_start + manifest.arrays[name].offset;
            out.resize(start, 0);
            for v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(payload_start + offset, 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(Error::Truncated("file shorter than header".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format("not an .eem container (bad magic)".into()));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = 8 + len;
        if bytes.len() < header {
            return Err(Error::Truncated(format!(
                "manifest declares {len} bytes, file has {}",
                bytes.len() - 8
            )));
        }
        let value: serde_json::Value =
            serde_json::from_slice(&bytes[8..header]).map_err(|e| Error::Format(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Format("manifest lacks format_version".into()))?;
        if version != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: FORMAT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::Format(e.to_string()))?;
        let payload_start = align_up(header);
        let available = bytes.len().saturating_sub(payload_start);
        if available < manifest.payload_bytes {
            return Err(Error::Truncated(format!(
                "payload declares {} bytes, file has {available}",
                manifest.payload_bytes
            )));
        }
        if available > manifest.payload_bytes {
            return Err(Error::SizeMismatch(format!(
                "{} trailing bytes after payload",
                available - manifest.payload_bytes
            )));
        }
        let payload = &bytes[payload_start..];

        let mut spans: Vec<(usize, usize, &str)> = Vec::new();
        let mut arrays = BTreeMap::new();
        for (name, e) in &manifest.arrays {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("array '{name}' has dtype {}", e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let end = e.offset.checked_add(count * 4);
            match end {
                Some(end) if e.offset % ALIGN == 0 && end <= manifest.payload_bytes => {
                    spans.push((e.offset, end, name));
                    let data = payload[e.offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    arrays.insert(name.clone(), Array::new(e.shape.clone(), data)?);
                }
                _ => {
                    return Err(Error::SizeMismatch(format!(
                        "array '{name}' at offset {} with shape {:?} does not fit a {}-byte payload",
                        e.offset, e.shape, manifest.payload_bytes
                    )))
                }
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::SizeMismatch(format!(
                    "arrays '{}' and '{}' overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok(Self {
            skeleton_id: manifest.skeleton_id,
            fps: manifest.fps,
            n_frames: manifest.n_frames,
            arrays,
            meta: manifest.meta,
        })
    }
}

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Contract(format!("'{}' has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_container(container: &Container, path: &Path) -> Result<()> {
    write_atomic(path, &container.to_bytes()?)
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Container::from_bytes(&bytes)
}
