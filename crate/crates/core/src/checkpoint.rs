//! Single-file model archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "KDGCKPT\0"
//! u32    format version (1)
//! u32    header length, then that many bytes of UTF-8 JSON
//! u32    tensor count
//! per tensor:
//!   u32 name length, UTF-8 name
//!   u32 rank, rank x u64 dims
//!   prod(dims) x f32
//! ```
//!
//! The JSON header carries the architecture spec and free-form metadata.
//! Loading reproduces every value bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::{Discriminator, Generator, ModelSpec, Role, Segmenter};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"KDGCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub spec: Option<ModelSpec>,
    pub role: Option<Role>,
    #[serde(default)]
    pub meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 4 * self.params.numel() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != MAGIC {
            return Err("not a checkpoint archive".into());
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = read_u32(&mut r)? as usize;
        let header_bytes = take(&mut r, hlen)?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| e.to_string())?;
        let count = read_u32(&mut r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, nlen)?)
                .map_err(|e| e.to_string())?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| e.to_string())?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(&mut r, n.checked_mul(4).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?;
            params.push(name, t);
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { header, params })
    }

    /// Writes through a temporary file so an interrupted save never clobbers
    /// an existing archive.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Load {
            path: path.to_path_buf(),
            reason,
        })
    }
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| e.to_string())?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("truncated archive".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn load_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Generator<f32> {
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        Checkpoint {
            header: CheckpointHeader {
                spec: Some(ModelSpec::Generator(self.spec().clone())),
                role: Some(self.role()),
                meta,
            },
            params: self.params().clone(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        match (ckpt.header.spec, ckpt.header.role) {
            (Some(ModelSpec::Generator(spec)), Some(role)) => {
                Generator::from_params(&spec, role, ckpt.params).map_err(|e| load_error(path, e.to_string()))
            }
            _ => Err(load_error(path, "archive does not hold a generator")),
        }
    }
}

impl Discriminator<f32> {
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        Checkpoint {
            header: CheckpointHeader {
                spec: Some(ModelSpec::Discriminator(self.spec().clone())),
                role: Some(self.role()),
                meta,
            },
            params: self.params().clone(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        match (ckpt.header.spec, ckpt.header.role) {
            (Some(ModelSpec::Discriminator(spec)), Some(role)) => {
                Discriminator::from_params(&spec, role, ckpt.params).map_err(|e| load_error(path, e.to_string()))
            }
            _ => Err(load_error(path, "archive does not hold a discriminator")),
        }
    }
}

impl Segmenter<f32> {
    pub fn save(&self, path: &Path, meta: Value) -> Result<()> {
        Checkpoint {
            header: CheckpointHeader {
                spec: Some(ModelSpec::Segmenter(self.spec().clone())),
                role: Some(Role::Segmenter),
                meta,
            },
            params: self.params().clone(),
        }
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        match ckpt.header.spec {
            Some(ModelSpec::Segmenter(spec)) => {
                Segmenter::from_params(&spec, ckpt.params).map_err(|e| load_error(path, e.to_string()))
            }
            _ => Err(load_error(path, "archive does not hold a segmenter")),
        }
    }
}
