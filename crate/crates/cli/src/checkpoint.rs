//! Versioned binary checkpoints.
//!
//! Layout (integers little-endian):
//!
//! ```text
//! magic "L2NNNCKP" | u32 version | u32 len + architecture text
//! u8 weight mode | u8 stop_bound_grad | u64 epoch
//! u32 count, then per blob: u32 len + name | u8 dtype | u32 ndim | u64 dims... | f64 payload
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Model parameters come first, followed by training-state blobs whose names
//! start with `opt.` (momentum buffers) or `loss.` (`u`, `v`).

use std::path::Path;

use sha2::{Digest, Sha256};

use l2nnn::layers::WeightMode;
use l2nnn::model::{Model, ModelSpec, Param};
use l2nnn::train::Momentum;
use l2nnn::Tensor;

pub const MAGIC: &[u8; 8] = b"L2NNNCKP";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint content hash mismatch")]
    HashMismatch,
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match its architecture: {0}")]
    Architecture(String),
}

/// Loss multipliers carried across resumed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossState {
    pub u: Vec<f64>,
    pub v: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: u64,
    pub momentum: Option<Momentum>,
    pub loss: Option<LossState>,
}

impl Checkpoint {
    pub fn of_model(model: Model) -> Self {
        Self {
            model,
            epoch: 0,
            momentum: None,
            loss: None,
        }
    }
}

fn mode_tag(m: WeightMode) -> u8 {
    match m {
        WeightMode::Rescale => 0,
        WeightMode::Penalty => 1,
        WeightMode::Free => 2,
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn blob(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.0.push(DTYPE_F64);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.str(&ck.model.spec().to_string());
    w.0.push(mode_tag(ck.model.mode));
    w.0.push(u8::from(ck.model.stop_bound_grad));
    w.u64(ck.epoch);

    let mut blobs: Vec<(String, Tensor)> = ck.model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    if let Some(m) = &ck.momentum {
        for (i, v) in m.velocity.iter().enumerate() {
            blobs.push((format!("opt.{i}"), v.clone()));
        }
    }
    if let Some(l) = &ck.loss {
        blobs.push(("loss.u".into(), Tensor::vector(l.u.clone())));
        blobs.push(("loss.v".into(), Tensor::scalar(l.v)));
    }
    w.u32(blobs.len() as u32);
    for (name, t) in &blobs {
        w.blob(name, t);
    }
    let hash = Sha256::digest(&w.0);
    w.0.extend_from_slice(&hash);
    w.0
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.b.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Corrupt("non-UTF-8 text".into()))
    }

    fn blob(&mut self) -> Result<(String, Tensor), CheckpointError> {
        let name = self.str()?;
        if self.u8()? != DTYPE_F64 {
            return Err(CheckpointError::Corrupt(format!("blob {name}: unknown dtype")));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(format!("blob {name}: {e}")))?;
        Ok((name, t))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(CheckpointError::Truncated);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let (body, hash) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != hash {
        return Err(CheckpointError::HashMismatch);
    }
    let mut r = Reader { b: body, at: 12 };
    let arch = r.str()?;
    let spec: ModelSpec = arch.parse().map_err(|e| CheckpointError::Architecture(format!("{e}")))?;
    let mode = match r.u8()? {
        0 => WeightMode::Rescale,
        1 => WeightMode::Penalty,
        2 => WeightMode::Free,
        t => return Err(CheckpointError::Corrupt(format!("weight mode tag {t}"))),
    };
    let stop_bound_grad = r.u8()? != 0;
    let epoch = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = Vec::new();
    let mut velocity = Vec::new();
    let mut u = None;
    let mut v = None;
    for _ in 0..count {
        let (name, t) = r.blob()?;
        if name.starts_with("opt.") {
            velocity.push(t);
        } else if name == "loss.u" {
            u = Some(t.into_data());
        } else if name == "loss.v" {
            v = Some(t.item());
        } else {
            params.push(Param { name, value: t });
        }
    }
    if r.at != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    let mut model = Model::from_params(spec, mode, params).map_err(|e| CheckpointError::Architecture(e.to_string()))?;
    model.stop_bound_grad = stop_bound_grad;
    Ok(Checkpoint {
        model,
        epoch,
        momentum: (!velocity.is_empty()).then_some(Momentum { velocity }),
        loss: match (u, v) {
            (Some(u), Some(v)) => Some(LossState { u, v }),
            _ => None,
        },
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode(ck)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
