//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "OSPHCKPT"
//! version    u32      1
//! dtype      u32      0 = f32, 1 = f64
//! epoch      u64      next epoch to run
//! adam_step  u64
//! meta       u32 length + UTF-8 JSON {"model", "norm", "train"}
//! arrays     u32 count, then per array:
//!              u32 name length, name, u32 rank, u64 per dim, elements
//! crc32      u32 over every preceding byte
//! ```
//!
//! Arrays are `param/<name>`, `bn/<layer>.mean`, `bn/<layer>.var` and, when
//! optimizer state is stored, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use orthosphere_core::autodiff::BatchNormStats;
use orthosphere_core::data::NormStats;
use orthosphere_core::model::{Model, ModelConfig, Param};
use orthosphere_core::optim::AdamState;
use orthosphere_core::scalar::DType;
use orthosphere_core::train::TrainConfig;
use orthosphere_core::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"OSPHCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found} values, expected {expected}")]
    DType { found: &'static str, expected: &'static str },
    #[error("checkpoint checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] orthosphere_core::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

/// Model, optional optimizer state and the run position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: Model<T>,
    pub adam: Option<AdamState<T>>,
    pub epoch: usize,
    pub norm: Option<NormStats>,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    norm: Option<NormStats>,
    train: Option<TrainConfig>,
}

fn dtype_code(d: DType) -> u32 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
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
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn array<T: Real>(&mut self, name: &str, shape: &[usize], data: &[T]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for &v in data {
            match T::DTYPE {
                DType::F32 => self.0.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes()),
                DType::F64 => self.0.extend_from_slice(&v.to_f64_lossy().to_le_bytes()),
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end =
            self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn array<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| CheckpointError::Malformed("array name is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let size = T::DTYPE.size();
        let raw = self.take(n.checked_mul(size).ok_or(CheckpointError::Truncated(self.pos))?)?;
        let data = raw
            .chunks_exact(size)
            .map(|c| match T::DTYPE {
                DType::F32 => T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                DType::F64 => T::of(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        Ok((name, Tensor::new(&shape, data)?))
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(dtype_code(T::DTYPE));
        w.u64(self.epoch as u64);
        w.u64(self.adam.as_ref().map_or(0, |a| a.step));
        let meta = Meta { model: self.model.config().clone(), norm: self.norm.clone(), train: self.train.clone() };
        w.bytes(&serde_json::to_vec(&meta)?);

        let params = self.model.params();
        let layers = self.model.config().layer_names();
        let count = params.len() + 2 * layers.len() + self.adam.as_ref().map_or(0, |_| 2 * params.len());
        w.u32(count as u32);
        for p in params {
            w.array(&format!("param/{}", p.name), p.value.shape(), p.value.data());
        }
        for (layer, s) in layers.iter().zip(self.model.bn_stats()) {
            w.array(&format!("bn/{layer}.mean"), &[s.mean.len()], &s.mean);
            w.array(&format!("bn/{layer}.var"), &[s.var.len()], &s.var);
        }
        if let Some(adam) = &self.adam {
            for (p, m) in params.iter().zip(&adam.m) {
                w.array(&format!("adam.m/{}", p.name), &[m.len()], m);
            }
            for (p, v) in params.iter().zip(&adam.v) {
                w.array(&format!("adam.v/{}", p.name), &[v.len()], v);
            }
        }
        let crc = crc32fast::hash(&w.0);
        w.u32(crc);
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let found = match r.u32()? {
            0 => DType::F32,
            1 => DType::F64,
            c => return Err(CheckpointError::Malformed(format!("unknown dtype code {c}"))),
        };
        if found != T::DTYPE {
            return Err(CheckpointError::DType { found: dtype_name(found), expected: dtype_name(T::DTYPE) });
        }
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let meta: Meta = serde_json::from_slice(r.bytes()?)?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            arrays.push(r.array::<T>()?);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }

        let mut it = arrays.into_iter().peekable();
        let mut params = Vec::new();
        while let Some((name, _)) = it.peek() {
            let Some(stripped) = name.strip_prefix("param/") else { break };
            let name = stripped.to_string();
            let (_, value) = it.next().unwrap();
            params.push(Param { name, value });
        }
        let layers = meta.model.layer_names();
        let mut bn = Vec::with_capacity(layers.len());
        for layer in &layers {
            let mut next = |suffix: &str| -> Result<Vec<T>> {
                let want = format!("bn/{layer}.{suffix}");
                match it.next() {
                    Some((name, t)) if name == want => Ok(t.into_data()),
                    other => Err(CheckpointError::Malformed(format!(
                        "expected array {want}, found {:?}",
                        other.map(|(n, _)| n)
                    ))),
                }
            };
            let mean = next("mean")?;
            let var = next("var")?;
            bn.push(BatchNormStats { mean, var });
        }
        let model = Model::from_parts(meta.model, params, bn)?;
        let rest: Vec<(String, Tensor<T>)> = it.collect();
        let adam = if rest.is_empty() {
            None
        } else {
            let n = model.params().len();
            if rest.len() != 2 * n {
                return Err(CheckpointError::Malformed(format!("{} optimizer arrays for {n} parameters", rest.len())));
            }
            let mut m = Vec::with_capacity(n);
            let mut v = Vec::with_capacity(n);
            for (i, (name, t)) in rest.into_iter().enumerate() {
                let (prefix, dst) = if i < n { ("adam.m/", &mut m) } else { ("adam.v/", &mut v) };
                let p = &model.params()[i % n];
                if name != format!("{prefix}{}", p.name) || t.numel() != p.value.numel() {
                    return Err(CheckpointError::Malformed(format!("unexpected optimizer array {name}")));
                }
                dst.push(t.into_data());
            }
            Some(AdamState { m, v, step })
        };
        Ok(Checkpoint { model, adam, epoch, norm: meta.norm, train: meta.train })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes)
    }
}
