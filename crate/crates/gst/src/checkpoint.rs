//! Binary checkpoint format.
//!
//! Layout: the 8-byte magic `GSTCKPT\0`, a little-endian `u32` format
//! version, a `u64` header length, the JSON header, then the payload of
//! little-endian `f32` values. The header carries the run kind, the config
//! snapshot, step and seed counters, resumable loop state, and a tensor
//! manifest listing each tensor's name, shape and byte offset into the
//! payload. Optimizer moments are stored as ordinary tensors named
//! `optim.m.<param>` and `optim.v.<param>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GstError, Result};
use crate::nn::{AdamW, AdamWConfig, Parameters, Real};

pub const MAGIC: &[u8; 8] = b"GSTCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    step: u64,
    seed: u64,
    optimizer_step: u64,
    optimizer: Option<AdamWConfig>,
    state: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `image_tokenizer`, `camera_tokenizer` or `gst`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    pub optimizer_step: u64,
    pub optimizer: Option<AdamWConfig>,
    /// Loop state needed for an exact resume (metric windows, usage
    /// counters, log history).
    pub state: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            kind: kind.into(),
            config,
            step: 0,
            seed,
            optimizer_step: 0,
            optimizer: None,
            state: serde_json::Value::Null,
            tensors: Vec::new(),
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Stores every parameter of `model`, and the optimizer moments when
    /// given.
    pub fn store_model<T: Real, P: Parameters<T> + ?Sized>(&mut self, model: &P, opt: Option<&AdamW<T>>) {
        let mut names = Vec::new();
        model.visit(&mut |name, p| {
            names.push((name.to_string(), p.shape.clone()));
            self.tensors.push(Tensor {
                name: name.to_string(),
                shape: p.shape.clone(),
                data: p.value.iter().map(|v| v.as_f64() as f32).collect(),
            });
        });
        if let Some(opt) = opt {
            self.optimizer_step = opt.step;
            self.optimizer = Some(opt.config);
            for (prefix, bufs) in [("optim.m.", &opt.m), ("optim.v.", &opt.v)] {
                for ((name, shape), buf) in names.iter().zip(bufs.iter()) {
                    self.tensors.push(Tensor {
                        name: format!("{prefix}{name}"),
                        shape: shape.clone(),
                        data: buf.iter().map(|v| v.as_f64() as f32).collect(),
                    });
                }
            }
        }
    }

    /// Copies stored parameters into `model`, which must have the same
    /// tensor names and shapes.
    pub fn load_model<T: Real, P: Parameters<T> + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut err = None;
        model.visit_mut(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.tensor(name) {
                Some(t) if t.shape == p.shape => {
                    p.value = t.data.iter().map(|&v| T::from_f(v as f64)).collect();
                }
                Some(t) => err = Some(format!("tensor {name}: shape {:?} but model expects {:?}", t.shape, p.shape)),
                None => err = Some(format!("tensor {name} missing from checkpoint")),
            }
        });
        err.map_or(Ok(()), |e| Err(GstError::Format(e)))
    }

    /// Rebuilds optimizer state for `model` from the stored moments.
    pub fn load_optimizer<T: Real, P: Parameters<T> + ?Sized>(&self, model: &P) -> Result<AdamW<T>> {
        let config =
            self.optimizer.ok_or_else(|| GstError::Format("checkpoint holds no optimizer state".into()))?;
        let mut opt = AdamW::new(config);
        opt.step = self.optimizer_step;
        let mut err = None;
        model.visit(&mut |name, p| {
            for (prefix, dst) in [("optim.m.", &mut opt.m), ("optim.v.", &mut opt.v)] {
                match self.tensor(&format!("{prefix}{name}")) {
                    Some(t) if t.data.len() == p.len() => {
                        dst.push(t.data.iter().map(|&v| T::from_f(v as f64)).collect())
                    }
                    _ => err = Some(format!("optimizer moment {prefix}{name} missing or mis-shaped")),
                }
            }
        });
        err.map_or(Ok(opt), |e| Err(GstError::Format(e)))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|t| {
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset };
                offset += 4 * t.data.len() as u64;
                e
            })
            .collect();
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            step: self.step,
            seed: self.seed,
            optimizer_step: self.optimizer_step,
            optimizer: self.optimizer,
            state: self.state.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| GstError::Format(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload.get(start..start + 4 * n).ok_or_else(|| bad(&format!("tensor {} out of range", e.name)))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(Tensor { name: e.name.clone(), shape: e.shape.clone(), data });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            step: header.step,
            seed: header.seed,
            optimizer_step: header.optimizer_step,
            optimizer: header.optimizer,
            state: header.state,
            tensors,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Human-readable summary used by `inspect-checkpoint`.
    pub fn summary(&self) -> String {
        let params: usize =
            self.tensors.iter().filter(|t| !t.name.starts_with("optim.")).map(|t| t.data.len()).sum();
        let mut s = format!(
            "kind {}\nformat_version {}\nstep {}\nseed {}\noptimizer_step {}\nparameters {}\ntensors {}\n",
            self.kind,
            FORMAT_VERSION,
            self.step,
            self.seed,
            self.optimizer_step,
            params,
            self.tensors.len()
        );
        for t in &self.tensors {
            s.push_str(&format!("  {} {:?}\n", t.name, t.shape));
        }
        s
    }
}
