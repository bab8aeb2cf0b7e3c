//! Binary checkpoints.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DKPC" u32 version
//! u32 config_len, config text (`key = value` lines)
//! u32 tensor_count, then per tensor:
//!     u32 name_len, name, u32 rank, u32 dims[rank], u8 storage
//!     storage 0: f32 values[prod(dims)]
//!     storage 1: u64 nnz, (u32 row, u32 col, f32 value)[nnz]
//! optimizer: u8 kind (0 sgd, 1 adam), f64 lr, f64 a, f64 b, f64 eps,
//!     u8 has_clip, f64 clip, u32 slot_count, then per slot:
//!     u32 name_len, name, u64 steps, u64 m_len, f32 m[m_len], u64 v_len, f32 v[v_len]
//! rng: u8 seed[32], u64 stream, u128 word_pos
//! state: u64 step, u32 epoch, f64 sparsity, f64 keep_prob
//! ```
//!
//! Sgd stores `a = momentum`, `b = eps = 0`; Adam stores `a = β₁`, `b = β₂`.
//! Parameters are narrowed to 32-bit floats, so save→load→save is
//! byte-identical while a loaded model differs from the saved one by f32
//! rounding.

use std::fs;
use std::path::Path;

use dkpkit_core::config::TrainConfig;
use dkpkit_core::nn::{GateLayer, LmModel, Optimizer, OptimizerKind, OptimizerState, Parameterized, SlotState};
use dkpkit_core::rng::{Rng, RngState};
use dkpkit_core::train::{build_model, TrainState};
use dkpkit_core::SparseOverlay;

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"DKPC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Vec<f32>),
    /// Active entries of a masked matrix in row-major order.
    Sparse(Vec<(u32, u32, f32)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub name: String,
    pub steps: u64,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerRecord {
    pub kind: OptimizerKind,
    pub clip: Option<f64>,
    pub slots: Vec<SlotRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<TensorRecord>,
    pub optimizer: OptimizerRecord,
    pub rng: RngState,
    pub state: TrainState,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}, expected {VERSION}")]
    Version(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

fn narrow(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, model: &LmModel, optimizer: &Optimizer, rng: &Rng, state: TrainState) -> Self {
        let tensors = model
            .params()
            .into_iter()
            .map(|p| {
                let dims = p.shape.iter().map(|&d| d as u32).collect();
                let payload = match p.mask {
                    None => Payload::Dense(narrow(p.values)),
                    Some(mask) => {
                        let cols = p.shape[1];
                        Payload::Sparse(
                            mask.iter()
                                .enumerate()
                                .filter(|(_, &m)| m)
                                .map(|(i, _)| ((i / cols) as u32, (i % cols) as u32, p.values[i] as f32))
                                .collect(),
                        )
                    }
                };
                TensorRecord { name: p.name, dims, payload }
            })
            .collect();
        let st = optimizer.state();
        let optimizer = OptimizerRecord {
            kind: st.kind,
            clip: st.clip_norm,
            slots: st
                .slots
                .iter()
                .map(|s| SlotRecord {
                    name: s.name.clone(),
                    steps: s.steps,
                    m: narrow(&s.m),
                    v: narrow(&s.v),
                })
                .collect(),
        };
        Self {
            config: config.to_text(),
            tensors,
            optimizer,
            rng: rng.state(),
            state,
        }
    }

    pub fn config(&self) -> AppResult<TrainConfig> {
        Ok(TrainConfig::parse(&self.config)?)
    }

    /// Rebuilds the model, optimizer and rng this checkpoint describes.
    pub fn restore(&self) -> AppResult<(TrainConfig, LmModel, Optimizer, Rng)> {
        let cfg = self.config()?;
        let vocab = self
            .tensors
            .iter()
            .find(|t| t.name == "embedding")
            .and_then(|t| t.dims.first())
            .ok_or_else(|| AppError::Config("checkpoint has no embedding tensor".into()))?;
        let mut model = build_model(&cfg, *vocab as usize, 1, &mut Rng::seed_from_u64(0))?.model;
        self.load_into(&mut model)?;
        let optimizer = Optimizer::from_state(OptimizerState {
            kind: self.optimizer.kind,
            clip_norm: self.optimizer.clip,
            slots: self
                .optimizer
                .slots
                .iter()
                .map(|s| SlotState {
                    name: s.name.clone(),
                    steps: s.steps,
                    m: widen(&s.m),
                    v: widen(&s.v),
                })
                .collect(),
        })?;
        Ok((cfg, model, optimizer, Rng::from_state(&self.rng)))
    }

    /// Overwrites `model`'s tensors, including overlay masks.
    pub fn load_into(&self, model: &mut LmModel) -> AppResult<()> {
        let by_name = |name: &str| self.tensors.iter().find(|t| t.name == name);
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let (name, target): (String, &mut SparseOverlay) = match &mut layer.gate {
                GateLayer::Doped(d) => (format!("lstm.{l}.gate.overlay"), d.overlay_mut()),
                GateLayer::Pruned(p) => (format!("lstm.{l}.gate.weight"), p.weights_mut()),
                _ => continue,
            };
            let rec = by_name(&name).ok_or_else(|| AppError::Config(format!("checkpoint lacks `{name}`")))?;
            let Payload::Sparse(triples) = &rec.payload else {
                return Err(AppError::Config(format!("`{name}` is stored dense")));
            };
            let (rows, cols) = target.shape();
            if rec.dims != [rows as u32, cols as u32] {
                return Err(AppError::Config(format!("`{name}` has shape {:?}, model wants {rows}x{cols}", rec.dims)));
            }
            let t: Vec<_> = triples.iter().map(|&(r, c, v)| (r as usize, c as usize, f64::from(v))).collect();
            *target = SparseOverlay::from_triples(rows, cols, &t)?;
        }
        let params = model.params_mut();
        if params.len() != self.tensors.len() {
            return Err(AppError::Config(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (p, rec) in params.into_iter().zip(&self.tensors) {
            let dims: Vec<u32> = p.shape.iter().map(|&d| d as u32).collect();
            if p.name != rec.name || dims != rec.dims {
                return Err(AppError::Config(format!(
                    "tensor mismatch: model `{}` {:?}, checkpoint `{}` {:?}",
                    p.name, dims, rec.name, rec.dims
                )));
            }
            if let Payload::Dense(v) = &rec.payload {
                if v.len() != p.values.len() {
                    return Err(AppError::Config(format!("`{}` payload length {}", rec.name, v.len())));
                }
                for (dst, &src) in p.values.iter_mut().zip(v) {
                    *dst = f64::from(src);
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        put_u32(&mut w, VERSION);
        put_str(&mut w, &self.config);
        put_u32(&mut w, self.tensors.len() as u32);
        for t in &self.tensors {
            put_str(&mut w, &t.name);
            put_u32(&mut w, t.dims.len() as u32);
            for &d in &t.dims {
                put_u32(&mut w, d);
            }
            match &t.payload {
                Payload::Dense(v) => {
                    w.push(0);
                    put_f32s(&mut w, v);
                }
                Payload::Sparse(triples) => {
                    w.push(1);
                    w.extend_from_slice(&(triples.len() as u64).to_le_bytes());
                    for &(r, c, v) in triples {
                        put_u32(&mut w, r);
                        put_u32(&mut w, c);
                        w.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        let o = &self.optimizer;
        let (kind, lr, a, b, eps) = match o.kind {
            OptimizerKind::Sgd { lr, momentum } => (0u8, lr, momentum, 0.0, 0.0),
            OptimizerKind::Adam { lr, beta1, beta2, eps } => (1u8, lr, beta1, beta2, eps),
        };
        w.push(kind);
        for x in [lr, a, b, eps] {
            w.extend_from_slice(&x.to_le_bytes());
        }
        w.push(o.clip.is_some() as u8);
        w.extend_from_slice(&o.clip.unwrap_or(0.0).to_le_bytes());
        put_u32(&mut w, o.slots.len() as u32);
        for s in &o.slots {
            put_str(&mut w, &s.name);
            w.extend_from_slice(&s.steps.to_le_bytes());
            for buf in [&s.m, &s.v] {
                w.extend_from_slice(&(buf.len() as u64).to_le_bytes());
                put_f32s(&mut w, buf);
            }
        }
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        w.extend_from_slice(&self.state.step.to_le_bytes());
        put_u32(&mut w, self.state.epoch);
        w.extend_from_slice(&self.state.sparsity.to_le_bytes());
        w.extend_from_slice(&self.state.keep_prob.to_le_bytes());
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = r.string("config")?;
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = r.string("tensor name")?;
            let rank = r.u32("tensor rank")?;
            let dims = (0..rank).map(|_| r.u32("tensor dims")).collect::<Result<Vec<_>, _>>()?;
            let payload = match r.u8("tensor storage")? {
                0 => {
                    let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
                    let n = n.ok_or_else(|| CheckpointError::Malformed(format!("`{name}` is too large")))?;
                    Payload::Dense(r.f32s(n, "tensor values")?)
                }
                1 => {
                    let nnz = r.len64("triple count", 12)?;
                    let mut triples = Vec::with_capacity(nnz);
                    for _ in 0..nnz {
                        triples.push((r.u32("triple row")?, r.u32("triple col")?, r.f32("triple value")?));
                    }
                    Payload::Sparse(triples)
                }
                other => return Err(CheckpointError::Malformed(format!("unknown storage tag {other}"))),
            };
            tensors.push(TensorRecord { name, dims, payload });
        }
        let kind_tag = r.u8("optimizer kind")?;
        let lr = r.f64("optimizer lr")?;
        let a = r.f64("optimizer settings")?;
        let b = r.f64("optimizer settings")?;
        let eps = r.f64("optimizer settings")?;
        let kind = match kind_tag {
            0 => OptimizerKind::Sgd { lr, momentum: a },
            1 => OptimizerKind::Adam {
                lr,
                beta1: a,
                beta2: b,
                eps,
            },
            other => return Err(CheckpointError::Malformed(format!("unknown optimizer tag {other}"))),
        };
        let has_clip = r.u8("clip flag")?;
        let clip_value = r.f64("clip")?;
        let clip = match has_clip {
            0 => None,
            1 => Some(clip_value),
            other => return Err(CheckpointError::Malformed(format!("bad clip flag {other}"))),
        };
        let slot_count = r.u32("slot count")?;
        let mut slots = Vec::new();
        for _ in 0..slot_count {
            let name = r.string("slot name")?;
            let steps = r.u64("slot steps")?;
            let m_len = r.len64("slot moments", 4)?;
            let m = r.f32s(m_len, "slot moments")?;
            let v_len = r.len64("slot moments", 4)?;
            let v = r.f32s(v_len, "slot moments")?;
            slots.push(SlotRecord { name, steps, m, v });
        }
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let word_pos = u128::from_le_bytes(r.take(16, "rng position")?.try_into().expect("16 bytes"));
        let state = TrainState {
            step: r.u64("step")?,
            epoch: r.u32("epoch")?,
            sparsity: r.f64("sparsity")?,
            keep_prob: r.f64("keep prob")?,
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            tensors,
            optimizer: OptimizerRecord { kind, clip, slots },
            rng: RngState { seed, stream, word_pos },
            state,
        })
    }

    /// Writes via a temporary file and rename, so an interrupted save never
    /// leaves a partial checkpoint behind.
    pub fn save(&self, path: &Path) -> AppResult<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| AppError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
    }

    pub fn load(path: &Path) -> AppResult<Self> {
        let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| AppError::Config(format!("{}: {e}", path.display())))
    }
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, CheckpointError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// A u64 element count whose elements of `width` bytes must fit in
    /// the remaining input; guards allocations against corrupt lengths.
    fn len64(&mut self, what: &'static str, width: usize) -> Result<usize, CheckpointError> {
        let n = self.u64(what)?;
        let remaining = (self.buf.len() - self.pos) as u64;
        if n.checked_mul(width as u64).map_or(true, |b| b > remaining) {
            return Err(CheckpointError::Truncated(what));
        }
        Ok(n as usize)
    }

    fn f32s(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>, CheckpointError> {
        let bytes = self.take(n.checked_mul(4).ok_or(CheckpointError::Truncated(what))?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }

    fn string(&mut self, what: &'static str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}
