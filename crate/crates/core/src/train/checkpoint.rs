//! Self-describing binary checkpoint.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic      8 bytes  "RBLCKPT\0"
//! version    u32
//! spec       u32 length + UTF-8 JSON
//! manifest   u32 length + UTF-8 hex digest (may be empty)
//! epoch      u64
//! step       u64
//! rng        32-byte seed, u64 stream, u128 word position
//! params     u32 count, then tensor records
//! optimizer  u8 kind, then its settings
//!              0 = SGD:  f64 momentum
//!              1 = Adam: f64 beta1, f64 beta2, f64 eps
//!            f64 lr, u64 t, u32 count, then tensor records
//!
//! tensor record: u32 name length + UTF-8 name, u32 rank,
//!                rank x u64 extents, numel x f64
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::{Optimizer, OptimizerKind, Trainer};
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"RBLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng64) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng64 {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec_json: String,
    pub manifest_sha256: String,
    pub epoch: u64,
    pub step: u64,
    pub rng: RngState,
    pub params: Vec<StoredTensor>,
    pub optimizer_kind: OptimizerKind,
    pub optimizer_lr: f64,
    pub optimizer_t: u64,
    /// `first.<param>` and, for Adam, `second.<param>` buffers.
    pub optimizer_buffers: Vec<StoredTensor>,
}

impl Checkpoint {
    pub(super) fn capture(trainer: &Trainer, net: &dyn Network, spec_json: &str, manifest_sha256: &str) -> Self {
        let params = net
            .params()
            .iter()
            .map(|p| StoredTensor {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect();
        let opt = &trainer.optimizer;
        let names: Vec<&str> = net.params().iter().map(|p| p.name.as_str()).collect();
        let mut buffers = Vec::new();
        for (prefix, bufs) in [("first", &opt.first), ("second", &opt.second)] {
            for (name, t) in names.iter().zip(bufs.iter()) {
                buffers.push(StoredTensor {
                    name: format!("{prefix}.{name}"),
                    value: t.clone(),
                });
            }
        }
        Checkpoint {
            spec_json: spec_json.to_string(),
            manifest_sha256: manifest_sha256.to_string(),
            epoch: trainer.epoch as u64,
            step: trainer.step as u64,
            rng: trainer.rng_state(),
            params,
            optimizer_kind: opt.kind,
            optimizer_lr: opt.lr,
            optimizer_t: opt.t,
            optimizer_buffers: buffers,
        }
    }

    /// Copies the stored parameters into `net`; names and shapes must match
    /// the network's store exactly.
    pub fn restore_params(&self, net: &mut dyn Network) -> Result<()> {
        let store = net.params_mut();
        if store.len() != self.params.len() {
            return Err(bad(format!(
                "checkpoint holds {} parameters, network has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, stored) in self.params.iter().enumerate() {
            let p = store.get(i);
            if p.name != stored.name || p.value.shape() != stored.value.shape() {
                return Err(bad(format!(
                    "parameter {i}: checkpoint has `{}` {:?}, network has `{}` {:?}",
                    stored.name,
                    stored.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            *store.value_mut(i) = stored.value.clone();
        }
        Ok(())
    }

    pub(super) fn restore_optimizer(&self, opt: &mut Optimizer, net: &dyn Network) -> Result<()> {
        if std::mem::discriminant(&self.optimizer_kind) != std::mem::discriminant(&opt.kind) {
            return Err(bad("checkpoint optimizer differs from the training config"));
        }
        let lookup = |name: &str| {
            self.optimizer_buffers
                .iter()
                .find(|b| b.name == name)
                .map(|b| b.value.clone())
                .ok_or_else(|| bad(format!("missing optimizer buffer `{name}`")))
        };
        for (i, p) in net.params().iter().enumerate() {
            opt.first[i] = lookup(&format!("first.{}", p.name))?;
            if !opt.second.is_empty() {
                opt.second[i] = lookup(&format!("second.{}", p.name))?;
            }
        }
        opt.kind = self.optimizer_kind;
        opt.lr = self.optimizer_lr;
        opt.t = self.optimizer_t;
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(&CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut w, &self.spec_json);
        put_str(&mut w, &self.manifest_sha256);
        w.extend_from_slice(&self.epoch.to_le_bytes());
        w.extend_from_slice(&self.step.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_tensors(&mut w, &self.params);
        match self.optimizer_kind {
            OptimizerKind::Sgd { momentum } => {
                w.push(0);
                w.extend_from_slice(&momentum.to_le_bytes());
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                w.push(1);
                for v in [beta1, beta2, eps] {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w.extend_from_slice(&self.optimizer_lr.to_le_bytes());
        w.extend_from_slice(&self.optimizer_t.to_le_bytes());
        put_tensors(&mut w, &self.optimizer_buffers);
        w
    }

    /// Parses a checkpoint; any malformed or trailing input is an error.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let spec_json = r.string()?;
        let manifest_sha256 = r.string()?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let params = r.tensors()?;
        let optimizer_kind = match r.take(1)?[0] {
            0 => OptimizerKind::Sgd { momentum: r.f64()? },
            1 => OptimizerKind::Adam {
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            },
            k => return Err(bad(format!("unknown optimizer tag {k}"))),
        };
        let optimizer_lr = r.f64()?;
        let optimizer_t = r.u64()?;
        let optimizer_buffers = r.tensors()?;
        if r.pos != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            spec_json,
            manifest_sha256,
            epoch,
            step,
            rng: RngState { seed, stream, word_pos },
            params,
            optimizer_kind,
            optimizer_lr,
            optimizer_t,
            optimizer_buffers,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    w.extend_from_slice(&(s.len() as u32).to_le_bytes());
    w.extend_from_slice(s.as_bytes());
}

fn put_tensors(w: &mut Vec<u8>, items: &[StoredTensor]) {
    w.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for t in items {
        put_str(w, &t.name);
        let shape = t.value.shape();
        w.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            w.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.value.data() {
            w.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }

    fn tensors(&mut self) -> Result<Vec<StoredTensor>> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let name = self.string()?;
            let rank = self.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(bad(format!("tensor `{name}` has unsupported rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut numel = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(self.u64()?).map_err(|_| bad("extent overflows usize"))?;
                numel = numel.checked_mul(d).ok_or_else(|| bad("tensor size overflows"))?;
                shape.push(d);
            }
            let bytes = numel.checked_mul(8).ok_or_else(|| bad("tensor size overflows"))?;
            let raw = self.take(bytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            out.push(StoredTensor { name, value });
        }
        Ok(out)
    }
}
