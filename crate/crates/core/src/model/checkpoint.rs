//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "GLYF"  u32 version (=1)
//! config:     u32 field count, then that many u32 fields
//!             (image_size, base_channels, content_channels, style_dim,
//!              gen_res_blocks, mlp_hidden, share_weights)
//! parameters: u32 count, then per entry
//!             u32 name length, utf-8 name, u32 rank, u32 dims…, f32 values…
//! optimizers: u32 count, then per optimizer
//!             u64 adam step, u32 entry count, then per entry
//!             u32 name length, name, u32 rank, u32 dims…, f32 first moments…, f32 second moments…
//! u64 training step
//! u64 rng seed, u64 rng counter
//! ```
//!
//! Shared parameters have one store entry and therefore appear once.

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{AdamState, Tensor};

use super::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLYF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub first: Vec<f32>,
    pub second: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerBlock {
    pub step: u64,
    pub entries: Vec<OptimizerEntry>,
}

/// In-memory image of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub optimizers: Vec<OptimizerBlock>,
    pub step: u64,
    pub rng: (u64, u64),
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32().unwrap_or(f32::NAN)).collect()
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x as f64)).collect()
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &Model<T>, optimizers: &[&AdamState<T>], step: u64, rng: &Rng) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), dims: p.value.shape().to_vec(), values: to_f32(p.value.data()) })
            .collect();
        let optimizers = optimizers
            .iter()
            .map(|st| OptimizerBlock {
                step: st.step,
                entries: st
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(k, &id)| {
                        let (m, v) = st.moments(k);
                        OptimizerEntry {
                            name: model.params.name(id).to_string(),
                            dims: model.params.get(id).shape().to_vec(),
                            first: to_f32(m),
                            second: to_f32(v),
                        }
                    })
                    .collect(),
            })
            .collect();
        Checkpoint { config: model.config, params, optimizers, step, rng: rng.state() }
    }

    /// Rebuilds the model from its configuration, then assigns every stored tensor.
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        let mut model = Model::<T>::new(self.config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for e in &self.params {
            let id = model
                .params
                .find(&e.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter name `{}`", e.name)))?;
            if seen[id.index()] {
                return Err(Error::Checkpoint(format!("parameter `{}` stored twice", e.name)));
            }
            seen[id.index()] = true;
            let t = Tensor::new(e.dims.clone(), from_f32::<T>(&e.values))
                .map_err(|err| Error::Checkpoint(format!("parameter `{}`: {err}", e.name)))?;
            model.params.set(id, t).map_err(|err| Error::Checkpoint(err.to_string()))?;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            let (_, p) = model.params.iter().nth(missing).unwrap();
            return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name)));
        }
        Ok(model)
    }

    pub fn adam_states<T: Scalar>(&self, model: &Model<T>) -> Result<Vec<AdamState<T>>> {
        self.optimizers
            .iter()
            .map(|block| {
                let mut ids = Vec::new();
                let mut first = Vec::new();
                let mut second = Vec::new();
                for e in &block.entries {
                    let id = model
                        .params
                        .find(&e.name)
                        .ok_or_else(|| Error::Checkpoint(format!("unknown parameter name `{}` in optimizer", e.name)))?;
                    if model.params.get(id).numel() != e.first.len() {
                        return Err(Error::Checkpoint(format!("optimizer moments for `{}` have wrong size", e.name)));
                    }
                    ids.push(id);
                    first.push(from_f32(&e.first));
                    second.push(from_f32(&e.second));
                }
                AdamState::from_parts(block.step, ids, first, second)
            })
            .collect()
    }

    pub fn rng(&self) -> Rng {
        Rng::from_state(self.rng.0, self.rng.1)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let c = &self.config;
        let fields = [
            c.image_size,
            c.base_channels,
            c.content_channels,
            c.style_dim,
            c.gen_res_blocks,
            c.mlp_hidden,
            c.share_weights as usize,
        ];
        w.u32(fields.len() as u32);
        for f in fields {
            w.u32(f as u32);
        }
        w.u32(self.params.len() as u32);
        for e in &self.params {
            w.header(&e.name, &e.dims);
            w.f32s(&e.values);
        }
        w.u32(self.optimizers.len() as u32);
        for block in &self.optimizers {
            w.u64(block.step);
            w.u32(block.entries.len() as u32);
            for e in &block.entries {
                w.header(&e.name, &e.dims);
                w.f32s(&e.first);
                w.f32s(&e.second);
            }
        }
        w.u64(self.step);
        w.u64(self.rng.0);
        w.u64(self.rng.1);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version mismatch: file has {version}, expected {CHECKPOINT_VERSION}")));
        }
        let nfields = r.u32()? as usize;
        if nfields != 7 {
            return Err(Error::Checkpoint(format!("config block has {nfields} fields, expected 7")));
        }
        let mut f = [0usize; 7];
        for slot in &mut f {
            *slot = r.u32()? as usize;
        }
        let config = ModelConfig {
            image_size: f[0],
            base_channels: f[1],
            content_channels: f[2],
            style_dim: f[3],
            gen_res_blocks: f[4],
            mlp_hidden: f[5],
            share_weights: f[6] != 0,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let (name, dims) = r.header()?;
            let n = dims.iter().product();
            params.push(ParamEntry { name, dims, values: r.f32s(n)? });
        }
        let nopt = r.u32()? as usize;
        let mut optimizers = Vec::with_capacity(nopt.min(16));
        for _ in 0..nopt {
            let step = r.u64()?;
            let count = r.u32()? as usize;
            let mut entries = Vec::with_capacity(count.min(4096));
            for _ in 0..count {
                let (name, dims) = r.header()?;
                let n = dims.iter().product();
                let first = r.f32s(n)?;
                let second = r.f32s(n)?;
                entries.push(OptimizerEntry { name, dims, first, second });
            }
            optimizers.push(OptimizerBlock { step, entries });
        }
        let step = r.u64()?;
        let rng = (r.u64()?, r.u64()?);
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after offset {}", bytes.len() - r.pos, r.pos)));
        }
        Ok(Checkpoint { config, params, optimizers, step, rng })
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

    fn header(&mut self, name: &str, dims: &[usize]) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        self.u32(dims.len() as u32);
        for &d in dims {
            self.u32(d as u32);
        }
    }

    fn f32s(&mut self, v: &[f32]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn header(&mut self, ) -> Result<(String, Vec<usize>)> {
        let len = self.u32()? as usize;
        let at = self.pos;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Checkpoint(format!("parameter name at offset {at} is not utf-8")))?
            .to_string();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("parameter `{name}` has implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        Ok((name, dims))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{AdamState, Tensor};

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, base_channels: 2, content_channels: 4, style_dim: 2, gen_res_blocks: 2, mlp_hidden: 4, share_weights: true }
    }

    fn sample() -> (Model<f32>, Checkpoint) {
        let m = Model::<f32>::new(small(), 3).unwrap();
        let opt = AdamState::new(&m.params, m.generator_params());
        let ck = Checkpoint::from_model(&m, &[&opt], 12, &Rng::from_state(5, 99));
        (m, ck)
    }

    #[test]
    fn bytes_round_trip_bit_exact() {
        let (m, ck) = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let m2: Model<f32> = back.to_model().unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(back.step, 12);
        assert_eq!(back.rng().state(), (5, 99));
        let st = back.adam_states(&m2).unwrap();
        assert_eq!(st[0].params(), &m2.generator_params()[..]);
    }

    #[test]
    fn bad_magic_version_truncation() {
        let (_, ck) = sample();
        let mut bytes = ck.to_bytes();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("bad magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(Checkpoint::from_bytes(&bad).unwrap_err().to_string().contains("version mismatch"));
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("truncated"));
    }

    #[test]
    fn unknown_parameter_rejected() {
        let (_, mut ck) = sample();
        ck.params[0].name = "nonsense.weight".into();
        let err = ck.to_model::<f32>().unwrap_err().to_string();
        assert!(err.contains("unknown parameter name"), "{err}");
    }

    #[test]
    fn shared_tensor_stored_once() {
        let (m, ck) = sample();
        let shared = m.params.name(m.generator.res[0].conv1.weight).to_string();
        assert_eq!(ck.params.iter().filter(|e| e.name == shared).count(), 1);
        assert!(ck.params.iter().all(|e| !e.name.starts_with("generator.res0.")));
    }
}
