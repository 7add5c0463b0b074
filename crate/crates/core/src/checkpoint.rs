//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BTRN" | version u32 | config block | n_tensors u32 | records... | crc32 u32
//! config block: vocab, d_model, n_layers, n_heads, d_ff, max_seq_len (u32),
//!               norm_eps f64, rope_base f64, norm_bias u8
//! record:       name_len u32 | name utf-8 | rank u32 | dims u64 × rank | f32 × numel
//! ```
//!
//! The CRC covers everything between the version field and the checksum.
//! Adapter sidecars use the same container with `lora.`-prefixed names.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig, LoraPair, Projection};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::Adam;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"BTRN";
pub const FORMAT_VERSION: u32 = 1;

/// Named tensors plus the model config they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn encode_config(buf: &mut Vec<u8>, cfg: &ModelConfig) {
    for v in [cfg.vocab_size, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.d_ff, cfg.max_seq_len] {
        put_u32(buf, v as u32);
    }
    buf.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    buf.extend_from_slice(&cfg.rope_base.to_le_bytes());
    buf.push(cfg.norm_bias as u8);
}

/// Serializes tensors in the given order.
pub fn encode<'t>(cfg: &ModelConfig, tensors: impl IntoIterator<Item = (String, &'t Tensor<f32>)>) -> Vec<u8> {
    let mut body = Vec::new();
    encode_config(&mut body, cfg);
    let tensors: Vec<_> = tensors.into_iter().collect();
    put_u32(&mut body, tensors.len() as u32);
    for (name, t) in tensors {
        put_u32(&mut body, name.len() as u32);
        body.extend_from_slice(name.as_bytes());
        put_u32(&mut body, t.shape().len() as u32);
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    out.extend_from_slice(&body);
    put_u32(&mut out, crc32fast::hash(&body));
    out
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!("truncated payload at byte {}", self.pos)));
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Container> {
    if bytes.len() < 12 {
        return Err(Error::Corrupt("file too short for header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let body = &bytes[8..bytes.len() - 4];
    let mut r = Reader { buf: body, pos: 0 };
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let norm_eps = r.f64()?;
    let rope_base = r.f64()?;
    let norm_bias = r.take(1)?[0] != 0;
    let config = ModelConfig {
        vocab_size: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        max_seq_len: dims[5],
        norm_eps,
        rope_base,
        norm_bias,
    };
    let n = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(4).is_some_and(|b| b <= body.len()))
            .ok_or_else(|| Error::Corrupt(format!("tensor {name} dims {shape:?} exceed file size")))?;
        let raw = r.take(numel * 4)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Corrupt(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt(format!("{} trailing bytes before checksum", body.len() - r.pos)));
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if stored != crc32fast::hash(body) {
        return Err(Error::Corrupt("checksum mismatch".into()));
    }
    Ok(Container { config, tensors })
}

/// Writes atomically via a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: &Path) -> Result<()> {
    write_atomic(path, &encode(&params.config, params.named()))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams<f32>> {
    let c = decode(&fs::read(path)?)?;
    c.config.validate().map_err(|e| Error::Corrupt(e.to_string()))?;
    ModelParams::from_named(&c.config, c.tensors)
}

/// Adapter weights plus optional optimizer state and step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub adapter: LoraAdapter<f32>,
    pub optimizer: Option<Adam>,
    pub step: usize,
}

fn scalar_tensor(v: f32) -> Tensor<f32> {
    Tensor::new(vec![1], vec![v]).expect("one element")
}

pub fn save_adapter(cfg: &ModelConfig, state: &AdapterState, path: &Path) -> Result<()> {
    let ad = &state.adapter;
    let mut owned: Vec<(String, Tensor<f32>)> = vec![
        ("lora.rank".into(), scalar_tensor(ad.config.rank as f32)),
        ("lora.alpha".into(), scalar_tensor(ad.config.alpha as f32)),
        ("lora.step".into(), scalar_tensor(state.step as f32)),
    ];
    let targets: Vec<f32> = ad.config.targets.iter().map(|p| p.index() as f32).collect();
    owned.push(("lora.targets".into(), Tensor::new(vec![targets.len()], targets)?));
    if let Some(opt) = &state.optimizer {
        owned.push(("lora.optim.step".into(), scalar_tensor(opt.step as f32)));
        for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
            owned.push((format!("lora.optim.{i:03}.m"), Tensor::new(vec![m.len()], m.clone())?));
            owned.push((format!("lora.optim.{i:03}.v"), Tensor::new(vec![v.len()], v.clone())?));
        }
    }
    let named = ad.named().into_iter().chain(owned.iter().map(|(n, t)| (n.clone(), t)));
    write_atomic(path, &encode(cfg, named))
}

pub fn load_adapter(cfg: &ModelConfig, path: &Path, optim_config: crate::optim::AdamConfig) -> Result<AdapterState> {
    let c = decode(&fs::read(path)?)?;
    if &c.config != cfg {
        return Err(Error::Corrupt("adapter was saved for a different model config".into()));
    }
    let mut t = c.tensors;
    let scalar = |t: &mut BTreeMap<String, Tensor<f32>>, name: &str| -> Result<f32> {
        t.remove(name)
            .filter(|x| x.len() == 1)
            .map(|x| x.data()[0])
            .ok_or_else(|| Error::Corrupt(format!("missing {name}")))
    };
    let rank = scalar(&mut t, "lora.rank")? as usize;
    let alpha = scalar(&mut t, "lora.alpha")? as f64;
    let step = scalar(&mut t, "lora.step")? as usize;
    let targets = t
        .remove("lora.targets")
        .ok_or_else(|| Error::Corrupt("missing lora.targets".into()))?
        .data()
        .iter()
        .map(|&i| Projection::ALL.get(i as usize).copied().ok_or_else(|| Error::Corrupt("bad target".into())))
        .collect::<Result<Vec<_>>>()?;
    let config = LoraConfig { rank, alpha, targets };
    let mut adapter = LoraAdapter::<f32>::new(cfg, config, 0).map_err(|e| Error::Corrupt(e.to_string()))?;
    for (l, slots) in adapter.layers.iter_mut().enumerate() {
        for p in Projection::ALL {
            if let Some(LoraPair { a, b }) = &mut slots[p.index()] {
                for (suffix, slot) in [("a", a), ("b", b)] {
                    let name = format!("lora.layers.{l}.{}.{suffix}", p.name());
                    let x = t.remove(&name).ok_or_else(|| Error::Corrupt(format!("missing {name}")))?;
                    if x.shape() != slot.shape() {
                        return Err(Error::Corrupt(format!("{name} has shape {:?}", x.shape())));
                    }
                    *slot = x;
                }
            }
        }
    }
    let optimizer = match t.remove("lora.optim.step") {
        None => None,
        Some(s) => {
            let sizes: Vec<usize> = adapter.named().iter().map(|(_, x)| x.len()).collect();
            let mut opt = Adam::new(optim_config, &sizes);
            opt.step = s.data()[0] as u64;
            for (i, &n) in sizes.iter().enumerate() {
                for (kind, dst) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                    let name = format!("lora.optim.{i:03}.{kind}");
                    let x = t.remove(&name).ok_or_else(|| Error::Corrupt(format!("missing {name}")))?;
                    if x.len() != n {
                        return Err(Error::Corrupt(format!("{name} has {} values", x.len())));
                    }
                    *dst = x.into_data();
                }
            }
            Some(opt)
        }
    };
    if let Some(extra) = t.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(AdapterState { adapter, optimizer, step })
}
