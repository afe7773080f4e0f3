//! Binary checkpoint format.
//!
//! ```text
//! "LASD" | version: u32 | config_len: u32 | config: UTF-8 `key=value` lines
//! tensor_count: u32 | per tensor: name_len: u32, name, rank: u32,
//!                                 dims: rank × u64, data: numel × f64
//! ```
//! All integers and floats are little-endian. Optimizer moments, when
//! present, are stored as tensors named `opt.m.<param>` and `opt.v.<param>`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::Tensor;

use super::train::{AdamW, AdamWConfig};
use super::{Model, ModelConfig, ModelError, ParamStore};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LASD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub step: u64,
    pub seed: u64,
    pub optimizer: Option<AdamW>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, ModelError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| err(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, ModelError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| err(format!("truncated while reading {what}")))?;
    Ok(u64::from_le_bytes(b))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, t: &Tensor) -> Result<(), ModelError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for x in t.data() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Upper bound on any single length field, to fail fast on garbage input.
const MAX_LEN: u64 = 1 << 40;

fn read_tensor<R: Read>(r: &mut R, index: usize) -> Result<(String, Tensor), ModelError> {
    let what = format!("tensor #{index}");
    let len = read_u32(r, &what)? as usize;
    let mut name = vec![0u8; len];
    r.read_exact(&mut name)
        .map_err(|_| err(format!("truncated name of {what}")))?;
    let name = String::from_utf8(name).map_err(|_| err(format!("{what} has a non-UTF-8 name")))?;
    let rank = read_u32(r, &name)? as usize;
    if rank > 8 {
        return Err(err(format!("tensor {name}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut numel: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r, &name)?;
        numel = numel.saturating_mul(d);
        shape.push(d as usize);
    }
    if numel > MAX_LEN {
        return Err(err(format!("tensor {name}: implausible size {numel}")));
    }
    let mut bytes = vec![0u8; numel as usize * 8];
    r.read_exact(&mut bytes)
        .map_err(|_| err(format!("tensor {name}: truncated payload")))?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| err(format!("tensor {name}: {e}")))?;
    Ok((name, t))
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64, seed: u64, optimizer: Option<AdamW>) -> Self {
        Self {
            config: model.config().clone(),
            params: model.params().clone(),
            step,
            seed,
            optimizer,
        }
    }

    pub fn model(&self) -> Result<Model, ModelError> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    fn config_text(&self) -> String {
        let mut lines: Vec<String> = self
            .config
            .to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        lines.push(format!("step={}", self.step));
        lines.push(format!("seed={}", self.seed));
        if let Some(o) = &self.optimizer {
            let c = o.config;
            lines.push(format!("opt.lr={:?}", c.lr));
            lines.push(format!("opt.beta1={:?}", c.beta1));
            lines.push(format!("opt.beta2={:?}", c.beta2));
            lines.push(format!("opt.eps={:?}", c.eps));
            lines.push(format!("opt.weight_decay={:?}", c.weight_decay));
            lines.push(format!(
                "opt.grad_clip={}",
                c.grad_clip.map_or("none".to_string(), |g| format!("{g:?}"))
            ));
            lines.push(format!("opt.warmup_steps={}", c.warmup_steps));
            lines.push(format!("opt.decay_steps={}", c.decay_steps));
            lines.push(format!("opt.t={}", o.t));
        }
        lines.join("\n")
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let text = self.config_text();
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let moments = self.optimizer.as_ref().map_or(0, |_| 2 * self.params.len());
        w.write_all(&((self.params.len() + moments) as u32).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            write_tensor(&mut w, name, t)?;
        }
        if let Some(o) = &self.optimizer {
            for (prefix, buffers) in [("opt.m.", &o.m), ("opt.v.", &o.v)] {
                for ((name, p), buf) in self.params.iter().zip(buffers) {
                    let t = Tensor::new(p.shape().to_vec(), buf.clone())?;
                    write_tensor(&mut w, &format!("{prefix}{name}"), &t)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)
            .map_err(|_| err("file too short for magic bytes"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(err(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(err(format!("unsupported version {version}")));
        }
        let len = read_u32(&mut r, "config length")? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)
            .map_err(|_| err("truncated config block"))?;
        let text = String::from_utf8(text).map_err(|_| err("config block is not UTF-8"))?;
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("bad config line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut take = |k: &str| {
            kv.remove(k)
                .ok_or_else(|| err(format!("config is missing {k}")))
        };
        let step = take("step")?.parse().map_err(|_| err("bad step"))?;
        let seed = take("seed")?.parse().map_err(|_| err("bad seed"))?;
        let opt_config = if kv.contains_key("opt.lr") {
            let mut f = |k: &str| -> Result<String, ModelError> {
                kv.remove(k)
                    .ok_or_else(|| err(format!("config is missing {k}")))
            };
            let num = |s: String, k: &str| s.parse::<f64>().map_err(|_| err(format!("bad {k}")));
            let lr = num(f("opt.lr")?, "opt.lr")?;
            let beta1 = num(f("opt.beta1")?, "opt.beta1")?;
            let beta2 = num(f("opt.beta2")?, "opt.beta2")?;
            let eps = num(f("opt.eps")?, "opt.eps")?;
            let weight_decay = num(f("opt.weight_decay")?, "opt.weight_decay")?;
            let grad_clip = match f("opt.grad_clip")?.as_str() {
                "none" => None,
                s => Some(num(s.to_string(), "opt.grad_clip")?),
            };
            let warmup_steps = f("opt.warmup_steps")?
                .parse()
                .map_err(|_| err("bad opt.warmup_steps"))?;
            let decay_steps = f("opt.decay_steps")?
                .parse()
                .map_err(|_| err("bad opt.decay_steps"))?;
            let t: u64 = f("opt.t")?.parse().map_err(|_| err("bad opt.t"))?;
            Some((
                AdamWConfig {
                    lr,
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                    grad_clip,
                    warmup_steps,
                    decay_steps,
                },
                t,
            ))
        } else {
            None
        };
        if let Some(k) = ModelConfig::KEYS.iter().find(|k| !kv.contains_key(**k)) {
            return Err(err(format!("config is missing {k}")));
        }
        let pairs: Vec<(&str, &str)> = kv.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
        let config = ModelConfig::nano().apply_pairs(pairs)?;

        let count = read_u32(&mut r, "tensor count")? as usize;
        let mut params = Vec::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for i in 0..count {
            let (name, t) = read_tensor(&mut r, i)?;
            if let Some(p) = name.strip_prefix("opt.m.") {
                m.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("opt.v.") {
                v.insert(p.to_string(), t);
            } else {
                params.push((name, t));
            }
        }
        let model = Model::from_params(config, ParamStore::from_pairs(params)?)?;
        let optimizer = match opt_config {
            None => None,
            Some((c, t)) => {
                let take_moment = |map: &mut BTreeMap<String, Tensor>,
                                   kind: &str,
                                   name: &str,
                                   shape: &[usize]| {
                    let tensor = map
                        .remove(name)
                        .ok_or_else(|| err(format!("missing tensor opt.{kind}.{name}")))?;
                    if tensor.shape() != shape {
                        return Err(err(format!(
                            "tensor opt.{kind}.{name} has shape {:?}",
                            tensor.shape()
                        )));
                    }
                    Ok(tensor.into_data())
                };
                let mut ms = Vec::new();
                let mut vs = Vec::new();
                for (name, p) in model.params().iter() {
                    ms.push(take_moment(&mut m, "m", name, p.shape())?);
                    vs.push(take_moment(&mut v, "v", name, p.shape())?);
                }
                Some(AdamW {
                    config: c,
                    t,
                    m: ms,
                    v: vs,
                })
            }
        };
        if let Some(extra) = m.keys().chain(v.keys()).next() {
            return Err(err(format!("unexpected optimizer tensor for {extra}")));
        }
        Ok(Self {
            config: model.config().clone(),
            params: model.params().clone(),
            step,
            seed,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let file = File::create(path)?;
        self.write_to(BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let file = File::open(path)?;
        Self::read_from(BufReader::new(file))
    }
}
