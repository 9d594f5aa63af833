//! Checkpoint files: a text header followed by raw little-endian `f64`s.
//!
//! ```text
//! CSFORMER-CHECKPOINT <version>
//! header-bytes <n>
//! <n bytes of TOML: iteration, config, tensor directory>
//! <payload: every tensor's values, in directory order>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::harness::optim::Adam;
use crate::pipeline::CsFormer;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "CSFORMER-CHECKPOINT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    /// Offset into the payload, in values.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    iteration: u64,
    adam: Option<AdamHeader>,
    values: usize,
    config: ModelConfig,
    tensor: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

/// A snapshot of model parameters, running statistics and optionally the
/// optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub config: ModelConfig,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    pub optimizer: Option<Adam>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(model: &CsFormer, iteration: u64, optimizer: Option<&Adam>) -> Self {
        let own = |it: &mut dyn Iterator<Item = (&str, &Tensor)>| it.map(|(n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint {
            iteration,
            config: model.config().clone(),
            params: own(&mut model.store().params()),
            buffers: own(&mut model.store().buffers()),
            optimizer: optimizer.cloned(),
        }
    }

    /// Copies parameters and buffers into `model`, which must have been built
    /// from an identical configuration.
    pub fn restore_into(&self, model: &mut CsFormer) -> Result<()> {
        if *model.config() != self.config {
            return Err(Error::Config(format!(
                "checkpoint was written for a different model configuration:\n  checkpoint: {:?}\n  model:      {:?}",
                self.config,
                model.config()
            )));
        }
        let store = model.store_mut();
        if self.params.len() != store.len() || self.buffers.len() != store.buffers().count() {
            return Err(corrupt("tensor count does not match the model"));
        }
        for (name, t) in &self.params {
            let id = store.find(name).ok_or_else(|| corrupt(format!("unknown tensor `{name}`")))?;
            store.set(id, t.clone()).map_err(|e| corrupt(e.to_string()))?;
        }
        for (name, t) in &self.buffers {
            let id = store.find_buffer(name).ok_or_else(|| corrupt(format!("unknown buffer `{name}`")))?;
            if store.buffer(id).shape() != t.shape() {
                return Err(corrupt(format!("buffer `{name}` has shape {:?}", t.shape())));
            }
            store.set_buffer(id, t.clone());
        }
        Ok(())
    }

    /// Builds a fresh model from the stored configuration and loads it.
    pub fn to_model(&self) -> Result<CsFormer> {
        let mut model = CsFormer::new(self.config.clone(), 0)?;
        self.restore_into(&mut model)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut listed: Vec<(&str, Kind, &Tensor)> = Vec::new();
        listed.extend(self.params.iter().map(|(n, t)| (n.as_str(), Kind::Param, t)));
        listed.extend(self.buffers.iter().map(|(n, t)| (n.as_str(), Kind::Buffer, t)));
        if let Some(adam) = &self.optimizer {
            if adam.m.len() != self.params.len() || adam.v.len() != self.params.len() {
                return Err(corrupt("optimizer moments do not match the parameter list"));
            }
            listed.extend(self.params.iter().zip(&adam.m).map(|((n, _), t)| (n.as_str(), Kind::AdamM, t)));
            listed.extend(self.params.iter().zip(&adam.v).map(|((n, _), t)| (n.as_str(), Kind::AdamV, t)));
        }
        let mut offset = 0;
        let tensor = listed
            .iter()
            .map(|&(name, kind, t)| {
                let e = Entry { name: name.to_string(), kind, shape: t.shape().to_vec(), offset };
                offset += t.len();
                e
            })
            .collect();
        let header = Header {
            iteration: self.iteration,
            adam: self.optimizer.as_ref().map(|a| AdamHeader {
                step: a.step,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            }),
            values: offset,
            config: self.config.clone(),
            tensor,
        };
        let text = toml::to_string(&header).map_err(|e| corrupt(format!("cannot encode header: {e}")))?;
        let mut out = format!("{MAGIC} {CHECKPOINT_VERSION}\nheader-bytes {}\n{text}", text.len()).into_bytes();
        out.reserve(offset * 8);
        for (_, _, t) in listed {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (line1, rest) = split_line(bytes).ok_or_else(|| corrupt("missing version line"))?;
        let version = line1
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| corrupt("not a checkpoint file"))?
            .parse::<u32>()
            .map_err(|_| corrupt("unreadable version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let (line2, rest) = split_line(rest).ok_or_else(|| corrupt("missing header length"))?;
        let n: usize = line2
            .strip_prefix("header-bytes ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt("unreadable header length"))?;
        if rest.len() < n {
            return Err(corrupt("file truncated inside the header"));
        }
        let text = std::str::from_utf8(&rest[..n]).map_err(|_| corrupt("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| corrupt(format!("bad header: {e}")))?;
        let payload = &rest[n..];
        if payload.len() != header.values * 8 {
            return Err(corrupt(format!(
                "payload holds {} bytes, header declares {} values (file truncated or padded)",
                payload.len(),
                header.values
            )));
        }
        let mut ckpt = Checkpoint {
            iteration: header.iteration,
            config: header.config,
            params: Vec::new(),
            buffers: Vec::new(),
            optimizer: None,
        };
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for e in header.tensor {
            let len: usize = e.shape.iter().product();
            let end = e.offset.checked_add(len).filter(|&end| end <= header.values);
            let end = end.ok_or_else(|| corrupt(format!("tensor `{}` lies outside the payload", e.name)))?;
            let data = payload[e.offset * 8..end * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| corrupt(err.to_string()))?;
            match e.kind {
                Kind::Param => ckpt.params.push((e.name, t)),
                Kind::Buffer => ckpt.buffers.push((e.name, t)),
                Kind::AdamM => m.push(t),
                Kind::AdamV => v.push(t),
            }
        }
        match header.adam {
            Some(a) if m.len() == ckpt.params.len() && v.len() == ckpt.params.len() => {
                ckpt.optimizer = Some(Adam { beta1: a.beta1, beta2: a.beta2, eps: a.eps, step: a.step, m, v });
            }
            Some(_) => return Err(corrupt("optimizer moments are incomplete")),
            None if !m.is_empty() || !v.is_empty() => return Err(corrupt("stray optimizer moments")),
            None => {}
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn split_line(bytes: &[u8]) -> Option<(&str, &[u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n')?;
    Some((std::str::from_utf8(&bytes[..nl]).ok()?, &bytes[nl + 1..]))
}
