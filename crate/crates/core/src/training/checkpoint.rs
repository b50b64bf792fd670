//! Checkpoint container.
//!
//! Layout (integers little-endian):
//!
//! | field    | type                                   |
//! |----------|----------------------------------------|
//! | magic    | `b"IGVC"`                              |
//! | version  | `u32`                                  |
//! | metadata | `u32` length + UTF-8 JSON              |
//! | count    | `u32`                                  |
//! | entries  | `u32` name length, name, IGVT tensor   |
//!
//! Optimizer moments are stored as entries `adam.m/<name>` and
//! `adam.v/<name>`.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::{read_tensor, write_tensor, DType};
use crate::textenc::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IGVC";
pub const CHECKPOINT_VERSION: u32 = 1;
const M_PREFIX: &str = "adam.m/";
const V_PREFIX: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub step: u64,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    /// Vocabulary as one non-reserved token per line.
    pub vocab: String,
    pub frozen: Vec<String>,
    pub optimizer_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        optimizer: Option<&OptimizerState>,
        stage: u8,
        step: u64,
        config_hash: &str,
        seed: u64,
    ) -> Self {
        Self {
            meta: CheckpointMeta {
                stage,
                step,
                config_hash: config_hash.to_string(),
                seed,
                model: model.config.clone(),
                vocab: model.vocab.to_text(),
                frozen: model.params.frozen().iter().cloned().collect(),
                optimizer_step: optimizer.map(|o| o.step),
            },
            params: model.params.clone(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuild the model, checking that the stored tensors match the
    /// configured architecture name for name and shape.
    pub fn to_model(&self) -> Result<Model> {
        let vocab = Vocabulary::from_text(&self.meta.vocab)?;
        let template = Model::init(&self.meta.model, 0)?;
        if template.vocab != vocab {
            return Err(Error::Format("checkpoint vocabulary differs from the grammar".into()));
        }
        for (name, t) in self.params.iter() {
            let want = template
                .params
                .get(name)
                .map_err(|_| Error::UnknownTensor(name.to_string()))?;
            if want.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    want.shape()
                )));
            }
        }
        if let Some(missing) = template.params.names().find(|n| !self.params.contains(n)) {
            return Err(Error::Format(format!("checkpoint lacks tensor {missing}")));
        }
        let mut params = self.params.clone();
        params.set_frozen(self.meta.frozen.iter().cloned());
        Ok(Model {
            config: self.meta.model.clone(),
            vocab,
            params,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&len_u32(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        let mut entries: Vec<(String, &crate::tensor::Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        if let Some(o) = &self.optimizer {
            entries.extend(o.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            entries.extend(o.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
        }
        out.extend_from_slice(&len_u32(entries.len())?.to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            write_tensor(&mut out, t, DType::F64)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let n = read_u32(&mut r, "metadata length")? as usize;
        let mut meta = vec![0u8; n];
        read_exact(&mut r, &mut meta, "metadata")?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta)
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let count = read_u32(&mut r, "entry count")?;
        let mut params = ParamStore::new();
        let mut opt = OptimizerState::default();
        for _ in 0..count {
            let len = read_u32(&mut r, "name length")? as usize;
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let (t, _) = read_tensor(&mut r)?;
            if let Some(n) = name.strip_prefix(M_PREFIX) {
                opt.m.insert(n.to_string(), t);
            } else if let Some(n) = name.strip_prefix(V_PREFIX) {
                opt.v.insert(n.to_string(), t);
            } else {
                params.insert(name, t);
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint entries".into()));
        }
        let frozen: BTreeSet<String> = meta.frozen.iter().cloned().collect();
        if let Some(unknown) = frozen.iter().find(|n| !params.contains(n)) {
            return Err(Error::UnknownTensor(unknown.clone()));
        }
        for n in opt.m.keys().chain(opt.v.keys()) {
            if !params.contains(n) {
                return Err(Error::UnknownTensor(format!("optimizer moment for {n}")));
            }
        }
        params.set_frozen(frozen);
        let optimizer = match meta.optimizer_step {
            Some(step) => {
                opt.step = step;
                Some(opt)
            }
            None if opt.m.is_empty() && opt.v.is_empty() => None,
            None => return Err(Error::Format("optimizer moments without a step count".into())),
        };
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            vis_layers: 1,
            text_layers: 1,
            ..ModelConfig::default()
        };
        let mut model = Model::init(&cfg, 5).unwrap();
        model.params.freeze_prefixes(&["vis.", "text."]);
        let mut opt = OptimizerState {
            step: 7,
            ..Default::default()
        };
        opt.m.insert("head.query".into(), Tensor::full(&[1, 32], 0.25));
        opt.v.insert("head.query".into(), Tensor::full(&[1, 32], 0.5));
        Checkpoint::new(&model, Some(&opt), 1, 7, "00ff00ff00ff00ff", 3)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let c = sample();
        let a = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&a).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), a);
        assert!(back.params.is_frozen("vis.pos"));
        assert!(!back.params.is_frozen("head.query"));
        let m = back.to_model().unwrap();
        assert_eq!(m.params.frozen(), c.params.frozen());
    }

    #[test]
    fn corruptions_are_reported() {
        let a = sample().to_bytes().unwrap();
        let mut bad = a.clone();
        bad[0] ^= 0xff;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = a.clone();
        bad[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [3, 10, a.len() / 2, a.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&a[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn unknown_tensor_is_rejected_on_restore() {
        let mut c = sample();
        c.params.insert("vis.extra", Tensor::zeros(&[2]));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert!(matches!(back.to_model(), Err(Error::UnknownTensor(n)) if n == "vis.extra"));
    }
}
