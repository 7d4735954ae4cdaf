//! Binary checkpoint container shared by backbones and prompt sets.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, a JSON header,
//! then every tensor's `f64` values in little-endian order. The header lists
//! tensor names and shapes plus a SHA-256 digest of the raw payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::{ForwardOptions, PromptSet, PromptVariant};
use crate::tensor::Tensor;
use crate::train::TrainRecipe;
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: &[u8; 8] = b"PCAMCKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        for (_, t) in &self.tensors {
            payload.extend(t.to_le_bytes());
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse {
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(parse(0, "missing checkpoint magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| parse(8, "header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        let payload = &bytes[body..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(parse(body, "payload checksum mismatch"));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut pos = 0;
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * 8;
            if end > payload.len() {
                return Err(parse(body + pos, "payload truncated"));
            }
            let data = payload[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
            pos = end;
        }
        if pos != payload.len() {
            return Err(parse(body + pos, "trailing bytes after last tensor"));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Copies stored tensors into `targets`, which must match by name and shape.
    fn fill(&self, names: &[String], targets: Vec<&mut Tensor>) -> Result<()> {
        if names.len() != self.tensors.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, expected {}",
                self.tensors.len(),
                names.len()
            )));
        }
        for ((want, dst), (name, src)) in names.iter().zip(targets).zip(&self.tensors) {
            if want != name || dst.shape() != src.shape() {
                return Err(Error::contract(format!(
                    "checkpoint tensor {name} {:?} does not match expected {want} {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )))
        }
    }
}

fn owned(named: Vec<(String, &Tensor)>) -> Vec<(String, Tensor)> {
    named.into_iter().map(|(n, t)| (n, t.clone())).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    config: ViTConfig,
    frozen: bool,
}

pub fn model_checkpoint(model: &ViTModel) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "vit".into(),
        meta: serde_json::to_value(ModelMeta {
            config: model.config.clone(),
            frozen: model.frozen,
        })?,
        tensors: owned(model.named_tensors()),
    })
}

pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ViTModel> {
    ckpt.expect_kind("vit")?;
    let meta: ModelMeta = serde_json::from_value(ckpt.meta.clone())?;
    let mut model = ViTModel::init(&meta.config, 0)?;
    let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
    ckpt.fill(&names, model.tensors_mut())?;
    model.frozen = meta.frozen;
    Ok(model)
}

/// Provenance stored with a prompt set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub variant: PromptVariant,
    pub options: ForwardOptions,
    pub recipe: Option<TrainRecipe>,
    pub classes: usize,
    pub embed_dim: usize,
}

pub fn prompt_checkpoint(prompts: &PromptSet, meta: &PromptMeta) -> Result<Checkpoint> {
    Ok(Checkpoint {
        kind: "prompts".into(),
        meta: serde_json::to_value(meta)?,
        tensors: owned(prompts.named_tensors()),
    })
}

pub fn prompts_from_checkpoint(ckpt: &Checkpoint) -> Result<(PromptSet, PromptMeta)> {
    ckpt.expect_kind("prompts")?;
    let meta: PromptMeta = serde_json::from_value(ckpt.meta.clone())?;
    let agnostic = ckpt.tensors.len().saturating_sub(2);
    let mut prompts = PromptSet {
        class_specific: Tensor::zeros(&[meta.classes, meta.embed_dim]),
        class_agnostic: vec![Tensor::zeros(&[meta.classes, meta.embed_dim]); agnostic],
        w: Tensor::zeros(&[meta.embed_dim]),
    };
    let names: Vec<String> = prompts
        .named_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    ckpt.fill(&names, prompts.tensors_mut())?;
    Ok((prompts, meta))
}
