//! Checkpoint files.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "MVHC"
//! bytes 4..8    u32 format version (1)
//! bytes 8..16   u64 header length H
//! bytes 16..16+H  UTF-8 JSON header
//! rest          payload: concatenated little-endian f64 tensors
//! ```
//!
//! The header holds the model configuration, training progress and a tensor
//! directory `[{name, rows, cols, offset}]`, where `offset` is the byte
//! offset of the tensor's row-major data from the start of the payload.
//! Tensor names: model parameters under their canonical names (see
//! [`crate::model::Params::entries`]), Adam moments as `optim.first.<name>`
//! and `optim.second.<name>`, and standardisation statistics as
//! `norm.view<m>.mean` / `norm.view<m>.std`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nd::Tensor;

pub const MAGIC: &[u8; 4] = b"MVHC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    pub optimizer: OptimizerState,
    pub standardizer: Standardizer,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    optimizer_step: u64,
    tensors: Vec<DirEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DirEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

impl Checkpoint {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.params.entries();
        let names: Vec<String> = out.iter().map(|(n, _)| n.clone()).collect();
        for (prefix, list) in [("optim.first", &self.optimizer.first), ("optim.second", &self.optimizer.second)] {
            for (n, t) in names.iter().zip(list) {
                out.push((format!("{prefix}.{n}"), t));
            }
        }
        for (m, s) in self.standardizer.stats.iter().enumerate() {
            if let Some((mean, std)) = s {
                out.push((format!("norm.view{m}.mean"), mean));
                out.push((format!("norm.view{m}.std"), std));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.named_tensors();
        let mut dir = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, t) in &tensors {
            dir.push(DirEntry {
                name: name.clone(),
                rows: t.rows(),
                cols: t.cols(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            tensors: dir,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(path, m);
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!(
                "checkpoint version {version}, this build reads {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let hend = usize::try_from(hlen)
            .ok()
            .and_then(|h| h.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("corrupt payload: header runs past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[16..hend])
            .map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[hend..];

        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
        if payload.len() != expected {
            return Err(bad(format!(
                "corrupt payload: {} bytes, directory describes {expected}",
                payload.len()
            )));
        }
        let mut table: HashMap<&str, Tensor> = HashMap::new();
        for e in &header.tensors {
            let len = e.rows * e.cols * 8;
            let start = usize::try_from(e.offset)
                .ok()
                .filter(|&s| s.checked_add(len).is_some_and(|end| end <= payload.len()))
                .ok_or_else(|| bad(format!("corrupt payload: tensor {} out of bounds", e.name)))?;
            let data = payload[start..start + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            table.insert(&e.name, Tensor::new(e.rows, e.cols, data)?);
        }

        header.model.validate()?;
        let skeleton = ModelParams::init(&header.model, 0)?;
        let take = |table: &mut HashMap<&str, Tensor>, name: &str| {
            table
                .remove(name)
                .ok_or_else(|| bad(format!("missing tensor {name}")))
        };
        let params = skeleton.try_map(|name, _| take(&mut table, name))?;
        params.check_shapes(&header.model)?;

        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        let mut optimizer = OptimizerState {
            step: header.optimizer_step,
            ..Default::default()
        };
        if table.contains_key(format!("optim.first.{}", names[0]).as_str()) {
            for n in &names {
                optimizer.first.push(take(&mut table, &format!("optim.first.{n}"))?);
                optimizer.second.push(take(&mut table, &format!("optim.second.{n}"))?);
            }
        }
        let stats = (0..header.model.n_views())
            .map(|m| {
                let mean = table.remove(format!("norm.view{m}.mean").as_str());
                let std = table.remove(format!("norm.view{m}.std").as_str());
                match (mean, std) {
                    (Some(a), Some(b)) => Ok(Some((a, b))),
                    (None, None) => Ok(None),
                    _ => Err(bad(format!("incomplete normalisation for view {m}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(extra) = table.keys().next() {
            return Err(bad(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model: header.model,
            params,
            epoch: header.epoch,
            optimizer,
            standardizer: Standardizer { stats },
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
