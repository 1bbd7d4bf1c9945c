//! Binary checkpoint format.
//!
//! ```text
//! "DYNW1"
//! u64 LE header length, header bytes (UTF-8 JSON: config, stage, rewired, seed)
//! repeated until EOF:
//!   u64 LE name length, name bytes
//!   u8 dtype (0 = f64)
//!   u64 LE rank, rank × u64 LE dims
//!   numel × f64 LE payload
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AdaptiveModel, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"DYNW1";
const DTYPE_F64: u8 = 0;

/// Pipeline position of a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Fine-tuned full model (before or after rewiring).
    Teacher,
    /// Width-adaptive model.
    Width,
    /// Width- and depth-adaptive model.
    WidthDepth,
    /// Width- and depth-adaptive model after label fine-tuning and selection.
    Finetuned,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Teacher => "teacher",
            Stage::Width => "width",
            Stage::WidthDepth => "width_depth",
            Stage::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub stage: Stage,
    pub rewired: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: AdaptiveModel,
}

impl Checkpoint {
    pub fn new(model: AdaptiveModel, stage: Stage, rewired: bool, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                config: model.config().clone(),
                stage,
                rewired,
                seed,
            },
            model,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Config(format!("cannot encode header: {e}")))?;
        let mut out = Vec::with_capacity(header.len() + 16 + self.model.store().num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, name, t) in self.model.store().iter() {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let header_len = r.u64("header length")? as usize;
        let header_at = r.pos;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| Error::Format {
                offset: header_at as u64,
                message: format!("header is not valid JSON: {e}"),
            })?;
        let mut store = ParamStore::new();
        while r.pos < bytes.len() {
            let at = r.pos as u64;
            let name_len = r.u64("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at,
                    message: "array name is not UTF-8".into(),
                })?
                .to_string();
            let dtype_at = r.pos as u64;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format {
                    offset: dtype_at,
                    message: format!("unsupported dtype code {dtype}"),
                });
            }
            let rank = r.u64("rank")? as usize;
            if rank > 8 {
                return Err(Error::Format {
                    offset: dtype_at + 1,
                    message: format!("implausible rank {rank}"),
                });
            }
            let shape = (0..rank)
                .map(|_| r.u64("dim").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let payload_at = r.pos as u64;
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Format {
                    offset: payload_at,
                    message: format!("array {name} shape {shape:?} is too large"),
                })?;
            let data = r
                .take(numel * 8, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)?.with_requires_grad(true);
            store.add(name, t);
        }
        let model = AdaptiveModel::from_store(header.config.clone(), store)?;
        Ok(Self { header, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Refuses unless the checkpoint sits at `expected` (and is rewired if
    /// `need_rewired`).
    pub fn require_stage(&self, expected: Stage, need_rewired: bool) -> Result<()> {
        let describe = |s: Stage, rewired: bool| {
            if s == Stage::Teacher {
                format!("{s} ({})", if rewired { "rewired" } else { "not rewired" })
            } else {
                s.to_string()
            }
        };
        let ok = self.header.stage == expected && (!need_rewired || self.header.rewired);
        if ok {
            Ok(())
        } else {
            Err(Error::Stage {
                expected: describe(expected, need_rewired || expected != Stage::Teacher),
                found: describe(self.header.stage, self.header.rewired),
            })
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
