//! The `DGCV1` container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      "DGCV1"
//! version    u32 (= 1)
//! kind       u8   0 = training checkpoint, 1 = compiled export
//! step       u64
//! config     u32 length + UTF-8 JSON model configuration
//! meta       u32 length + UTF-8 JSON: budget and, for exports, savings report
//! tensors    u32 count, then per tensor:
//!              u16 name length, name, u8 dtype (0 f32, 1 f64, 2 u32),
//!              u8 rank, rank x u32 dims, data
//! optimizer  u8 present; if 1: u32 count, per buffer u64 length + f32 data,
//!            then u32 count, per gate buffer u32 length + f64 data
//! ```

use std::path::Path;

use crate::compiler::SavingsReport;
use crate::error::{DgError, Result};
use crate::io::{atomic_write, Reader};
use crate::model::{Model, ModelConfig, TensorData};
use crate::train::{BudgetConfig, OptimizerState};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 5] = b"DGCV1";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Training,
    Export,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerBlob {
    pub velocities: Vec<Vec<f32>>,
    pub gate_velocities: Vec<Vec<f64>>,
}

impl OptimizerBlob {
    pub fn from_state(s: &OptimizerState<f32>) -> Self {
        Self {
            velocities: s.velocities.clone(),
            gate_velocities: s.gate_velocities.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<BudgetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub savings: Option<SavingsReport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub step: u64,
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, TensorData)>,
    pub optimizer: Option<OptimizerBlob>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model<f32>,
        step: u64,
        budget: Option<BudgetConfig>,
        optimizer: Option<OptimizerBlob>,
    ) -> Self {
        Self {
            kind: CheckpointKind::Training,
            step,
            config: model.config().clone(),
            meta: CheckpointMeta { budget, savings: None },
            tensors: model.named_tensors(),
            optimizer,
        }
    }

    /// Compiles every DGConv layer and embeds the savings report.
    pub fn export(
        model: &Model<f32>,
        step: u64,
        budget: Option<BudgetConfig>,
        uniform_groups: usize,
    ) -> Result<Self> {
        let savings = model.savings_report(uniform_groups)?;
        let compiled = model.compile()?;
        Ok(Self {
            kind: CheckpointKind::Export,
            step,
            config: model.config().clone(),
            meta: CheckpointMeta {
                budget,
                savings: Some(savings),
            },
            tensors: compiled.named_tensors(),
            optimizer: None,
        })
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_named_tensors(self.config.clone(), &self.tensors)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Training => 0,
            CheckpointKind::Export => 1,
        });
        out.extend_from_slice(&self.step.to_le_bytes());
        put_blob(&mut out, to_json(&self.config)?.as_bytes())?;
        put_blob(&mut out, to_json(&self.meta)?.as_bytes())?;
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| DgError::Value(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (tag, dims) = match t {
                TensorData::F32 { dims, .. } => (0u8, dims),
                TensorData::F64 { dims, .. } => (1, dims),
                TensorData::U32 { dims, .. } => (2, dims),
            };
            out.push(tag);
            out.push(u8::try_from(dims.len()).map_err(|_| DgError::Value(format!("rank of {name}")))?);
            for &d in dims {
                out.extend_from_slice(&u32_len(d)?.to_le_bytes());
            }
            let count: usize = dims.iter().product();
            match t {
                TensorData::F32 { data, .. } => {
                    check_count(name, count, data.len())?;
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                TensorData::F64 { data, .. } => {
                    check_count(name, count, data.len())?;
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                TensorData::U32 { data, .. } => {
                    check_count(name, count, data.len())?;
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                out.extend_from_slice(&u32_len(o.velocities.len())?.to_le_bytes());
                for v in &o.velocities {
                    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
                out.extend_from_slice(&u32_len(o.gate_velocities.len())?.to_le_bytes());
                for v in &o.gate_velocities {
                    out.extend_from_slice(&u32_len(v.len())?.to_le_bytes());
                    v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.bytes(MAGIC.len()).ok() != Some(&MAGIC[..]) {
            return Err(DgError::Parse {
                offset: 0,
                msg: "not a DGCV1 file".into(),
            });
        }
        let at = r.offset();
        let version = r.u32()?;
        if version != VERSION {
            return Err(DgError::Parse {
                offset: at,
                msg: format!("unsupported version {version}"),
            });
        }
        let at = r.offset();
        let kind = match r.u8()? {
            0 => CheckpointKind::Training,
            1 => CheckpointKind::Export,
            k => {
                return Err(DgError::Parse {
                    offset: at,
                    msg: format!("unknown kind {k}"),
                })
            }
        };
        let step = r.u64()?;
        let at = r.offset();
        let config_bytes = blob(&mut r)?;
        let config: ModelConfig = serde_json::from_slice(config_bytes).map_err(|e| DgError::Parse {
            offset: at,
            msg: format!("model configuration: {e}"),
        })?;
        let at = r.offset();
        let meta = serde_json::from_slice(blob(&mut r)?).map_err(|e| DgError::Parse {
            offset: at,
            msg: format!("metadata: {e}"),
        })?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let at = r.offset();
            let n = r.u16()? as usize;
            let name = std::str::from_utf8(r.bytes(n)?)
                .map_err(|_| DgError::Parse {
                    offset: at,
                    msg: "tensor name is not UTF-8".into(),
                })?
                .to_string();
            let tag_at = r.offset();
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = r.u32s(rank)?.into_iter().map(|d| d as usize).collect::<Vec<_>>();
            let len = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| DgError::Parse {
                offset: tag_at,
                msg: format!("dims of {name} overflow"),
            })?;
            let t = match tag {
                0 => TensorData::F32 { data: r.f32s(len)?, dims },
                1 => TensorData::F64 { data: r.f64s(len)?, dims },
                2 => TensorData::U32 { data: r.u32s(len)?, dims },
                other => {
                    return Err(DgError::Parse {
                        offset: tag_at,
                        msg: format!("unknown dtype {other} for {name}"),
                    })
                }
            };
            tensors.push((name, t));
        }
        let at = r.offset();
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let n = r.u32()? as usize;
                let mut velocities = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    let len = r.u64()?;
                    let len = usize::try_from(len).map_err(|_| DgError::Parse {
                        offset: r.offset(),
                        msg: "buffer too large".into(),
                    })?;
                    velocities.push(r.f32s(len)?);
                }
                let n = r.u32()? as usize;
                let mut gate_velocities = Vec::with_capacity(n.min(4096));
                for _ in 0..n {
                    let len = r.u32()? as usize;
                    gate_velocities.push(r.f64s(len)?);
                }
                Some(OptimizerBlob {
                    velocities,
                    gate_velocities,
                })
            }
            f => {
                return Err(DgError::Parse {
                    offset: at,
                    msg: format!("bad optimizer flag {f}"),
                })
            }
        };
        r.finish()?;
        Ok(Self {
            kind,
            step,
            config,
            meta,
            tensors,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DgError::Data(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }
}

fn to_json<S: serde::Serialize>(v: &S) -> Result<String> {
    serde_json::to_string(v).map_err(|e| DgError::Value(e.to_string()))
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| DgError::Value(format!("length {n} exceeds u32")))
}

fn check_count(name: &str, expect: usize, got: usize) -> Result<()> {
    if expect != got {
        return Err(DgError::Dimension(format!("tensor {name}: dims imply {expect} values, holds {got}")));
    }
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    out.extend_from_slice(&u32_len(bytes.len())?.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

fn blob<'a>(r: &mut Reader<'a>) -> Result<&'a [u8]> {
    let n = r.u32()? as usize;
    r.bytes(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConvMode;
    use crate::train::init_gates;

    fn model() -> Model<f32> {
        let cfg = ModelConfig {
            input_size: 8,
            stem_width: 4,
            stage_widths: vec![4, 8],
            blocks_per_stage: vec![1, 1],
            mode: ConvMode::Dgconv,
            ..ModelConfig::desk()
        };
        let mut m = Model::new(cfg, 1).unwrap();
        init_gates(&mut m, 1).unwrap();
        m
    }

    #[test]
    fn save_load_save_identical() {
        let mut m = model();
        let opt = OptimizerState::new(&mut m, 0.9, 1e-4);
        let ck = Checkpoint::from_model(&m, 17, Some(BudgetConfig::default()), Some(OptimizerBlob::from_state(&opt)));
        let a = ck.encode().unwrap();
        let back = Checkpoint::decode(&a).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode().unwrap(), a);
        assert_eq!(back.model().unwrap().named_tensors(), m.named_tensors());
    }

    #[test]
    fn export_round_trip_and_size() {
        let mut m = model();
        m.update_gates(|_, g| g.fill(-1.0)).unwrap();
        let dense = Checkpoint::from_model(&m, 0, None, None).encode().unwrap();
        let ex = Checkpoint::export(&m, 0, None, 4).unwrap();
        let bytes = ex.encode().unwrap();
        assert!(bytes.len() < dense.len());
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.kind, CheckpointKind::Export);
        assert!(back.model().unwrap().is_compiled());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = Checkpoint::from_model(&model(), 0, None, None).encode().unwrap();
        assert!(matches!(Checkpoint::decode(b"NOPE"), Err(DgError::Parse { offset: 0, .. })));
        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::decode(&bytes[..cut]), Err(DgError::Parse { .. })), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }
}
