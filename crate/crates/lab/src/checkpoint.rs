//! Versioned binary checkpoint container.
//!
//! Layout (little endian): the 8-byte magic `RPACKPT\0`, a `u32` format
//! version, a `u32` section count, then sections of `[tag: 4 bytes]
//! [len: u64] [payload]`. Tensor-list payloads are a `u32` count followed
//! by `name_len: u32, name, rank: u32, dims: u64 * rank, data: f64 * n`.
//! Floats are stored as raw IEEE-754 bits, so a round trip is exact.

use std::path::Path;

use rpa_core::model::Model;
use rpa_core::schedules::EvalWeights;
use rpa_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 8] = b"RPACKPT\0";
pub const VERSION: u32 = 1;

const CONF: &[u8; 4] = b"CONF";
const META: &[u8; 4] = b"META";
const PARM: &[u8; 4] = b"PARM";
const EMA: &[u8; 4] = b"EMA_";
const SWA: &[u8; 4] = b"SWA_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: usize,
    pub epoch: usize,
    pub bias_scales: Vec<f64>,
    pub lambda_sat: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor)>,
    pub ema: Option<Vec<Tensor>>,
    pub swa: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        meta: CheckpointMeta,
        model: &Model,
        ema: Option<&[Tensor]>,
        swa: Option<Vec<Tensor>>,
    ) -> Self {
        Self {
            config: config.clone(),
            meta,
            params: model
                .params()
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            ema: ema.map(|e| e.to_vec()),
            swa,
        }
    }

    /// Weights used for evaluation: SWA, then EMA, then raw.
    pub fn eval_weights(&self) -> (EvalWeights, Vec<Tensor>) {
        let raw: Vec<Tensor> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let (w, t) = rpa_core::schedules::select_eval_weights(
            &raw,
            None,
            self.swa.as_deref(),
        );
        match (w, &self.ema) {
            (EvalWeights::Raw, Some(e)) => (EvalWeights::Ema, e.clone()),
            _ => (w, t.to_vec()),
        }
    }

    /// Rebuilds the model with the given weights.
    pub fn model_with(&self, weights: Vec<Tensor>) -> Result<Model> {
        let mut m = Model::new(self.config.model.clone(), self.config.seed)?;
        let names: Vec<&str> = m.params().iter().map(|(_, n, _)| n).collect();
        if names.len() != self.params.len() || names.iter().zip(&self.params).any(|(a, (b, _))| a != b) {
            return Err(LabError::Format("parameter layout does not match the stored config".into()));
        }
        if !m.params_mut().load_values(weights) {
            return Err(LabError::Format("parameter shapes do not match the stored config".into()));
        }
        m.set_bias_scales(&self.meta.bias_scales);
        Ok(m)
    }

    pub fn raw_model(&self) -> Result<Model> {
        self.model_with(self.params.iter().map(|(_, t)| t.clone()).collect())
    }

    pub fn eval_model(&self) -> Result<(EvalWeights, Model)> {
        let (w, t) = self.eval_weights();
        Ok((w, self.model_with(t)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
            (CONF, self.config.to_toml().into_bytes()),
            (META, serde_json::to_vec(&self.meta).expect("meta serializes")),
            (PARM, encode_tensors(self.params.iter().map(|(n, t)| (n.as_str(), t)))),
        ];
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        if let Some(e) = &self.ema {
            sections.push((EMA, encode_tensors(names.iter().copied().zip(e))));
        }
        if let Some(s) = &self.swa {
            sections.push((SWA, encode_tensors(names.iter().copied().zip(s))));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(LabError::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(LabError::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = r.u32()?;
        let (mut config, mut meta, mut params, mut ema, mut swa) = (None, None, None, None, None);
        for _ in 0..n {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            match &tag {
                CONF => {
                    let text = std::str::from_utf8(payload).map_err(|e| LabError::Format(e.to_string()))?;
                    config = Some(
                        toml::from_str::<RunConfig>(text).map_err(|e| LabError::Format(e.to_string()))?,
                    );
                }
                META => meta = Some(serde_json::from_slice(payload).map_err(|e| LabError::Format(e.to_string()))?),
                PARM => params = Some(decode_tensors(payload)?),
                EMA => ema = Some(decode_tensors(payload)?.into_iter().map(|(_, t)| t).collect()),
                SWA => swa = Some(decode_tensors(payload)?.into_iter().map(|(_, t)| t).collect()),
                other => {
                    return Err(LabError::Format(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(LabError::Format("trailing bytes after the last section".into()));
        }
        let missing = |s: &str| LabError::Format(format!("missing {s} section"));
        Ok(Self {
            config: config.ok_or_else(|| missing("config"))?,
            meta: meta.ok_or_else(|| missing("meta"))?,
            params: params.ok_or_else(|| missing("parameter"))?,
            ema,
            swa,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| LabError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn encode_tensors<'a>(items: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let items: Vec<_> = items.collect();
    let mut out = Vec::new();
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for (name, t) in items {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    out
}

fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let n = r.u32()?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| LabError::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        if rank > 4 {
            return Err(LabError::Format(format!("{name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count.checked_mul(8).ok_or_else(|| LabError::Format("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("eight bytes"))))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(LabError::Format("trailing bytes in tensor section".into()));
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| LabError::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }
}
