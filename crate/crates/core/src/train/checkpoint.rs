//! Binary checkpoint format.
//!
//! ```text
//! "MLRMCKPT" | u32 version | u32 record count
//! record*    : u32 name length | name | u32 ndim | u32 dim* | f64 value*
//! trailer    : u64 length | JSON {step, config, vocab}
//! ```
//! All integers and floats are little-endian; values are stored as `f64`,
//! which round-trips both supported scalar types exactly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::trainer::TrainState;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::text::Vocab;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MLRMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A training state together with what is needed to use it.
#[derive(Clone, Debug)]
pub struct Checkpoint<S> {
    pub state: TrainState<S>,
    pub config: RunConfig,
    pub vocab: Vocab,
}

#[derive(Serialize, Deserialize)]
struct Trailer {
    step: usize,
    config: RunConfig,
    vocab: String,
}

fn put_u32(out: &mut Vec<u8>, n: usize, what: &str) -> Result<()> {
    let n = u32::try_from(n)
        .map_err(|_| Error::Format(format!("{what} {n} does not fit the u32 header field")))?;
    out.extend(n.to_le_bytes());
    Ok(())
}

fn put_record<S: Scalar>(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[S]) -> Result<()> {
    put_u32(out, name.len(), "record name length")?;
    out.extend(name.as_bytes());
    put_u32(out, shape.len(), "rank")?;
    for &d in shape {
        put_u32(out, d, "dimension")?;
    }
    for x in data {
        out.extend(x.as_f64().to_le_bytes());
    }
    Ok(())
}

/// Serialises a checkpoint to bytes.
pub fn encode_checkpoint<S: Scalar>(ckpt: &Checkpoint<S>) -> Result<Vec<u8>> {
    let st = &ckpt.state;
    let mut records = Vec::new();
    let mut count = 0u32;
    for (i, p) in st.model.params.iter().enumerate() {
        let shape = p.value.shape();
        put_record(
            &mut records,
            &format!("param:{}", p.name),
            shape,
            p.value.values(),
        )?;
        put_record(&mut records, &format!("m:{}", p.name), shape, &st.m[i])?;
        put_record(&mut records, &format!("v:{}", p.name), shape, &st.v[i])?;
        count += 3;
    }
    put_record(&mut records, "param:tau", &[1], &[st.tau])?;
    put_record(&mut records, "m:tau", &[1], &[st.m_tau])?;
    put_record(&mut records, "v:tau", &[1], &[st.v_tau])?;
    count += 3;

    let trailer = serde_json::to_vec(&Trailer {
        step: st.step,
        config: ckpt.config.clone(),
        vocab: ckpt.vocab.to_text(),
    })?;
    let mut out = Vec::with_capacity(16 + records.len() + 8 + trailer.len());
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend(count.to_le_bytes());
    out.extend(records);
    out.extend((trailer.len() as u64).to_le_bytes());
    out.extend(trailer);
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, ckpt: &Checkpoint<S>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ckpt)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Record {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Parses checkpoint bytes.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<Checkpoint<S>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = r.u32()? as usize;
    let mut records = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("record name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("record shape overflows".into()))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format("record too large".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.insert(name, Record { shape, data });
    }
    let len = r.u64()? as usize;
    let trailer: Trailer = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint trailer: {e}")))?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Vec<S>> {
        let rec = records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks record {name}")))?;
        if rec.shape != shape {
            return Err(Error::Format(format!(
                "record {name} has shape {:?}, expected {shape:?}",
                rec.shape
            )));
        }
        Ok(rec.data.into_iter().map(S::lit).collect())
    };
    let cfg = trailer.config.model.clone();
    let mut params = ParamSet::<S>::zeros(&cfg)?;
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for p in params.iter_mut() {
        let shape = p.value.shape().to_vec();
        p.value = Tensor::new(shape.clone(), take(&format!("param:{}", p.name), &shape)?)?;
        m.push(take(&format!("m:{}", p.name), &shape)?);
        v.push(take(&format!("v:{}", p.name), &shape)?);
    }
    let tau = take("param:tau", &[1])?[0];
    let m_tau = take("m:tau", &[1])?[0];
    let v_tau = take("v:tau", &[1])?[0];
    if let Some(extra) = records.keys().next() {
        return Err(Error::Format(format!("unexpected record {extra}")));
    }
    Ok(Checkpoint {
        state: TrainState {
            model: Model {
                config: cfg,
                params,
            },
            tau,
            m,
            v,
            m_tau,
            v_tau,
            step: trailer.step,
        },
        config: trailer.config,
        vocab: Vocab::from_text(&trailer.vocab)?,
    })
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and insists it was trained with `expected`.
pub fn load_checkpoint_for<S: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<Checkpoint<S>> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.config.model != expected {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different model config",
            path.display()
        )));
    }
    Ok(ckpt)
}
