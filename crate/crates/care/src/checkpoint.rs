//! Binary checkpoint format.
//!
//! ```text
//! "CAREckpt" | u32 version | u64 header length | header JSON
//! per tensor: u16 name length | name | u8 rank | u32 dims[rank] | f32 data
//! ```
//!
//! Ensemble members are stored one after another with names prefixed `m{k}/`.

use std::fs;
use std::path::Path;

use care_core::model::{Model, ModelConfig};
use care_core::tensor::Tensor;
use care_core::train::{Checkpoint, EpochLog, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f32s, Reader};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CAREckpt";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    n_shot: Option<usize>,
    member_seeds: Vec<u64>,
    log: Vec<EpochLog>,
    tensors: usize,
}

fn tensor_name(members: usize, k: usize, name: &str) -> String {
    if members == 1 {
        name.to_string()
    } else {
        format!("m{k}/{name}")
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = ck.members.iter().map(|m| m.params().len()).sum();
    let header = Header {
        model: ck.model.clone(),
        train: ck.train.clone(),
        n_shot: ck.n_shot,
        member_seeds: ck.member_seeds.clone(),
        log: ck.log.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::config(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (k, m) in ck.members.iter().enumerate() {
        for (name, t) in m.named_params() {
            let name = tensor_name(ck.members.len(), k, name);
            let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(path, bytes);
    r.magic(MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            kind: "checkpoint",
            found: version,
            supported: VERSION,
        });
    }
    let len = r.u64("header length")?;
    let at = r.offset();
    let raw = r.take(usize::try_from(len).unwrap_or(usize::MAX), "header")?;
    let header: Header = serde_json::from_slice(raw).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: at,
        msg: format!("header JSON: {e}"),
    })?;
    let members = header.member_seeds.len().max(1);
    let mut named: Vec<Vec<(String, Tensor)>> = vec![Vec::new(); members];
    for _ in 0..header.tensors {
        let at = r.offset();
        let n = r.u16("tensor name length")? as usize;
        let name = r.str(n, "tensor name")?.to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| r.error(format!("tensor {name} is too large")))?;
        let data = r.f32s(count, "tensor data")?;
        let (k, base) = match name.split_once('/') {
            Some((m, rest)) if members > 1 => {
                let k = m.strip_prefix('m').and_then(|s| s.parse::<usize>().ok()).filter(|&k| k < members);
                (k.ok_or_else(|| r.error(format!("bad member prefix in {name}")))?, rest.to_string())
            }
            _ => (0, name),
        };
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: at,
            msg: e.to_string(),
        })?;
        named[k].push((base, t));
    }
    r.finish()?;
    let mut models = Vec::with_capacity(members);
    for (k, params) in named.into_iter().enumerate() {
        let config = ModelConfig {
            seed: header.member_seeds.get(k).copied().unwrap_or(header.model.seed),
            ..header.model.clone()
        };
        models.push(Model::from_parameters(&config, params).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: r.offset(),
            msg: format!("member {k}: {e}"),
        })?);
    }
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        members: models,
        member_seeds: header.member_seeds,
        n_shot: header.n_shot,
        log: header.log,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ck)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode_checkpoint(path, &bytes)
}
