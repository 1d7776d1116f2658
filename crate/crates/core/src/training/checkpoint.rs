//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `DLLMCKPT`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor's
//! values as little-endian `f64` in header order.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Tensor};

use super::config::RunConfig;
use super::model::Model;
use super::trainer::{BestState, EpochRecord, TrainData, TrainState};

pub const MAGIC: &[u8; 8] = b"DLLMCKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config_hash: String,
    config: RunConfig,
    epoch: usize,
    bad_epochs: usize,
    stopped: bool,
    adam_step: u64,
    best_epoch: Option<usize>,
    best_val_auc: Option<f64>,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub config_hash: String,
    pub names: Vec<String>,
    /// Parameter values at the end of the last completed epoch.
    pub params: Vec<Tensor>,
    pub state: TrainState,
}

impl Checkpoint {
    /// Parameters to evaluate with: the best validation epoch's when known.
    pub fn eval_params(&self) -> &[Tensor] {
        self.state.best.as_ref().map_or(&self.params, |b| &b.params)
    }

    /// Rebuild the model on `data` and load the current parameters.
    pub fn restore(&self, data: &TrainData) -> Result<(Model, TrainState)> {
        let mut model = Model::build(
            &self.config,
            &data.dataset,
            &data.split.train,
            data.semantic.clone(),
        )?;
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        if names != self.names {
            return Err(Error::Data(
                "checkpoint parameters do not match the model built from its config".into(),
            ));
        }
        model.store.load_values(self.params.clone())?;
        Ok((model, self.state.clone()))
    }
}

pub fn save(path: &Path, model: &Model, state: &TrainState) -> Result<()> {
    let names: Vec<&str> = model.store.iter().map(|(n, _)| n).collect();
    let mut groups: Vec<(&str, &[Tensor])> = vec![
        ("param", model.store.values()),
        ("adam_m", &state.adam.first_moment),
        ("adam_v", &state.adam.second_moment),
    ];
    if let Some(best) = &state.best {
        groups.push(("best", &best.params));
    }
    let mut tensors = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for (group, values) in groups {
        for (name, t) in names.iter().zip(values) {
            tensors.push(TensorEntry {
                group: group.into(),
                name: (*name).into(),
                shape: t.shape().to_vec(),
            });
            payload.push(t);
        }
    }
    let header = Header {
        config_hash: model.config.hash(),
        config: model.config.clone(),
        epoch: state.epoch,
        bad_epochs: state.bad_epochs,
        stopped: state.stopped,
        adam_step: state.adam.step,
        best_epoch: state.best.as_ref().map(|b| b.epoch),
        best_val_auc: state.best.as_ref().map(|b| b.val_auc),
        history: state.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut bytes =
        Vec::with_capacity(20 + json.len() + 8 * payload.iter().map(|t| t.len()).sum::<usize>());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in payload {
        for x in t.data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    if header.config.hash() != header.config_hash {
        return Err(bad("config hash does not match the embedded config"));
    }
    let mut offset = 20 + hlen;
    let mut groups: std::collections::HashMap<&str, Vec<Tensor>> = Default::default();
    let mut names = Vec::new();
    for entry in &header.tensors {
        let len: usize = entry.shape.iter().product();
        let raw = bytes
            .get(offset..offset + 8 * len)
            .ok_or_else(|| bad("truncated tensor data"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * len;
        if entry.group == "param" {
            names.push(entry.name.clone());
        }
        groups
            .entry(match entry.group.as_str() {
                "param" => "param",
                "adam_m" => "adam_m",
                "adam_v" => "adam_v",
                "best" => "best",
                _ => return Err(bad(&format!("unknown tensor group {}", entry.group))),
            })
            .or_default()
            .push(Tensor::new(entry.shape.clone(), data)?);
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut take = |g: &str| groups.remove(g).unwrap_or_default();
    let params = take("param");
    let (m, v, best_params) = (take("adam_m"), take("adam_v"), take("best"));
    if m.len() != params.len() || v.len() != params.len() {
        return Err(bad("optimizer state does not match the parameters"));
    }
    let best = match (header.best_epoch, header.best_val_auc) {
        (Some(epoch), Some(val_auc)) if best_params.len() == params.len() => Some(BestState {
            epoch,
            val_auc,
            params: best_params,
        }),
        (None, None) if best_params.is_empty() => None,
        _ => return Err(bad("inconsistent best-epoch record")),
    };
    let adam = AdamState {
        config: header.config.train.adam(),
        step: header.adam_step,
        first_moment: m,
        second_moment: v,
    };
    Ok(Checkpoint {
        config_hash: header.config_hash,
        config: header.config,
        names,
        params,
        state: TrainState {
            epoch: header.epoch,
            adam,
            best,
            bad_epochs: header.bad_epochs,
            history: header.history,
            stopped: header.stopped,
        },
    })
}
