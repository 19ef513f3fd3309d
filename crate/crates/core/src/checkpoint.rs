//! Single-file checkpoints: an 8-byte magic, a little-endian `u64` header
//! length, a JSON header, then raw little-endian `f64` tensor data in header
//! order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"DHICMCK1";

/// Optimizer and schedule position needed to resume training exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Current epoch, counted from 0.
    pub epoch: usize,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: usize,
    pub best_valid: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub adam_m: Vec<Tensor>,
    pub adam_v: Vec<Tensor>,
}

impl TrainState {
    pub fn fresh(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        TrainState {
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            best_valid: None,
            best_epoch: None,
            bad_epochs: 0,
            adam_m: zeros(),
            adam_v: zeros(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: Vec<(String, Tensor)>,
    pub state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    step: u64,
    epoch: usize,
    batch_in_epoch: usize,
    /// Bit pattern, so the value survives the text header exactly.
    best_valid_bits: Option<u64>,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    tensors: Vec<TensorEntry>,
    state: Option<StateHeader>,
}

impl Checkpoint {
    pub fn from_model(config: &ExperimentConfig, model: &Model, state: Option<TrainState>) -> Self {
        Checkpoint {
            config: config.clone(),
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            state,
        }
    }

    /// Rebuilds the model the checkpoint was taken from.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(self.config.model.clone())?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<TensorEntry> = self
            .params
            .iter()
            .map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() })
            .collect();
        let mut blobs: Vec<&Tensor> = self.params.iter().map(|(_, t)| t).collect();
        let state = self.state.as_ref().map(|s| {
            for (i, (name, _)) in self.params.iter().enumerate() {
                for (prefix, t) in [("adam_m", &s.adam_m[i]), ("adam_v", &s.adam_v[i])] {
                    tensors.push(TensorEntry { name: format!("{prefix}/{name}"), shape: t.shape().to_vec() });
                    blobs.push(t);
                }
            }
            StateHeader {
                step: s.step,
                epoch: s.epoch,
                batch_in_epoch: s.batch_in_epoch,
                best_valid_bits: s.best_valid.map(f64::to_bits),
                best_epoch: s.best_epoch,
                bad_epochs: s.bad_epochs,
            }
        });
        if let Some(s) = &self.state {
            if s.adam_m.len() != self.params.len() || s.adam_v.len() != self.params.len() {
                return Err(Error::Checkpoint("optimizer moments do not match parameters".into()));
            }
        }
        let header = serde_json::to_vec(&Header {
            config: self.config.to_kv(),
            tensors,
            state,
        })?;
        let total: usize = blobs.iter().map(|t| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(16 + header.len() + total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let config = ExperimentConfig::from_kv(&header.config)?;
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if data.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[n * 8..];
            tensors.push((entry.name, Tensor::new(entry.shape, values)?));
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let n_params = if header.state.is_some() {
            if tensors.len() % 3 != 0 {
                return Err(bad("optimizer moments do not match parameters"));
            }
            tensors.len() / 3
        } else {
            tensors.len()
        };
        let moments = tensors.split_off(n_params);
        let state = header.state.map(|s| {
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for (i, (_, t)) in moments.into_iter().enumerate() {
                if i % 2 == 0 {
                    m.push(t);
                } else {
                    v.push(t);
                }
            }
            TrainState {
                step: s.step,
                epoch: s.epoch,
                batch_in_epoch: s.batch_in_epoch,
                best_valid: s.best_valid_bits.map(f64::from_bits),
                best_epoch: s.best_epoch,
                bad_epochs: s.bad_epochs,
                adam_m: m,
                adam_v: v,
            }
        });
        Ok(Checkpoint { config, params: tensors, state })
    }

    /// Writes atomically via a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.model = ModelConfig {
            d_model: 8,
            heads: 2,
            d_m: 8,
            enc_layers: 1,
            dec_layers: 1,
            ffn_dim: 8,
            vocab_size: 9,
            ..ModelConfig::default()
        };
        cfg
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = small();
        let model = Model::new(cfg.model.clone()).unwrap();
        let mut state = TrainState::fresh(&model);
        state.step = 17;
        state.best_valid = Some(0.1 + 0.2);
        state.adam_v[0].data_mut()[0] = 1e-300;
        let ck = Checkpoint::from_model(&cfg, &model, Some(state));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.model().unwrap().params(), model.params());

        let plain = Checkpoint::from_model(&cfg, &model, None);
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes().unwrap()).unwrap(), plain);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
        let cfg = small();
        let model = Model::new(cfg.model.clone()).unwrap();
        let bytes = Checkpoint::from_model(&cfg, &model, None).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }
}
