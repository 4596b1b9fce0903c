//! Versioned container of named `f64` arrays, used for pre-training state,
//! calibrated classifiers and persisted patch weights.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 8 bytes   magic "HWIDCKPT"
//! u32       format version
//! u64       header length n
//! n bytes   UTF-8 JSON header {"version", "kind", "meta", "arrays": [{"name", "rows", "cols"}]}
//! ...       each array's rows·cols f64 values, row-major, in header order
//! ```
//!
//! Arrays are looked up by name, so readers ignore entries they do not know.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::calibrate::ClassifierState;
use crate::contrastive::PretrainState;
use crate::corpus::write_atomic;
use crate::encoder::{EncoderConfig, EncoderState};
use crate::error::{Error, Result};
use crate::matching::{MatchingState, WeightVector};
use crate::optim::AdamState;
use crate::params::ParamSet;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 8] = b"HWIDCKPT";
pub const VERSION: u32 = 1;

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    /// Free-form JSON: configs, counters, labels.
    pub meta: Value,
    arrays: Vec<(String, Matrix)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.arrays.push((name.into(), value));
    }

    /// Every parameter of `params` under `prefix/`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, value) in params.names().iter().zip(params.values()) {
            self.push(format!("{prefix}/{name}"), value.clone());
        }
    }

    pub fn arrays(&self) -> &[(String, Matrix)] {
        &self.arrays
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| corrupt(format!("missing array {name}")))
    }

    /// Fill a set with the same names and shapes as `template` from `prefix/`.
    pub fn read_params(&self, prefix: &str, template: &ParamSet) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for (name, like) in template.names().iter().zip(template.values()) {
            let key = format!("{prefix}/{name}");
            let m = self.get(&key)?;
            if m.shape() != like.shape() {
                return Err(corrupt(format!(
                    "{key} has shape {:?}, expected {:?}",
                    m.shape(),
                    like.shape()
                )));
            }
            out.push(name.clone(), m.clone());
        }
        Ok(out)
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| corrupt(format!("missing meta field {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| corrupt(format!("meta field {key}: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, m)| ArrayEntry {
                    name: name.clone(),
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let values: usize = self.arrays.iter().map(|(_, m)| m.data.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &self.arrays {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        let mut pos = header_end;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for entry in header.arrays {
            let len = entry
                .rows
                .checked_mul(entry.cols)
                .ok_or_else(|| corrupt(format!("{} is too large", entry.name)))?;
            let end = len
                .checked_mul(8)
                .and_then(|b| pos.checked_add(b))
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt(format!("truncated data for {}", entry.name)))?;
            let data = bytes[pos..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((entry.name, Matrix::from_vec(entry.rows, entry.cols, data)));
            pos = end;
        }
        if pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            arrays,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(corrupt(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn rows_matrix(rows: &[&[f64]], cols: usize) -> Matrix {
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        data.extend_from_slice(r);
    }
    Matrix::from_vec(rows.len(), cols, data)
}

/// Everything needed to continue pre-training bit-for-bit.
pub fn pretrain_checkpoint(state: &PretrainState) -> Checkpoint {
    let m = state.encoder.config.token_len;
    let rounds: Vec<usize> = state.matching.iter().map(|s| s.rounds).collect();
    let stable: Vec<usize> = state
        .matching
        .iter()
        .map(MatchingState::stable_rounds)
        .collect();
    let stopped: Vec<bool> = state.matching.iter().map(|s| s.stopped).collect();
    let mut ck = Checkpoint::new(
        KIND_PRETRAIN,
        json!({
            "encoder": state.encoder.config,
            "step": state.encoder.step,
            "adam_steps": state.optimizer.steps,
            "matching_rounds": rounds,
            "matching_stable_rounds": stable,
            "matching_stopped": stopped,
        }),
    );
    ck.push_params("online", &state.encoder.online);
    ck.push_params("momentum", &state.encoder.momentum);
    ck.push_params("adam.first", &state.optimizer.first);
    ck.push_params("adam.second", &state.optimizer.second);
    let weights: Vec<&[f64]> = state.matching.iter().map(|s| s.weights.weights()).collect();
    ck.push("matching.weights", rows_matrix(&weights, m));
    let active: Vec<Vec<f64>> = state
        .matching
        .iter()
        .map(|s| {
            s.weights
                .active()
                .iter()
                .map(|&a| f64::from(u8::from(a)))
                .collect()
        })
        .collect();
    let active: Vec<&[f64]> = active.iter().map(Vec::as_slice).collect();
    ck.push("matching.active", rows_matrix(&active, m));
    let previous: Vec<&[f64]> = state.matching.iter().map(MatchingState::previous).collect();
    ck.push("matching.previous", rows_matrix(&previous, m));
    let width = state.queue.front().map_or(0, Vec::len);
    let queue: Vec<&[f64]> = state.queue.iter().map(Vec::as_slice).collect();
    ck.push("queue", rows_matrix(&queue, width));
    ck
}

pub fn restore_pretrain(ck: &Checkpoint) -> Result<PretrainState> {
    ck.expect_kind(KIND_PRETRAIN)?;
    let config: EncoderConfig = ck.meta_field("encoder")?;
    let fresh = crate::encoder::init_state(&config)?;
    let encoder = EncoderState {
        online: ck.read_params("online", &fresh.online)?,
        momentum: ck.read_params("momentum", &fresh.momentum)?,
        step: ck.meta_field("step")?,
        config,
    };
    let optimizer = AdamState {
        first: ck.read_params("adam.first", &encoder.online)?,
        second: ck.read_params("adam.second", &encoder.online)?,
        steps: ck.meta_field("adam_steps")?,
    };
    let rounds: Vec<usize> = ck.meta_field("matching_rounds")?;
    let stable: Vec<usize> = ck.meta_field("matching_stable_rounds")?;
    let stopped: Vec<bool> = ck.meta_field("matching_stopped")?;
    let weights = ck.get("matching.weights")?;
    let active = ck.get("matching.active")?;
    let previous = ck.get("matching.previous")?;
    let n = rounds.len();
    let m = encoder.config.token_len;
    for (name, a) in [
        ("matching.weights", weights),
        ("matching.active", active),
        ("matching.previous", previous),
    ] {
        if a.shape() != (n, m) {
            return Err(corrupt(format!(
                "{name} has shape {:?}, expected {:?}",
                a.shape(),
                (n, m)
            )));
        }
    }
    if stable.len() != n || stopped.len() != n {
        return Err(corrupt("matching counters disagree in length"));
    }
    let mut matching = Vec::with_capacity(n);
    for i in 0..n {
        let mask = active.row(i).iter().map(|&a| a != 0.0).collect();
        let w = WeightVector::from_parts(weights.row(i).to_vec(), mask)?;
        matching.push(MatchingState::from_parts(
            w,
            previous.row(i).to_vec(),
            rounds[i],
            stable[i],
            stopped[i],
        )?);
    }
    let queue: VecDeque<Vec<f64>> = {
        let q = ck.get("queue")?;
        (0..q.rows).map(|r| q.row(r).to_vec()).collect()
    };
    Ok(PretrainState {
        encoder,
        optimizer,
        matching,
        queue,
    })
}

pub fn save_pretrain(state: &PretrainState, path: &Path) -> Result<()> {
    pretrain_checkpoint(state).save(path)
}

pub fn load_pretrain(path: &Path) -> Result<PretrainState> {
    restore_pretrain(&Checkpoint::load(path)?)
}

pub fn classifier_checkpoint(clf: &ClassifierState) -> Checkpoint {
    let mut ck = Checkpoint::new(
        KIND_CLASSIFIER,
        json!({
            "encoder": clf.encoder_config,
            "labels": clf.labels,
        }),
    );
    ck.push_params("encoder", &clf.encoder);
    ck.push_params("head", &clf.head);
    ck
}

pub fn restore_classifier(ck: &Checkpoint) -> Result<ClassifierState> {
    ck.expect_kind(KIND_CLASSIFIER)?;
    let config: EncoderConfig = ck.meta_field("encoder")?;
    let labels: Vec<u32> = ck.meta_field("labels")?;
    let fresh = crate::encoder::init_state(&config)?;
    let template = ClassifierState::from_encoder(&fresh, labels, 0)?;
    Ok(ClassifierState {
        encoder: ck.read_params("encoder", &template.encoder)?,
        head: ck.read_params("head", &template.head)?,
        ..template
    })
}

pub fn save_classifier(clf: &ClassifierState, path: &Path) -> Result<()> {
    classifier_checkpoint(clf).save(path)
}

pub fn load_classifier(path: &Path) -> Result<ClassifierState> {
    restore_classifier(&Checkpoint::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::{pretrain, ContrastConfig, PretrainConfig, TrainImage};
    use crate::encoder::init_state;
    use crate::image::Image;
    use crate::matching::MatchingConfig;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            depth: 1,
            heads: 2,
            token_len: 4,
            patch_size: 4,
            seed: 5,
            ..EncoderConfig::default()
        }
    }

    fn trained(steps: u64) -> PretrainState {
        let data: Vec<TrainImage> = (0..5)
            .map(|k| TrainImage {
                id: format!("img{k}"),
                image: Image::from_fn(8, 8, |r, c| ((r * 3 + c * (k + 1)) % 7) as f64 / 7.0),
            })
            .collect();
        let cfg = PretrainConfig {
            contrast: ContrastConfig {
                batch_size: 4,
                steps,
                queue_size: 6,
                ..ContrastConfig::default()
            },
            matching: MatchingConfig {
                interval: 1,
                boost_count: 1,
                min_active: 2,
                ..MatchingConfig::default()
            },
            ..PretrainConfig::default()
        };
        let mut state =
            PretrainState::new(init_state(&tiny_encoder()).unwrap(), data.len()).unwrap();
        pretrain(&mut state, &data, &cfg, |_, _| Ok(true)).unwrap();
        state
    }

    #[test]
    fn container_round_trips_bytes() {
        let mut ck = Checkpoint::new("test", json!({"a": 1, "x": 0.1}));
        ck.push(
            "m",
            Matrix::from_vec(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]),
        );
        ck.push("empty", Matrix::zeros(0, 0));
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(
            back.get("m").unwrap().data[1].to_bits(),
            (-0.0f64).to_bits()
        );
        assert_eq!(back.meta_field::<f64>("x").unwrap(), 0.1);
    }

    #[test]
    fn rejects_damaged_files() {
        let mut ck = Checkpoint::new("test", json!({}));
        ck.push("m", Matrix::zeros(2, 2));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(Checkpoint::from_bytes(&longer).is_err());
        let mut future = bytes;
        future[8] = 99;
        assert!(Checkpoint::from_bytes(&future)
            .unwrap_err()
            .to_string()
            .contains("version"));
    }

    #[test]
    fn pretrain_state_round_trips() {
        let state = trained(4);
        assert!(state.matching.iter().any(|m| m.rounds > 0));
        assert!(!state.queue.is_empty());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pretrain.ckpt");
        save_pretrain(&state, &path).unwrap();
        assert_eq!(load_pretrain(&path).unwrap(), state);
    }

    #[test]
    fn untrained_state_round_trips() {
        let state = trained(0);
        assert_eq!(
            restore_pretrain(&pretrain_checkpoint(&state)).unwrap(),
            state
        );
    }

    #[test]
    fn classifier_round_trips_and_kinds_are_checked() {
        let enc = init_state(&tiny_encoder()).unwrap();
        let clf = ClassifierState::from_encoder(&enc, vec![2, 5, 9], 11).unwrap();
        let ck = classifier_checkpoint(&clf);
        assert_eq!(restore_classifier(&ck).unwrap(), clf);
        assert!(restore_pretrain(&ck).is_err());
    }

    #[test]
    fn missing_array_is_named() {
        let state = trained(0);
        let mut ck = pretrain_checkpoint(&state);
        ck.arrays.retain(|(n, _)| n != "matching.previous");
        assert!(restore_pretrain(&ck)
            .unwrap_err()
            .to_string()
            .contains("matching.previous"));
    }
}
