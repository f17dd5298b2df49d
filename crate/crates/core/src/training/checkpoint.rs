//! Binary checkpoint format.
//!
//! ```text
//! "DMCP" | version u8 (=1) | u64 snapshot length | UTF-8 snapshot
//! then per tensor: u64 name length | name | u64 rows | u64 cols | rows*cols f32
//! ```
//!
//! All integers are little-endian u64, values little-endian IEEE-754 f32,
//! row-major. The snapshot is `key = value` text: the training config,
//! `schema.field = name,group,valence` lines, `checkpoint.best_val_auc` and
//! `checkpoint.batch`.
//!
//! Tensor order: `embedding`, `pred.fc{i}.weight` / `.bias` for each hidden
//! layer, `pred.out.weight`, `pred.out.bias`, then the same for `user`,
//! `ad_match` and `ad_corr` (whose last `fc` is the tanh projection).
//! A stripped checkpoint ends after `pred.out.bias`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::config::{parse_pairs, ConfigError, TrainConfig};
use crate::features::{FieldSchema, FieldSpec};
use crate::model::{DeepMcp, Tower};
use crate::tensor::{DenseMatrix, FcLayer};

pub const MAGIC: &[u8; 4] = b"DMCP";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u8),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),
    #[error("tensor {name}: expected shape {expected:?}, found {got:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl From<ConfigError> for CheckpointError {
    fn from(e: ConfigError) -> Self {
        CheckpointError::Malformed(format!("config snapshot: {e}"))
    }
}

/// A trained model with the config that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DeepMcp<f32>,
    pub best_val_auc: f64,
    pub batch: u64,
}

fn push_layers<'a>(out: &mut Vec<(String, &'a DenseMatrix<f32>)>, prefix: &str, layers: &'a [FcLayer<f32>]) {
    for (i, l) in layers.iter().enumerate() {
        out.push((format!("{prefix}.fc{i}.weight"), &l.weight.value));
        out.push((format!("{prefix}.fc{i}.bias"), &l.bias.value));
    }
}

fn push_layers_mut<'a>(out: &mut Vec<(String, &'a mut DenseMatrix<f32>)>, prefix: &str, layers: &'a mut [FcLayer<f32>]) {
    for (i, l) in layers.iter_mut().enumerate() {
        out.push((format!("{prefix}.fc{i}.weight"), &mut l.weight.value));
        out.push((format!("{prefix}.fc{i}.bias"), &mut l.bias.value));
    }
}

const AUX_TOWERS: [&str; 3] = ["user", "ad_match", "ad_corr"];

/// Named tensors in file order.
pub fn named_tensors(model: &DeepMcp<f32>) -> Vec<(String, &DenseMatrix<f32>)> {
    let mut out = vec![("embedding".to_string(), &model.shared.table.value)];
    push_layers(&mut out, "pred", &model.pred_tower.layers);
    out.push(("pred.out.weight".into(), &model.pred_out.weight.value));
    out.push(("pred.out.bias".into(), &model.pred_out.bias.value));
    if let Some(aux) = &model.aux {
        for (name, tower) in AUX_TOWERS.iter().zip([&aux.user_tower, &aux.ad_match_tower, &aux.ad_corr_tower]) {
            push_layers(&mut out, name, &tower.layers);
        }
    }
    out
}

fn named_tensors_mut(model: &mut DeepMcp<f32>) -> (Vec<(String, &mut DenseMatrix<f32>)>, usize) {
    let mut out = vec![("embedding".to_string(), &mut model.shared.table.value)];
    push_layers_mut(&mut out, "pred", &mut model.pred_tower.layers);
    out.push(("pred.out.weight".into(), &mut model.pred_out.weight.value));
    out.push(("pred.out.bias".into(), &mut model.pred_out.bias.value));
    let core = out.len();
    if let Some(aux) = model.aux.as_mut() {
        let towers: [&mut Tower<f32>; 3] = [&mut aux.user_tower, &mut aux.ad_match_tower, &mut aux.ad_corr_tower];
        for (name, tower) in AUX_TOWERS.iter().zip(towers) {
            push_layers_mut(&mut out, name, &mut tower.layers);
        }
    }
    (out, core)
}

impl Checkpoint {
    pub fn snapshot_text(&self) -> String {
        let mut s = self.config.to_text();
        for f in self.model.schema().fields() {
            let _ = writeln!(s, "schema.field = {},{},{}", f.name, f.group.as_str(), f.valence.as_str());
        }
        let _ = writeln!(s, "checkpoint.best_val_auc = {}", self.best_val_auc);
        let _ = writeln!(s, "checkpoint.batch = {}", self.batch);
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let snapshot = self.snapshot_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(snapshot.len() as u64).to_le_bytes());
        out.extend_from_slice(snapshot.as_bytes());
        for (name, m) in named_tensors(&self.model) {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.take(1, "version")?[0];
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let len = r.len("snapshot length")?;
        let text = std::str::from_utf8(r.take(len, "config snapshot")?)
            .map_err(|_| CheckpointError::Malformed("config snapshot is not UTF-8".into()))?;

        let mut config = TrainConfig::default();
        let mut fields = Vec::new();
        let mut best_val_auc = None;
        let mut batch = None;
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "schema.field" => {
                    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                    if parts.len() != 3 {
                        return Err(CheckpointError::Malformed(format!("bad schema line {v:?}")));
                    }
                    let spec = FieldSpec {
                        name: parts[0].to_string(),
                        group: parts[1].parse().map_err(|e| CheckpointError::Malformed(format!("{e}")))?,
                        valence: parts[2].parse().map_err(|e| CheckpointError::Malformed(format!("{e}")))?,
                    };
                    fields.push(spec);
                }
                "checkpoint.best_val_auc" => {
                    best_val_auc = Some(v.parse::<f64>().map_err(|e| CheckpointError::Malformed(format!("{k}: {e}")))?)
                }
                "checkpoint.batch" => {
                    batch = Some(v.parse::<u64>().map_err(|e| CheckpointError::Malformed(format!("{k}: {e}")))?)
                }
                _ => match k.split_once('.') {
                    Some(("train", key)) => config.set(key, &v)?,
                    _ => return Err(CheckpointError::Malformed(format!("unknown snapshot key {k:?}"))),
                },
            }
        }
        config.validate()?;
        let schema = FieldSchema::new(fields).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let best_val_auc = best_val_auc.ok_or_else(|| CheckpointError::Malformed("missing best_val_auc".into()))?;
        let batch = batch.ok_or_else(|| CheckpointError::Malformed("missing batch counter".into()))?;

        let mut model = DeepMcp::<f32>::zeros(schema, config.architecture());
        let (tensors, core) = named_tensors_mut(&mut model);
        let total = tensors.len();
        let mut loaded = 0;
        for (name, dst) in tensors {
            if r.at_end() && loaded == core {
                break;
            }
            let found_len = r.len(&format!("name of tensor {name}"))?;
            let found = r.take(found_len, &format!("name of tensor {name}"))?;
            if found != name.as_bytes() {
                return Err(CheckpointError::Malformed(format!(
                    "expected tensor {name}, found {:?}",
                    String::from_utf8_lossy(found)
                )));
            }
            let rows = r.len(&format!("shape of {name}"))?;
            let cols = r.len(&format!("shape of {name}"))?;
            if (rows, cols) != dst.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: dst.shape(),
                    got: (rows, cols),
                });
            }
            let raw = r.take(rows * cols * 4, &format!("values of {name}"))?;
            for (v, chunk) in dst.values_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
            loaded += 1;
        }
        if !r.at_end() {
            return Err(CheckpointError::Malformed("trailing bytes after last tensor".into()));
        }
        if loaded == core && loaded < total {
            model.strip();
        }
        Ok(Self {
            config,
            model,
            best_val_auc,
            batch,
        })
    }

    /// Copy without the matching and correlation towers.
    pub fn stripped(&self) -> Self {
        let mut c = self.clone();
        c.model.strip();
        c
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let raw = self.take(8, what)?;
        let v = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| CheckpointError::Malformed(format!("{what}: {v} too large")))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::stream_rng;

    fn ckpt() -> Checkpoint {
        let config = TrainConfig {
            hash_space: 64,
            embedding_dim: 3,
            layer_dims: vec![5, 4],
            repr_dim: 2,
            ..TrainConfig::default()
        };
        let schema = FieldSchema::parse("u,user,univalent\nq,query,multivalent\na,ad,univalent\nc,ad,univalent\nh,other,bigram\n").unwrap();
        let model = DeepMcp::init(schema, config.architecture(), &mut stream_rng(7, 0));
        Checkpoint {
            config,
            model,
            best_val_auc: 0.734_517_2,
            batch: 42,
        }
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let c = ckpt();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn stripped_round_trip() {
        let s = ckpt().stripped();
        let back = Checkpoint::from_bytes(&s.to_bytes()).unwrap();
        assert!(back.model.aux.is_none());
        assert_eq!(back, s);
    }

    #[test]
    fn tensor_order_is_fixed() {
        let c = ckpt();
        let names: Vec<String> = named_tensors(&c.model).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embedding");
        assert_eq!(names[1], "pred.fc0.weight");
        assert_eq!(names[5], "pred.out.weight");
        assert_eq!(names[7], "user.fc0.weight");
        assert_eq!(names.last().unwrap(), "ad_corr.fc2.bias");
        assert_eq!(names.len(), 7 + 3 * 6);
    }

    #[test]
    fn corruption_is_classified() {
        let bytes = ckpt().to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::UnsupportedVersion(2))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..2]), Err(CheckpointError::BadMagic)));
    }
}
