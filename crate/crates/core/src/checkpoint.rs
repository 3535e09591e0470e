//! Binary checkpoints: magic, format version, JSON manifest, then every
//! parameter (and optional optimizer moment) as little-endian `f64`s.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{OptimizerState, Param, ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{CheckpointError, CtrlError, Result};

pub const MAGIC: &[u8; 8] = b"CTRLCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Which model the parameters belong to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Align,
    Ctr,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schema_hash: String,
    /// Vocabulary size of the prompt tokenizer the text tower was built for.
    pub text_vocab: usize,
    pub config: RunConfig,
    pub params: Vec<Param>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: ModelKind,
    schema_hash: String,
    text_vocab: usize,
    config: RunConfig,
    params: Vec<ParamEntry>,
    optimizer: Option<OptimizerEntry>,
    /// SHA-256 of the blob section.
    blob_sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerEntry {
    step: u64,
    /// Length of each `(m, v)` slot pair, in store order.
    slots: Vec<usize>,
}

fn corrupt(msg: impl Into<String>) -> CtrlError {
    CheckpointError::Corrupt(msg.into()).into()
}

impl Checkpoint {
    pub fn capture(
        kind: ModelKind,
        schema_hash: &str,
        text_vocab: usize,
        config: &RunConfig,
        store: &ParamStore,
        optimizer: Option<&OptimizerState>,
    ) -> Self {
        Self {
            kind,
            schema_hash: schema_hash.to_string(),
            text_vocab,
            config: config.clone(),
            params: store.iter().map(|(_, p)| p.clone()).collect(),
            optimizer: optimizer.cloned(),
        }
    }

    /// Overwrites every parameter of `store` with the stored value of the same
    /// name. Every store parameter must be present with a matching shape.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let target = store.get(id);
            let src = self
                .params
                .iter()
                .find(|p| p.name == target.name)
                .ok_or_else(|| CheckpointError::MissingParam(target.name.clone()))?;
            if src.value.shape() != target.value.shape() {
                return Err(CheckpointError::ParamShape {
                    name: target.name.clone(),
                    found: src.value.shape().to_vec(),
                    expected: target.value.shape().to_vec(),
                }
                .into());
            }
            store.set(id, src.value.clone());
        }
        Ok(())
    }

    pub fn check_schema(&self, schema_hash: &str) -> Result<()> {
        if self.schema_hash != schema_hash {
            return Err(CheckpointError::SchemaMismatch {
                stored: self.schema_hash.clone(),
                given: schema_hash.to_string(),
            }
            .into());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut push = |values: &[f64]| {
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in &self.params {
            push(p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            if opt.m.len() != opt.v.len() {
                return Err(corrupt("optimizer moment lists differ in length"));
            }
            for (m, v) in opt.m.iter().zip(&opt.v) {
                if m.len() != v.len() {
                    return Err(corrupt("optimizer moments differ in length"));
                }
                push(m);
                push(v);
            }
        }
        let manifest = Manifest {
            kind: self.kind,
            schema_hash: self.schema_hash.clone(),
            text_vocab: self.text_vocab,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                step: o.step,
                slots: o.m.iter().map(Vec::len).collect(),
            }),
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.take(MAGIC.len())? != MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u32::from_le_bytes(cursor.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: FORMAT_VERSION,
            }
            .into());
        }
        let json_len = u64::from_le_bytes(cursor.take(8)?.try_into().expect("8 bytes"));
        let json_len = usize::try_from(json_len).map_err(|_| corrupt("manifest length overflows"))?;
        let manifest: Manifest =
            serde_json::from_slice(cursor.take(json_len)?).map_err(|e| corrupt(format!("manifest: {e}")))?;
        let blob = &bytes[cursor.pos..];
        if hex(&Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(corrupt(format!("blob section of {} bytes fails its checksum", blob.len())));
        }
        let mut params = Vec::with_capacity(manifest.params.len());
        for e in manifest.params {
            let n = e.shape.iter().product();
            let value = Tensor::new(e.shape, cursor.floats(n)?)?;
            params.push(Param {
                name: e.name,
                value,
                trainable: e.trainable,
            });
        }
        let optimizer = match manifest.optimizer {
            None => None,
            Some(o) => {
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for len in o.slots {
                    m.push(cursor.floats(len)?);
                    v.push(cursor.floats(len)?);
                }
                Some(OptimizerState { step: o.step, m, v })
            }
        };
        if cursor.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - cursor.pos)));
        }
        Ok(Self {
            kind: manifest.kind,
            schema_hash: manifest.schema_hash,
            text_vocab: manifest.text_vocab,
            config: manifest.config,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| CtrlError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CtrlError::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and refuses a checkpoint trained against another schema.
    pub fn load_for_schema(path: &Path, schema_hash: &str) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.check_schema(schema_hash)?;
        Ok(ckpt)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated: wanted {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| corrupt("blob length overflows"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::new(vec![2, 3], vec![0.1, -0.0, 1e-300, f64::MAX, -2.5, 3.0]).unwrap());
        store.add_buffer("a.bn.mean", Tensor::new(vec![2], vec![0.5, f64::MIN_POSITIVE]).unwrap());
        let opt = OptimizerState {
            step: 7,
            m: vec![vec![0.01; 6]],
            v: vec![vec![0.02; 6]],
        };
        let cfg = RunConfig {
            seed: 11,
            ..RunConfig::default()
        };
        Checkpoint::capture(ModelKind::Align, "abc", 42, &cfg, &store, Some(&opt))
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let ckpt = sample();
        ckpt.save(&p1).unwrap();
        let back = Checkpoint::load(&p1).unwrap();
        assert_eq!(back, ckpt);
        for (a, b) in back.params.iter().zip(&ckpt.params) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        back.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncation_and_tampering_are_corrupt() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 5, 12, 30, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, CtrlError::Checkpoint(CheckpointError::Corrupt(_))), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CtrlError::Checkpoint(CheckpointError::Corrupt(_)))
        ));
    }

    #[test]
    fn version_and_schema_are_checked() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CtrlError::Checkpoint(CheckpointError::Version { found: 9, .. }))
        ));
        let ckpt = sample();
        assert!(ckpt.check_schema("abc").is_ok());
        assert!(matches!(
            ckpt.check_schema("abd"),
            Err(CtrlError::Checkpoint(CheckpointError::SchemaMismatch { .. }))
        ));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let ckpt = sample();
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(&[2, 3]));
        ckpt.restore(&mut store).unwrap();
        assert_eq!(store.get(store.find("a.w").unwrap()).value, ckpt.params[0].value);
        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros(&[3, 2]));
        assert!(matches!(
            ckpt.restore(&mut wrong),
            Err(CtrlError::Checkpoint(CheckpointError::ParamShape { .. }))
        ));
        let mut missing = ParamStore::new();
        missing.add("b.w", Tensor::zeros(&[1]));
        assert!(matches!(
            ckpt.restore(&mut missing),
            Err(CtrlError::Checkpoint(CheckpointError::MissingParam(_)))
        ));
    }
}
