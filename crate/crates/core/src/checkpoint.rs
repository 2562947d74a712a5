//! Single-file model container: magic, format version, JSON manifest and a
//! little-endian f32 payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"NTOKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named tensors plus the configuration needed to rebuild a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// What the payload holds, e.g. `tokenizer` or `backbone`.
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            tensors: vec![],
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    /// Appends every parameter value of `store` under its registered name.
    pub fn push_store(&mut self, store: &ParamStore) {
        for (_, p) in store.iter() {
            self.push(p.name.clone(), p.value.clone());
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Compat {
                field: name.to_string(),
                expected: "tensor present".into(),
                found: "missing".into(),
            })
    }

    /// Overwrites every parameter of `store` from the checkpoint.
    pub fn load_store(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        for (id, name) in ids {
            let t = self.get(&name)?;
            if t.shape() != store.value(id).shape() {
                return Err(Error::Compat {
                    field: name,
                    expected: format!("{:?}", store.value(id).shape()),
                    found: format!("{:?}", t.shape()),
                });
            }
            store.set_value(id, t.clone())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::parse("checkpoint", m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Compat {
                field: "format_version".into(),
                expected: FORMAT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes
            .get(20..20 + len)
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(body).map_err(|e| bad(format!("manifest: {e}")))?;
        let mut offset = 20 + len;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 4 * n)
                .ok_or_else(|| bad(format!("payload truncated in `{}`", entry.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            offset += 4 * n;
            tensors.push((entry.name, Tensor::new(entry.shape, data)?));
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            kind: manifest.kind,
            config: manifest.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Fails with a compatibility error unless `kind` matches.
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Compat {
                field: "kind".into(),
                expected: kind.into(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Checkpoint::new("tokenizer", serde_json::json!({"w": 64, "levels": 4}));
        c.push("a", Tensor::randn(&[3, 4], 1.0, &mut rng));
        c.push("b", Tensor::zeros(&[0]));
        c.push("c", Tensor::scalar(0.1));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample().to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.get("c").unwrap().item(), 0.1f32 as f64);
        assert_eq!(back.config["levels"], 4);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let c = sample();
        c.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), c.to_bytes());
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&magic), Err(Error::Parse { .. })));
        let mut ver = bytes;
        ver[8] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&ver),
            Err(Error::Compat { ref field, .. }) if field == "format_version"
        ));
    }

    #[test]
    fn store_round_trip_and_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::randn(&[2, 2], 1.0, &mut rng));
        let mut c = Checkpoint::new("x", serde_json::Value::Null);
        c.push_store(&store);
        store.set_value(id, Tensor::zeros(&[2, 2])).unwrap();
        c.load_store(&mut store).unwrap();
        assert_eq!(store.value(id), c.get("w").unwrap());

        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(&[3]));
        assert!(matches!(c.load_store(&mut other), Err(Error::Compat { .. })));
        assert!(c.expect_kind("y").is_err());
    }
}
