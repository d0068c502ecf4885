//! Portable model files.
//!
//! Layout: the 8-byte magic `ARBLT001`, a little-endian `u64` header length,
//! a JSON header `{config, vocab, params: [{name, shape}]}`, then every
//! parameter's values as little-endian `f64` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::autodiff::{Init, ParamStore};
use crate::config::Config;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ARBLT001";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: Map<String, Value>,
    vocab: Vec<String>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.to_flat(),
        vocab: model.vocab.words().to_vec(),
        params: model
            .params
            .iter()
            .map(|(name, p)| ParamEntry { name: name.to_string(), shape: p.value.shape() })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * model.params.num_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.value.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Snapshot("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Snapshot("not a model snapshot (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|_| Error::Snapshot("truncated header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Snapshot("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&r[..len]).map_err(|e| Error::Snapshot(format!("bad header: {e}")))?;
    r = &r[len..];

    let config = Config::from_flat(&header.config)?;
    config.validate()?;
    let vocab = Vocab::from_words(header.vocab)?;
    let mut params = ParamStore::new();
    for entry in header.params {
        let [rows, cols] = entry.shape;
        let count = rows * cols;
        if r.len() < 8 * count {
            return Err(Error::Snapshot(format!("truncated values for `{}`", entry.name)));
        }
        let values: Vec<f64> = r[..8 * count]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        r = &r[8 * count..];
        params.insert(entry.name, Tensor::new(rows, cols, values)?, Init::Given)?;
    }
    if !r.is_empty() {
        return Err(Error::Snapshot(format!("{} trailing bytes", r.len())));
    }
    let model = Model { config, vocab, params };
    model.check_shapes()?;
    Ok(model)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Instance, Polarity};
    use crate::model::training_table;
    use serde_json::json;

    fn model() -> (Model, Instance) {
        let mut c = Config::default();
        c.set("encoder.dim", json!(4)).unwrap();
        c.set("encoder.embed_dim", json!(3)).unwrap();
        let inst = Instance::new("a", vec!["nice".into(), "view".into()], (1, 2), Polarity::Positive).unwrap();
        (Model::new(c.clone(), &training_table(std::slice::from_ref(&inst), &c)).unwrap(), inst)
    }

    #[test]
    fn round_trip_is_exact() {
        let (m, inst) = model();
        let bytes = to_bytes(&m).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert!(back.params.values_identical(&m.params));
        assert_eq!(to_bytes(&back).unwrap(), bytes);
        assert_eq!(back.predict(&inst).unwrap(), m.predict(&inst).unwrap());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save(&m, &path).unwrap();
        assert!(load(&path).unwrap().params.values_identical(&m.params));
    }

    #[test]
    fn corrupt_files_rejected() {
        let (m, _) = model();
        let bytes = to_bytes(&m).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
    }

    #[test]
    fn config_shape_mismatch_rejected() {
        let (mut m, _) = model();
        m.config.encoder.dim = 5;
        let bytes = to_bytes(&m).unwrap();
        let err = from_bytes(&bytes).unwrap_err();
        assert!(matches!(err, Error::Snapshot(_)), "{err}");
    }
}
