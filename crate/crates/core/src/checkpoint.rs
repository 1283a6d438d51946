//! Self-describing model checkpoints.
//!
//! A checkpoint is a safetensors file whose string metadata carries the model
//! kind, the JSON-encoded model config, a fingerprint of that config and any
//! extra scalars a model needs (latent scale, step counters). Loading checks
//! every stored tensor against the freshly built model and refuses mismatched
//! geometry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::Tensor;
use candle_nn::VarMap;
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::DEVICE;

pub const FORMAT: &str = "vtdiff-checkpoint";
pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config_json: String,
    pub fingerprint: String,
    pub extra: BTreeMap<String, String>,
}

impl CheckpointMeta {
    pub fn new<C: Serialize>(kind: &str, config: &C) -> Result<Self> {
        let config_json = serde_json::to_string(config)?;
        Ok(Self {
            kind: kind.to_string(),
            fingerprint: fingerprint(&config_json),
            config_json,
            extra: BTreeMap::new(),
        })
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config_json)?)
    }

    pub fn with_extra(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.insert(key.to_string(), value.to_string());
        self
    }

    pub fn extra_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.extra
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint(format!("missing or malformed metadata key {key}")))
    }
}

/// Hex SHA-256 of a config serialization.
pub fn fingerprint(config_json: &str) -> String {
    hex::encode(Sha256::digest(config_json.as_bytes()))
}

/// Writes named variable groups (`prefix -> varmap`) into one checkpoint.
pub fn save(path: &Path, meta: &CheckpointMeta, groups: &[(&str, &VarMap)]) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (prefix, vm) in groups {
        let data = vm.data().lock().expect("varmap lock poisoned");
        for (name, var) in data.iter() {
            tensors.push((format!("{prefix}/{name}"), var.as_tensor().clone()));
        }
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    let mut info: HashMap<String, String> = HashMap::new();
    info.insert("format".into(), FORMAT.into());
    info.insert("format_version".into(), FORMAT_VERSION.into());
    info.insert("crate_version".into(), env!("CARGO_PKG_VERSION").into());
    info.insert("kind".into(), meta.kind.clone());
    info.insert("config".into(), meta.config_json.clone());
    info.insert("fingerprint".into(), meta.fingerprint.clone());
    for (k, v) in &meta.extra {
        info.insert(format!("extra.{k}"), v.clone());
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    safetensors::serialize_to_file(tensors, Some(info), path)
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.display())))
}

/// A loaded checkpoint before it is bound to a model.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    tensors: HashMap<String, Tensor>,
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
    if info.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{} is not a {FORMAT} file",
            path.display()
        )));
    }
    let get = |k: &str| {
        info.get(k)
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("metadata key {k} missing")))
    };
    let config_json = get("config")?;
    let stored_fp = get("fingerprint")?;
    if fingerprint(&config_json) != stored_fp {
        return Err(Error::Checkpoint("config fingerprint does not match".into()));
    }
    let extra = info
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("extra.").map(|k| (k.to_string(), v.clone())))
        .collect();
    let mut tensors = HashMap::new();
    for name in st.names() {
        let view = st
            .tensor(name)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.insert(name.to_string(), candle_core::safetensors::Load::load(&view, &DEVICE)?);
    }
    Ok(Checkpoint {
        meta: CheckpointMeta {
            kind: get("kind")?,
            config_json,
            fingerprint: stored_fp,
            extra,
        },
        tensors,
    })
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.meta.kind
            )));
        }
        Ok(())
    }

    /// Copies the `prefix/` group into `varmap`, which must have exactly the
    /// same variable names and shapes.
    pub fn restore(&self, prefix: &str, varmap: &VarMap) -> Result<()> {
        let data = varmap.data().lock().expect("varmap lock poisoned");
        let stored = self
            .tensors
            .keys()
            .filter(|k| k.starts_with(&format!("{prefix}/")))
            .count();
        if stored != data.len() {
            return Err(Error::Checkpoint(format!(
                "group {prefix}: checkpoint has {stored} tensors, model has {}",
                data.len()
            )));
        }
        for (name, var) in data.iter() {
            let key = format!("{prefix}/{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {key} missing")))?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key}: stored shape {:?} does not match model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;
    use candle_nn::VarBuilder;

    fn model(width: usize) -> VarMap {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &DEVICE);
        candle_nn::linear(3, width, vb.pp("l")).unwrap();
        crate::nn::seeded_init(&vm, 1).unwrap();
        vm
    }

    #[test]
    fn round_trip_and_geometry_guard() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let vm = model(4);
        let meta = CheckpointMeta::new("toy", &serde_json::json!({"width": 4}))
            .unwrap()
            .with_extra("scale", 0.5);
        save(&path, &meta, &[("net", &vm)]).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.meta.extra_parsed::<f64>("scale").unwrap(), 0.5);
        let fresh = model(4);
        ck.restore("net", &fresh).unwrap();
        assert_eq!(
            crate::nn::snapshot(&fresh).unwrap(),
            crate::nn::snapshot(&vm).unwrap()
        );
        let wrong = model(5);
        assert!(matches!(ck.restore("net", &wrong), Err(Error::Checkpoint(_))));
        assert!(ck.expect_kind("other").is_err());
    }
}
