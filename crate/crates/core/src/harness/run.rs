//! Run directories and the manifest each command leaves behind.
//!
//! A run directory is created fresh for every invocation and never reused,
//! so a failed or repeated command cannot clobber earlier results.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::dataset::{read_json, sha256_hex, write_json};
use super::protocol::Split;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;

pub const RUN_FORMAT: &str = "vtdiff-run";
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// `<command>-<unix seconds>-<pid>`; pass an explicit id for reproducible paths.
pub fn new_run_id(command: &str) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{command}-{secs}-{}", std::process::id())
}

/// Creates `dir`, failing if it already exists.
pub fn create_run_dir(dir: &Path) -> Result<PathBuf> {
    if let Some(parent) = dir.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    match std::fs::create_dir(dir) {
        Ok(()) => Ok(dir.to_path_buf()),
        Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidInput(format!(
            "run directory {} already exists; runs are never overwritten",
            dir.display()
        ))),
        Err(e) => Err(Error::io(dir, e)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub root: PathBuf,
    pub content_hash: String,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRef {
    #[serde(flatten)]
    pub split: Split,
    pub hash: String,
}

impl From<&Split> for SplitRef {
    fn from(split: &Split) -> Self {
        Self {
            split: split.clone(),
            hash: split.hash(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub crate_version: String,
    pub command: String,
    pub run_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_fingerprint: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitRef>,
    /// Named input paths or values (checkpoints, audio files, learning rate).
    pub inputs: BTreeMap<String, String>,
    /// Files written by the run, relative to the run directory.
    pub outputs: Vec<String>,
    pub loss_curves: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

impl RunManifest {
    pub fn new(command: &str, run_id: &str, config: Option<&RunConfig>) -> Result<Self> {
        let mut seeds = BTreeMap::new();
        let (config, fingerprint) = match config {
            Some(c) => {
                for (name, seed) in [
                    ("toy", c.toy.seed),
                    ("vae", c.vae.seed),
                    ("vae_train", c.vae_train.seed),
                    ("denoiser", c.denoiser.seed),
                    ("train", c.train.seed),
                    ("synthesis", c.synthesis.seed),
                    ("sdiff", c.sdiff.seed),
                    ("vq", c.vq.seed),
                    ("baseline_train", c.baseline_train.seed),
                    ("extractor", c.eval.extractor_seed),
                ] {
                    seeds.insert(name.to_string(), seed);
                }
                let text = c.to_toml()?;
                (Some(c.clone()), Some(sha256_hex(text.as_bytes())))
            }
            None => (None, None),
        };
        Ok(Self {
            format: RUN_FORMAT.into(),
            version: 1,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            run_id: run_id.into(),
            config,
            config_fingerprint: fingerprint,
            seeds,
            dataset: None,
            split: None,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            loss_curves: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
            metrics: None,
        })
    }

    pub fn input(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.inputs.insert(key.into(), value.to_string());
        self
    }

    pub fn output(&mut self, rel: impl Into<String>) -> &mut Self {
        self.outputs.push(rel.into());
        self
    }

    pub fn write(&self, run_dir: &Path) -> Result<()> {
        write_json(&run_dir.join(RUN_MANIFEST), self)
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let m: Self = read_json(&run_dir.join(RUN_MANIFEST))?;
        if m.format != RUN_FORMAT {
            return Err(Error::InvalidInput(format!("{} is not a run manifest", run_dir.display())));
        }
        Ok(m)
    }
}

/// Loss curves as a TSV table: `step` then one column per curve.
pub fn loss_curve_tsv(curves: &BTreeMap<String, Vec<f64>>) -> String {
    let mut out = String::from("epoch");
    for name in curves.keys() {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    let rows = curves.values().map(Vec::len).max().unwrap_or(0);
    for i in 0..rows {
        out.push_str(&(i + 1).to_string());
        for v in curves.values() {
            out.push('\t');
            if let Some(x) = v.get(i) {
                out.push_str(&format!("{x:.6e}"));
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_are_never_reused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("runs").join("train-1");
        create_run_dir(&dir).unwrap();
        std::fs::write(dir.join("keep.txt"), "x").unwrap();
        assert!(create_run_dir(&dir).is_err());
        assert_eq!(std::fs::read_to_string(dir.join("keep.txt")).unwrap(), "x");
    }

    #[test]
    fn manifest_round_trip_records_seeds() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_seed(11);
        let mut m = RunManifest::new("train", "train-x", Some(&cfg)).unwrap();
        m.input("learning_rate", cfg.train.learning_rate);
        m.output("stdiff.safetensors");
        m.loss_curves.insert("stdiff".into(), vec![1.0, 0.5]);
        m.write(tmp.path()).unwrap();
        let back = RunManifest::read(tmp.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.seeds["train"], 11);
        assert_eq!(back.inputs["learning_rate"], "0.00005");
    }

    #[test]
    fn loss_curve_table_shape() {
        let mut c = BTreeMap::new();
        c.insert("a".to_string(), vec![1.0, 2.0]);
        c.insert("b".to_string(), vec![3.0]);
        let t = loss_curve_tsv(&c);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "epoch\ta\tb");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with('\t'));
    }
}
