//! Train/test splits for the generalization experiments.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::dataset::{sha256_hex, DatasetManifest, SampleRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Hold out every sample of one speaker.
    UnknownSpeaker,
    /// Hold out every sample containing one of the listed words.
    UnknownWords,
    /// Hold out one cohort, by default the patient recordings.
    ClinicalCohort,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::UnknownSpeaker => "unknown-speaker",
            Self::UnknownWords => "unknown-words",
            Self::ClinicalCohort => "clinical-cohort",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub protocol: Protocol,
    /// Speaker to hold out; the last speaker in sorted order when unset.
    pub held_out_speaker: Option<String>,
    pub held_out_words: Vec<String>,
    pub held_out_cohort: String,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::UnknownSpeaker,
            held_out_speaker: None,
            held_out_words: ["sun", "light", "sunlight", "rain", "bow", "rainbow"]
                .iter()
                .map(|w| w.to_string())
                .collect(),
            held_out_cohort: "patient".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub protocol: Protocol,
    /// What was held out: a speaker, the word list, or a cohort.
    pub held_out: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    /// Digest of the sorted id lists, stamped into run manifests.
    pub fn hash(&self) -> String {
        let mut text = format!("{}\n", self.protocol);
        for (name, ids) in [("train", &self.train), ("test", &self.test)] {
            text.push_str(name);
            for id in ids {
                text.push(' ');
                text.push_str(id);
            }
            text.push('\n');
        }
        sha256_hex(text.as_bytes())
    }
}

fn held_out(record: &SampleRecord, protocol: Protocol, keys: &BTreeSet<String>) -> bool {
    match protocol {
        Protocol::UnknownSpeaker => keys.contains(&record.speaker),
        Protocol::UnknownWords => record.words.iter().any(|w| keys.contains(&w.to_lowercase())),
        Protocol::ClinicalCohort => keys.contains(&record.cohort),
    }
}

fn held_out_keys(manifest: &DatasetManifest, config: &ProtocolConfig) -> Result<BTreeSet<String>> {
    match config.protocol {
        Protocol::UnknownSpeaker => {
            let speakers: BTreeSet<&str> = manifest.samples.iter().map(|s| s.speaker.as_str()).collect();
            if speakers.iter().any(|s| s.is_empty()) {
                return Err(Error::Protocol("unknown-speaker needs a speaker tag on every sample".into()));
            }
            if speakers.len() < 2 {
                return Err(Error::Protocol(format!(
                    "unknown-speaker needs at least two speakers, found {}",
                    speakers.len()
                )));
            }
            let pick = match &config.held_out_speaker {
                Some(s) if speakers.contains(s.as_str()) => s.clone(),
                Some(s) => return Err(Error::Protocol(format!("speaker {s:?} is not in the dataset"))),
                None => speakers.iter().next_back().expect("two speakers").to_string(),
            };
            Ok(BTreeSet::from([pick]))
        }
        Protocol::UnknownWords => {
            if config.held_out_words.is_empty() {
                return Err(Error::Protocol("unknown-words needs held-out words".into()));
            }
            if manifest.samples.iter().all(|s| s.words.is_empty()) {
                return Err(Error::Protocol("unknown-words needs word tags in the manifest".into()));
            }
            Ok(config.held_out_words.iter().map(|w| w.to_lowercase()).collect())
        }
        Protocol::ClinicalCohort => Ok(BTreeSet::from([config.held_out_cohort.clone()])),
    }
}

/// Splits `manifest` into disjoint train and test id lists.
pub fn split(manifest: &DatasetManifest, config: &ProtocolConfig) -> Result<Split> {
    let keys = held_out_keys(manifest, config)?;
    let (test, train): (Vec<&SampleRecord>, Vec<&SampleRecord>) = manifest
        .samples
        .iter()
        .partition(|r| held_out(r, config.protocol, &keys));
    if test.is_empty() || train.is_empty() {
        return Err(Error::Protocol(format!(
            "{} with held-out {:?} leaves {} train and {} test samples",
            config.protocol,
            keys,
            train.len(),
            test.len()
        )));
    }
    let ids = |v: Vec<&SampleRecord>| v.into_iter().map(|r| r.id.clone()).collect();
    Ok(Split {
        protocol: config.protocol,
        held_out: keys.into_iter().collect(),
        train: ids(train),
        test: ids(test),
    })
}

/// Checks a split against the manifest: ids exist, are disjoint, cover the
/// dataset, and no training sample carries a held-out tag.
pub fn audit_split(manifest: &DatasetManifest, split: &Split) -> Result<()> {
    let keys: BTreeSet<String> = split.held_out.iter().cloned().collect();
    let train: BTreeSet<&String> = split.train.iter().collect();
    let test: BTreeSet<&String> = split.test.iter().collect();
    if train.len() != split.train.len() || test.len() != split.test.len() {
        return Err(Error::Protocol("split lists contain duplicates".into()));
    }
    if let Some(id) = train.intersection(&test).next() {
        return Err(Error::Protocol(format!("{id} is in both train and test")));
    }
    if train.len() + test.len() != manifest.samples.len() {
        return Err(Error::Protocol("split does not cover the manifest".into()));
    }
    for id in train.iter().chain(test.iter()) {
        let record = manifest
            .get(id)
            .ok_or_else(|| Error::Protocol(format!("{id} is not in the manifest")))?;
        let out = held_out(record, split.protocol, &keys);
        if out != test.contains(id) {
            return Err(Error::Protocol(format!(
                "{id} is on the wrong side of the {} split",
                split.protocol
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn record(id: &str, speaker: &str, words: &[&str], cohort: &str) -> SampleRecord {
        SampleRecord {
            id: id.into(),
            speaker: speaker.into(),
            words: words.iter().map(|w| w.to_string()).collect(),
            cohort: cohort.into(),
            frame_count: 1,
            fps: 26.0,
            sample_rate: 16000.0,
            checksums: BTreeMap::new(),
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest::new(
            vec![
                record("a", "s1", &["sun", "tea"], "control"),
                record("b", "s2", &["mama"], "control"),
                record("c", "s1", &["Rainbow"], "patient"),
                record("d", "s3", &["papa", "shoe"], "patient"),
            ],
            None,
        )
    }

    fn cfg(protocol: Protocol) -> ProtocolConfig {
        ProtocolConfig {
            protocol,
            ..ProtocolConfig::default()
        }
    }

    #[test]
    fn unknown_speaker_holds_out_last_speaker() {
        let m = manifest();
        let s = split(&m, &cfg(Protocol::UnknownSpeaker)).unwrap();
        assert_eq!(s.test, vec!["d"]);
        audit_split(&m, &s).unwrap();
        let s = split(
            &m,
            &ProtocolConfig {
                held_out_speaker: Some("s1".into()),
                ..cfg(Protocol::UnknownSpeaker)
            },
        )
        .unwrap();
        assert_eq!(s.test, vec!["a", "c"]);
        audit_split(&m, &s).unwrap();
    }

    #[test]
    fn one_speaker_is_infeasible() {
        let m = DatasetManifest::new(vec![record("a", "s1", &[], "toy"), record("b", "s1", &[], "toy")], None);
        assert!(matches!(split(&m, &cfg(Protocol::UnknownSpeaker)), Err(Error::Protocol(_))));
    }

    #[test]
    fn unknown_words_excludes_tagged_samples_from_training() {
        let m = manifest();
        let s = split(&m, &cfg(Protocol::UnknownWords)).unwrap();
        assert_eq!(s.test, vec!["a", "c"]);
        assert_eq!(s.train, vec!["b", "d"]);
        audit_split(&m, &s).unwrap();
    }

    #[test]
    fn cohort_split_and_missing_cohort() {
        let m = manifest();
        let s = split(&m, &cfg(Protocol::ClinicalCohort)).unwrap();
        assert_eq!(s.test, vec!["c", "d"]);
        audit_split(&m, &s).unwrap();
        let none = DatasetManifest::new(vec![record("a", "s1", &[], "toy"), record("b", "s2", &[], "toy")], None);
        assert!(split(&none, &cfg(Protocol::ClinicalCohort)).is_err());
    }

    #[test]
    fn audit_catches_tampering() {
        let m = manifest();
        let mut s = split(&m, &cfg(Protocol::UnknownWords)).unwrap();
        s.train.push("a".into());
        assert!(audit_split(&m, &s).is_err());
        let mut s = split(&m, &cfg(Protocol::UnknownWords)).unwrap();
        let moved = s.test.pop().unwrap();
        s.train.push(moved);
        assert!(audit_split(&m, &s).is_err());
        assert_ne!(split(&m, &cfg(Protocol::UnknownWords)).unwrap().hash(), s.hash());
    }
}
