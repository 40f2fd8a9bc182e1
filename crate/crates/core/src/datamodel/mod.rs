//! Dataset records, on-disk format, leave-one-domain-out splits and the
//! synthetic domain-shift generator.

mod io;
mod splits;
mod synth;

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use io::{
    read_blob, read_dataset, write_blob, write_dataset, BLOB_MAGIC, BLOB_VERSION, MANIFEST_VERSION,
};
pub use splits::{make_seen_domain_splits, make_splits, SplitSpec};
pub use synth::{generate_synthetic, SynthConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("{path}: unsupported version {found} (expected {expected})")]
    Version {
        path: PathBuf,
        found: u32,
        expected: u32,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split error: {0}")]
    Split(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

/// A (scenario, location) pair.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Domain {
    pub scenario: String,
    pub location: String,
}

impl Domain {
    pub fn new(scenario: impl Into<String>, location: impl Into<String>) -> Self {
        Self {
            scenario: scenario.into(),
            location: location.into(),
        }
    }

    /// Parses `"Co-JPN"` style labels. The scenario is everything before the
    /// first `-`, so locations such as `US-PNA` survive.
    pub fn parse(label: &str) -> Option<Self> {
        let (s, l) = label.split_once('-')?;
        (!s.is_empty() && !l.is_empty()).then(|| Self::new(s, l))
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.scenario, self.location)
    }
}

/// Embedding width of each modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub appearance: usize,
    pub motion: usize,
    pub audio: usize,
    pub text: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            appearance: 64,
            motion: 16,
            audio: 32,
            text: 32,
        }
    }
}

/// File names of the per-modality blobs and clip metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFiles {
    pub clips: String,
    pub appearance: String,
    pub motion: String,
    pub audio: String,
    pub vis_narration: String,
    pub aud_narration: String,
}

impl Default for DataFiles {
    fn default() -> Self {
        Self {
            clips: "clips.jsonl".into(),
            appearance: "appearance.bin".into(),
            motion: "motion.bin".into(),
            audio: "audio.bin".into(),
            vis_narration: "vis_narr.bin".into(),
            aud_narration: "aud_narr.bin".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub num_classes: usize,
    pub dims: Dims,
    pub class_names: Vec<String>,
    /// Every domain present, in report order.
    pub domains: Vec<Domain>,
    /// Designated held-out domains. Empty means every domain is a test domain.
    #[serde(default)]
    pub test_domains: Vec<Domain>,
    pub record_count: usize,
    #[serde(default)]
    pub files: DataFiles,
}

impl DatasetManifest {
    pub fn designated_test_domains(&self) -> &[Domain] {
        if self.test_domains.is_empty() {
            &self.domains
        } else {
            &self.test_domains
        }
    }
}

/// One clip's precomputed embeddings and metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub scenario: String,
    pub location: String,
    pub label: usize,
    pub appearance: Vec<f32>,
    pub motion: Vec<f32>,
    pub audio: Option<Vec<f32>>,
    pub vis_narration: Vec<f32>,
    pub aud_narration: Option<Vec<f32>>,
    /// Rater output in [0, 1].
    pub consistency: Option<f32>,
    pub vis_narration_text: Option<String>,
    pub aud_narration_text: Option<String>,
    /// Generator ground truth: whether the audio actually reflects the action.
    pub audio_consistent: Option<bool>,
}

impl ClipRecord {
    pub fn domain(&self) -> Domain {
        Domain::new(self.scenario.clone(), self.location.clone())
    }

    pub fn has_audio(&self) -> bool {
        self.audio.is_some() && self.aud_narration.is_some()
    }
}

/// A manifest together with its records, validated.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<ClipRecord>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, records: Vec<ClipRecord>) -> Result<Self, DataError> {
        validate(&manifest, &records)?;
        Ok(Self { manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the record with the given id.
    pub fn index_of(&self, clip_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.clip_id == clip_id)
    }

    /// Resolves clip ids into record indices, failing on the first unknown id.
    pub fn indices(&self, ids: &[String]) -> Result<Vec<usize>, DataError> {
        let lookup: std::collections::HashMap<&str, usize> = self
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clip_id.as_str(), i))
            .collect();
        ids.iter()
            .map(|id| {
                lookup
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| DataError::Invalid(format!("unknown clip id {id}")))
            })
            .collect()
    }

    /// SHA-256 over the manifest and every record field, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest).expect("manifest serializes"));
        let floats = |h: &mut Sha256, v: &[f32]| {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
        };
        for r in &self.records {
            h.update(r.clip_id.as_bytes());
            h.update([0]);
            h.update(r.scenario.as_bytes());
            h.update([0]);
            h.update(r.location.as_bytes());
            h.update([0]);
            h.update((r.label as u64).to_le_bytes());
            floats(&mut h, &r.appearance);
            floats(&mut h, &r.motion);
            floats(&mut h, r.audio.as_deref().unwrap_or(&[]));
            floats(&mut h, &r.vis_narration);
            floats(&mut h, r.aud_narration.as_deref().unwrap_or(&[]));
            h.update(
                r.consistency
                    .map(f32::to_bits)
                    .unwrap_or(u32::MAX)
                    .to_le_bytes(),
            );
        }
        hex::encode(h.finalize())
    }
}

/// Checks every manifest and record invariant.
pub fn validate(manifest: &DatasetManifest, records: &[ClipRecord]) -> Result<(), DataError> {
    let d = manifest.dims;
    if d.appearance == 0 || d.motion == 0 || d.audio == 0 || d.text == 0 {
        return Err(DataError::Invalid(format!(
            "all dims must be >= 1, got {d:?}"
        )));
    }
    if manifest.num_classes == 0 {
        return Err(DataError::Invalid("num_classes must be >= 1".into()));
    }
    if !manifest.class_names.is_empty() && manifest.class_names.len() != manifest.num_classes {
        return Err(DataError::Invalid(format!(
            "{} class names for {} classes",
            manifest.class_names.len(),
            manifest.num_classes
        )));
    }
    if manifest.record_count != records.len() {
        return Err(DataError::Invalid(format!(
            "manifest declares {} records, found {}",
            manifest.record_count,
            records.len()
        )));
    }
    let domains: HashSet<&Domain> = manifest.domains.iter().collect();
    for t in &manifest.test_domains {
        if !domains.contains(t) {
            return Err(DataError::Invalid(format!(
                "test domain {t} not in domain list"
            )));
        }
    }
    let mut ids = HashSet::new();
    for r in records {
        let id = &r.clip_id;
        if !ids.insert(id.as_str()) {
            return Err(DataError::Invalid(format!("duplicate clip id {id}")));
        }
        if !domains.contains(&r.domain()) {
            return Err(DataError::Invalid(format!(
                "clip {id}: domain {} not in manifest",
                r.domain()
            )));
        }
        if r.label >= manifest.num_classes {
            return Err(DataError::Invalid(format!(
                "clip {id}: label {} >= num_classes {}",
                r.label, manifest.num_classes
            )));
        }
        let check = |name: &str, v: &[f32], want: usize| {
            if v.len() != want {
                Err(DataError::Invalid(format!(
                    "clip {id}: {name} has {} values, manifest says {want}",
                    v.len()
                )))
            } else {
                Ok(())
            }
        };
        check("appearance", &r.appearance, d.appearance)?;
        check("motion", &r.motion, d.motion)?;
        check("vis_narration", &r.vis_narration, d.text)?;
        if let Some(a) = &r.audio {
            check("audio", a, d.audio)?;
        }
        if let Some(a) = &r.aud_narration {
            check("aud_narration", a, d.text)?;
            if r.audio.is_none() {
                return Err(DataError::Invalid(format!(
                    "clip {id}: audio narration without audio"
                )));
            }
        }
        if let Some(c) = r.consistency {
            if !(0.0..=1.0).contains(&c) {
                return Err(DataError::Invalid(format!(
                    "clip {id}: consistency {c} outside [0, 1]"
                )));
            }
            if !r.has_audio() {
                return Err(DataError::Invalid(format!(
                    "clip {id}: consistency without audio and audio narration"
                )));
            }
        }
    }
    Ok(())
}
