//! Sample manifests: JSON Lines, one header line then one record per sample.
//!
//! ```text
//! {"format":"smtl-manifest/1","task_kind":"classification","labels":["bowl","cap"]}
//! {"id":"bowl_1_0","rgb_path":"rgb/bowl_1_0.png","depth_path":"depth/bowl_1_0.png","class_label":"bowl","instance_id":"bowl_1","frame_index":0}
//! ```
//!
//! Paths are relative to the data root: the header's optional `root`
//! (itself relative to the manifest's directory), or the manifest's directory.
//! The `SMTL_DATA_ROOT` environment variable overrides both.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Rotation;
use crate::model::TaskKind;

pub const MANIFEST_FORMAT: &str = "smtl-manifest/1";
pub const DATA_ROOT_ENV: &str = "SMTL_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub rgb_path: String,
    pub depth_path: String,
    pub class_label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<Rotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    task_kind: TaskKind,
    labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    root: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleManifest {
    pub task_kind: TaskKind,
    /// Class names; a record's class index is its label's position here.
    pub labels: Vec<String>,
    pub root: Option<String>,
    pub records: Vec<SampleRecord>,
}

impl SampleManifest {
    pub fn new(task_kind: TaskKind, labels: Vec<String>, records: Vec<SampleRecord>) -> Result<Self> {
        let m = Self {
            task_kind,
            labels,
            root: None,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Parse("manifest declares no labels".into()));
        }
        let mut labels = BTreeSet::new();
        for l in &self.labels {
            if !labels.insert(l.as_str()) {
                return Err(Error::Parse(format!("label `{l}` declared twice")));
            }
        }
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::Parse(format!("sample id `{}` appears twice", r.id)));
            }
            if !labels.contains(r.class_label.as_str()) {
                return Err(Error::Parse(format!(
                    "sample `{}` has undeclared label `{}`",
                    r.id, r.class_label
                )));
            }
            if self.task_kind == TaskKind::Pose && r.rotation.is_none() {
                return Err(Error::Parse(format!("pose sample `{}` lacks a rotation", r.id)));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self {
            task_kind: self.task_kind,
            labels: self.labels.clone(),
            root: self.root.clone(),
            records,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| Error::Parse("empty manifest".into()))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| Error::Parse(format!("manifest header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported manifest format `{}` (expected `{MANIFEST_FORMAT}`)",
                header.format
            )));
        }
        let records = lines
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse(format!("manifest line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<SampleRecord>>>()?;
        let m = Self {
            task_kind: header.task_kind,
            labels: header.labels,
            root: header.root,
            records,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            format: MANIFEST_FORMAT.to_owned(),
            task_kind: self.task_kind,
            labels: self.labels.clone(),
            root: self.root.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::DatasetMissing(path.to_owned()),
            _ => Error::Io(e),
        })?;
        Self::parse(&text)
    }

    /// Directory that record paths are relative to, for a manifest stored
    /// at `manifest_path`.
    pub fn data_root(&self, manifest_path: &Path) -> PathBuf {
        if let Some(env) = std::env::var_os(DATA_ROOT_ENV) {
            return PathBuf::from(env);
        }
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        match &self.root {
            Some(r) => dir.join(r),
            None => dir.to_owned(),
        }
    }
}
