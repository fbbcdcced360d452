//! The tree manifest and its on-disk form.
//!
//! `manifest.json` is rewritten atomically on every change and validated
//! before each write. Fields this version does not know about are kept and
//! written back unchanged.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;

use amk_core::pipeline::Preset;
use amk_core::store::{self, CrashPoint, WriteFault};
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::TreeError;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Pending,
    Running,
    Done,
    Failed,
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            JobState::Pending => "pending",
            JobState::Running => "running",
            JobState::Done => "done",
            JobState::Failed => "failed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    #[serde(default)]
    pub clip_t: Option<f64>,
    #[serde(default)]
    pub age_mae_contrib: Option<f64>,
    #[serde(default)]
    pub id_sim: Option<f64>,
}

/// How a branch was requested; kept on the node so a pending job can be
/// re-run after a restart and so every image carries its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchOptions {
    pub preset: Preset,
    pub g: f32,
    /// Edit the root image instead of the parent's.
    #[serde(default)]
    pub from_root: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiverseNode {
    pub id: String,
    #[serde(default)]
    pub parent_id: Option<String>,
    pub age: f64,
    #[serde(default)]
    pub condition: String,
    #[serde(default)]
    pub refined_prompt: String,
    pub image_ref: String,
    #[serde(default)]
    pub metrics: Option<NodeMetrics>,
    pub created_at: DateTime<Utc>,
    pub job_state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<BranchOptions>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_warning: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sar_weight: Option<f32>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl MultiverseNode {
    pub fn is_root(&self) -> bool {
        self.parent_id.is_none()
    }
}

/// Generation settings shared by every branch of a tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSettings {
    pub steps: usize,
    pub seed: u64,
    pub g: f32,
    pub preset: Preset,
    pub sar_age_low: f32,
    pub sar_age_high: f32,
    pub sar_cluster_size: usize,
}

impl Default for TreeSettings {
    fn default() -> Self {
        let sar = amk_core::sar::SarSettings::default();
        TreeSettings {
            steps: 16,
            seed: 0,
            g: amk_core::pipeline::DEFAULT_GAIN,
            preset: Preset::Full,
            sar_age_low: sar.age_low,
            sar_age_high: sar.age_high,
            sar_cluster_size: sar.cluster_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeManifest {
    pub version: u32,
    pub subject_desc: String,
    pub backend_id: String,
    pub settings: TreeSettings,
    pub next_id: u64,
    pub nodes: Vec<MultiverseNode>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TreeManifest {
    pub fn node(&self, id: &str) -> Option<&MultiverseNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut MultiverseNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn root(&self) -> Option<&MultiverseNode> {
        self.nodes.iter().find(|n| n.is_root())
    }

    pub fn by_job(&self, job_id: &str) -> Option<&MultiverseNode> {
        self.nodes.iter().find(|n| n.job_id.as_deref() == Some(job_id))
    }

    pub fn children<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a MultiverseNode> + 'a {
        self.nodes.iter().filter(move |n| n.parent_id.as_deref() == Some(id))
    }

    /// `id` and all of its descendants, parents before children.
    pub fn subtree(&self, id: &str) -> Vec<String> {
        let mut out = vec![id.to_string()];
        let mut i = 0;
        while i < out.len() {
            let cur = out[i].clone();
            out.extend(self.children(&cur).map(|c| c.id.clone()));
            i += 1;
        }
        out
    }

    /// Checks the nodes form a single rooted tree.
    pub fn validate(&self) -> Result<(), TreeError> {
        let bad = |msg: String| Err(TreeError::Invalid(msg));
        if self.version == 0 {
            return bad("manifest version 0".into());
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return bad(format!("duplicate node id {}", n.id));
            }
        }
        let roots: Vec<&MultiverseNode> = self.nodes.iter().filter(|n| n.is_root()).collect();
        if roots.len() != 1 {
            return bad(format!("expected one root, found {}", roots.len()));
        }
        if !roots[0].condition.is_empty() {
            return bad("root node carries a condition".into());
        }
        let parent: HashMap<&str, &str> = self
            .nodes
            .iter()
            .filter_map(|n| n.parent_id.as_deref().map(|p| (n.id.as_str(), p)))
            .collect();
        for (child, p) in &parent {
            if !ids.contains(p) {
                return bad(format!("node {child} has missing parent {p}"));
            }
        }
        for n in &self.nodes {
            let mut cur = n.id.as_str();
            for _ in 0..=self.nodes.len() {
                match parent.get(cur) {
                    Some(p) => cur = p,
                    None => break,
                }
            }
            if parent.contains_key(cur) {
                return bad(format!("cycle through node {}", n.id));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = serde_json::to_vec_pretty(self).expect("manifest serializes");
        b.push(b'\n');
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TreeError> {
        let m: TreeManifest = serde_json::from_slice(bytes).map_err(|e| TreeError::Invalid(format!("manifest: {e}")))?;
        if m.version > FORMAT_VERSION {
            log::warn!("manifest version {} is newer than {FORMAT_VERSION}; unknown fields are kept", m.version);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, TreeError> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| TreeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }

    /// Validates, then writes atomically.
    pub fn save(&self, dir: &Path) -> Result<(), TreeError> {
        self.save_with_fault(dir, None)
    }

    /// [`Self::save`] with an injected crash, for fault tests.
    pub fn save_with_fault(&self, dir: &Path, crash: Option<CrashPoint>) -> Result<(), TreeError> {
        self.validate()?;
        store::write_atomic_with_fault(&dir.join(MANIFEST_FILE), &self.to_bytes(), crash).map_err(|e| match e {
            WriteFault::Crashed(c) => TreeError::Crashed(format!("{c:?}")),
            WriteFault::Store(s) => TreeError::Io(s.to_string()),
        })
    }
}
