//! Tree directory operations and branch execution.
//!
//! Layout: `manifest.json`, `images/<node-id>.png`, `features/<node-id>/…`
//! (cached inversions and aging directions of that node's image), and
//! `cache/` for synthetic reference clusters.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use amk_core::backend::{self, GatedBackend};
use amk_core::edit::{self, Inversion};
use amk_core::pipeline::Preset;
use amk_core::prompt::{self, ChatClient, ConditionCatalog, EditRequest, RefineMode};
use amk_core::rf::{Conditioning, StepSchedule};
use amk_core::sar::{self, SarSettings, StoredDirection};
use amk_core::store::CrashPoint;
use amk_core::ExecMode;
use chrono::Utc;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::manifest::{BranchOptions, JobState, MultiverseNode, TreeManifest, TreeSettings, FORMAT_VERSION, MANIFEST_FILE};
use crate::{Result, TreeError};

pub const ROOT_ID: &str = "root";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub g: Option<f32>,
    #[serde(default)]
    pub from_root: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchRequest {
    pub parent_id: String,
    #[serde(default)]
    pub condition: String,
    pub age_target: f64,
    #[serde(default)]
    pub overrides: Option<Overrides>,
}

/// What a worker needs to generate images.
pub struct Runtime {
    pub backend: GatedBackend,
    pub catalog: ConditionCatalog,
    pub refine: RefineMode,
    pub llm: Option<Arc<dyn ChatClient>>,
    pub exec: ExecMode,
}

impl Runtime {
    pub fn new(backend: GatedBackend) -> Self {
        Runtime {
            backend,
            catalog: ConditionCatalog::builtin(),
            refine: RefineMode::Template,
            llm: None,
            exec: ExecMode::default(),
        }
    }
}

pub struct Tree {
    dir: PathBuf,
    state: Mutex<TreeManifest>,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> TreeError + '_ {
    move |e| TreeError::Io(format!("{}: {e}", path.display()))
}

impl Tree {
    /// Starts a tree at `dir` from `input`. Refuses to overwrite an existing tree.
    pub fn create(
        dir: &Path,
        input: &Path,
        subject_desc: &str,
        age: f64,
        backend_id: &str,
        settings: TreeSettings,
    ) -> Result<Tree> {
        if dir.join(MANIFEST_FILE).exists() {
            return Err(TreeError::AlreadyExists(dir.display().to_string()));
        }
        if !(age.is_finite() && age > 0.0 && age <= 120.0) {
            return Err(TreeError::Validation(format!("root age {age} is not a plausible age")));
        }
        if subject_desc.trim().is_empty() {
            return Err(TreeError::Validation("subject description is empty".into()));
        }
        let image = backend::read_image(input).map_err(|e| TreeError::Io(e.to_string()))?;
        let png = backend::png_bytes(&image).map_err(|e| TreeError::Io(e.to_string()))?;
        for sub in ["images", "features"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        let image_ref = format!("images/{ROOT_ID}.png");
        amk_core::store::write_atomic(&dir.join(&image_ref), &png).map_err(|e| TreeError::Io(e.to_string()))?;
        let manifest = TreeManifest {
            version: FORMAT_VERSION,
            subject_desc: subject_desc.trim().to_string(),
            backend_id: backend_id.to_string(),
            settings,
            next_id: 1,
            nodes: vec![MultiverseNode {
                id: ROOT_ID.into(),
                parent_id: None,
                age,
                condition: String::new(),
                refined_prompt: edit::source_prompt(subject_desc, age as f32),
                image_ref,
                metrics: None,
                created_at: Utc::now(),
                job_state: JobState::Done,
                job_id: None,
                error: None,
                options: None,
                prompt_warning: None,
                sar_weight: None,
                extra: Map::new(),
            }],
            extra: Map::new(),
        };
        manifest.save(dir)?;
        Ok(Tree {
            dir: dir.to_path_buf(),
            state: Mutex::new(manifest),
        })
    }

    /// Opens an existing tree. Jobs left running by a previous process are
    /// marked failed; pending jobs are returned in order for re-queueing.
    pub fn open(dir: &Path) -> Result<(Tree, Vec<String>)> {
        let mut manifest = TreeManifest::load(dir)?;
        let mut changed = false;
        let mut pending = Vec::new();
        for n in &mut manifest.nodes {
            match n.job_state {
                JobState::Running => {
                    n.job_state = JobState::Failed;
                    n.error = Some("interrupted: the service stopped while this job was running".into());
                    changed = true;
                }
                JobState::Pending => pending.push(n.id.clone()),
                _ => {}
            }
        }
        if changed {
            manifest.save(dir)?;
        }
        Ok((
            Tree {
                dir: dir.to_path_buf(),
                state: Mutex::new(manifest),
            },
            pending,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn lock(&self) -> MutexGuard<'_, TreeManifest> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn manifest(&self) -> TreeManifest {
        self.lock().clone()
    }

    /// Applies `f` to a copy of the manifest, persists it, then commits it
    /// in memory. A failed write leaves both copies unchanged.
    fn update<R>(&self, f: impl FnOnce(&mut TreeManifest) -> Result<R>) -> Result<R> {
        self.update_with_fault(None, f)
    }

    pub fn update_with_fault<R>(&self, crash: Option<CrashPoint>, f: impl FnOnce(&mut TreeManifest) -> Result<R>) -> Result<R> {
        let mut guard = self.lock();
        let mut next = guard.clone();
        let r = f(&mut next)?;
        next.save_with_fault(&self.dir, crash)?;
        *guard = next;
        Ok(r)
    }

    /// Path of a node's image once it has one.
    pub fn image_path(&self, id: &str) -> Option<PathBuf> {
        let m = self.lock();
        let n = m.node(id)?;
        (n.job_state == JobState::Done).then(|| self.dir.join(&n.image_ref))
    }

    /// Validates a branch request and records a pending node for it.
    /// Returns `(job_id, node_id)`.
    pub fn enqueue_branch(&self, req: &BranchRequest) -> Result<(String, String)> {
        prompt::validate_age(req.age_target).map_err(|e| TreeError::Validation(e.to_string()))?;
        self.update(|m| {
            let parent = m.node(&req.parent_id).ok_or_else(|| TreeError::NotFound(req.parent_id.clone()))?;
            if parent.job_state != JobState::Done {
                return Err(TreeError::ParentNotReady {
                    id: parent.id.clone(),
                    state: parent.job_state,
                });
            }
            let o = req.overrides.clone().unwrap_or_default();
            let options = BranchOptions {
                preset: o.preset.unwrap_or(m.settings.preset),
                g: o.g.unwrap_or(m.settings.g),
                from_root: o.from_root.unwrap_or(false),
            };
            if !options.g.is_finite() {
                return Err(TreeError::Validation(format!("gain {} is not finite", options.g)));
            }
            let n = m.next_id;
            m.next_id += 1;
            let id = format!("n{n:04}");
            let job = format!("j{n:04}");
            m.nodes.push(MultiverseNode {
                id: id.clone(),
                parent_id: Some(req.parent_id.clone()),
                age: req.age_target,
                condition: req.condition.trim().to_string(),
                refined_prompt: String::new(),
                image_ref: format!("images/{id}.png"),
                metrics: None,
                created_at: Utc::now(),
                job_state: JobState::Pending,
                job_id: Some(job.clone()),
                error: None,
                options: Some(options),
                prompt_warning: None,
                sar_weight: None,
                extra: Map::new(),
            });
            Ok((job, id))
        })
    }

    /// Runs the job of pending node `id` to completion. Returns the final
    /// state, or `None` when the node was pruned or is not pending.
    pub fn run_job(&self, id: &str, rt: &Runtime) -> Result<Option<JobState>> {
        let started = self.update(|m| {
            let Some(node) = m.node_mut(id) else { return Ok(None) };
            if node.job_state != JobState::Pending {
                return Ok(None);
            }
            node.job_state = JobState::Running;
            Ok(Some(m.clone()))
        })?;
        let Some(snapshot) = started else { return Ok(None) };
        match self.generate(&snapshot, id, rt) {
            Ok(done) => {
                self.update(|m| {
                    if let Some(n) = m.node_mut(id) {
                        n.job_state = JobState::Done;
                        n.refined_prompt = done.prompt;
                        n.prompt_warning = done.warning;
                        n.sar_weight = done.sar_weight;
                    }
                    Ok(())
                })?;
                Ok(Some(JobState::Done))
            }
            Err(e) => {
                log::warn!("branch {id} failed: {e}");
                self.update(|m| {
                    if let Some(n) = m.node_mut(id) {
                        n.job_state = JobState::Failed;
                        n.error = Some(e.to_string());
                    }
                    Ok(())
                })?;
                Ok(Some(JobState::Failed))
            }
        }
    }

    /// Enqueues and runs a branch on the calling thread.
    pub fn grow_branch(&self, req: &BranchRequest, rt: &Runtime) -> Result<String> {
        let (_, id) = self.enqueue_branch(req)?;
        self.run_job(&id, rt)?;
        Ok(id)
    }

    fn generate(&self, m: &TreeManifest, id: &str, rt: &Runtime) -> Result<Generated> {
        let gen = |e: &dyn std::fmt::Display| TreeError::Generation(e.to_string());
        let node = m.node(id).ok_or_else(|| TreeError::NotFound(id.into()))?;
        let options = node.options.clone().ok_or_else(|| TreeError::Invalid(format!("node {id} has no options")))?;
        let parent_id = node.parent_id.as_deref().ok_or_else(|| TreeError::Invalid("root has no job".into()))?;
        let anchor = if options.from_root {
            m.root().ok_or_else(|| TreeError::Invalid("no root".into()))?
        } else {
            m.node(parent_id).ok_or_else(|| TreeError::NotFound(parent_id.into()))?
        };

        let permit = rt.backend.acquire();
        let bb = permit.backbone();
        if bb.descriptor().name != m.backend_id {
            return Err(TreeError::Generation(format!(
                "tree was built with backend {}, service runs {}",
                m.backend_id,
                bb.descriptor().name
            )));
        }
        let settings = &m.settings;
        let schedule = StepSchedule::uniform(settings.steps).map_err(|e| gen(&e))?;
        let anchor_image = self.dir.join(&anchor.image_ref);
        let features = self.dir.join("features").join(&anchor.id);

        let inv_dir = features.join(format!("inv-{}", schedule.id()));
        let inversion = if inv_dir.exists() {
            Inversion::load(&inv_dir).map_err(|e| gen(&e))?
        } else {
            let latent = backend::encode_path(bb, &anchor_image).map_err(|e| gen(&e))?;
            let src = Conditioning::prompt(edit::source_prompt(&m.subject_desc, anchor.age as f32));
            let inv = edit::invert(bb, &latent, &schedule, &src).map_err(|e| gen(&e))?;
            inv.save(&inv_dir).map_err(|e| gen(&e))?;
            inv
        };

        let shift = if options.preset.uses_sar() {
            let sar = SarSettings {
                age_low: settings.sar_age_low,
                age_high: settings.sar_age_high,
                cluster_size: settings.sar_cluster_size,
                seed: settings.seed,
            };
            let dir = features.join(format!(
                "sar-{}-s{:x}-{}-{}-{}",
                schedule.id(),
                sar.seed,
                sar::format_age(sar.age_low),
                sar::format_age(sar.age_high),
                sar.cluster_size
            ));
            let stored = if dir.exists() {
                StoredDirection::load(&dir).map_err(|e| gen(&e))?
            } else {
                let d = sar::synthetic_direction(&anchor_image, bb, &schedule, &sar, &self.dir.join("cache"), rt.exec)
                    .map_err(|e| gen(&e))?;
                d.save(&dir).map_err(|e| gen(&e))?;
                d
            };
            Some(edit::sar_shift(Arc::new(stored.direction), node.age as f32).map_err(|e| gen(&e))?)
        } else {
            None
        };
        let sar_weight = shift.as_ref().map(|s| s.weight);

        let req = EditRequest::new(m.subject_desc.clone(), node.age, node.condition.clone()).map_err(|e| gen(&e))?;
        let refined = prompt::refine_prompt(&req, rt.refine, &rt.catalog, rt.llm.as_deref()).map_err(|e| gen(&e))?;
        let mut cfg = options.preset.config(options.g, shift);
        cfg.exec = rt.exec;
        let (png, _) = edit::render(bb, &inversion, &schedule, &refined.text, &cfg).map_err(|e| gen(&e))?;
        amk_core::store::write_atomic(&self.dir.join(&node.image_ref), &png).map_err(|e| gen(&e))?;
        Ok(Generated {
            prompt: refined.text,
            warning: refined.warning,
            sar_weight,
        })
    }

    /// Removes `id` and its descendants with their files. Refused for the
    /// root and while any job in the subtree is running.
    pub fn delete_subtree(&self, id: &str) -> Result<Vec<String>> {
        let removed = self.update(|m| {
            let node = m.node(id).ok_or_else(|| TreeError::NotFound(id.into()))?;
            if node.is_root() {
                return Err(TreeError::Validation("the root cannot be deleted".into()));
            }
            let ids = m.subtree(id);
            if ids.iter().any(|i| m.node(i).is_some_and(|n| n.job_state == JobState::Running)) {
                return Err(TreeError::Busy(id.into()));
            }
            m.nodes.retain(|n| !ids.contains(&n.id));
            Ok(ids)
        })?;
        for i in &removed {
            let _ = fs::remove_file(self.dir.join("images").join(format!("{i}.png")));
            let _ = fs::remove_dir_all(self.dir.join("features").join(i));
        }
        Ok(removed)
    }

    /// ASCII rendering, one node per line.
    pub fn render_ascii(&self) -> String {
        render_ascii(&self.lock())
    }
}

struct Generated {
    prompt: String,
    warning: Option<String>,
    sar_weight: Option<f32>,
}

fn label(n: &MultiverseNode) -> String {
    let cond = if n.condition.is_empty() { "input".to_string() } else { n.condition.clone() };
    let mut s = format!("{} [{}] age {} {cond}", n.id, n.job_state, n.age);
    if let Some(e) = &n.error {
        s.push_str(&format!(" ({e})"));
    }
    s
}

pub fn render_ascii(m: &TreeManifest) -> String {
    fn walk(m: &TreeManifest, id: &str, prefix: &str, last: bool, out: &mut String, top: bool) {
        let Some(n) = m.node(id) else { return };
        if top {
            out.push_str(&label(n));
        } else {
            out.push_str(prefix);
            out.push_str(if last { "`-- " } else { "|-- " });
            out.push_str(&label(n));
        }
        out.push('\n');
        let kids: Vec<&MultiverseNode> = m.children(id).collect();
        let child_prefix = if top {
            String::new()
        } else {
            format!("{prefix}{}", if last { "    " } else { "|   " })
        };
        for (i, k) in kids.iter().enumerate() {
            walk(m, &k.id, &child_prefix, i + 1 == kids.len(), out, false);
        }
    }
    let mut out = String::new();
    if let Some(r) = m.root() {
        walk(m, &r.id, "", true, &mut out, true);
    }
    out
}
