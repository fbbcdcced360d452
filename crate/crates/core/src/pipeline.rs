//! Inversion feature recording and the editing strategies that consume it.
//!
//! During inversion an [`InversionRecorder`] copies K and V at every
//! attention site into a [`FeatureCache`]. During denoising an
//! [`EditingMixer`] rewrites the editing branch's attention inputs according
//! to a [`MixingConfig`]:
//!
//! | strategy                | Q      | K                           | V                               |
//! |-------------------------|--------|-----------------------------|---------------------------------|
//! | `none`                  | edit   | edit                        | edit                            |
//! | `replace_v`             | edit   | edit                        | inv                             |
//! | `project_v`             | edit   | edit                        | proj(inv, edit)                 |
//! | `project_v_mask`        | edit   | edit                        | proj(inv, edit), text alpha = 1 |
//! | `project_v_mask_keymod` | edit   | edit + g * A(edit, inv) inv | proj(inv, edit), text alpha = 1 |
//!
//! When a SAR shift is configured, the cached `(k_inv, v_inv)` are first
//! moved along the aging direction (on copies) and the shifted features feed
//! the table above. Sites missing from the direction are left unshifted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    self, AgingDirection, AlphaClamp, AttentionError, FeatureBlock, KvPair, ProjectionOptions, SiteFeatures, SiteKey,
    TokenLayout,
};
use crate::par::ExecMode;
use crate::rf::{AttentionHook, HookError, Qkv};
use crate::store::{self, io_err, StoreError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("feature already recorded at {0}")]
    DuplicateSite(SiteKey),
    #[error("no cached inversion features at {0}")]
    MissingSite(SiteKey),
    #[error("feature cache read before the inversion pass completed")]
    Unsealed,
    #[error("feature cache is sealed; no further recording")]
    Sealed,
    #[error("invalid mixing config: {0}")]
    InvalidConfig(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Inversion K/V per site, written once during inversion and read-only afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    schedule_id: String,
    backend_id: String,
    entries: SiteFeatures,
    sealed: bool,
}

impl FeatureCache {
    pub fn new(schedule_id: impl Into<String>, backend_id: impl Into<String>) -> Self {
        FeatureCache {
            schedule_id: schedule_id.into(),
            backend_id: backend_id.into(),
            entries: BTreeMap::new(),
            sealed: false,
        }
    }

    pub fn schedule_id(&self) -> &str {
        &self.schedule_id
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Stores copies of `k` and `v` at `site`.
    pub fn record(&mut self, site: SiteKey, k: &FeatureBlock, v: &FeatureBlock) -> Result<()> {
        if self.sealed {
            return Err(PipelineError::Sealed);
        }
        if self.entries.contains_key(&site) {
            return Err(PipelineError::DuplicateSite(site));
        }
        self.entries.insert(
            site,
            KvPair {
                k: k.clone(),
                v: v.clone(),
            },
        );
        Ok(())
    }

    /// Marks the inversion pass complete.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn get(&self, site: SiteKey) -> Result<&KvPair> {
        if !self.sealed {
            return Err(PipelineError::Unsealed);
        }
        self.entries.get(&site).ok_or(PipelineError::MissingSite(site))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn features(&self) -> &SiteFeatures {
        &self.entries
    }

    pub fn into_features(self) -> SiteFeatures {
        self.entries
    }

    /// Persists into a new directory (see [`save_site_features`]).
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.sealed {
            return Err(PipelineError::Unsealed);
        }
        save_site_features(dir, "feature-cache", &self.schedule_id, &self.backend_id, &self.entries, None, &[])?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, entries) = load_site_features(dir, "feature-cache")?;
        Ok(FeatureCache {
            schedule_id: manifest.schedule_id,
            backend_id: manifest.backend_id,
            entries,
            sealed: true,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    step: usize,
    layer: usize,
    k: String,
    v: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayoutRow {
    layer: usize,
    layout: TokenLayout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SiteManifest {
    format: String,
    version: u32,
    pub(crate) schedule_id: String,
    pub(crate) backend_id: String,
    layouts: Vec<LayoutRow>,
    entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub(crate) extra: Option<serde_json::Value>,
}

pub(crate) const MANIFEST_FILE: &str = "manifest.json";

/// Writes site features as a directory: `manifest.json` plus one array file
/// per `(step, layer, k|v)` named `s{step:04}_l{layer:03}_{k|v}.f32`.
pub(crate) fn save_site_features(
    dir: &Path,
    format: &str,
    schedule_id: &str,
    backend_id: &str,
    entries: &SiteFeatures,
    extra: Option<serde_json::Value>,
    extra_arrays: &[(&str, &ndarray::ArrayD<f32>)],
) -> Result<(), StoreError> {
    let mut layouts: BTreeMap<usize, TokenLayout> = BTreeMap::new();
    let mut rows = Vec::with_capacity(entries.len());
    for (site, kv) in entries {
        layouts.entry(site.layer).or_insert(kv.k.layout());
        rows.push(ManifestEntry {
            step: site.step,
            layer: site.layer,
            k: format!("s{:04}_l{:03}_k.f32", site.step, site.layer),
            v: format!("s{:04}_l{:03}_v.f32", site.step, site.layer),
        });
    }
    let manifest = SiteManifest {
        format: format.to_string(),
        version: 1,
        schedule_id: schedule_id.to_string(),
        backend_id: backend_id.to_string(),
        layouts: layouts.into_iter().map(|(layer, layout)| LayoutRow { layer, layout }).collect(),
        entries: rows,
        extra,
    };
    store::write_dir_atomic(dir, |tmp| {
        for (row, kv) in manifest.entries.iter().zip(entries.values()) {
            store::write_array(&tmp.join(&row.k), &kv.k.values().clone().into_dyn())?;
            store::write_array(&tmp.join(&row.v), &kv.v.values().clone().into_dyn())?;
        }
        for (name, array) in extra_arrays {
            store::write_array(&tmp.join(name), array)?;
        }
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        store::write_atomic(&tmp.join(MANIFEST_FILE), &json)
    })
}

pub(crate) fn load_site_features(dir: &Path, format: &str) -> Result<(SiteManifest, SiteFeatures), StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let bad = |reason: String| StoreError::Manifest {
        path: path.clone(),
        reason,
    };
    let manifest: SiteManifest = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    if manifest.format != format {
        return Err(bad(format!("format {:?}, expected {format:?}", manifest.format)));
    }
    let layouts: BTreeMap<usize, TokenLayout> = manifest.layouts.iter().map(|r| (r.layer, r.layout)).collect();
    let mut entries = SiteFeatures::new();
    for row in &manifest.entries {
        let layout = *layouts
            .get(&row.layer)
            .ok_or_else(|| bad(format!("no layout for layer {}", row.layer)))?;
        let block = |name: &str| -> Result<FeatureBlock, StoreError> {
            let p = dir.join(name);
            let arr = store::read_array(&p)?;
            let arr = arr
                .into_dimensionality::<ndarray::Ix3>()
                .map_err(|e| bad(format!("{name}: {e}")))?;
            FeatureBlock::new(layout, arr).map_err(|e| bad(format!("{name}: {e}")))
        };
        entries.insert(
            SiteKey::new(row.step, row.layer),
            KvPair {
                k: block(&row.k)?,
                v: block(&row.v)?,
            },
        );
    }
    Ok((manifest, entries))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    ReplaceV,
    ProjectV,
    ProjectVMask,
    ProjectVMaskKeymod,
}

impl Strategy {
    pub fn masks_text(self) -> bool {
        matches!(self, Strategy::ProjectVMask | Strategy::ProjectVMaskKeymod)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::ReplaceV => "replace_v",
            Strategy::ProjectV => "project_v",
            Strategy::ProjectVMask => "project_v_mask",
            Strategy::ProjectVMaskKeymod => "project_v_mask_keymod",
        }
    }
}

/// Inversion features shifted along an aging direction with weight `weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct SarShift {
    pub direction: Arc<AgingDirection>,
    pub weight: f32,
}

impl Serialize for SarShift {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("SarShift", 4)?;
        st.serialize_field("weight", &self.weight)?;
        st.serialize_field("age_low", &self.direction.age_low())?;
        st.serialize_field("age_high", &self.direction.age_high())?;
        st.serialize_field("sites", &self.direction.len())?;
        st.end()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixingConfig {
    pub strategy: Strategy,
    /// Key-modulation gain.
    pub g: f32,
    pub sar: Option<SarShift>,
    /// Half-open range of schedule intervals where mixing applies; `None` means all.
    pub active_steps: Option<(usize, usize)>,
    /// Layers where mixing applies; `None` means every declared site.
    pub active_layers: Option<BTreeSet<usize>>,
    pub alpha_clamp: Option<AlphaClamp>,
    #[serde(skip)]
    pub exec: ExecMode,
}

pub const DEFAULT_GAIN: f32 = 1.0;

impl Default for MixingConfig {
    fn default() -> Self {
        MixingConfig {
            strategy: Strategy::None,
            g: DEFAULT_GAIN,
            sar: None,
            active_steps: None,
            active_layers: None,
            alpha_clamp: None,
            exec: ExecMode::default(),
        }
    }
}

impl MixingConfig {
    pub fn with_strategy(strategy: Strategy) -> Self {
        MixingConfig {
            strategy,
            ..Default::default()
        }
    }

    pub fn mask_text(&self) -> bool {
        self.strategy.masks_text()
    }

    /// Checks the config against a schedule of `steps` intervals and a backend with `layers` sites.
    pub fn validate(&self, steps: usize, layers: usize) -> Result<()> {
        if !self.g.is_finite() {
            return Err(PipelineError::InvalidConfig(format!("gain g = {} is not finite", self.g)));
        }
        if let Some((lo, hi)) = self.active_steps {
            if lo >= hi || hi > steps {
                return Err(PipelineError::InvalidConfig(format!(
                    "active steps {lo}..{hi} not within 0..{steps}"
                )));
            }
        }
        if let Some(layers_set) = &self.active_layers {
            if let Some(bad) = layers_set.iter().find(|&&l| l >= layers) {
                return Err(PipelineError::InvalidConfig(format!(
                    "active layer {bad} but backend has {layers} layers"
                )));
            }
        }
        if let Some(c) = self.alpha_clamp {
            if !(c.min <= c.max) || !c.min.is_finite() || !c.max.is_finite() {
                return Err(PipelineError::InvalidConfig(format!("alpha clamp [{}, {}]", c.min, c.max)));
            }
        }
        if let Some(sar) = &self.sar {
            if !sar.weight.is_finite() {
                return Err(PipelineError::InvalidConfig("SAR weight is not finite".into()));
            }
        }
        Ok(())
    }

    pub fn is_active(&self, site: SiteKey) -> bool {
        if self.strategy == Strategy::None {
            return false;
        }
        if let Some((lo, hi)) = self.active_steps {
            if site.step < lo || site.step >= hi {
                return false;
            }
        }
        match &self.active_layers {
            Some(set) => set.contains(&site.layer),
            None => true,
        }
    }
}

/// The ablation ladder, from the value-replacement baseline to the full method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    ReplaceV,
    ProjectV,
    ProjectVMask,
    Keymod,
    Full,
}

impl Preset {
    pub const LADDER: [Preset; 5] = [
        Preset::ReplaceV,
        Preset::ProjectV,
        Preset::ProjectVMask,
        Preset::Keymod,
        Preset::Full,
    ];

    pub fn strategy(self) -> Strategy {
        match self {
            Preset::ReplaceV => Strategy::ReplaceV,
            Preset::ProjectV => Strategy::ProjectV,
            Preset::ProjectVMask => Strategy::ProjectVMask,
            Preset::Keymod | Preset::Full => Strategy::ProjectVMaskKeymod,
        }
    }

    pub fn uses_sar(self) -> bool {
        self == Preset::Full
    }

    /// Row label used in ablation reports.
    pub fn label(self) -> &'static str {
        match self {
            Preset::ReplaceV => "RF-Solver-Edit (baseline)",
            Preset::ProjectV => "+ Att. Mixing (Value only)",
            Preset::ProjectVMask => "+ Text Embedding Masking",
            Preset::Keymod => "+ Att. Mixing (Value & Key)",
            Preset::Full => "+ Simulated Aging Regularization",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::ReplaceV => "replace_v",
            Preset::ProjectV => "project_v",
            Preset::ProjectVMask => "project_v_mask",
            Preset::Keymod => "keymod",
            Preset::Full => "full",
        }
    }

    /// Mixing config for this rung. `sar` is attached only for [`Preset::Full`].
    pub fn config(self, g: f32, sar: Option<SarShift>) -> MixingConfig {
        MixingConfig {
            strategy: self.strategy(),
            g,
            sar: if self.uses_sar() { sar } else { None },
            ..Default::default()
        }
    }
}

impl FromStr for Preset {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "replace_v" | "baseline" => Preset::ReplaceV,
            "project_v" => Preset::ProjectV,
            "project_v_mask" => Preset::ProjectVMask,
            "keymod" | "project_v_mask_keymod" => Preset::Keymod,
            "full" | "sar" => Preset::Full,
            other => return Err(PipelineError::UnknownPreset(other.to_string())),
        })
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cached inversion features at `site`, shifted by the SAR direction when configured.
pub fn shifted_inversion<'a>(
    site: SiteKey,
    cache: &'a FeatureCache,
    cfg: &MixingConfig,
) -> Result<std::borrow::Cow<'a, KvPair>> {
    let kv = cache.get(site)?;
    match cfg.sar.as_ref().and_then(|s| s.direction.get(site).map(|e| (s.weight, e))) {
        Some((w, entry)) => {
            let (k, v) = attention::apply_aging_direction(&kv.k, &kv.v, entry, w)?;
            Ok(std::borrow::Cow::Owned(KvPair { k, v }))
        }
        None => Ok(std::borrow::Cow::Borrowed(kv)),
    }
}

/// Rewrites the editing branch's attention inputs at `site`.
pub fn apply_strategy(site: SiteKey, edit: Qkv, cache: &FeatureCache, cfg: &MixingConfig) -> Result<Qkv> {
    if !cfg.is_active(site) {
        return Ok(edit);
    }
    let inv = shifted_inversion(site, cache, cfg)?;
    let Qkv { q, k, v } = edit;
    let projection = ProjectionOptions {
        mask_text: cfg.mask_text(),
        clamp: cfg.alpha_clamp,
        exec: cfg.exec,
    };
    let out = match cfg.strategy {
        Strategy::None => Qkv { q, k, v },
        Strategy::ReplaceV => Qkv {
            q,
            k,
            v: inv.v.clone(),
        },
        Strategy::ProjectV | Strategy::ProjectVMask => Qkv {
            q,
            v: attention::project_value_with(&inv.v, &v, &projection)?,
            k,
        },
        Strategy::ProjectVMaskKeymod => Qkv {
            q,
            k: attention::modulate_key_with(cfg.exec, &k, &inv.k, cfg.g)?,
            v: attention::project_value_with(&inv.v, &v, &projection)?,
        },
    };
    Ok(out)
}

/// Inversion hook: records K/V at every site it sees.
#[derive(Debug)]
pub struct InversionRecorder {
    cache: FeatureCache,
    touched: Vec<SiteKey>,
}

impl InversionRecorder {
    pub fn new(cache: FeatureCache) -> Self {
        InversionRecorder {
            cache,
            touched: Vec::new(),
        }
    }

    pub fn touched(&self) -> &[SiteKey] {
        &self.touched
    }

    /// Seals and returns the cache together with the audit log.
    pub fn finish(mut self) -> (FeatureCache, Vec<SiteKey>) {
        self.cache.seal();
        (self.cache, self.touched)
    }
}

impl AttentionHook for InversionRecorder {
    fn on_attention(&mut self, site: SiteKey, qkv: &mut Qkv) -> std::result::Result<(), HookError> {
        self.cache
            .record(site, &qkv.k, &qkv.v)
            .map_err(|e| HookError(e.to_string()))?;
        self.touched.push(site);
        Ok(())
    }
}

/// Editing hook: applies [`apply_strategy`] against a sealed cache.
#[derive(Debug, Clone)]
pub struct EditingMixer {
    cache: Arc<FeatureCache>,
    cfg: MixingConfig,
    touched: Vec<SiteKey>,
}

impl EditingMixer {
    pub fn new(cache: Arc<FeatureCache>, cfg: MixingConfig) -> Result<Self> {
        if !cache.is_sealed() {
            return Err(PipelineError::Unsealed);
        }
        Ok(EditingMixer {
            cache,
            cfg,
            touched: Vec::new(),
        })
    }

    pub fn touched(&self) -> &[SiteKey] {
        &self.touched
    }

    pub fn config(&self) -> &MixingConfig {
        &self.cfg
    }
}

impl AttentionHook for EditingMixer {
    fn on_attention(&mut self, site: SiteKey, qkv: &mut Qkv) -> std::result::Result<(), HookError> {
        if !self.cfg.is_active(site) {
            return Ok(());
        }
        let placeholder = qkv.clone();
        let edit = std::mem::replace(qkv, placeholder);
        *qkv = apply_strategy(site, edit, &self.cache, &self.cfg).map_err(|e| HookError(e.to_string()))?;
        self.touched.push(site);
        Ok(())
    }
}

/// Recorder for the inversion pass and, once it finishes, the mixer for editing.
#[derive(Debug)]
pub struct HookPair {
    recorder: InversionRecorder,
    cfg: MixingConfig,
}

pub fn build_hooks(cache: FeatureCache, cfg: MixingConfig) -> HookPair {
    HookPair {
        recorder: InversionRecorder::new(cache),
        cfg,
    }
}

impl HookPair {
    pub fn recorder(&mut self) -> &mut InversionRecorder {
        &mut self.recorder
    }

    /// Seals the recorded cache and returns the editing mixer plus the inversion audit log.
    pub fn into_mixer(self) -> Result<(EditingMixer, Vec<SiteKey>)> {
        let (cache, audit) = self.recorder.finish();
        Ok((EditingMixer::new(Arc::new(cache), self.cfg)?, audit))
    }
}
