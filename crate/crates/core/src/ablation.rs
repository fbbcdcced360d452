//! Runs the five-rung preset ladder on one input and tabulates the results.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use crate::backend::{self, Backbone};
use crate::edit::{self, EditError};
use crate::eval::{self, AgeEstimator, ClipScorer, FaceEmbedder, MetricRecord, Report};
use crate::par::{self, ExecMode};
use crate::pipeline::{MixingConfig, Preset, DEFAULT_GAIN};
use crate::prompt::{self, ConditionCatalog, EditRequest, PromptError, RefineMode};
use crate::rf::{Conditioning, StepSchedule};
use crate::sar::{self, SarError, SarSettings};

#[derive(Debug, thiserror::Error)]
pub enum AblationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Sar(#[from] SarError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Codec(#[from] backend::CodecError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationSetup {
    pub subject: String,
    pub source_age: f32,
    pub target_age: f32,
    pub condition: String,
    pub g: f32,
    pub steps: usize,
    pub sar: SarSettings,
}

impl Default for AblationSetup {
    fn default() -> Self {
        AblationSetup {
            subject: "person".into(),
            source_age: 30.0,
            target_age: 70.0,
            condition: String::new(),
            g: DEFAULT_GAIN,
            steps: 16,
            sar: SarSettings::default(),
        }
    }
}

/// Optional metric models; absent ones leave their column empty.
#[derive(Default)]
pub struct Adapters<'a> {
    pub clip: Option<&'a dyn ClipScorer>,
    pub age: Option<&'a dyn AgeEstimator>,
    pub face: Option<&'a dyn FaceEmbedder>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub preset: Preset,
    pub label: &'static str,
    pub config: MixingConfig,
    #[serde(skip)]
    pub png: Vec<u8>,
    pub record: MetricRecord,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRun {
    pub prompt: String,
    pub rows: Vec<AblationRow>,
    pub report: Report,
}

/// Inverts `input` once, then denoises under every preset of the ladder.
pub fn run_ablation(
    backbone: &dyn Backbone,
    input: &Path,
    setup: &AblationSetup,
    cache_root: &Path,
    adapters: &Adapters<'_>,
    mode: ExecMode,
) -> Result<AblationRun, AblationError> {
    let req = EditRequest::new(setup.subject.clone(), setup.target_age as f64, setup.condition.clone())?;
    let refined = prompt::refine_prompt(&req, RefineMode::Template, &ConditionCatalog::builtin(), None)?;
    let schedule = StepSchedule::uniform(setup.steps).map_err(EditError::from)?;
    let source = backend::read_image(input)?;
    let latent = backbone.encode_image(&source)?;
    let src_prompt = edit::source_prompt(&setup.subject, setup.source_age);
    let inversion = edit::invert(backbone, &latent, &schedule, &Conditioning::prompt(&src_prompt))?;
    let direction = sar::synthetic_direction(input, backbone, &schedule, &setup.sar, cache_root, mode)?;
    let shift = edit::sar_shift(Arc::new(direction.direction), setup.target_age)?;

    let rendered = par::try_map_slice(mode, &Preset::LADDER, |preset| {
        let mut cfg = preset.config(setup.g, Some(shift.clone()));
        cfg.exec = ExecMode::Sequential;
        edit::render(backbone, &inversion, &schedule, &refined.text, &cfg).map(|(png, _)| (cfg, png))
    })?;

    let mut rows = Vec::with_capacity(rendered.len());
    for (preset, (config, png)) in Preset::LADDER.into_iter().zip(rendered) {
        let image = image::load_from_memory(&png).map_err(|e| backend::CodecError::Decode(e.to_string()))?;
        let record = MetricRecord {
            id: preset.name().to_string(),
            group: preset.label().to_string(),
            clip_t: eval::clip_t(&image, &refined.text, adapters.clip)?.value(),
            age_pred: eval::estimate_age(&image, adapters.age).value(),
            age_target: setup.target_age as f64,
            id_sim: eval::id_sim(&image, std::slice::from_ref(&source), adapters.face)?.value(),
        };
        rows.push(AblationRow {
            preset,
            label: preset.label(),
            config,
            png,
            record,
        });
    }
    let records: Vec<MetricRecord> = rows.iter().map(|r| r.record.clone()).collect();
    Ok(AblationRun {
        prompt: refined.text,
        report: Report::from_records(&records),
        rows,
    })
}

/// File names used when an ablation run is written out.
pub fn image_path(out_dir: &Path, preset: Preset) -> PathBuf {
    out_dir.join(format!("{}.png", preset.name()))
}
