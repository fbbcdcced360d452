//! End-to-end edit of one image: invert under a source prompt while
//! recording attention features, then denoise under the target prompt with
//! the editing mixer attached.

use std::path::Path;
use std::sync::Arc;

use serde_json::json;
use thiserror::Error;

use crate::attention::{self, AgingDirection, AttentionError, SiteKey};
use crate::backend::{self, Backbone, CodecError};
use crate::pipeline::{self, EditingMixer, FeatureCache, InversionRecorder, MixingConfig, PipelineError, SarShift};
use crate::rf::{self, Conditioning, Direction, Latent, RfError, StepSchedule, TrajectoryState};
use crate::store::{self, StoreError};

#[derive(Debug, Error)]
pub enum EditError {
    #[error(transparent)]
    Rf(#[from] RfError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

pub type Result<T, E = EditError> = std::result::Result<T, E>;

/// Inverted noise plus the attention features recorded on the way.
#[derive(Debug, Clone, PartialEq)]
pub struct Inversion {
    pub noise: Latent,
    pub cache: Arc<FeatureCache>,
    pub source_prompt: String,
    pub audit: Vec<SiteKey>,
}

const NOISE_FILE: &str = "noise.f32";

impl Inversion {
    pub fn save(&self, dir: &Path) -> Result<()> {
        pipeline::save_site_features(
            dir,
            "inversion",
            self.cache.schedule_id(),
            self.cache.backend_id(),
            self.cache.features(),
            Some(json!({ "source_prompt": self.source_prompt, "noise": NOISE_FILE })),
            &[(NOISE_FILE, &self.noise)],
        )?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, features) = pipeline::load_site_features(dir, "inversion")?;
        let source_prompt = manifest
            .extra
            .as_ref()
            .and_then(|e| e.get("source_prompt"))
            .and_then(|p| p.as_str())
            .unwrap_or_default()
            .to_string();
        let noise = store::read_array(&dir.join(NOISE_FILE))?;
        let mut cache = FeatureCache::new(manifest.schedule_id, manifest.backend_id);
        for (site, kv) in &features {
            cache.record(*site, &kv.k, &kv.v)?;
        }
        cache.seal();
        let audit = cache.sites().collect();
        Ok(Inversion {
            noise,
            cache: Arc::new(cache),
            source_prompt,
            audit,
        })
    }
}

/// Integrates `latent` from t = 0 to 1 under `source`, recording every site.
pub fn invert(backbone: &dyn Backbone, latent: &Latent, schedule: &StepSchedule, source: &Conditioning) -> Result<Inversion> {
    let cache = FeatureCache::new(schedule.id(), backbone.descriptor().name.clone());
    let mut recorder = InversionRecorder::new(cache);
    let start = TrajectoryState::new(latent.clone(), 0.0)?;
    let end = rf::integrate(&start, schedule, Direction::Inversion, backbone, source, Some(&mut recorder))?;
    let (cache, audit) = recorder.finish();
    Ok(Inversion {
        noise: end.latent,
        cache: Arc::new(cache),
        source_prompt: source.prompt_text.clone(),
        audit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoised {
    pub latent: Latent,
    /// Sites the mixer rewrote, in visit order.
    pub audit: Vec<SiteKey>,
}

/// Integrates the inverted noise back to t = 0 under `target` with mixing `cfg`.
pub fn denoise(
    backbone: &dyn Backbone,
    inversion: &Inversion,
    schedule: &StepSchedule,
    target: &Conditioning,
    cfg: &MixingConfig,
) -> Result<Denoised> {
    cfg.validate(schedule.steps(), backbone.descriptor().layers())?;
    let start = TrajectoryState::new(inversion.noise.clone(), 1.0)?;
    let mut mixer = EditingMixer::new(inversion.cache.clone(), cfg.clone())?;
    let end = rf::integrate(&start, schedule, Direction::Denoising, backbone, target, Some(&mut mixer))?;
    Ok(Denoised {
        latent: end.latent,
        audit: mixer.touched().to_vec(),
    })
}

/// Plain denoising without any hook attached.
pub fn denoise_unhooked(backbone: &dyn Backbone, noise: &Latent, schedule: &StepSchedule, target: &Conditioning) -> Result<Latent> {
    let start = TrajectoryState::new(noise.clone(), 1.0)?;
    Ok(rf::integrate(&start, schedule, Direction::Denoising, backbone, target, None)?.latent)
}

/// Prompt describing the unedited input.
pub fn source_prompt(subject: &str, age: f32) -> String {
    format!("{}, {age} years old", subject.trim())
}

/// SAR shift toward `target_age`, weighted by its position between the
/// direction's reference ages (not clamped, so ages outside extrapolate).
pub fn sar_shift(direction: Arc<AgingDirection>, target_age: f32) -> Result<SarShift> {
    let weight = attention::age_weight(target_age, direction.age_low(), direction.age_high())?;
    Ok(SarShift { direction, weight })
}

/// Denoises with `cfg` and decodes to PNG bytes.
pub fn render(
    backbone: &dyn Backbone,
    inversion: &Inversion,
    schedule: &StepSchedule,
    target_prompt: &str,
    cfg: &MixingConfig,
) -> Result<(Vec<u8>, Denoised)> {
    let out = denoise(backbone, inversion, schedule, &Conditioning::prompt(target_prompt), cfg)?;
    let png = backend::decode_to_png(backbone, &out.latent)?;
    Ok((png, out))
}
