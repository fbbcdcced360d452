//! Age reference clusters and the aging directions derived from them.
//!
//! A cluster is a set of images of the input subject at one age. Members come
//! from an external image service, from a user directory, or from a seeded
//! synthetic perturbation of the input. Each member is inverted under the
//! empty prompt with a recorder attached; the per-site mean over members is
//! the cluster feature, and the difference of two cluster means is an
//! [`AgingDirection`].
//!
//! Service results are cached as `<cache>/sar/<input-hash>/<age>/<idx>.png`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use image::{DynamicImage, GenericImageView, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{AgeBounds, AgingDirection, AttentionError, DirectionEntry, KvPair, SiteFeatures};
use crate::backend::{self, Backbone, CodecError};
use crate::edit::{self, EditError};
use crate::par::{self, ExecMode};
use crate::pipeline::{self, PipelineError};
use crate::rf::{Conditioning, StepSchedule};
use crate::store::{self, io_err, StoreError};
use crate::toy::SplitMix64;

pub const DEFAULT_CLUSTER_SIZE: usize = 4;
pub const DEFAULT_AGES: (f32, f32) = (30.0, 70.0);

#[derive(Debug, Error)]
pub enum SarError {
    #[error("cluster at age {age} is empty")]
    EmptyCluster { age: f32 },
    #[error("cluster at age {age} mixes resolutions: {first:?} and {other:?}")]
    MixedResolution {
        age: f32,
        first: (u32, u32),
        other: (u32, u32),
    },
    #[error("no user directory given for age {0}")]
    NoDirectory(f32),
    #[error("image service failed for {}: {last_error}", format_missing(.missing))]
    MissingMembers { missing: Vec<(f32, usize)>, last_error: String },
    #[error("cluster {0} and {1} were extracted on different schedules or backends")]
    GridMismatch(String, String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn format_missing(missing: &[(f32, usize)]) -> String {
    let parts: Vec<String> = missing.iter().map(|(a, i)| format!("age {} #{i}", format_age(*a))).collect();
    parts.join(", ")
}

pub type Result<T, E = SarError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    ExternalService,
    Synthetic,
    UserSupplied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeCluster {
    pub age: f32,
    pub images: Vec<PathBuf>,
    pub source: ClusterSource,
}

impl AgeCluster {
    /// Checks the cluster is non-empty and every image has the same size.
    pub fn new(age: f32, images: Vec<PathBuf>, source: ClusterSource) -> Result<Self> {
        let mut dims = None;
        for p in &images {
            let d = image::image_dimensions(p).map_err(|e| CodecError::Decode(format!("{}: {e}", p.display())))?;
            match dims {
                None => dims = Some(d),
                Some(first) if first != d => {
                    return Err(SarError::MixedResolution { age, first, other: d });
                }
                _ => {}
            }
        }
        if dims.is_none() {
            return Err(SarError::EmptyCluster { age });
        }
        Ok(AgeCluster { age, images, source })
    }
}

/// Directory name for an age: `70` or `70.5`.
pub fn format_age(age: f32) -> String {
    if age.fract() == 0.0 {
        format!("{age:.0}")
    } else {
        age.to_string()
    }
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn input_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgedImageRequest {
    pub image_b64: String,
    pub age: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgedImageResponse {
    pub image_b64: String,
}

/// Produces an image of the subject at a requested age.
pub trait AgedImageService: Send + Sync {
    fn generate(&self, req: &AgedImageRequest) -> Result<AgedImageResponse, String>;
}

/// JSON-over-HTTP image service.
pub struct HttpAgedImageService {
    endpoint: String,
    agent: ureq::Agent,
}

impl HttpAgedImageService {
    pub fn new(endpoint: impl Into<String>, timeout: std::time::Duration) -> Self {
        let agent = ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into();
        HttpAgedImageService {
            endpoint: endpoint.into(),
            agent,
        }
    }
}

impl AgedImageService for HttpAgedImageService {
    fn generate(&self, req: &AgedImageRequest) -> Result<AgedImageResponse, String> {
        self.agent
            .post(&self.endpoint)
            .send_json(req)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())
    }
}

/// In-process service for tests: answers with [`synthesize_member`] output,
/// counts requests, and can fail a set number of leading calls.
#[derive(Debug, Default)]
pub struct MockAgingService {
    requests: AtomicUsize,
    fail_first: AtomicUsize,
    always_fail_age: Mutex<Option<f32>>,
}

impl MockAgingService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing_first(n: usize) -> Self {
        let s = Self::default();
        s.fail_first.store(n, Ordering::SeqCst);
        s
    }

    pub fn failing_age(age: f32) -> Self {
        let s = Self::default();
        *s.always_fail_age.lock().unwrap() = Some(age);
        s
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl AgedImageService for MockAgingService {
    fn generate(&self, req: &AgedImageRequest) -> Result<AgedImageResponse, String> {
        self.requests.fetch_add(1, Ordering::SeqCst);
        let pending = self.fail_first.load(Ordering::SeqCst);
        if pending > 0 {
            self.fail_first.store(pending - 1, Ordering::SeqCst);
            return Err("transient failure".into());
        }
        if *self.always_fail_age.lock().unwrap() == Some(req.age) {
            return Err("service rejected age".into());
        }
        let bytes = B64.decode(&req.image_b64).map_err(|e| e.to_string())?;
        let input = image::load_from_memory(&bytes).map_err(|e| e.to_string())?;
        let out = synthesize_member(&input, req.age, req.seed, 0);
        let png = backend::png_bytes(&out).map_err(|e| e.to_string())?;
        Ok(AgedImageResponse { image_b64: B64.encode(png) })
    }
}

pub enum ClusterProvider<'a> {
    Synthetic { seed: u64 },
    /// One directory per age; every image inside joins the cluster.
    UserSupplied { dirs: Vec<(f32, PathBuf)> },
    External {
        service: &'a dyn AgedImageService,
        seed: u64,
        retries: usize,
    },
}

fn mix(seed: u64, age: f32, idx: usize) -> u64 {
    let mut r = SplitMix64::new(seed ^ (u64::from(age.to_bits()) << 20) ^ idx as u64);
    r.next_u64()
}

/// Seeded stand-in for an aged photo: darkens, adds a fixed wrinkle texture
/// whose strength grows with age, and adds member-specific noise.
pub fn synthesize_member(input: &DynamicImage, age: f32, seed: u64, idx: usize) -> DynamicImage {
    let (w, h) = input.dimensions();
    let s = ((age - 20.0) / 70.0).clamp(0.0, 1.0);
    let mut tex = SplitMix64::new(0x5eed_7e47 ^ seed);
    let texture: Vec<f32> = (0..w * h).map(|_| tex.next_signed()).collect();
    let mut noise = SplitMix64::new(mix(seed, age, idx));
    let mut shade = |p: u8, i: usize| {
        let v = p as f32 * (1.0 - 0.2 * s) + 35.0 * s * texture[i] + 8.0 * noise.next_signed();
        v.round().clamp(0.0, 255.0) as u8
    };
    if input.color().has_color() {
        let src = input.to_rgb8();
        let mut out = RgbImage::new(w, h);
        for (x, y, px) in src.enumerate_pixels() {
            let i = (y * w + x) as usize;
            let mut q = *px;
            for c in q.0.iter_mut() {
                *c = shade(*c, i);
            }
            out.put_pixel(x, y, q);
        }
        DynamicImage::ImageRgb8(out)
    } else {
        let src = input.to_luma8();
        let mut out = GrayImage::new(w, h);
        for (x, y, px) in src.enumerate_pixels() {
            let mut q = *px;
            q.0[0] = shade(q.0[0], (y * w + x) as usize);
            out.put_pixel(x, y, q);
        }
        DynamicImage::ImageLuma8(out)
    }
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn write_png(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    store::write_atomic(path, bytes)?;
    Ok(())
}

/// Builds one cluster per age in `ages`, `size` members each (user
/// directories contribute all their images). Generated members are cached
/// under `cache_root`.
pub fn build_clusters(
    input: &Path,
    ages: &[f32],
    size: usize,
    provider: &ClusterProvider<'_>,
    cache_root: &Path,
) -> Result<Vec<AgeCluster>> {
    let bytes = fs::read(input).map_err(io_err(input))?;
    let source = image::load_from_memory(&bytes).map_err(|e| CodecError::Decode(format!("{}: {e}", input.display())))?;
    let base = cache_root.join("sar").join(input_hash(&bytes));
    match provider {
        ClusterProvider::Synthetic { seed } => ages
            .iter()
            .map(|&age| {
                let dir = base.join(format!("synthetic-{seed:016x}")).join(format_age(age));
                let mut images = Vec::with_capacity(size);
                for idx in 0..size {
                    let p = dir.join(format!("{idx}.png"));
                    if !p.exists() {
                        write_png(&p, &backend::png_bytes(&synthesize_member(&source, age, *seed, idx))?)?;
                    }
                    images.push(p);
                }
                AgeCluster::new(age, images, ClusterSource::Synthetic)
            })
            .collect(),
        ClusterProvider::UserSupplied { dirs } => ages
            .iter()
            .map(|&age| {
                let (_, dir) = dirs.iter().find(|(a, _)| *a == age).ok_or(SarError::NoDirectory(age))?;
                let mut images: Vec<PathBuf> = fs::read_dir(dir)
                    .map_err(io_err(dir))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| is_image(p))
                    .collect();
                images.sort();
                AgeCluster::new(age, images, ClusterSource::UserSupplied)
            })
            .collect(),
        ClusterProvider::External { service, seed, retries } => {
            let image_b64 = B64.encode(&bytes);
            let mut missing = Vec::new();
            let mut last_error = String::new();
            let mut clusters = Vec::with_capacity(ages.len());
            for &age in ages {
                let dir = base.join(format_age(age));
                let mut images = Vec::with_capacity(size);
                for idx in 0..size {
                    let p = dir.join(format!("{idx}.png"));
                    if !p.exists() {
                        let req = AgedImageRequest {
                            image_b64: image_b64.clone(),
                            age,
                            seed: mix(*seed, age, idx),
                        };
                        match fetch_member(*service, &req, *retries) {
                            Ok(png) => write_png(&p, &png)?,
                            Err(e) => {
                                log::warn!("image service failed for age {age} member {idx}: {e}");
                                last_error = e;
                                missing.push((age, idx));
                                continue;
                            }
                        }
                    }
                    images.push(p);
                }
                clusters.push((age, images));
            }
            if !missing.is_empty() {
                return Err(SarError::MissingMembers { missing, last_error });
            }
            clusters
                .into_iter()
                .map(|(age, images)| AgeCluster::new(age, images, ClusterSource::ExternalService))
                .collect()
        }
    }
}

fn fetch_member(service: &dyn AgedImageService, req: &AgedImageRequest, retries: usize) -> Result<Vec<u8>, String> {
    let mut err = String::new();
    for _ in 0..=retries {
        match service.generate(req) {
            Ok(resp) => match B64.decode(&resp.image_b64) {
                Ok(png) if image::load_from_memory(&png).is_ok() => return Ok(png),
                Ok(_) => err = "service returned an undecodable image".into(),
                Err(e) => err = format!("bad base64 from service: {e}"),
            },
            Err(e) => err = e,
        }
    }
    Err(err)
}

/// Features of every member of one cluster plus their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFeatures {
    pub age: f32,
    pub schedule_id: String,
    pub backend_id: String,
    pub members: Vec<SiteFeatures>,
    pub mean: SiteFeatures,
}

impl ClusterFeatures {
    pub fn from_members(
        age: f32,
        schedule_id: impl Into<String>,
        backend_id: impl Into<String>,
        members: Vec<SiteFeatures>,
        mode: ExecMode,
    ) -> Result<Self> {
        if members.is_empty() {
            return Err(SarError::EmptyCluster { age });
        }
        let mean = crate::attention::mean_site_features_with(mode, &members)?;
        Ok(ClusterFeatures {
            age,
            schedule_id: schedule_id.into(),
            backend_id: backend_id.into(),
            members,
            mean,
        })
    }

    /// Same features filed under a different age.
    pub fn with_age(mut self, age: f32) -> Self {
        self.age = age;
        self
    }
}

/// Inverts every member under the empty prompt and averages the recorded
/// features. Members run in parallel under [`ExecMode::Parallel`].
pub fn extract_cluster_features(
    cluster: &AgeCluster,
    backbone: &dyn Backbone,
    schedule: &StepSchedule,
    mode: ExecMode,
) -> Result<ClusterFeatures> {
    let uncond = Conditioning::prompt("");
    let members = par::try_map_slice(mode, &cluster.images, |path| -> Result<SiteFeatures> {
        let latent = backend::encode_path(backbone, path)?;
        let inv = edit::invert(backbone, &latent, schedule, &uncond)?;
        Ok(inv.cache.features().clone())
    })?;
    ClusterFeatures::from_members(cluster.age, schedule.id(), backbone.descriptor().name.clone(), members, mode)
}

/// `high.mean - low.mean` at every site, with bounds `(low.age, high.age)`.
pub fn make_direction(high: &ClusterFeatures, low: &ClusterFeatures) -> Result<AgingDirection> {
    if high.schedule_id != low.schedule_id || high.backend_id != low.backend_id {
        return Err(SarError::GridMismatch(
            format!("{}@{}", high.backend_id, high.schedule_id),
            format!("{}@{}", low.backend_id, low.schedule_id),
        ));
    }
    let bounds = AgeBounds::new(low.age, high.age)?;
    Ok(crate::attention::direction_from_means(&high.mean, &low.mean, bounds)?)
}

/// A direction plus the schedule and backend it was extracted on.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDirection {
    pub direction: AgingDirection,
    pub schedule_id: String,
    pub backend_id: String,
}

impl StoredDirection {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let entries: SiteFeatures = self
            .direction
            .entries()
            .iter()
            .map(|(site, e)| {
                (
                    *site,
                    KvPair {
                        k: e.delta_k.clone(),
                        v: e.delta_v.clone(),
                    },
                )
            })
            .collect();
        let extra = json!({ "age_low": self.direction.age_low(), "age_high": self.direction.age_high() });
        pipeline::save_site_features(dir, "aging-direction", &self.schedule_id, &self.backend_id, &entries, Some(extra), &[])?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, entries) = pipeline::load_site_features(dir, "aging-direction")?;
        let bound = |key: &str| {
            manifest
                .extra
                .as_ref()
                .and_then(|e| e.get(key))
                .and_then(|v| v.as_f64())
                .ok_or_else(|| StoreError::Manifest {
                    path: dir.to_path_buf(),
                    reason: format!("missing {key}"),
                })
        };
        let bounds = AgeBounds::new(bound("age_low")? as f32, bound("age_high")? as f32)?;
        let entries = entries
            .into_iter()
            .map(|(site, kv)| (site, DirectionEntry { delta_k: kv.k, delta_v: kv.v }))
            .collect();
        Ok(StoredDirection {
            direction: AgingDirection::new(entries, bounds)?,
            schedule_id: manifest.schedule_id,
            backend_id: manifest.backend_id,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarSettings {
    pub age_low: f32,
    pub age_high: f32,
    pub cluster_size: usize,
    pub seed: u64,
}

impl Default for SarSettings {
    fn default() -> Self {
        SarSettings {
            age_low: DEFAULT_AGES.0,
            age_high: DEFAULT_AGES.1,
            cluster_size: DEFAULT_CLUSTER_SIZE,
            seed: 0,
        }
    }
}

/// Builds synthetic clusters at the two reference ages and returns their direction.
pub fn synthetic_direction(
    input: &Path,
    backbone: &dyn Backbone,
    schedule: &StepSchedule,
    settings: &SarSettings,
    cache_root: &Path,
    mode: ExecMode,
) -> Result<StoredDirection> {
    let provider = ClusterProvider::Synthetic { seed: settings.seed };
    let clusters = build_clusters(
        input,
        &[settings.age_low, settings.age_high],
        settings.cluster_size,
        &provider,
        cache_root,
    )?;
    let low = extract_cluster_features(&clusters[0], backbone, schedule, mode)?;
    let high = extract_cluster_features(&clusters[1], backbone, schedule, mode)?;
    Ok(StoredDirection {
        direction: make_direction(&high, &low)?,
        schedule_id: low.schedule_id,
        backend_id: low.backend_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{ToyBackend, ToyModelSpec};

    fn portrait(dir: &Path) -> (ToyBackend, PathBuf) {
        let toy = ToyBackend::new(ToyModelSpec::default());
        let p = dir.join("in.png");
        fs::write(&p, backend::png_bytes(&toy.sample_portrait(3)).unwrap()).unwrap();
        (toy, p)
    }

    #[test]
    fn synthetic_clusters_are_seeded_and_cached() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, input) = portrait(tmp.path());
        let cache = tmp.path().join("cache");
        let prov = ClusterProvider::Synthetic { seed: 7 };
        let a = build_clusters(&input, &[30.0, 70.0], 4, &prov, &cache).unwrap();
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|c| c.images.len() == 4 && c.source == ClusterSource::Synthetic));
        let bytes: Vec<Vec<u8>> = a[1].images.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_ne!(bytes[0], bytes[1]);
        fs::remove_dir_all(&cache).unwrap();
        let b = build_clusters(&input, &[30.0, 70.0], 4, &prov, &cache).unwrap();
        assert_eq!(fs::read(&b[1].images[0]).unwrap(), bytes[0]);
    }

    #[test]
    fn external_cache_layout_and_retries() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, input) = portrait(tmp.path());
        let cache = tmp.path().join("cache");
        let svc = MockAgingService::failing_first(2);
        let prov = ClusterProvider::External {
            service: &svc,
            seed: 1,
            retries: 2,
        };
        let c = build_clusters(&input, &[70.0], 2, &prov, &cache).unwrap();
        let hash = input_hash(&fs::read(&input).unwrap());
        assert_eq!(c[0].images[1], cache.join("sar").join(hash).join("70").join("1.png"));
        assert_eq!(svc.requests(), 4);
    }

    #[test]
    fn external_failure_lists_missing_members() {
        let tmp = tempfile::tempdir().unwrap();
        let (_, input) = portrait(tmp.path());
        let svc = MockAgingService::failing_age(70.0);
        let prov = ClusterProvider::External {
            service: &svc,
            seed: 1,
            retries: 1,
        };
        let err = build_clusters(&input, &[30.0, 70.0], 2, &prov, &tmp.path().join("c")).unwrap_err();
        match err {
            SarError::MissingMembers { missing, .. } => assert_eq!(missing, vec![(70.0, 0), (70.0, 1)]),
            other => panic!("{other}"),
        }
        assert_eq!(svc.requests(), 2 + 4);
    }

    #[test]
    fn mixed_resolution_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.png");
        let b = tmp.path().join("b.png");
        DynamicImage::new_luma8(4, 4).save(&a).unwrap();
        DynamicImage::new_luma8(4, 5).save(&b).unwrap();
        assert!(matches!(
            AgeCluster::new(30.0, vec![a, b], ClusterSource::UserSupplied),
            Err(SarError::MixedResolution { .. })
        ));
        assert!(matches!(
            AgeCluster::new(30.0, vec![], ClusterSource::UserSupplied),
            Err(SarError::EmptyCluster { .. })
        ));
    }

    #[test]
    fn direction_round_trip_and_bounds() {
        let tmp = tempfile::tempdir().unwrap();
        let (toy, input) = portrait(tmp.path());
        let sched = StepSchedule::uniform(3).unwrap();
        let settings = SarSettings {
            cluster_size: 2,
            ..SarSettings::default()
        };
        let d = synthetic_direction(&input, &toy, &sched, &settings, &tmp.path().join("c"), ExecMode::default()).unwrap();
        assert_eq!((d.direction.age_low(), d.direction.age_high()), (30.0, 70.0));
        assert_eq!(d.direction.len(), 6);
        assert!(d.direction.max_abs() > 0.0);
        let p = tmp.path().join("dir");
        d.save(&p).unwrap();
        assert_eq!(StoredDirection::load(&p).unwrap(), d);
    }
}
