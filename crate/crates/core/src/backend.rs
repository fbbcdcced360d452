//! Backend descriptors, image codecs and selection of the velocity backbone.
//!
//! The built-in toy backend is always available. Real backbones plug in by
//! registering a named factory in a [`BackendRegistry`] and are selected with
//! `backend = "external:<name>"` in the config file or through `AMK_BACKEND`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, MutexGuard};

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::TokenLayout;
use crate::rf::{Latent, VelocityBackend};
use crate::toy::{ToyBackend, ToyModelSpec};

pub const BACKEND_ENV: &str = "AMK_BACKEND";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSiteSpec {
    pub layer: usize,
    pub layout: TokenLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub latent_shape: Vec<usize>,
    pub sites: Vec<AttentionSiteSpec>,
    pub supports_hooks: bool,
    pub supports_text_mask: bool,
}

impl BackendDescriptor {
    /// Descriptor of a plain field without attention sites.
    pub fn analytic(name: &str, latent_shape: Vec<usize>) -> Self {
        BackendDescriptor {
            name: name.to_string(),
            latent_shape,
            sites: Vec::new(),
            supports_hooks: false,
            supports_text_mask: false,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.supports_hooks && self.sites.is_empty() {
            return Err(AdapterError::Misconfigured {
                backend: self.name.clone(),
                missing: "attention sites (backend claims hook support but declares none)".into(),
            });
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.sites.len()
    }
}

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot read image {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image: {0}")]
    Decode(String),
    #[error("image is {actual_w}x{actual_h}, backend {backend} expects {expected_w}x{expected_h}")]
    Resolution {
        backend: String,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("latent shape {actual:?} does not match backend shape {expected:?}")]
    LatentShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("cannot encode png: {0}")]
    Encode(String),
}

/// Conversion between images and latents.
pub trait ImageCodec: Send + Sync {
    /// Width and height the codec accepts.
    fn resolution(&self) -> (u32, u32);
    fn encode_image(&self, image: &DynamicImage) -> Result<Latent, CodecError>;
    fn decode_latent(&self, latent: &Latent) -> Result<DynamicImage, CodecError>;
}

/// A full backbone: velocity field plus image codec.
pub trait Backbone: VelocityBackend + ImageCodec {}

impl<T: VelocityBackend + ImageCodec> Backbone for T {}

pub fn read_image(path: &Path) -> Result<DynamicImage, CodecError> {
    let bytes = std::fs::read(path).map_err(|source| CodecError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    image::load_from_memory(&bytes).map_err(|e| CodecError::Decode(format!("{}: {e}", path.display())))
}

pub fn png_bytes(image: &DynamicImage) -> Result<Vec<u8>, CodecError> {
    let mut out = Cursor::new(Vec::new());
    image
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| CodecError::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn encode_path(codec: &dyn ImageCodec, path: &Path) -> Result<Latent, CodecError> {
    codec.encode_image(&read_image(path)?)
}

/// Decodes a latent straight to PNG bytes.
pub fn decode_to_png(codec: &dyn ImageCodec, latent: &Latent) -> Result<Vec<u8>, CodecError> {
    png_bytes(&codec.decode_latent(latent)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendSelection {
    Toy,
    External(String),
}

impl FromStr for BackendSelection {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "toy" {
            return Ok(BackendSelection::Toy);
        }
        match s.strip_prefix("external:") {
            Some(name) if !name.is_empty() => Ok(BackendSelection::External(name.to_string())),
            _ => Err(AdapterError::BadSelection(s.to_string())),
        }
    }
}

impl fmt::Display for BackendSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSelection::Toy => f.write_str("toy"),
            BackendSelection::External(name) => write!(f, "external:{name}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("unrecognized backend selection {0:?} (expected \"toy\" or \"external:<name>\")")]
    BadSelection(String),
    #[error("backend {name:?} is configured but not registered; available: [{available}]")]
    NotRegistered { name: String, available: String },
    #[error("backend {backend:?} is misconfigured: missing {missing}")]
    Misconfigured { backend: String, missing: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    /// `None` means nothing configured; the toy backend is used.
    pub selection: Option<BackendSelection>,
    #[serde(default)]
    pub toy: ToyModelSpec,
    /// Weights or model directory handed to external factories.
    #[serde(default)]
    pub external_path: Option<PathBuf>,
}

impl BackendConfig {
    /// Applies the `AMK_BACKEND` override on top of a config-file value.
    pub fn resolve(file_value: Option<&str>, env_value: Option<&str>) -> Result<Option<BackendSelection>, AdapterError> {
        match env_value.filter(|s| !s.trim().is_empty()).or(file_value) {
            Some(s) => Ok(Some(s.parse()?)),
            None => Ok(None),
        }
    }

    pub fn from_env(file_value: Option<&str>) -> Result<Self, AdapterError> {
        let env = std::env::var(BACKEND_ENV).ok();
        Ok(BackendConfig {
            selection: Self::resolve(file_value, env.as_deref())?,
            ..Default::default()
        })
    }
}

pub type BackendFactory = Arc<dyn Fn(&BackendConfig) -> Result<Arc<dyn Backbone>, AdapterError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct BackendRegistry {
    factories: BTreeMap<String, BackendFactory>,
}

impl fmt::Debug for BackendRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendRegistry")
            .field("names", &self.factories.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, factory: BackendFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    /// Registers the toy backend under an external name, mostly for tests.
    pub fn register_toy_as(&mut self, name: &str) {
        self.register(
            name,
            Arc::new(|cfg: &BackendConfig| Ok(Arc::new(ToyBackend::new(cfg.toy.clone())) as Arc<dyn Backbone>)),
        );
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }

    fn instantiate(&self, name: &str, cfg: &BackendConfig) -> Result<Arc<dyn Backbone>, AdapterError> {
        let factory = self.factories.get(name).ok_or_else(|| AdapterError::NotRegistered {
            name: name.to_string(),
            available: self.names().join(", "),
        })?;
        let backbone = factory(cfg)?;
        backbone.descriptor().validate()?;
        Ok(backbone)
    }
}

/// Reports the configured real backbone, if any. Absence is not an error;
/// a backbone that is configured but cannot be built is.
pub fn probe(cfg: &BackendConfig, registry: &BackendRegistry) -> Result<Option<BackendDescriptor>, AdapterError> {
    match &cfg.selection {
        None | Some(BackendSelection::Toy) => Ok(None),
        Some(BackendSelection::External(name)) => Ok(Some(registry.instantiate(name, cfg)?.descriptor().clone())),
    }
}

/// Builds the selected backbone, falling back to the toy backend when nothing is configured.
pub fn load(cfg: &BackendConfig, registry: &BackendRegistry) -> Result<GatedBackend, AdapterError> {
    let inner: Arc<dyn Backbone> = match &cfg.selection {
        None | Some(BackendSelection::Toy) => Arc::new(ToyBackend::new(cfg.toy.clone())),
        Some(BackendSelection::External(name)) => registry.instantiate(name, cfg)?,
    };
    Ok(GatedBackend::new(inner))
}

/// A backbone behind a job gate that admits one generation at a time.
#[derive(Clone)]
pub struct GatedBackend {
    inner: Arc<dyn Backbone>,
    gate: Arc<Mutex<()>>,
}

impl fmt::Debug for GatedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GatedBackend")
            .field("backend", &self.inner.descriptor().name)
            .finish()
    }
}

pub struct GenerationPermit<'a> {
    backbone: &'a dyn Backbone,
    _guard: MutexGuard<'a, ()>,
}

impl<'a> GenerationPermit<'a> {
    pub fn backbone(&self) -> &'a dyn Backbone {
        self.backbone
    }
}

impl GatedBackend {
    pub fn new(inner: Arc<dyn Backbone>) -> Self {
        GatedBackend {
            inner,
            gate: Arc::new(Mutex::new(())),
        }
    }

    pub fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    /// Ungated access for read-only queries (descriptor, codec).
    pub fn backbone(&self) -> &dyn Backbone {
        self.inner.as_ref()
    }

    /// Blocks until no other generation holds the gate.
    pub fn acquire(&self) -> GenerationPermit<'_> {
        let guard = self.gate.lock().unwrap_or_else(|p| p.into_inner());
        GenerationPermit {
            backbone: self.inner.as_ref(),
            _guard: guard,
        }
    }
}
