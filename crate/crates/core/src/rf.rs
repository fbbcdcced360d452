//! Rectified-flow ODE integration: inversion (image to noise, t: 0 -> 1) and
//! denoising (noise to image, t: 1 -> 0) with a second-order Heun step.
//!
//! Attention hooks are attached to the predictor evaluation of each step, so
//! one integration of `N` steps over a backend with `L` attention layers
//! produces exactly `N * L` hook invocations. Sites are keyed by the schedule
//! interval index, which inversion visits as `0..N` and denoising as
//! `N-1..=0`; an editing step therefore reads the features that inversion
//! recorded on the same time interval.

use std::fmt;

use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::{FeatureBlock, SiteKey};
use crate::backend::BackendDescriptor;

pub type Latent = ArrayD<f32>;

/// Tolerance on time bookkeeping.
pub const TIME_EPS: f64 = 1e-9;

/// Default number of integration steps.
pub const DEFAULT_STEPS: usize = 30;

#[derive(Debug, Error)]
pub enum RfError {
    #[error("latent shapes differ: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid step: {0}")]
    InvalidStep(String),
    #[error("start time {start} does not match schedule start {expected}")]
    StartMismatch { start: f64, expected: f64 },
    #[error("non-finite velocity at t={t}{}", layer_suffix(.layer))]
    NonFiniteVelocity { t: f64, layer: Option<usize> },
    #[error("attention hook failed at {site}: {message}")]
    Hook { site: SiteKey, message: String },
    #[error("backend failure at t={t}: {message}")]
    Backend { t: f64, message: String },
}

fn layer_suffix(layer: &Option<usize>) -> String {
    match layer {
        Some(l) => format!(" (last attention layer {l})"),
        None => String::new(),
    }
}

pub type Result<T, E = RfError> = std::result::Result<T, E>;

/// `(1 - t) x0 + t x1`.
pub fn interpolate_state(x0: &Latent, x1: &Latent, t: f32) -> Result<Latent> {
    if x0.shape() != x1.shape() {
        return Err(RfError::ShapeMismatch {
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        });
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(RfError::InvalidStep(format!("interpolation time {t} outside [0, 1]")));
    }
    let mut out = x0.clone();
    Zip::from(&mut out).and(x1).for_each(|a, &b| *a = (1.0 - t) * *a + t * b);
    Ok(out)
}

/// Ascending time grid `0 = t_0 < t_1 < ... < t_N = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    times: Vec<f64>,
}

impl StepSchedule {
    pub fn uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(RfError::InvalidSchedule("at least one step is required".into()));
        }
        let times = (0..=steps).map(|i| i as f64 / steps as f64).collect();
        Self::from_times(times)
    }

    /// Time-shifted grid `s t / (1 + (s - 1) t)`, which spends more steps near t = 1.
    pub fn shifted(steps: usize, shift: f64) -> Result<Self> {
        if !(shift > 0.0) {
            return Err(RfError::InvalidSchedule(format!("shift must be positive, got {shift}")));
        }
        let base = Self::uniform(steps)?;
        Self::from_times(base.times.iter().map(|&t| shift * t / (1.0 + (shift - 1.0) * t)).collect())
    }

    pub fn from_times(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(RfError::InvalidSchedule("need at least two time points".into()));
        }
        if times[0] != 0.0 || times[times.len() - 1] != 1.0 {
            return Err(RfError::InvalidSchedule("endpoints must be exactly 0 and 1".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(RfError::InvalidSchedule("times must be strictly increasing".into()));
        }
        Ok(StepSchedule { times })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Stable identifier derived from the exact time values.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.times {
            h.update(t.to_le_bytes());
        }
        let digest = h.finalize();
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("n{}-{hex}", self.steps())
    }

    /// Start and end time of interval `step` when traversed in `direction`.
    pub fn interval(&self, step: usize, direction: Direction) -> (f64, f64) {
        match direction {
            Direction::Inversion => (self.times[step], self.times[step + 1]),
            Direction::Denoising => (self.times[step + 1], self.times[step]),
        }
    }

    /// Interval indices in the order `direction` visits them.
    pub fn step_order(&self, direction: Direction) -> Vec<usize> {
        match direction {
            Direction::Inversion => (0..self.steps()).collect(),
            Direction::Denoising => (0..self.steps()).rev().collect(),
        }
    }

    pub fn start_time(&self, direction: Direction) -> f64 {
        match direction {
            Direction::Inversion => 0.0,
            Direction::Denoising => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Inversion,
    Denoising,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryState {
    pub latent: Latent,
    pub t: f64,
}

impl TrajectoryState {
    pub fn new(latent: Latent, t: f64) -> Result<Self> {
        if !(-TIME_EPS..=1.0 + TIME_EPS).contains(&t) {
            return Err(RfError::InvalidStep(format!("time {t} outside [0, 1]")));
        }
        if latent.iter().any(|x| !x.is_finite()) {
            return Err(RfError::InvalidStep("latent has non-finite entries".into()));
        }
        Ok(TrajectoryState { latent, t })
    }
}

/// Text conditioning plus an optional numeric payload interpreted by the backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub prompt_text: String,
    #[serde(default)]
    pub extra: Vec<f32>,
}

impl Conditioning {
    pub fn prompt(text: impl Into<String>) -> Self {
        Conditioning {
            prompt_text: text.into(),
            extra: Vec::new(),
        }
    }
}

/// Query, key and value at one attention evaluation. Hooks may rewrite any of them.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: FeatureBlock,
    pub k: FeatureBlock,
    pub v: FeatureBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HookError(pub String);

impl fmt::Display for HookError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for HookError {}

/// Observer/rewriter of attention features during a velocity evaluation.
pub trait AttentionHook: Send {
    fn on_attention(&mut self, site: SiteKey, qkv: &mut Qkv) -> std::result::Result<(), HookError>;
}

impl<H: AttentionHook + ?Sized> AttentionHook for &mut H {
    fn on_attention(&mut self, site: SiteKey, qkv: &mut Qkv) -> std::result::Result<(), HookError> {
        (**self).on_attention(site, qkv)
    }
}

/// Passed to a backend for one velocity evaluation. Backends call
/// [`HookSink::attention`] once per attention layer, in layer order.
pub struct HookSink<'a> {
    step: usize,
    hook: Option<&'a mut dyn AttentionHook>,
    last_layer: Option<usize>,
    error: Option<RfError>,
}

impl<'a> HookSink<'a> {
    pub fn new(step: usize, hook: Option<&'a mut dyn AttentionHook>) -> Self {
        HookSink {
            step,
            hook,
            last_layer: None,
            error: None,
        }
    }

    /// A sink that forwards nothing.
    pub fn inert() -> HookSink<'static> {
        HookSink {
            step: 0,
            hook: None,
            last_layer: None,
            error: None,
        }
    }

    pub fn attention(&mut self, layer: usize, qkv: &mut Qkv) -> std::result::Result<(), HookError> {
        self.last_layer = Some(layer);
        if let Some(hook) = self.hook.as_mut() {
            let site = SiteKey::new(self.step, layer);
            if let Err(e) = hook.on_attention(site, qkv) {
                self.error = Some(RfError::Hook {
                    site,
                    message: e.0.clone(),
                });
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn last_layer(&self) -> Option<usize> {
        self.last_layer
    }

    fn take_error(&mut self) -> Option<RfError> {
        self.error.take()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError(pub String);

impl fmt::Display for BackendError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BackendError {}

impl From<HookError> for BackendError {
    fn from(e: HookError) -> Self {
        BackendError(format!("hook: {e}"))
    }
}

/// A velocity field `v(z, t | conditioning)`.
pub trait VelocityBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn velocity(
        &self,
        latent: &Latent,
        t: f64,
        conditioning: &Conditioning,
        sink: &mut HookSink<'_>,
    ) -> std::result::Result<Latent, BackendError>;
}

fn evaluate(
    backend: &dyn VelocityBackend,
    latent: &Latent,
    t: f64,
    conditioning: &Conditioning,
    sink: &mut HookSink<'_>,
) -> Result<Latent> {
    let out = backend.velocity(latent, t, conditioning, sink);
    if let Some(e) = sink.take_error() {
        return Err(e);
    }
    let v = out.map_err(|e| RfError::Backend { t, message: e.0 })?;
    if v.shape() != latent.shape() {
        return Err(RfError::ShapeMismatch {
            left: latent.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(RfError::NonFiniteVelocity {
            t,
            layer: sink.last_layer(),
        });
    }
    Ok(v)
}

/// One Heun step of size `dt` (negative for denoising). Hooks see the
/// predictor evaluation at `(z, t)` and are keyed with interval `step`.
pub fn solver_step(
    state: &TrajectoryState,
    dt: f64,
    backend: &dyn VelocityBackend,
    conditioning: &Conditioning,
    hook: Option<&mut dyn AttentionHook>,
    step: usize,
) -> Result<TrajectoryState> {
    if !(dt.abs() > 0.0) || !dt.is_finite() {
        return Err(RfError::InvalidStep(format!("step size must be non-zero and finite, got {dt}")));
    }
    let t_next = state.t + dt;
    if !(-TIME_EPS..=1.0 + TIME_EPS).contains(&t_next) {
        return Err(RfError::InvalidStep(format!("t + dt = {t_next} leaves [0, 1]")));
    }
    let t_next = t_next.clamp(0.0, 1.0);
    let z = &state.latent;

    let v0 = evaluate(backend, z, state.t, conditioning, &mut HookSink::new(step, hook))?;
    let dt32 = dt as f32;
    let mut z_pred = z.clone();
    Zip::from(&mut z_pred).and(&v0).for_each(|p, &v| *p += dt32 * v);

    let v1 = evaluate(backend, &z_pred, t_next, conditioning, &mut HookSink::new(step, None))?;
    let half = 0.5 * dt32;
    let mut out = z.clone();
    Zip::from(&mut out)
        .and(&v0)
        .and(&v1)
        .for_each(|o, &a, &b| *o += half * (a + b));
    Ok(TrajectoryState { latent: out, t: t_next })
}

/// Runs [`solver_step`] over every interval of `schedule` in `direction`.
pub fn integrate(
    start: &TrajectoryState,
    schedule: &StepSchedule,
    direction: Direction,
    backend: &dyn VelocityBackend,
    conditioning: &Conditioning,
    mut hook: Option<&mut dyn AttentionHook>,
) -> Result<TrajectoryState> {
    let expected = schedule.start_time(direction);
    if (start.t - expected).abs() > TIME_EPS {
        return Err(RfError::StartMismatch {
            start: start.t,
            expected,
        });
    }
    let shape = backend.descriptor().latent_shape.clone();
    if !shape.is_empty() && start.latent.shape() != shape.as_slice() {
        return Err(RfError::ShapeMismatch {
            left: start.latent.shape().to_vec(),
            right: shape,
        });
    }
    let mut state = TrajectoryState {
        latent: start.latent.clone(),
        t: expected,
    };
    for step in schedule.step_order(direction) {
        let (from, to) = schedule.interval(step, direction);
        state.t = from;
        let h = hook.as_mut().map(|h| &mut **h as &mut dyn AttentionHook);
        state = solver_step(&state, to - from, backend, conditioning, h, step)?;
        state.t = to;
    }
    Ok(state)
}

/// Analytic velocity field with no attention sites, for solver checks.
pub struct FnField<F> {
    descriptor: BackendDescriptor,
    field: F,
}

impl<F> FnField<F>
where
    F: Fn(&Latent, f64) -> Latent + Send + Sync,
{
    pub fn new(latent_shape: &[usize], field: F) -> Self {
        FnField {
            descriptor: BackendDescriptor::analytic("analytic-field", latent_shape.to_vec()),
            field,
        }
    }
}

impl<F> VelocityBackend for FnField<F>
where
    F: Fn(&Latent, f64) -> Latent + Send + Sync,
{
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn velocity(&self, latent: &Latent, t: f64, _: &Conditioning, _: &mut HookSink<'_>) -> std::result::Result<Latent, BackendError> {
        Ok((self.field)(latent, t))
    }
}

/// Affine field `v(z) = a z + b`.
pub fn affine_field(shape: &[usize], a: f32, b: f32) -> FnField<impl Fn(&Latent, f64) -> Latent + Send + Sync> {
    FnField::new(shape, move |z: &Latent, _t| z.mapv(|x| a * x + b))
}

pub fn scalar_latent(x: f32) -> Latent {
    ArrayD::from_elem(IxDyn(&[1]), x)
}
