//! Attention-feature formulas used by attention mixing and simulated aging
//! regularization.
//!
//! Everything here is a pure function over immutable [`FeatureBlock`]s.
//! Storage is `f32`; inner products, softmax and cluster sums accumulate in
//! `f64` and round once on the way out.
//!
//! Token order inside a block is `[text ‖ image]`: the first
//! `layout.text_tokens` rows of every head are text tokens.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::{self, ExecMode};

/// Squared-norm threshold below which an editing token is treated as degenerate.
pub const DEGENERATE_NORM_SQ: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("invalid token layout {0}: every count must be at least 1")]
    InvalidLayout(TokenLayout),
    #[error("layout mismatch: {left} vs {right}")]
    LayoutMismatch { left: TokenLayout, right: TokenLayout },
    #[error("array shape {actual:?} does not match layout {layout} (expected {expected:?})")]
    ShapeMismatch {
        layout: TokenLayout,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("age bounds must satisfy low < high (got low={low}, high={high})")]
    InvalidAgeBounds { low: f32, high: f32 },
    #[error("cluster {0} is empty")]
    EmptyCluster(&'static str),
    #[error("feature site grids differ: {0}")]
    SiteMismatch(String),
}

pub type Result<T, E = AttentionError> = std::result::Result<T, E>;

/// Token and channel geometry of one attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenLayout {
    pub text_tokens: usize,
    pub image_tokens: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl TokenLayout {
    pub fn new(text_tokens: usize, image_tokens: usize, heads: usize, head_dim: usize) -> Result<Self> {
        let layout = TokenLayout {
            text_tokens,
            image_tokens,
            heads,
            head_dim,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_tokens == 0 || self.image_tokens == 0 || self.heads == 0 || self.head_dim == 0 {
            return Err(AttentionError::InvalidLayout(*self));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.text_tokens + self.image_tokens
    }

    /// Channel width of the token stream, `heads * head_dim`.
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn block_shape(&self) -> [usize; 3] {
        [self.heads, self.total_tokens(), self.head_dim]
    }

    pub fn is_text_token(&self, token: usize) -> bool {
        token < self.text_tokens
    }
}

impl fmt::Display for TokenLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "(text={}, image={}, heads={}, head_dim={})",
            self.text_tokens, self.image_tokens, self.heads, self.head_dim
        )
    }
}

/// One of Q, K or V at an attention site, shaped `[heads, total_tokens, head_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    layout: TokenLayout,
    values: Array3<f32>,
}

impl FeatureBlock {
    pub fn new(layout: TokenLayout, values: Array3<f32>) -> Result<Self> {
        layout.validate()?;
        let expected = layout.block_shape();
        if values.shape() != expected {
            return Err(AttentionError::ShapeMismatch {
                layout,
                expected: expected.to_vec(),
                actual: values.shape().to_vec(),
            });
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("feature block"));
        }
        Ok(FeatureBlock { layout, values })
    }

    pub fn zeros(layout: TokenLayout) -> Result<Self> {
        layout.validate()?;
        Ok(FeatureBlock {
            layout,
            values: Array3::zeros(layout.block_shape()),
        })
    }

    /// Builds a block by evaluating `f(head, token, channel)`.
    pub fn from_fn(layout: TokenLayout, f: impl FnMut((usize, usize, usize)) -> f32) -> Result<Self> {
        layout.validate()?;
        Self::new(layout, Array3::from_shape_fn(layout.block_shape(), f))
    }

    /// Splits a `[total_tokens, heads * head_dim]` token matrix into heads.
    /// Channel `h * head_dim + j` of a token lands in head `h`, slot `j`.
    pub fn from_tokens(layout: TokenLayout, tokens: ArrayView2<'_, f32>) -> Result<Self> {
        layout.validate()?;
        let expected = [layout.total_tokens(), layout.model_dim()];
        if tokens.shape() != expected {
            return Err(AttentionError::ShapeMismatch {
                layout,
                expected: expected.to_vec(),
                actual: tokens.shape().to_vec(),
            });
        }
        let d = layout.head_dim;
        Self::from_fn(layout, |(h, i, j)| tokens[[i, h * d + j]])
    }

    /// Inverse of [`FeatureBlock::from_tokens`].
    pub fn to_tokens(&self) -> Array2<f32> {
        let l = self.layout;
        let d = l.head_dim;
        Array2::from_shape_fn((l.total_tokens(), l.model_dim()), |(i, c)| self.values[[c / d, i, c % d]])
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn into_values(self) -> Array3<f32> {
        self.values
    }

    pub fn token(&self, head: usize, token: usize) -> ndarray::ArrayView1<'_, f32> {
        self.values.slice(ndarray::s![head, token, ..])
    }

    pub fn max_abs_diff(&self, other: &FeatureBlock) -> f32 {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn check_same_layout(&self, other: &FeatureBlock) -> Result<()> {
        if self.layout != other.layout {
            return Err(AttentionError::LayoutMismatch {
                left: self.layout,
                right: other.layout,
            });
        }
        Ok(())
    }

    /// `self + w * delta`, computed elementwise.
    pub fn add_scaled(&self, delta: &FeatureBlock, w: f32) -> Result<FeatureBlock> {
        self.check_same_layout(delta)?;
        let mut values = self.values.clone();
        ndarray::Zip::from(&mut values)
            .and(&delta.values)
            .for_each(|x, &d| *x += w * d);
        if values.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("scaled sum"));
        }
        Ok(FeatureBlock {
            layout: self.layout,
            values,
        })
    }

    fn sub(&self, other: &FeatureBlock) -> Result<FeatureBlock> {
        self.check_same_layout(other)?;
        Ok(FeatureBlock {
            layout: self.layout,
            values: &self.values - &other.values,
        })
    }
}

/// One projection coefficient per head and token, shaped `[heads, total_tokens]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaField {
    layout: TokenLayout,
    alpha: Array2<f32>,
}

impl AlphaField {
    pub fn new(layout: TokenLayout, alpha: Array2<f32>) -> Result<Self> {
        layout.validate()?;
        let expected = [layout.heads, layout.total_tokens()];
        if alpha.shape() != expected {
            return Err(AttentionError::ShapeMismatch {
                layout,
                expected: expected.to_vec(),
                actual: alpha.shape().to_vec(),
            });
        }
        if alpha.iter().any(|x| !x.is_finite()) {
            return Err(AttentionError::NonFinite("alpha"));
        }
        Ok(AlphaField { layout, alpha })
    }

    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.alpha
    }

    pub fn get(&self, head: usize, token: usize) -> f32 {
        self.alpha[[head, token]]
    }

    /// Clamps image-token coefficients into `[min, max]`; text tokens are left alone.
    pub fn clamp_image(mut self, clamp: AlphaClamp) -> AlphaField {
        let text = self.layout.text_tokens;
        for mut row in self.alpha.outer_iter_mut() {
            for a in row.iter_mut().skip(text) {
                *a = a.clamp(clamp.min, clamp.max);
            }
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaClamp {
    pub min: f32,
    pub max: f32,
}

fn dot(a: ndarray::ArrayView1<'_, f32>, b: ndarray::ArrayView1<'_, f32>) -> f64 {
    a.iter().zip(b.iter()).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Coefficient of one token: `<inv, edit> / <edit, edit>`, or 1 for a degenerate edit vector.
fn token_alpha(inv: ndarray::ArrayView1<'_, f32>, edit: ndarray::ArrayView1<'_, f32>) -> f32 {
    let norm_sq = dot(edit, edit);
    if norm_sq <= DEGENERATE_NORM_SQ {
        return 1.0;
    }
    (dot(inv, edit) / norm_sq) as f32
}

fn alpha_impl(mode: ExecMode, v_inv: &FeatureBlock, v_edit: &FeatureBlock, mask_text: bool) -> Result<AlphaField> {
    v_inv.check_same_layout(v_edit)?;
    let layout = v_inv.layout;
    let tokens = layout.total_tokens();
    let rows = par::map_range(mode, layout.heads, |h| {
        (0..tokens)
            .map(|i| {
                if mask_text && layout.is_text_token(i) {
                    1.0
                } else {
                    token_alpha(v_inv.token(h, i), v_edit.token(h, i))
                }
            })
            .collect::<Vec<f32>>()
    });
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let alpha = Array2::from_shape_vec((layout.heads, tokens), flat).expect("alpha shape");
    AlphaField::new(layout, alpha)
}

/// Per-head, per-token projection coefficient of `v_inv` onto `v_edit`.
pub fn compute_alpha(v_inv: &FeatureBlock, v_edit: &FeatureBlock) -> Result<AlphaField> {
    compute_alpha_with(ExecMode::default(), v_inv, v_edit)
}

pub fn compute_alpha_with(mode: ExecMode, v_inv: &FeatureBlock, v_edit: &FeatureBlock) -> Result<AlphaField> {
    alpha_impl(mode, v_inv, v_edit, false)
}

/// Forces the coefficient of every text token to exactly 1.
pub fn mask_text_alpha(alpha: &AlphaField) -> AlphaField {
    let mut out = alpha.clone();
    let text = out.layout.text_tokens;
    out.alpha.slice_mut(ndarray::s![.., ..text]).fill(1.0);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ProjectionOptions {
    pub mask_text: bool,
    pub clamp: Option<AlphaClamp>,
    pub exec: ExecMode,
}

/// `V_proj = alpha * v_edit` per token.
pub fn project_value(v_inv: &FeatureBlock, v_edit: &FeatureBlock, mask_text: bool) -> Result<FeatureBlock> {
    project_value_with(
        v_inv,
        v_edit,
        &ProjectionOptions {
            mask_text,
            ..Default::default()
        },
    )
}

pub fn project_value_with(v_inv: &FeatureBlock, v_edit: &FeatureBlock, opts: &ProjectionOptions) -> Result<FeatureBlock> {
    // Text positions are skipped entirely under masking, not computed and overwritten.
    let mut alpha = alpha_impl(opts.exec, v_inv, v_edit, opts.mask_text)?;
    if let Some(clamp) = opts.clamp {
        alpha = alpha.clamp_image(clamp);
    }
    scale_tokens(v_edit, &alpha)
}

/// Multiplies every token vector of `block` by its coefficient in `alpha`.
pub fn scale_tokens(block: &FeatureBlock, alpha: &AlphaField) -> Result<FeatureBlock> {
    if block.layout != alpha.layout {
        return Err(AttentionError::LayoutMismatch {
            left: block.layout,
            right: alpha.layout,
        });
    }
    let mut values = block.values.clone();
    for ((h, i, _), x) in values.indexed_iter_mut() {
        *x *= alpha.alpha[[h, i]];
    }
    FeatureBlock::new(block.layout, values)
}

fn softmax_rows(scores: &mut [f64], cols: usize) {
    for row in scores.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in row.iter_mut() {
            *s /= sum;
        }
    }
}

/// Row-stochastic alignment for one head: `softmax(k_edit k_inv^T / sqrt(d))`, row-major `T x T`.
fn head_alignment(k_edit: ArrayView2<'_, f32>, k_inv: ArrayView2<'_, f32>) -> Vec<f64> {
    let t = k_edit.nrows();
    let scale = 1.0 / (k_edit.ncols() as f64).sqrt();
    let mut scores = vec![0.0f64; t * t];
    for i in 0..t {
        for j in 0..t {
            scores[i * t + j] = dot(k_edit.row(i), k_inv.row(j)) * scale;
        }
    }
    softmax_rows(&mut scores, t);
    scores
}

/// Alignment matrices for every head, shaped `[heads, total_tokens, total_tokens]`.
/// Rows index editing tokens and are normalized over inversion tokens.
pub fn alignment_matrix(k_edit: &FeatureBlock, k_inv: &FeatureBlock) -> Result<Array3<f32>> {
    k_edit.check_same_layout(k_inv)?;
    let l = k_edit.layout;
    let t = l.total_tokens();
    let heads = par::map_range(ExecMode::default(), l.heads, |h| {
        head_alignment(
            k_edit.values.index_axis(Axis(0), h),
            k_inv.values.index_axis(Axis(0), h),
        )
    });
    let flat: Vec<f32> = heads.into_iter().flatten().map(|x| x as f32).collect();
    Ok(Array3::from_shape_vec((l.heads, t, t), flat).expect("alignment shape"))
}

/// `K_mod = K_edit + g * (A K_inv)` with `A` the per-head alignment matrix.
pub fn modulate_key(k_edit: &FeatureBlock, k_inv: &FeatureBlock, g: f32) -> Result<FeatureBlock> {
    modulate_key_with(ExecMode::default(), k_edit, k_inv, g)
}

pub fn modulate_key_with(mode: ExecMode, k_edit: &FeatureBlock, k_inv: &FeatureBlock, g: f32) -> Result<FeatureBlock> {
    k_edit.check_same_layout(k_inv)?;
    if !g.is_finite() {
        return Err(AttentionError::NonFinite("key modulation gain"));
    }
    let l = k_edit.layout;
    let (t, d) = (l.total_tokens(), l.head_dim);
    let heads = par::map_range(mode, l.heads, |h| {
        let ke = k_edit.values.index_axis(Axis(0), h);
        let ki = k_inv.values.index_axis(Axis(0), h);
        let a = head_alignment(ke, ki);
        let mut out = Vec::with_capacity(t * d);
        for i in 0..t {
            for c in 0..d {
                let mixed: f64 = (0..t).map(|j| a[i * t + j] * ki[[j, c]] as f64).sum();
                out.push(ke[[i, c]] + g * mixed as f32);
            }
        }
        out
    });
    let flat: Vec<f32> = heads.into_iter().flatten().collect();
    FeatureBlock::new(l, Array3::from_shape_vec(l.block_shape(), flat).expect("key shape"))
}

/// Identifies one attention evaluation: a schedule interval and a backend layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteKey {
    pub step: usize,
    pub layer: usize,
}

impl SiteKey {
    pub fn new(step: usize, layer: usize) -> Self {
        SiteKey { step, layer }
    }
}

impl fmt::Display for SiteKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(step {}, layer {})", self.step, self.layer)
    }
}

/// Key and value blocks recorded at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KvPair {
    pub k: FeatureBlock,
    pub v: FeatureBlock,
}

/// All recorded key/value blocks of one image, keyed by site.
pub type SiteFeatures = BTreeMap<SiteKey, KvPair>;

/// Reference age interval used to weight an aging direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeBounds {
    pub low: f32,
    pub high: f32,
}

impl AgeBounds {
    pub fn new(low: f32, high: f32) -> Result<Self> {
        if !(low < high) || !low.is_finite() || !high.is_finite() {
            return Err(AttentionError::InvalidAgeBounds { low, high });
        }
        Ok(AgeBounds { low, high })
    }
}

/// Key/value shift at one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionEntry {
    pub delta_k: FeatureBlock,
    pub delta_v: FeatureBlock,
}

/// Old-minus-young difference of mean attention features, per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgingDirection {
    entries: BTreeMap<SiteKey, DirectionEntry>,
    bounds: AgeBounds,
}

impl AgingDirection {
    pub fn new(entries: BTreeMap<SiteKey, DirectionEntry>, bounds: AgeBounds) -> Result<Self> {
        AgeBounds::new(bounds.low, bounds.high)?;
        for (site, e) in &entries {
            if e.delta_k.layout != e.delta_v.layout {
                return Err(AttentionError::SiteMismatch(format!(
                    "delta_k and delta_v layouts differ at {site}"
                )));
            }
        }
        Ok(AgingDirection { entries, bounds })
    }

    pub fn bounds(&self) -> AgeBounds {
        self.bounds
    }

    pub fn age_low(&self) -> f32 {
        self.bounds.low
    }

    pub fn age_high(&self) -> f32 {
        self.bounds.high
    }

    pub fn get(&self, site: SiteKey) -> Option<&DirectionEntry> {
        self.entries.get(&site)
    }

    pub fn entries(&self) -> &BTreeMap<SiteKey, DirectionEntry> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest absolute entry over all deltas.
    pub fn max_abs(&self) -> f32 {
        self.entries
            .values()
            .flat_map(|e| e.delta_k.values.iter().chain(e.delta_v.values.iter()))
            .fold(0.0f32, |m, x| m.max(x.abs()))
    }
}

fn check_same_grid(a: &SiteFeatures, b: &SiteFeatures) -> Result<()> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(AttentionError::SiteMismatch(format!(
            "{} sites vs {} sites with differing keys",
            a.len(),
            b.len()
        )));
    }
    for (site, kv) in a {
        let other = &b[site];
        if kv.k.layout != other.k.layout || kv.v.layout != other.v.layout || kv.k.layout != kv.v.layout {
            return Err(AttentionError::SiteMismatch(format!("layouts differ at {site}")));
        }
    }
    Ok(())
}

fn mean_blocks(blocks: &[&FeatureBlock]) -> FeatureBlock {
    let layout = blocks[0].layout;
    let n = blocks.len() as f64;
    let mut acc = Array3::<f64>::zeros(layout.block_shape());
    for b in blocks {
        ndarray::Zip::from(&mut acc).and(&b.values).for_each(|a, &x| *a += x as f64);
    }
    FeatureBlock {
        layout,
        values: acc.mapv(|x| (x / n) as f32),
    }
}

/// Entrywise mean of member features over a cluster.
pub fn mean_site_features(members: &[SiteFeatures]) -> Result<SiteFeatures> {
    mean_site_features_with(ExecMode::default(), members)
}

pub fn mean_site_features_with(mode: ExecMode, members: &[SiteFeatures]) -> Result<SiteFeatures> {
    let first = members.first().ok_or(AttentionError::EmptyCluster("members"))?;
    for m in &members[1..] {
        check_same_grid(first, m)?;
    }
    let sites: Vec<SiteKey> = first.keys().copied().collect();
    let means = par::map_slice(mode, &sites, |site| {
        let ks: Vec<&FeatureBlock> = members.iter().map(|m| &m[site].k).collect();
        let vs: Vec<&FeatureBlock> = members.iter().map(|m| &m[site].v).collect();
        KvPair {
            k: mean_blocks(&ks),
            v: mean_blocks(&vs),
        }
    });
    Ok(sites.into_iter().zip(means).collect())
}

/// Mean old-cluster features minus mean young-cluster features, at every site.
pub fn compute_aging_direction(old: &[SiteFeatures], young: &[SiteFeatures], bounds: AgeBounds) -> Result<AgingDirection> {
    if old.is_empty() {
        return Err(AttentionError::EmptyCluster("old"));
    }
    if young.is_empty() {
        return Err(AttentionError::EmptyCluster("young"));
    }
    let old_mean = mean_site_features(old)?;
    let young_mean = mean_site_features(young)?;
    direction_from_means(&old_mean, &young_mean, bounds)
}

/// Direction from already-averaged cluster features.
pub fn direction_from_means(old_mean: &SiteFeatures, young_mean: &SiteFeatures, bounds: AgeBounds) -> Result<AgingDirection> {
    check_same_grid(old_mean, young_mean)?;
    let mut entries = BTreeMap::new();
    for (site, old_kv) in old_mean {
        let young_kv = &young_mean[site];
        entries.insert(
            *site,
            DirectionEntry {
                delta_k: old_kv.k.sub(&young_kv.k)?,
                delta_v: old_kv.v.sub(&young_kv.v)?,
            },
        );
    }
    AgingDirection::new(entries, bounds)
}

/// Relative position of `target` inside `[low, high]`; not clamped.
pub fn age_weight(target: f32, low: f32, high: f32) -> Result<f32> {
    let bounds = AgeBounds::new(low, high)?;
    Ok((target - bounds.low) / (bounds.high - bounds.low))
}

/// [`age_weight`] clamped into `[0, 1]`.
pub fn age_weight_clamped(target: f32, low: f32, high: f32) -> Result<f32> {
    Ok(age_weight(target, low, high)?.clamp(0.0, 1.0))
}

/// Shifts inversion features along a direction: `(k + w dk, v + w dv)`.
pub fn apply_aging_direction(
    k_inv: &FeatureBlock,
    v_inv: &FeatureBlock,
    entry: &DirectionEntry,
    w: f32,
) -> Result<(FeatureBlock, FeatureBlock)> {
    Ok((k_inv.add_scaled(&entry.delta_k, w)?, v_inv.add_scaled(&entry.delta_v, w)?))
}
