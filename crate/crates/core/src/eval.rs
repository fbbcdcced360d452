//! Edit metrics behind pluggable model adapters, and the report table.
//!
//! * CLIP-T: cosine between image and text embeddings from a [`ClipScorer`].
//! * Age MAE: mean `|age_pred - age_target|`, predictions from an [`AgeEstimator`].
//! * ID sim: mean cosine between face embeddings of the edit and references.
//!
//! No model is bundled. Reference adapters would wrap a CLIP model, FP-Age
//! and ArcFace; without an adapter a metric is [`Metric::Unavailable`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use image::DynamicImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{self, io_err, StoreError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("age MAE over an empty record set")]
    EmptyRecords,
    #[error("record {0} has no age prediction")]
    MissingPrediction(String),
    #[error("id similarity needs at least one reference image")]
    NoReferences,
    #[error("record {id}: id_sim {value} outside [-1, 1]")]
    IdSimRange { id: String, value: f64 },
    #[error("embedding lengths differ: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("results line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Metric {
    Value(f64),
    Unavailable(String),
}

impl Metric {
    pub fn value(&self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(*v),
            Metric::Unavailable(_) => None,
        }
    }
}

pub trait ClipScorer: Send + Sync {
    fn image_embedding(&self, image: &DynamicImage) -> Result<Vec<f32>, String>;
    fn text_embedding(&self, text: &str) -> Result<Vec<f32>, String>;
}

pub trait AgeEstimator: Send + Sync {
    fn estimate_age(&self, image: &DynamicImage) -> Result<f64, String>;
}

pub trait FaceEmbedder: Send + Sync {
    fn embed(&self, image: &DynamicImage) -> Result<Vec<f32>, String>;
}

/// Cosine similarity accumulated in f64. Zero vectors score 0.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch(a.len(), b.len()));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return Ok(0.0);
    }
    Ok((ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

pub fn clip_t(image: &DynamicImage, prompt: &str, scorer: Option<&dyn ClipScorer>) -> Result<Metric> {
    let Some(s) = scorer else {
        return Ok(Metric::Unavailable("no CLIP scorer configured".into()));
    };
    let img = match s.image_embedding(image) {
        Ok(e) => e,
        Err(e) => return Ok(Metric::Unavailable(e)),
    };
    let txt = match s.text_embedding(prompt) {
        Ok(e) => e,
        Err(e) => return Ok(Metric::Unavailable(e)),
    };
    Ok(Metric::Value(cosine(&img, &txt)?))
}

pub fn id_sim(image: &DynamicImage, references: &[DynamicImage], embedder: Option<&dyn FaceEmbedder>) -> Result<Metric> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let Some(e) = embedder else {
        return Ok(Metric::Unavailable("no face embedder configured".into()));
    };
    let probe = match e.embed(image) {
        Ok(v) => v,
        Err(err) => return Ok(Metric::Unavailable(err)),
    };
    let mut total = 0.0;
    for r in references {
        match e.embed(r) {
            Ok(v) => total += cosine(&probe, &v)?,
            Err(err) => return Ok(Metric::Unavailable(err)),
        }
    }
    Ok(Metric::Value(total / references.len() as f64))
}

pub fn estimate_age(image: &DynamicImage, estimator: Option<&dyn AgeEstimator>) -> Metric {
    match estimator.map(|e| e.estimate_age(image)) {
        None => Metric::Unavailable("no age estimator configured".into()),
        Some(Ok(a)) => Metric::Value(a),
        Some(Err(e)) => Metric::Unavailable(e),
    }
}

/// Scores of one edited image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    /// Method or config the record belongs to.
    pub group: String,
    #[serde(default)]
    pub clip_t: Option<f64>,
    #[serde(default)]
    pub age_pred: Option<f64>,
    pub age_target: f64,
    #[serde(default)]
    pub id_sim: Option<f64>,
}

impl MetricRecord {
    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.id_sim {
            if !(-1.0..=1.0).contains(&v) {
                return Err(EvalError::IdSimRange { id: self.id.clone(), value: v });
            }
        }
        Ok(())
    }
}

pub fn age_mae(records: &[MetricRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let mut total = 0.0;
    for r in records {
        let pred = r.age_pred.ok_or_else(|| EvalError::MissingPrediction(r.id.clone()))?;
        total += (pred - r.age_target).abs();
    }
    Ok(total / records.len() as f64)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<MetricRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(line).map_err(|e| EvalError::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    store::write_atomic(path, to_jsonl(records).as_bytes())?;
    Ok(())
}

/// Appends records to a results file without rewriting it.
pub fn append_jsonl(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(to_jsonl(records).as_bytes()).map_err(io_err(path))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub clip_t: Option<f64>,
    pub age_mae: Option<f64>,
    pub id_sim: Option<f64>,
    pub count: usize,
}

/// One row per group, in order of first appearance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

pub const MISSING: &str = "\u{2014}";

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl Report {
    /// Each column averages the records that carry it; a column with no
    /// values is left empty.
    pub fn from_records(records: &[MetricRecord]) -> Self {
        let mut groups: Vec<(String, Vec<&MetricRecord>)> = Vec::new();
        for r in records {
            match groups.iter_mut().find(|(g, _)| *g == r.group) {
                Some((_, members)) => members.push(r),
                None => groups.push((r.group.clone(), vec![r])),
            }
        }
        let rows = groups
            .into_iter()
            .map(|(label, rs)| ReportRow {
                clip_t: mean(rs.iter().filter_map(|r| r.clip_t)),
                age_mae: mean(rs.iter().filter_map(|r| r.age_pred.map(|p| (p - r.age_target).abs()))),
                id_sim: mean(rs.iter().filter_map(|r| r.id_sim)),
                count: rs.len(),
                label,
            })
            .collect();
        Report { rows }
    }

    fn cells(row: &ReportRow, missing: &str) -> [String; 3] {
        let f = |v: Option<f64>, p: usize| v.map_or_else(|| missing.to_string(), |x| format!("{x:.p$}"));
        [f(row.clip_t, 3), f(row.age_mae, 1), f(row.id_sim, 2)]
    }

    pub const HEADER: [&'static str; 4] = ["Method", "CLIP-T", "Age_MAE", "ID_sim"];

    /// Aligned table; label column left-aligned, metrics right-aligned.
    pub fn to_text(&self) -> String {
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                let [a, b, c] = Self::cells(r, MISSING);
                [r.label.clone(), a, b, c]
            })
            .collect();
        let mut widths = Self::HEADER.map(|h| h.chars().count());
        for row in &body {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: [&str; 4]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                let pad = " ".repeat(w - cell.chars().count());
                if i == 0 {
                    let _ = write!(s, "{cell}{pad}");
                } else {
                    let _ = write!(s, "  {pad}{cell}");
                }
            }
            s.push('\n');
            s
        };
        let mut out = line(Self::HEADER);
        let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        out.push_str(&"-".repeat(rule));
        out.push('\n');
        for row in &body {
            out.push_str(&line([&row[0], &row[1], &row[2], &row[3]]));
        }
        out
    }

    /// CSV with a header row; missing values are empty fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,clip_t,age_mae,id_sim\n");
        for r in &self.rows {
            let [a, b, c] = Self::cells(r, "");
            let _ = writeln!(out, "{},{a},{b},{c}", csv_field(&r.label));
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Identity adapter over raw pixels: the mean-centred luma vector.
/// Stands in for a face embedder on the toy backend.
#[derive(Debug, Default, Clone, Copy)]
pub struct PixelEmbedder;

impl FaceEmbedder for PixelEmbedder {
    fn embed(&self, image: &DynamicImage) -> Result<Vec<f32>, String> {
        let px: Vec<f32> = image.to_luma8().pixels().map(|p| p.0[0] as f32).collect();
        let m = px.iter().sum::<f32>() / px.len().max(1) as f32;
        Ok(px.into_iter().map(|p| p - m).collect())
    }
}

/// Scorer that returns fixed embeddings.
#[derive(Debug, Clone)]
pub struct FixedClipScorer {
    pub image: Vec<f32>,
    pub text: Vec<f32>,
}

impl ClipScorer for FixedClipScorer {
    fn image_embedding(&self, _: &DynamicImage) -> Result<Vec<f32>, String> {
        Ok(self.image.clone())
    }

    fn text_embedding(&self, _: &str) -> Result<Vec<f32>, String> {
        Ok(self.text.clone())
    }
}

/// Estimator that always answers the same age.
#[derive(Debug, Clone, Copy)]
pub struct FixedAgeEstimator(pub f64);

impl AgeEstimator for FixedAgeEstimator {
    fn estimate_age(&self, _: &DynamicImage) -> Result<f64, String> {
        Ok(self.0)
    }
}

/// Embedder keyed on the first pixel, for tests that need chosen vectors.
pub struct LookupEmbedder(pub Vec<(u8, Vec<f32>)>);

impl FaceEmbedder for LookupEmbedder {
    fn embed(&self, image: &DynamicImage) -> Result<Vec<f32>, String> {
        let key = image.to_luma8().get_pixel(0, 0).0[0];
        self.0
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| format!("no embedding for key {key}"))
    }
}
