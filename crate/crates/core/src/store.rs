//! On-disk array files and atomic writes.
//!
//! Array file layout: a 16-byte header followed by raw little-endian `f32`
//! data in row-major order.
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `AMKF`                              |
//! | 4..6   | rank, `u16` LE, 1..=5                     |
//! | 6..16  | five `u16` LE dimensions, unused ones zero |

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"AMKF";
pub const HEADER_LEN: usize = 16;
pub const MAX_RANK: usize = 5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed array file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("cannot store array of shape {0:?}: rank must be 1..=5 and every dim < 65536")]
    Unrepresentable(Vec<usize>),
    #[error("{0} already exists")]
    AlreadyExists(PathBuf),
    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_array(array: &ArrayD<f32>) -> Result<Vec<u8>, StoreError> {
    let shape = array.shape();
    if shape.is_empty() || shape.len() > MAX_RANK || shape.iter().any(|&d| d > u16::MAX as usize) {
        return Err(StoreError::Unrepresentable(shape.to_vec()));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * array.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u16).to_le_bytes());
    for i in 0..MAX_RANK {
        let d = shape.get(i).copied().unwrap_or(0) as u16;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for x in array.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_array(bytes: &[u8], path: &Path) -> Result<ArrayD<f32>, StoreError> {
    let bad = |reason: String| StoreError::Format {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let rank = u16::from_le_bytes([bytes[4], bytes[5]]) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("rank {rank}")));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u16::from_le_bytes([bytes[6 + 2 * i], bytes[7 + 2 * i]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * count {
        return Err(bad(format!("expected {} data bytes for {dims:?}, found {}", 4 * count, body.len())));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&dims), data).expect("checked size"))
}

pub fn write_array(path: &Path, array: &ArrayD<f32>) -> Result<(), StoreError> {
    write_atomic(path, &encode_array(array)?)
}

pub fn read_array(path: &Path) -> Result<ArrayD<f32>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_array(&bytes, path)
}

fn temp_sibling(path: &Path, tag: &str) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let unique = format!(
        ".{name}.{tag}-{}-{:?}",
        std::process::id(),
        std::thread::current().id()
    )
    .replace(['(', ')'], "");
    path.with_file_name(unique)
}

/// Where a simulated crash interrupts [`write_atomic_with_fault`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// Stop after this many bytes of the temp file are written.
    DuringWrite(usize),
    /// Temp file complete but not yet synced.
    BeforeSync,
    /// Temp file synced, rename not performed.
    BeforeRename,
}

#[derive(Debug, Error)]
pub enum WriteFault {
    #[error("simulated crash at {0:?}")]
    Crashed(CrashPoint),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Writes `bytes` to `path` via a synced temp file and a rename, so readers
/// see either the old contents or the new, never a prefix.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    match write_atomic_with_fault(path, bytes, None) {
        Ok(()) => Ok(()),
        Err(WriteFault::Store(e)) => Err(e),
        Err(WriteFault::Crashed(_)) => unreachable!("no crash point"),
    }
}

/// [`write_atomic`] with an optional injected crash. A crash abandons the
/// temp file in place, like a killed process would.
pub fn write_atomic_with_fault(path: &Path, bytes: &[u8], crash: Option<CrashPoint>) -> Result<(), WriteFault> {
    let tmp = temp_sibling(path, "tmp");
    let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
    let limit = match crash {
        Some(CrashPoint::DuringWrite(n)) => n.min(bytes.len()),
        _ => bytes.len(),
    };
    file.write_all(&bytes[..limit]).map_err(io_err(&tmp))?;
    if let Some(c @ CrashPoint::DuringWrite(_)) = crash {
        return Err(WriteFault::Crashed(c));
    }
    if crash == Some(CrashPoint::BeforeSync) {
        return Err(WriteFault::Crashed(CrashPoint::BeforeSync));
    }
    file.sync_all().map_err(io_err(&tmp))?;
    drop(file);
    if crash == Some(CrashPoint::BeforeRename) {
        return Err(WriteFault::Crashed(CrashPoint::BeforeRename));
    }
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        if let Ok(d) = File::open(dir) {
            let _ = d.sync_all();
        }
    }
    Ok(())
}

/// Populates a fresh directory through `fill`, then renames it into place.
/// Fails if `dir` already exists; a failure leaves no partial `dir` behind.
pub fn write_dir_atomic<F>(dir: &Path, fill: F) -> Result<(), StoreError>
where
    F: FnOnce(&Path) -> Result<(), StoreError>,
{
    if dir.exists() {
        return Err(StoreError::AlreadyExists(dir.to_path_buf()));
    }
    if let Some(parent) = dir.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let tmp = temp_sibling(dir, "partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
    }
    fs::create_dir(&tmp).map_err(io_err(&tmp))?;
    let result = fill(&tmp).and_then(|()| fs::rename(&tmp, dir).map_err(io_err(dir)));
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}
