//! The aging multiverse: a rooted tree of edits grown from one portrait.
//!
//! Each node is an image at some age under some condition. Branches are
//! generated by a single background worker in FIFO order; the manifest on
//! disk is the source of truth and is rewritten atomically after every state
//! change. [`server`] exposes the tree over a small JSON HTTP API.

pub mod manifest;
pub mod server;
pub mod tree;
pub mod worker;

use thiserror::Error;

pub use manifest::{BranchOptions, JobState, MultiverseNode, TreeManifest, TreeSettings};
pub use tree::{BranchRequest, Overrides, Runtime, Tree};
pub use worker::Worker;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("no node {0}")]
    NotFound(String),
    #[error("no job {0}")]
    JobNotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error("parent {id} is {state}, branches need a done parent")]
    ParentNotReady { id: String, state: JobState },
    #[error("node {0} has a running job in its subtree")]
    Busy(String),
    #[error("a tree already exists at {0}")]
    AlreadyExists(String),
    #[error("invalid manifest: {0}")]
    Invalid(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("simulated crash at {0}")]
    Crashed(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("cannot bind {addr}: {reason}")]
    Bind { addr: String, reason: String },
}

pub type Result<T, E = TreeError> = std::result::Result<T, E>;
