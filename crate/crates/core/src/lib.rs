//! Training-free conditional face aging on rectified-flow backbones.

pub mod ablation;
pub mod attention;
pub mod backend;
pub mod edit;
pub mod eval;
pub mod par;
pub mod pipeline;
pub mod prompt;
pub mod rf;
pub mod sar;
pub mod store;
pub mod toy;

pub use par::ExecMode;
