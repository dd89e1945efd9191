//! Guided trajectory diffusion for multi-agent driving scenarios.
//!
//! The crate covers the whole desk-scale pipeline: procedural maps
//! ([`map`]), a small conditional trajectory diffusion model with
//! rule-guided sampling ([`diffusion`], [`guides`]), conversion of generated
//! scenes into ego-centric training instances ([`ego`]), and the scenario
//! and planning metrics used to evaluate them ([`metrics`]). The
//! [`pipeline`] module wires these into the train / generate / convert /
//! eval stages driven by the `egoscene` binary.

pub mod diffusion;
pub mod ego;
pub mod error;
pub mod geometry;
pub mod guides;
pub mod map;
pub mod metrics;
pub mod pipeline;
pub mod scene;
pub mod toy;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Names the run that produced a file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Major schema version written into every file this crate produces.
pub const SCHEMA_VERSION: u32 = 1;

pub(crate) fn check_schema(version: u32, path: &std::path::Path) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            msg: format!("unsupported schema version {version}, expected {SCHEMA_VERSION}"),
        });
    }
    Ok(())
}
