//! File formats, run configuration, reports and the command-line driver
//! around [`tmt_core`].
//!
//! * [`cubes`] — feature-cube files with their metadata sidecars, and
//!   directories of them as tracklet sets.
//! * [`checkpoint`] — model snapshots: a JSON header (configuration echo and
//!   tensor manifest) followed by raw `f32` payloads.
//! * [`config`] — the TOML run configuration, validated as a whole.
//! * [`report`] — JSON retrieval reports and CSV metric logs.
//! * [`cli`] — the `tmt` commands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod cubes;
pub mod error;
pub mod report;

pub use error::{AppError, ExitCode};
