//! Joint person segmentation and cross-view identification on synchronized
//! first- and third-person video, together with a deterministic synthetic
//! benchmark generator that makes every moving part testable at desk scale.
//!
//! The crate is organized around the processing path:
//!
//! - [`domain`]: rasters, person instances, sequences, pairs.
//! - [`synthdata`]: scene generation, rendering with exact masks and
//!   analytic flow, dataset export/import, pair sampling.
//! - [`nn`]: a small reverse-mode tape plus the layers both networks use.
//! - [`segnet`]: the two-stream pre-mask-conditioned FCN.
//! - [`matchnet`]: attention re-weighting, embedding heads, contrastive
//!   matching for the third-third and third-first problems.
//! - [`trainer`]: two-stage SGD training with the FCN freeze schedule.
//! - [`pipeline`]: mask propagation, cross-view matching, baselines.
//! - [`metrics`]: IoU, mAP, forced-choice accuracy, PR curves, reports.
//! - [`cli`]: the `coview` command-line entry point.

pub mod checkpoint;
pub mod cli;
pub mod domain;
pub mod error;
pub mod evalrun;
pub mod matchnet;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod segnet;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
