//! Explainable CT-scan assessment: lung/lobe segmentation, per-slice infection
//! detection with scan-level voting, lobe lesion categorization and saliency.

pub mod clf_model;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod explainer;
pub mod imageops;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod store;
pub mod seg_model;
pub mod trainer;
pub mod volume_io;

pub use error::{Error, Result, Stage};
