//! Adaptive label correction for segmentation with noisy labels.
//!
//! A student network learns from a small set of clean (HQ) labels and a
//! larger set of noisy (LQ) labels. Its EMA teacher produces several
//! perturbed predictions per LQ sample; these are fused into a refined label,
//! scored for uncertainty, and the most stable samples are trusted more.
//! A consistency term ties the student to the teacher ensemble.
//!
//! Modules follow the pipeline: [`synthgen`] builds data, [`nn`] is the
//! network, [`losses`], [`refinement`] and [`selection`] implement the
//! training signals, [`trainer`] runs the loop and [`metrics`] scores
//! predictions. [`report`] and [`cli`] sit on top.

pub mod cli;
pub mod error;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod nn;
pub mod refinement;
pub mod report;
pub mod rng;
pub mod selection;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{LabelMap, Mask, ProbMap, Tensor};
