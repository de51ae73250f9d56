//! Event recognition with explainable predictions: dataset scanning,
//! fine-tuning, evaluation, class activation maps and annotation studies.

pub mod backbone;
pub mod dataset;
pub mod eval;
pub mod explain;
pub mod model;
pub mod nn;
pub mod study;
pub mod synth;
pub mod train;

pub use backbone::{BackboneFactory, BackboneRegistry};
pub use dataset::{scan, DatasetError, DatasetManifest, Split, SplitFractions};
pub use eval::{evaluate, ClassificationReport, Evaluation};
pub use explain::{grad_cam, render_overlay, ActivationMap, ExplainError, ExplainerRegistry, ExplanationMethod};
pub use model::{build, ModelBundle, ModelConfig, ModelError};
pub use study::{StudyError, StudyReport, StudyStore};
pub use train::finetune;
