//! Dynamic survival prediction from longitudinal covariates by landmarking:
//! data handling, mixed models, functional PCA, Cox and random survival
//! forest engines, six prediction pipelines, evaluation metrics and a
//! cross-validation harness.

pub mod cox;
pub mod dataset;
pub mod harness;
pub mod lmm;
pub mod metrics;
pub mod mfpca;
pub mod optim;
pub mod pipelines;
pub mod rsf;
pub mod survfn;

pub use dataset::pbc2;
