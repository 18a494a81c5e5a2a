//! Source-free universal domain adaptation on feature vectors.
//!
//! A closed-set source model (a small MLP encoder plus a linear classifier)
//! is adapted to an unlabeled target set whose label space may differ from
//! the source's in either direction. Target supervision comes from
//! one-vs-all global clustering pseudo labels, local k-NN consensus over a
//! memory bank and, for the `GLC++` variant, contrastive affinity with
//! mined hard negatives. At inference, high-entropy predictions are rejected
//! as unknown.
//!
//! ```
//! use ufd::adaptation::{adapt, pretrain_source, AdaptConfig};
//! use ufd::datagen::{generate, ScenarioSpec};
//! use ufd::model::ModelDims;
//!
//! let mut spec = ScenarioSpec::preset("opda-toy").unwrap();
//! spec.source_per_class = 20;
//! spec.target_per_class = 20;
//! let (source, target) = generate(&spec).unwrap();
//!
//! let config = AdaptConfig { epochs: 2, pretrain_epochs: 5, ..AdaptConfig::default() };
//! let dims = ModelDims {
//!     d_in: spec.d_in,
//!     d_hidden: config.d_hidden,
//!     d_feat: config.d_feat,
//!     num_classes: spec.num_source_classes(),
//! };
//! let model = pretrain_source(&source.features, &source.labels, dims, &config).unwrap();
//! let (adapted, trace) = adapt(&model, &target.features, &config).unwrap();
//! assert_eq!(trace.epochs.len(), 2);
//! assert_eq!(adapted.wc, model.wc);
//! ```

pub mod adaptation;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod consensus;
pub mod contrastive;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod pseudolabel;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/global-clustering.md")]
    mod global_clustering {}
    #[doc = include_str!("../../../book/src/class-count.md")]
    mod class_count {}
    #[doc = include_str!("../../../book/src/local-consensus.md")]
    mod local_consensus {}
    #[doc = include_str!("../../../book/src/contrastive.md")]
    mod contrastive {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthetic-data.md")]
    mod synthetic_data {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
