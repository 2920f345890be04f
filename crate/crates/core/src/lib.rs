//! Asymmetric place-recognition embeddings.
//!
//! High-capacity gallery embeddings stay frozen on disk; a lightweight
//! query network is trained to land in the same space so that queries can
//! be matched against precomputed gallery vectors by plain dot product.
//! The crate provides the binary embedding store and manifests, a
//! per-place memory bank of centroid/variance statistics, the contrastive
//! compatibility losses (plain, variance-regularized, and sampled),
//! query-model training with AdamW under a cosine schedule, a synthetic
//! world generator, exact retrieval evaluation, and independent numerical
//! oracles for the nontrivial math.

pub mod embedding;
pub mod eval;
pub mod gallery;
pub mod loss;
pub mod manifest;
pub mod membank;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod store;
pub mod synth;

pub use embedding::{EmbeddingError, EmbeddingMatrix, EmbeddingVector};
pub use eval::{build_gt_geo, haversine, recall_at_k, retrieve, EvalError, GroundTruth, RetrievalReport};
pub use gallery::{GalleryError, GallerySet};
pub use loss::{LossConfig, LossError, LossInstance, LossMode, LossOutput};
pub use manifest::{GeoTag, ImageRecord, ManifestError};
pub use membank::{build_bank, BankError, MemoryBank, PlaceStats};
pub use model::{ModelError, ModelGrads, QueryModelParams};
pub use optim::{train, OptimConfig, OptimError, TrainLog};
pub use oracle::{check_jensen_bound, mc_expectation_loss, OracleError, SuiteOutcome};
pub use store::{read_store, write_store, StoreError};
pub use synth::{gen_world, FrozenGalleryNetwork, SynthError, SynthWorld, WorldConfig};
