//! Texture classification with Fisher vectors over multilayer CNN features.
//!
//! Pipeline, per image: local features from the last two convolutional layers
//! are merged into one set ([`fisher::merge_layers`], last layer reduced with
//! [`pca`]), encoded as a Fisher vector under a diagonal [`gmm`], normalized
//! ([`transform`]) and classified with a one-vs-rest linear [`svm`], optionally
//! fused with a second SVM over the network's FC descriptor.
//!
//! [`experiment`] drives the whole thing over a dataset manifest of tensor
//! files produced by an external activation exporter ([`store`]).

pub mod experiment;
pub mod fisher;
pub mod gmm;
pub mod kmeans;
pub mod pca;
pub mod store;
pub mod svm;
pub mod synthetic;
pub mod transform;

pub use experiment::{ExperimentConfig, ExperimentReport, Mode, Protocol};
pub use fisher::{encode_fv, merge_layers, FisherVector, MergedFeatureSet};
pub use gmm::GmmModel;
pub use pca::PcaModel;
pub use store::{DatasetManifest, FeatureBundle, Tensor};
pub use svm::{DecisionScores, SvmModel};

/// Derives an independent seed for sub-stream `stream` (splitmix64 finalizer).
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
