//! Post-backbone landmark retrieval pipeline.
//!
//! * [`embstore`]: embedding sets and the GLRE binary format.
//! * [`knn`]: exact top-k Euclidean search.
//! * [`metrics`]: mAP@100 and precision diagnostics.
//! * [`head`]: cosine-softmax head with fixed AdaCos scale, weighted
//!   cross-entropy, analytic gradients, SGD trainer, synthetic data and
//!   GLRH checkpoints.
//! * [`ensemble`]: weighted embedding concatenation.
//! * [`recipe`], [`dataset`], [`tables`]: staged training, dataset layout and
//!   CSV files used by the command-line tool.

pub mod dataset;
pub mod embstore;
pub mod ensemble;
pub mod head;
pub mod knn;
pub mod metrics;
pub mod recipe;
pub mod tables;

pub use embstore::{
    align_by_ids, l2_normalize, load_embeddings, save_embeddings, EmbedError, EmbeddingSet,
    FormatError,
};
pub use ensemble::{concat_weighted, EnsembleError, EnsembleMember, EnsembleSpec};
pub use head::{CosineHead, HeadError};
pub use knn::{squared_euclidean, top_k_search, KnnError, Neighbor, NeighborList, DEFAULT_K};
pub use metrics::{
    average_precision_at_k, mean_ap_at_100, GroundTruth, MetricError, RankedPredictions,
};
