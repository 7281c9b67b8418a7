//! Single-round clustered federated learning on top of data collaboration
//! analysis: clients share dimensionality-reduced data once, the analyst
//! clusters clients by label distribution and trains one model per cluster.

pub mod alignment;
pub mod clustering;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod learner;
pub mod protocol;
pub mod reduction;
pub mod seed;

pub use alignment::{compute_mappings, integrate, pseudoinverse, AlignmentResult, SingularCutoff};
pub use clustering::{build_distance_matrix, complete_linkage_clusters, tv_distance, ClusterPartition, DistanceMatrix};
pub use dataset::{load_dataset, partition, ClientShard, LabeledTable, PartitionKind, PartitionSpec};
pub use error::{Error, Result};
pub use harness::{run_method, run_method_on_table, sweep_threshold, ExperimentConfig, Method, ResultFormat, ResultRecord};
pub use learner::{fit_classifier, Classifier, TrainConfig};
pub use protocol::{analyst_run, client_infer, client_prepare_upload, run_round, AnalystConfig, Download, Grouping, Upload};
pub use reduction::{apply_reducer, fit_reducer, generate_anchor, AnchorData, Reducer};
