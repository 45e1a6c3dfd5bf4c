//! Synthetic streams, configuration, experiment runs, metrics and ablation
//! grids.

pub mod ablate;
pub mod config;
pub mod data;
pub mod metrics;
pub mod run;

pub use config::{Ablation, ExperimentConfig, StreamConfig};
pub use data::{gen_blobs, make_cil_stream, make_dil_stream, AccessLog, BlobGenerator, Dataset, SessionSource, SessionStream, StreamMode};
pub use metrics::{compute_metrics, MetricsRecord, SessionEval, TrackMetrics};
pub use run::{prepare, run_experiment, run_prepared, run_sessions, Prepared, RunOutput};
