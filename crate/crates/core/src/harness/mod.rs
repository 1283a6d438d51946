//! Synthetic data, dataset handling, run configuration and experiment
//! protocols.

pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod protocol;
pub mod run;
pub mod toy;

pub use config::{ExperimentConfig, ModelKind, RunConfig};
pub use dataset::{generate_toy_dataset, ingest, load_manifest, load_sample, DatasetManifest, SampleRecord, SkipReport};
pub use pipeline::{
    prepare_samples, run_experiment, synthesize_all, train_model, ExperimentOutcome, PreparedSample, TrainOutcome,
    TrainedModel,
};
pub use protocol::{audit_split, split, Protocol, ProtocolConfig, Split};
pub use run::{create_run_dir, loss_curve_tsv, new_run_id, DatasetRef, RunManifest, SplitRef, RUN_FORMAT, RUN_MANIFEST};
pub use toy::{generate_sample, ControlFamily, ToySample, ToyWorldSpec};
