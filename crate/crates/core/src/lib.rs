//! Scalable variational deep clustering: a VaDE-style model trained with a
//! γ-warm-up, mini-batch GMM prior initialization and periodic β-annealing.

pub mod config;
pub mod data;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod scalar;
pub mod schedule;
pub mod trainer;

pub use config::{GmmConfig, ModelConfig, Precision, RunConfig, SplitConfig, TrainConfig};
pub use data::{load_dataset, split, DataSource, Dataset};
pub use error::{ConfigIssue, Error, Result};
pub use gmm::{collect_latents, fit_gmm, GmmFit, GmmFitConfig};
pub use metrics::{evaluate, stability_report, EvalOptions, MeanStd, MetricsReport, StabilityReport};
pub use mixture::{
    cluster_responsibilities, exact_posterior, gaussian_log_density, inverse_min_max, reparameterize,
    sample_generative, Decoder, GeneratedBatch, LatentPosterior, LogDensityMatrix, MixturePrior,
    Responsibilities,
};
pub use model::{Architecture, Likelihood, ModelSpec, Prediction, PriorParams, SampleShape, VadeModel};
pub use objectives::{kl_categorical, kl_gaussian_mixture, reconstruction_term, s3vdc_loss, LossBreakdown, LossInputs};
pub use scalar::Scalar;
pub use schedule::{Phase, TrainingSchedule};
pub use trainer::{
    corrupt, learning_rate_at, load_run, load_run_at, train, CheckpointBundle, GmmSummary, RunManifest, StepRecord, TrainObserver,
};
