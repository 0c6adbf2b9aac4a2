//! Evaluation: matched accuracy, NMI, silhouette, Calinski-Harabasz,
//! importance-sampled marginal likelihood and multi-run aggregation.

mod assignment;
mod geometry;
mod likelihood;

pub use assignment::{clustering_accuracy, confusion_matrix, min_cost_assignment, nmi};
pub use geometry::{
    calinski_harabasz, silhouette, silhouette_samples, CalinskiHarabasz, CH_SENTINEL, SILHOUETTE_SAMPLE_CAP,
};
pub use likelihood::{marginal_nll, marginal_nll_per_sample, DEFAULT_IMPORTANCE_SAMPLES, NLL_NORMALIZER};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::VadeModel;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
    /// Absent when fewer than two clusters are occupied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silhouette: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calinski_harabasz: Option<f64>,
    #[serde(default)]
    pub calinski_harabasz_degenerate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_log_px: Option<f64>,
    pub cluster_sizes: Vec<usize>,
    pub pi: Vec<f64>,
    pub samples: usize,
    pub importance_samples: usize,
    pub neg_log_px_normalizer: f64,
    pub silhouette_sample_cap: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Importance samples for `neg_log_px`; 0 skips the estimate.
    pub importance_samples: usize,
    pub seed: u64,
    pub silhouette_cap: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            importance_samples: DEFAULT_IMPORTANCE_SAMPLES,
            seed: 0,
            silhouette_cap: SILHOUETTE_SAMPLE_CAP,
        }
    }
}

/// Scores a trained model on a dataset. Label-based metrics are included
/// only when the dataset carries labels.
pub fn evaluate<T: Scalar>(model: &VadeModel<T>, data: &Dataset, options: &EvalOptions) -> Result<MetricsReport> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let pred = model.predict_chunked(data.samples.view(), 4096)?;
    let mut sizes = vec![0usize; model.clusters()];
    for &c in &pred.clusters {
        sizes[c] += 1;
    }
    let (accuracy, nmi_value) = match &data.labels {
        Some(labels) => (
            Some(clustering_accuracy(&pred.clusters, labels)?),
            Some(nmi(&pred.clusters, labels)?),
        ),
        None => (None, None),
    };
    let undefined_as_none = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let sil = undefined_as_none(silhouette(
        pred.latents.view(),
        &pred.clusters,
        options.silhouette_cap,
        options.seed,
    ))?;
    let ch = match calinski_harabasz(pred.latents.view(), &pred.clusters) {
        Ok(ch) => Some(ch),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let neg_log_px = if options.importance_samples > 0 {
        Some(marginal_nll(model, data.samples.view(), options.importance_samples, options.seed)?)
    } else {
        None
    };
    Ok(MetricsReport {
        accuracy,
        nmi: nmi_value,
        silhouette: sil,
        calinski_harabasz: ch.map(|c| c.score),
        calinski_harabasz_degenerate: ch.is_some_and(|c| c.degenerate),
        neg_log_px,
        cluster_sizes: sizes,
        pi: model.mixture_prior()?.weights().to_vec(),
        samples: data.len(),
        importance_samples: options.importance_samples,
        neg_log_px_normalizer: NLL_NORMALIZER,
        silhouette_sample_cap: options.silhouette_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator).
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a spread needs at least 2 values, got {}",
                values.len()
            )));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: usize,
    /// Keyed by metric name; only metrics present in every run.
    pub metrics: BTreeMap<String, MeanStd>,
}

pub fn stability_report(runs: &[MetricsReport]) -> Result<StabilityReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "stability needs at least 2 runs, got {}",
            runs.len()
        )));
    }
    let fields: [(&str, fn(&MetricsReport) -> Option<f64>); 5] = [
        ("accuracy", |r| r.accuracy),
        ("nmi", |r| r.nmi),
        ("silhouette", |r| r.silhouette),
        ("calinski_harabasz", |r| r.calinski_harabasz),
        ("neg_log_px", |r| r.neg_log_px),
    ];
    let mut metrics = BTreeMap::new();
    for (name, get) in fields {
        let values: Option<Vec<f64>> = runs.iter().map(get).collect();
        if let Some(values) = values {
            metrics.insert(name.to_string(), MeanStd::of(&values)?);
        }
    }
    Ok(StabilityReport {
        runs: runs.len(),
        metrics,
    })
}
