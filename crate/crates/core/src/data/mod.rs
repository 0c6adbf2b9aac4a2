//! Datasets: ingestion of IDX images, CSV timeseries and cached tensors,
//! preprocessing, seeded splits and synthetic generators.

mod formats;
mod synthetic;
mod transform;

pub use formats::{load_cache, load_csv_timeseries, load_idx, save_cache, CACHE_MAGIC};
pub use synthetic::{synthetic_behavior, synthetic_blobs, BEHAVIOR_CHANNELS, BEHAVIOR_STEPS, BLOB_SPREAD};
pub use transform::{channel_means, log1p, resize_bilinear, standardize, to_grid, zero_center_channels};

use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Likelihood, SampleShape};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One flattened `channels × height × width` sample per row.
    pub samples: Array2<f32>,
    pub labels: Option<Vec<usize>>,
    pub shape: SampleShape,
    pub mode: Likelihood,
}

impl Dataset {
    pub fn new(
        samples: Array2<f32>,
        labels: Option<Vec<usize>>,
        shape: SampleShape,
        mode: Likelihood,
    ) -> Result<Self> {
        let ds = Self {
            samples,
            labels,
            shape,
            mode,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.ncols() != self.shape.len() {
            return Err(Error::Ingest {
                record: "header".into(),
                reason: format!(
                    "rows have {} values, shape {} needs {}",
                    self.samples.ncols(),
                    self.shape,
                    self.shape.len()
                ),
            });
        }
        for (i, row) in self.samples.outer_iter().enumerate() {
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::Ingest {
                    record: format!("sample {i}"),
                    reason: format!("non-finite value {v}"),
                });
            }
            if self.mode == Likelihood::Bernoulli {
                if let Some(v) = row.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::Ingest {
                        record: format!("sample {i}"),
                        reason: format!("value {v} outside [0, 1] in Bernoulli mode"),
                    });
                }
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.nrows() {
                return Err(Error::Ingest {
                    record: "labels".into(),
                    reason: format!("{} labels for {} samples", labels.len(), self.samples.nrows()),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1))
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            samples: self.samples.select(Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&r| l[r]).collect()),
            shape: self.shape,
            mode: self.mode,
        }
    }
}

/// Seeded train/test split, stratified by label when labels exist.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<usize>> = match &dataset.labels {
        Some(labels) => {
            let k = dataset.num_classes().unwrap_or(0);
            let mut g = vec![Vec::new(); k];
            for (i, &l) in labels.iter().enumerate() {
                g[l].push(i);
            }
            g
        }
        None => vec![(0..dataset.len()).collect()],
    };
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut g in groups {
        g.shuffle(&mut rng);
        let n_test = (g.len() as f64 * test_fraction).round() as usize;
        test.extend_from_slice(&g[..n_test]);
        train.extend_from_slice(&g[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((dataset.select(&train), dataset.select(&test)))
}

/// Where a dataset comes from, as written in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX image file (optionally gzipped) with an optional IDX label file.
    Idx {
        path: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        limit: Option<usize>,
    },
    /// Multichannel timeseries CSV with `c<channel>_t<step>` columns.
    Csv {
        path: PathBuf,
        #[serde(default)]
        grid: Option<[usize; 2]>,
    },
    /// Tensor cache written by [`save_cache`].
    Cache { path: PathBuf },
    SyntheticBehavior {
        n: usize,
        clusters: usize,
        seed: u64,
    },
    SyntheticBlobs {
        n: usize,
        clusters: usize,
        #[serde(default = "default_blob_dim")]
        dim: usize,
        #[serde(default = "default_blob_spread")]
        spread: f64,
        seed: u64,
    },
}

fn default_blob_dim() -> usize {
    16
}

fn default_blob_spread() -> f64 {
    BLOB_SPREAD
}

impl DataSource {
    /// Rewrites relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DataSource::Idx { path, labels, .. } => {
                fix(path);
                if let Some(l) = labels {
                    fix(l);
                }
            }
            DataSource::Csv { path, .. } | DataSource::Cache { path } => fix(path),
            _ => {}
        }
    }
}

/// Loads and preprocesses a dataset: images scaled to `[0, 1]`, timeseries
/// zero-centred per channel and optionally placed on a square grid,
/// synthetic counts log-transformed and standardized.
pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    match source {
        DataSource::Idx { path, labels, limit } => load_idx(path, labels.as_deref(), *limit),
        DataSource::Csv { path, grid } => {
            let mut ds = load_csv_timeseries(path)?;
            zero_center_channels(&mut ds);
            match grid {
                Some([h, w]) => to_grid(&ds, *h, *w),
                None => Ok(ds),
            }
        }
        DataSource::Cache { path } => load_cache(path),
        DataSource::SyntheticBehavior { n, clusters, seed } => {
            let mut ds = synthetic_behavior(*n, *clusters, *seed)?;
            log1p(&mut ds);
            standardize(&mut ds);
            Ok(ds)
        }
        DataSource::SyntheticBlobs {
            n,
            clusters,
            dim,
            spread,
            seed,
        } => synthetic_blobs(*n, *clusters, *dim, *spread, *seed),
    }
}
