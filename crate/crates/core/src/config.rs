//! Run configuration: one TOML document with `[data]`, `[split]`, `[model]`,
//! `[train]`, `[schedule]` and `[gmm]` sections. Unknown keys are rejected
//! and validation reports every problem at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{ConfigIssue, Error, Result};
use crate::gmm::{GmmFitConfig, DEFAULT_CONVERGENCE_TOL, DEFAULT_MAX_EM_STEPS};
use crate::model::{Architecture, Likelihood};
use crate::schedule::TrainingSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

fn default_architecture() -> Architecture {
    Architecture::Cnn {
        channels: [32, 64, 128],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub clusters: usize,
    /// Defaults to the dataset's mode.
    #[serde(default)]
    pub likelihood: Option<Likelihood>,
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default)]
    pub precision: Precision,
}

fn default_batch_size() -> usize {
    128
}
fn default_initial_lr() -> f64 {
    2e-3
}
fn default_terminal_lr() -> f64 {
    1e-6
}
fn default_noise_std() -> f64 {
    5e-9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_initial_lr")]
    pub initial_lr: f64,
    #[serde(default = "default_terminal_lr")]
    pub terminal_lr: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    /// Run directory; nothing is written when absent.
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
            initial_lr: default_initial_lr(),
            terminal_lr: default_terminal_lr(),
            noise_std: default_noise_std(),
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

fn default_k() -> usize {
    32
}
fn default_em_steps() -> usize {
    DEFAULT_MAX_EM_STEPS
}
fn default_tol() -> f64 {
    DEFAULT_CONVERGENCE_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    /// Number of mini-batches embedded for the fit; `k × batch_size` rows.
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_em_steps")]
    pub max_em_steps: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Defaults to the training seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            max_em_steps: default_em_steps(),
            tol: default_tol(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub schedule: TrainingSchedule,
    #[serde(default)]
    pub gmm: GmmConfig,
}

const REQUIRED: [&str; 8] = [
    "data.source",
    "model.latent_dim",
    "model.clusters",
    "schedule.gamma",
    "schedule.t_gamma",
    "schedule.t_beta",
    "schedule.t_static",
    "schedule.periods",
];

fn data_keys(source: &str) -> Option<&'static [&'static str]> {
    Some(match source {
        "idx" => &["source", "path", "labels", "limit"],
        "csv" => &["source", "path", "grid"],
        "cache" => &["source", "path"],
        "synthetic_behavior" => &["source", "n", "clusters", "seed"],
        "synthetic_blobs" => &["source", "n", "clusters", "dim", "spread", "seed"],
        _ => return None,
    })
}

const SECTION_KEYS: [(&str, &[&str]); 5] = [
    ("split", &["test_fraction", "seed"]),
    ("model", &["latent_dim", "clusters", "likelihood", "architecture", "precision"]),
    (
        "train",
        &["batch_size", "initial_lr", "terminal_lr", "noise_std", "seed", "checkpoint_dir"],
    ),
    ("schedule", &["gamma", "t_gamma", "t_beta", "t_static", "periods", "u", "lambda"]),
    ("gmm", &["k", "max_em_steps", "tol", "seed"]),
];

/// Presence and spelling checks on the raw document.
fn structural_issues(doc: &toml::Table) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    for key in REQUIRED {
        let (section, field) = key.split_once('.').expect("dotted");
        let present = doc
            .get(section)
            .and_then(|s| s.as_table())
            .is_some_and(|t| t.contains_key(field));
        if !present {
            issues.push(ConfigIssue::new(key, "required key is missing"));
        }
    }
    for (name, value) in doc {
        let Some(table) = value.as_table() else {
            issues.push(ConfigIssue::new(name.as_str(), "unknown top-level key (expected a section)"));
            continue;
        };
        let allowed: &[&str] = if name == "data" {
            match table.get("source").and_then(|s| s.as_str()) {
                Some(src) => match data_keys(src) {
                    Some(keys) => keys,
                    None => {
                        issues.push(ConfigIssue::new(
                            "data.source",
                            format!("unknown source `{src}` (expected idx, csv, cache, synthetic_behavior or synthetic_blobs)"),
                        ));
                        continue;
                    }
                },
                None => continue,
            }
        } else if let Some((_, keys)) = SECTION_KEYS.iter().find(|(s, _)| *s == name) {
            keys
        } else {
            issues.push(ConfigIssue::new(name.as_str(), "unknown section"));
            continue;
        };
        for key in table.keys() {
            if !allowed.contains(&key.as_str()) {
                issues.push(ConfigIssue::new(format!("{name}.{key}"), "unknown key"));
            }
        }
    }
    issues
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![ConfigIssue::new("<document>", e.to_string())]))?;
        let issues = structural_issues(&doc);
        if !issues.is_empty() {
            return Err(Error::Config(issues));
        }
        let config: RunConfig = toml::Value::Table(doc).try_into().map_err(|e: toml::de::Error| {
            Error::Config(vec![ConfigIssue::new("<document>", e.message().to_string())])
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file; relative data and checkpoint paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_toml_str(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        self.data.resolve_paths(base);
        if let Some(dir) = self.train.checkpoint_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn issues(&self) -> Vec<ConfigIssue> {
        let mut out = self.schedule.issues("schedule.");
        let m = &self.model;
        if m.latent_dim == 0 {
            out.push(ConfigIssue::new("model.latent_dim", "must be at least 1"));
        }
        if m.clusters == 0 {
            out.push(ConfigIssue::new("model.clusters", "must be at least 1"));
        }
        if let Architecture::Mlp { hidden } = &m.architecture {
            if hidden.contains(&0) {
                out.push(ConfigIssue::new("model.architecture.hidden", "layer widths must be positive"));
            }
        }
        let t = &self.train;
        if t.batch_size == 0 {
            out.push(ConfigIssue::new("train.batch_size", "must be at least 1"));
        }
        if !(t.terminal_lr > 0.0) {
            out.push(ConfigIssue::new("train.terminal_lr", "must be positive"));
        }
        if !(t.initial_lr > t.terminal_lr) {
            out.push(ConfigIssue::new("train.initial_lr", "must exceed train.terminal_lr"));
        }
        if !(t.noise_std >= 0.0 && t.noise_std.is_finite()) {
            out.push(ConfigIssue::new("train.noise_std", "must be finite and non-negative"));
        }
        if let Some(split) = &self.split {
            if !(split.test_fraction > 0.0 && split.test_fraction < 1.0) {
                out.push(ConfigIssue::new("split.test_fraction", "must lie strictly between 0 and 1"));
            }
        }
        if self.gmm.k == 0 {
            out.push(ConfigIssue::new("gmm.k", "must be at least 1"));
        }
        let fit = self.gmm_fit_config();
        out.extend(
            fit.issues(m.latent_dim)
                .into_iter()
                .filter(|i| i.key != "model.clusters" && !(i.key == "gmm.k" && self.gmm.k == 0)),
        );
        let too_small = |n: usize, clusters: usize| clusters == 0 || n < clusters;
        match &self.data {
            DataSource::SyntheticBehavior { n, clusters, .. } if too_small(*n, *clusters) => {
                out.push(ConfigIssue::new("data.n", "must be at least data.clusters, which must be positive"));
            }
            DataSource::SyntheticBlobs {
                n,
                clusters,
                dim,
                spread,
                ..
            } => {
                if too_small(*n, *clusters) {
                    out.push(ConfigIssue::new("data.n", "must be at least data.clusters, which must be positive"));
                }
                if *dim < 2 {
                    out.push(ConfigIssue::new("data.dim", "must be at least 2"));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    out.push(ConfigIssue::new("data.spread", "must be finite and non-negative"));
                }
            }
            DataSource::Csv { grid: Some([h, w]), .. } if *h == 0 || *w == 0 => {
                out.push(ConfigIssue::new("data.grid", "dimensions must be positive"));
            }
            _ => {}
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let issues = self.issues();
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    pub fn gmm_seed(&self) -> u64 {
        self.gmm.seed.unwrap_or(self.train.seed)
    }

    pub fn gmm_fit_config(&self) -> GmmFitConfig {
        GmmFitConfig {
            components: self.model.clusters,
            max_em_steps: self.gmm.max_em_steps,
            convergence_tol: self.gmm.tol,
            subsample_size: self.gmm.k * self.train.batch_size,
            seed: self.gmm_seed(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data]
source = "synthetic_blobs"
n = 1000
clusters = 4
seed = 3

[model]
latent_dim = 2
clusters = 4
architecture = { kind = "mlp", hidden = [32] }

[schedule]
gamma = 5e-4
t_gamma = 200
t_beta = 50
t_static = 10
periods = 2
"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.train.terminal_lr, 1e-6);
        assert_eq!(c.train.noise_std, 5e-9);
        assert_eq!(c.schedule.u, 3);
        assert_eq!(c.schedule.lambda, 50.0);
        assert_eq!(c.gmm.max_em_steps, 10_000);
        assert_eq!(c.gmm_fit_config().subsample_size, 32 * 128);
        assert_eq!(c.model.precision, Precision::F32);
        let again = RunConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn every_missing_and_unknown_key_is_listed() {
        let text = MINIMAL
            .replace("latent_dim = 2\n", "")
            .replace("t_beta = 50\n", "t_betta = 50\n")
            .replace("[data]", "[dataa]\nx = 1\n[data]");
        let Err(Error::Config(issues)) = RunConfig::from_toml_str(&text) else {
            panic!("expected config error")
        };
        let keys: Vec<&str> = issues.iter().map(|i| i.key.as_str()).collect();
        assert!(keys.contains(&"model.latent_dim"), "{keys:?}");
        assert!(keys.contains(&"schedule.t_beta"));
        assert!(keys.contains(&"schedule.t_betta"));
        assert!(keys.contains(&"dataa"));
        let message = Error::Config(issues).to_string();
        assert!(message.contains("`model.latent_dim`"), "{message}");
    }

    #[test]
    fn semantic_checks_are_total() {
        let text = MINIMAL
            .replace("gamma = 5e-4", "gamma = 0.5")
            .replace("[schedule]", "[train]\nbatch_size = 0\ninitial_lr = 1e-7\n\n[schedule]");
        let Err(Error::Config(issues)) = RunConfig::from_toml_str(&text) else {
            panic!("expected config error")
        };
        let keys: Vec<&str> = issues.iter().map(|i| i.key.as_str()).collect();
        for k in ["schedule.gamma", "train.batch_size", "train.initial_lr", "gmm.k"] {
            assert!(keys.contains(&k), "{k} missing from {keys:?}");
        }
    }

    #[test]
    fn relative_paths_resolve_against_config_dir() {
        let text = MINIMAL.replace(
            "source = \"synthetic_blobs\"\nn = 1000\nclusters = 4\nseed = 3",
            "source = \"cache\"\npath = \"d.vdc\"",
        );
        let mut c = RunConfig::from_toml_str(&text).unwrap();
        c.train.checkpoint_dir = Some("runs/a".into());
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.data, DataSource::Cache { path: "/cfg/d.vdc".into() });
        assert_eq!(c.train.checkpoint_dir, Some(PathBuf::from("/cfg/runs/a")));
    }
}
