//! Run directory layout:
//!
//! ```text
//! <run>/manifest.json      run id, config snapshot, checkpoints, boundary history
//! <run>/loss.csv           step,phase,weight,recon,kl_cat,kl_gauss,total,lr
//! <run>/step-<t>/model.bin
//! <run>/step-<t>/optimizer.bin
//! <run>/step-<t>/state.json
//! ```
//!
//! Parameter blobs are little-endian at the training precision, so a
//! save/load round trip reproduces forward passes bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{StepRecord, TrainObserver};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mixture::MixturePrior;
use crate::model::{ModelSpec, VadeModel};
use crate::nn::Adam;
use crate::objectives::LossBreakdown;
use crate::scalar::Scalar;
use crate::schedule::Phase;

const MODEL_MAGIC: &[u8; 8] = b"VDCPARAM";
const OPTIM_MAGIC: &[u8; 8] = b"VDCOPTIM";
const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume inference (and optimization) at a step.
#[derive(Debug, Clone)]
pub struct CheckpointBundle<T> {
    pub model: VadeModel<T>,
    pub optimizer: Adam<T>,
    pub step: u64,
    /// Phase of the last completed step.
    pub phase: Phase,
    pub config: RunConfig,
    /// Loss of the last completed step.
    pub last_loss: Option<LossBreakdown>,
    /// Per-step records up to `step`.
    pub history: Vec<StepRecord>,
    pub gmm: Option<GmmSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSummary {
    pub after_step: u64,
    pub subsample_size: usize,
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: usize,
    pub final_log_likelihood: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub phase: Phase,
    pub dir: String,
    pub loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub precision: String,
    pub config: RunConfig,
    pub sample_shape: crate::model::SampleShape,
    pub total_steps: u64,
    pub checkpoints: Vec<CheckpointEntry>,
    #[serde(default)]
    pub gmm: Option<GmmSummary>,
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StepState {
    precision: String,
    spec: ModelSpec,
    step: u64,
    phase: Phase,
    loss: Option<LossBreakdown>,
    prior: MixturePrior,
}

/// Short content hash of the config snapshot, ignoring where the run is
/// written.
pub fn run_id(config: &RunConfig) -> String {
    let mut config = config.clone();
    config.train.checkpoint_dir = None;
    let digest = Sha256::digest(config.to_toml_string().as_bytes());
    digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
}

fn checkpoint_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(checkpoint_err(self.path, "truncated file"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 8], width: u8) -> Result<()> {
        if self.take(8)? != magic {
            return Err(checkpoint_err(self.path, "bad magic"));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(checkpoint_err(self.path, format!("unsupported version {version}")));
        }
        let w = self.take(1)?[0];
        if w != width {
            return Err(checkpoint_err(
                self.path,
                format!("stored at {}-byte precision, requested {width}-byte", w),
            ));
        }
        Ok(())
    }

    fn values<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let raw = self.take(n * T::WIDTH as usize)?;
        Ok(raw.chunks_exact(T::WIDTH as usize).map(T::read_le).collect())
    }
}

fn header(out: &mut Vec<u8>, magic: &[u8; 8], width: u8) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(width);
}

pub(crate) fn encode_model<T: Scalar>(model: &VadeModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, MODEL_MAGIC, T::WIDTH);
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.len() as u64).to_le_bytes());
        for &v in p.value {
            v.write_le(&mut out);
        }
    }
    out
}

pub(crate) fn decode_model<T: Scalar>(spec: ModelSpec, bytes: &[u8], path: &Path) -> Result<VadeModel<T>> {
    let mut model = VadeModel::<T>::new(spec, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut r = Reader { bytes, pos: 0, path };
    r.header(MODEL_MAGIC, T::WIDTH)?;
    let count = r.u32()? as usize;
    let mut params = model.params_mut();
    if count != params.len() {
        return Err(checkpoint_err(
            path,
            format!("{count} tensors stored, model has {}", params.len()),
        ));
    }
    for p in params.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| checkpoint_err(path, "tensor name is not UTF-8"))?;
        if name != p.name {
            return Err(checkpoint_err(path, format!("expected tensor `{}`, found `{name}`", p.name)));
        }
        let len = r.u64()? as usize;
        if len != p.value.len() {
            return Err(checkpoint_err(
                path,
                format!("tensor `{name}` has {len} values, model expects {}", p.value.len()),
            ));
        }
        p.value.copy_from_slice(&r.values::<T>(len)?);
    }
    drop(params);
    Ok(model)
}

fn encode_optimizer<T: Scalar>(adam: &Adam<T>) -> Vec<u8> {
    let mut out = Vec::new();
    header(&mut out, OPTIM_MAGIC, T::WIDTH);
    for v in [adam.beta1, adam.beta2, adam.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(adam.steps.len() as u32).to_le_bytes());
    for slot in 0..adam.steps.len() {
        out.extend_from_slice(&adam.steps[slot].to_le_bytes());
        out.extend_from_slice(&(adam.first[slot].len() as u64).to_le_bytes());
        for &v in adam.first[slot].iter().chain(&adam.second[slot]) {
            v.write_le(&mut out);
        }
    }
    out
}

fn decode_optimizer<T: Scalar>(bytes: &[u8], path: &Path) -> Result<Adam<T>> {
    let mut r = Reader { bytes, pos: 0, path };
    r.header(OPTIM_MAGIC, T::WIDTH)?;
    let mut adam = Adam::<T> {
        beta1: r.f64()?,
        beta2: r.f64()?,
        epsilon: r.f64()?,
        ..Adam::default()
    };
    let slots = r.u32()? as usize;
    for _ in 0..slots {
        adam.steps.push(r.u64()?);
        let len = r.u64()? as usize;
        adam.first.push(r.values(len)?);
        adam.second.push(r.values(len)?);
    }
    Ok(adam)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| checkpoint_err(path, e.to_string()))
}

impl<T: Scalar> CheckpointBundle<T> {
    /// Writes `model.bin`, `optimizer.bin` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("model.bin"), encode_model(&self.model))?;
        fs::write(dir.join("optimizer.bin"), encode_optimizer(&self.optimizer))?;
        let state = StepState {
            precision: T::NAME.into(),
            spec: self.model.spec.clone(),
            step: self.step,
            phase: self.phase,
            loss: self.last_loss,
            prior: self.model.mixture_prior()?,
        };
        fs::write(dir.join("state.json"), serde_json::to_vec_pretty(&state)?)?;
        Ok(())
    }

    /// Reads a step directory written by [`CheckpointBundle::save`]. The
    /// history is left empty; [`load_run`] fills it from the loss log.
    pub fn load(dir: &Path, config: RunConfig) -> Result<Self> {
        let state_path = dir.join("state.json");
        let state: StepState = serde_json::from_slice(&read(&state_path)?)?;
        if state.precision != T::NAME {
            return Err(checkpoint_err(
                dir,
                format!("checkpoint precision is {}, requested {}", state.precision, T::NAME),
            ));
        }
        let model_path = dir.join("model.bin");
        let model = decode_model::<T>(state.spec, &read(&model_path)?, &model_path)?;
        let optim_path = dir.join("optimizer.bin");
        let optimizer = decode_optimizer::<T>(&read(&optim_path)?, &optim_path)?;
        Ok(Self {
            model,
            optimizer,
            step: state.step,
            phase: state.phase,
            config,
            last_loss: state.loss,
            history: Vec::new(),
            gmm: None,
        })
    }
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = Self::path(run_dir);
        let bytes = fs::read(&path).map_err(|e| checkpoint_err(&path, format!("cannot read run manifest: {e}")))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn store(&self, run_dir: &Path) -> Result<()> {
        let tmp = run_dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        fs::rename(tmp, Self::path(run_dir))?;
        Ok(())
    }

    pub fn latest(&self) -> Option<&CheckpointEntry> {
        self.checkpoints.iter().max_by_key(|c| c.step)
    }
}

pub fn step_dir_name(step: u64) -> String {
    format!("step-{step}")
}

pub(crate) fn write_loss_header(out: &mut csv::Writer<fs::File>) -> Result<()> {
    out.write_record(["step", "phase", "weight", "recon", "kl_cat", "kl_gauss", "total", "lr"])
        .map_err(csv_err)?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Reads `loss.csv` back into step records.
pub fn read_loss_history(run_dir: &Path) -> Result<Vec<StepRecord>> {
    let path = run_dir.join("loss.csv");
    let mut reader = csv::Reader::from_path(&path).map_err(csv_err)?;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(csv_err)?;
        let bad = |what: &str| Error::Ingest {
            record: format!("loss.csv row {}", i + 1),
            reason: format!("{}: bad {what}", path.display()),
        };
        let num = |k: usize, what: &str| -> Result<f64> { row.get(k).and_then(|v| v.parse().ok()).ok_or_else(|| bad(what)) };
        out.push(StepRecord {
            step: row.get(0).and_then(|v| v.parse().ok()).ok_or_else(|| bad("step"))?,
            phase: row.get(1).and_then(|v| v.parse().ok()).ok_or_else(|| bad("phase"))?,
            loss: LossBreakdown {
                regularizer_weight: num(2, "weight")?,
                reconstruction: num(3, "recon")?,
                kl_categorical: num(4, "kl_cat")?,
                kl_gaussian: num(5, "kl_gauss")?,
                total: num(6, "total")?,
            },
            learning_rate: num(7, "lr")?,
        });
    }
    Ok(out)
}

/// Loads the latest checkpoint of a run together with its manifest and
/// loss history.
pub fn load_run<T: Scalar>(run_dir: &Path) -> Result<(RunManifest, CheckpointBundle<T>)> {
    load_run_at(run_dir, None)
}

/// Like [`load_run`], but for the checkpoint written after `step` when given.
pub fn load_run_at<T: Scalar>(run_dir: &Path, step: Option<u64>) -> Result<(RunManifest, CheckpointBundle<T>)> {
    let manifest = RunManifest::load(run_dir)?;
    if manifest.precision != T::NAME {
        return Err(checkpoint_err(
            run_dir,
            format!("run was trained at {}, requested {}", manifest.precision, T::NAME),
        ));
    }
    let entry = match step {
        Some(t) => manifest.checkpoints.iter().find(|c| c.step == t).ok_or_else(|| {
            let known: Vec<String> = manifest.checkpoints.iter().map(|c| c.step.to_string()).collect();
            checkpoint_err(run_dir, format!("no checkpoint at step {t} (have {})", known.join(", ")))
        })?,
        None => manifest
            .latest()
            .ok_or_else(|| checkpoint_err(run_dir, "run has no checkpoints"))?,
    };
    let mut bundle = CheckpointBundle::<T>::load(&run_dir.join(&entry.dir), manifest.config.clone())?;
    bundle.gmm = manifest.gmm.clone();
    if run_dir.join("loss.csv").exists() {
        bundle.history = read_loss_history(run_dir)?
            .into_iter()
            .filter(|r| r.step <= bundle.step)
            .collect();
    }
    Ok((manifest, bundle))
}

/// Observer that mirrors training into a run directory.
pub(crate) struct RunWriter {
    dir: PathBuf,
    loss: csv::Writer<fs::File>,
    failed: Option<Error>,
    pub manifest: RunManifest,
}

impl RunWriter {
    pub fn create(dir: &Path, config: &RunConfig, precision: &str, shape: crate::model::SampleShape) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut loss = csv::Writer::from_path(dir.join("loss.csv")).map_err(csv_err)?;
        write_loss_header(&mut loss)?;
        let manifest = RunManifest {
            run_id: run_id(config),
            precision: precision.into(),
            config: config.clone(),
            sample_shape: shape,
            total_steps: config.schedule.total_steps(),
            checkpoints: Vec::new(),
            gmm: None,
            completed: false,
        };
        manifest.store(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            loss,
            failed: None,
            manifest,
        })
    }

    pub fn checkpoint<T: Scalar>(&mut self, bundle: &CheckpointBundle<T>, completed: bool) -> Result<()> {
        if let Some(e) = self.failed.take() {
            return Err(e);
        }
        let name = step_dir_name(bundle.step);
        bundle.save(&self.dir.join(&name))?;
        self.loss.flush()?;
        self.manifest.checkpoints.retain(|c| c.step != bundle.step);
        self.manifest.checkpoints.push(CheckpointEntry {
            step: bundle.step,
            phase: bundle.phase,
            dir: name,
            loss: bundle.last_loss,
        });
        self.manifest.gmm = bundle.gmm.clone();
        self.manifest.completed = completed;
        self.manifest.store(&self.dir)
    }
}

impl TrainObserver for RunWriter {
    fn on_step(&mut self, r: &StepRecord) {
        if self.failed.is_some() {
            return;
        }
        let l = &r.loss;
        let written = self.loss.write_record([
            r.step.to_string(),
            r.phase.to_string(),
            l.regularizer_weight.to_string(),
            l.reconstruction.to_string(),
            l.kl_categorical.to_string(),
            l.kl_gaussian.to_string(),
            l.total.to_string(),
            r.learning_rate.to_string(),
        ]);
        if let Err(e) = written {
            self.failed = Some(csv_err(e));
        }
    }
}
