//! End-to-end training: γ-warm-up, one mixture-prior fit from a latent
//! subsample, then periods of β-annealing and static steps, with Adam and
//! per-step exponential learning-rate decay.

mod checkpoint;

pub use checkpoint::{
    load_run, load_run_at, read_loss_history, run_id, step_dir_name, CheckpointBundle, CheckpointEntry, GmmSummary, RunManifest,
};

use std::time::Instant;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use checkpoint::RunWriter;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gmm::{collect_latents, fit_gmm, GmmFit};
use crate::model::{ModelSpec, VadeModel};
use crate::nn::Adam;
use crate::objectives::{s3vdc_loss, LossBreakdown, LossInputs};
use crate::scalar::Scalar;
use crate::schedule::Phase;

const STREAM_INIT: u64 = 0;
const STREAM_SHUFFLE: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_REPARAM: u64 = 3;
/// Smoothing rate of the closed-form Gaussian decoder variance update.
pub const DECODER_VARIANCE_RATE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
}

/// Hooks into a training run. All methods default to no-ops.
pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    /// Called once, right after the prior has been installed.
    fn on_gmm_init(&mut self, _after_step: u64, _fit: &GmmFit) {}
    /// Called after the step that closes `phase`.
    fn on_boundary(&mut self, _step: u64, _phase: Phase) {}
}

impl TrainObserver for () {}

/// Input corruption `x̂ = x + ε`, `ε ~ N(0, noise_std²)`.
pub fn corrupt<T: Scalar, R: Rng + ?Sized>(x: &Array2<T>, noise_std: f64, rng: &mut R) -> Array2<T> {
    if noise_std == 0.0 {
        return x.clone();
    }
    x.mapv(|v| {
        let e: f64 = StandardNormal.sample(rng);
        T::of(v.f64() + noise_std * e)
    })
}

/// `lr(t) = lr₀ · (lr_end / lr₀)^((t − 1) / (total − 1))` for `1 ≤ t ≤ total`.
pub fn learning_rate_at(t: u64, config: &RunConfig) -> f64 {
    let total = config.schedule.total_steps();
    let (lr0, lr1) = (config.train.initial_lr, config.train.terminal_lr);
    if total <= 1 {
        return lr0;
    }
    let progress = (t.clamp(1, total) - 1) as f64 / (total - 1) as f64;
    lr0 * (lr1 / lr0).powf(progress)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless epoch-wise reshuffled mini-batch index source. Each batch is a
/// contiguous slice of the current permutation; a trailing remainder
/// shorter than the batch is dropped.
struct Batches {
    order: Vec<usize>,
    cursor: usize,
    size: usize,
    rng: ChaCha8Rng,
}

impl Batches {
    fn new(n: usize, size: usize, rng: ChaCha8Rng) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            cursor: 0,
            size: size.min(n),
            rng,
        };
        b.order.shuffle(&mut b.rng);
        b
    }

    fn next_batch(&mut self) -> &[usize] {
        if self.cursor + self.size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let out = &self.order[self.cursor..self.cursor + self.size];
        self.cursor += self.size;
        out
    }
}

fn nan_abort(step: u64, phase: Phase, err: Error) -> Error {
    match err {
        Error::NonFiniteLoss { detail, .. } => Error::NonFiniteLoss {
            step,
            phase: phase.to_string(),
            detail,
        },
        Error::NonFiniteLatent { row } => Error::NonFiniteLoss {
            step,
            phase: phase.to_string(),
            detail: format!("non-finite latent sample at batch row {row}"),
        },
        other => other,
    }
}

fn non_finite_gradient<T: Scalar>(model: &mut VadeModel<T>) -> Option<String> {
    model
        .params_mut()
        .into_iter()
        .find(|p| p.grad.iter().any(|g| !g.is_finite()))
        .map(|p| format!("non-finite gradient in `{}`", p.name))
}

/// Runs the full schedule on `dataset`. When `train.checkpoint_dir` is set
/// the run directory receives a checkpoint at every phase boundary.
pub fn train<T: Scalar>(
    config: &RunConfig,
    dataset: &Dataset,
    observer: &mut dyn TrainObserver,
) -> Result<CheckpointBundle<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let seed = config.train.seed;
    let spec = ModelSpec {
        sample_shape: dataset.shape,
        latent_dim: config.model.latent_dim,
        clusters: config.model.clusters,
        likelihood: config.model.likelihood.unwrap_or(dataset.mode),
        architecture: config.model.architecture.clone(),
    };
    let model = VadeModel::<T>::new(spec, &mut stream(seed, STREAM_INIT))?;
    let mut bundle = CheckpointBundle {
        model,
        optimizer: Adam::default(),
        step: 0,
        phase: Phase::GammaTraining,
        config: config.clone(),
        last_loss: None,
        history: Vec::new(),
        gmm: None,
    };
    let mut writer = match &config.train.checkpoint_dir {
        Some(dir) => Some(RunWriter::create(dir, config, T::NAME, dataset.shape)?),
        None => None,
    };
    let schedule = &config.schedule;
    let total = schedule.total_steps();
    let boundaries = schedule.boundaries();
    let mut batches = Batches::new(dataset.len(), config.train.batch_size, stream(seed, STREAM_SHUFFLE));
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let mut reparam_rng = stream(seed, STREAM_REPARAM);
    let d = config.model.latent_dim;
    info!(
        "training {} parameters for {total} steps on {} samples ({})",
        bundle.model.parameter_count(),
        dataset.len(),
        T::NAME
    );

    for t in 1..=total {
        let phase = schedule.phase_at(t);
        let weight = schedule.regularizer_weight_at(t)?;
        let lr = learning_rate_at(t, config);
        let rows = batches.next_batch();
        let x = VadeModel::<T>::cast_batch(dataset.samples.select(Axis(0), rows).view());
        let x_hat = corrupt(&x, config.train.noise_std, &mut noise_rng);
        let eps = Array2::from_shape_simple_fn((x.nrows(), d), || {
            T::of(StandardNormal.sample(&mut reparam_rng))
        });
        let model = &mut bundle.model;
        model.zero_grad();
        let loss = s3vdc_loss(
            model,
            &LossInputs {
                x: &x,
                x_hat: &x_hat,
                noise: &eps,
                regularizer_weight: weight,
                lambda: schedule.lambda,
            },
            true,
        )
        .map_err(|e| nan_abort(t, phase, e))?;
        if let Some(detail) = non_finite_gradient(model) {
            return Err(Error::NonFiniteLoss {
                step: t,
                phase: phase.to_string(),
                detail,
            });
        }
        model.freeze_decoder_variance();
        bundle.optimizer.step(&mut model.params_mut(), lr);
        model.project();
        model.update_decoder_variance(DECODER_VARIANCE_RATE);

        let record = StepRecord {
            step: t,
            phase,
            loss,
            learning_rate: lr,
        };
        observer.on_step(&record);
        if let Some(w) = writer.as_mut() {
            w.on_step(&record);
        }
        bundle.history.push(record);
        bundle.step = t;
        bundle.phase = phase;
        bundle.last_loss = Some(loss);
        if t % 1000 == 0 {
            debug!("step {t} {phase}: total {:.4} lr {lr:.3e}", loss.total);
        }

        if t == schedule.gmm_init_after() {
            let started = Instant::now();
            let fit_config = config.gmm_fit_config();
            let z = collect_latents(&bundle.model, dataset.samples.view(), fit_config.subsample_size, fit_config.seed);
            let fit = fit_gmm(z.view(), &fit_config)?;
            bundle.model.install_prior(&fit.prior)?;
            let slots = bundle.optimizer.slot_count();
            for slot in slots.saturating_sub(3)..slots {
                bundle.optimizer.reset_slot(slot);
            }
            let summary = GmmSummary {
                after_step: t,
                subsample_size: z.nrows(),
                iterations: fit.iterations,
                converged: fit.converged,
                reseeds: fit.reseeds,
                final_log_likelihood: fit.log_likelihood.last().copied().unwrap_or(f64::NAN),
                seconds: started.elapsed().as_secs_f64(),
            };
            info!(
                "mixture prior fitted on {} latents in {} EM steps ({:.2}s)",
                summary.subsample_size, summary.iterations, summary.seconds
            );
            bundle.gmm = Some(summary);
            observer.on_gmm_init(t, &fit);
        }

        if let Some(&(_, closed)) = boundaries.iter().find(|(b, _)| *b == t) {
            if let Some(w) = writer.as_mut() {
                w.checkpoint(&bundle, t == total)?;
            }
            observer.on_boundary(t, closed);
        }
    }
    bundle.phase = Phase::Done;
    Ok(bundle)
}
