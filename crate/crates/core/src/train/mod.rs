//! Training: the B-MAE-weighted loss, Adam with gradient clipping and weight
//! averaging, and the step loop that ties them to the model.
//!
//! Everything here is deterministic under a fixed seed: samples are visited in
//! a seeded shuffle order, gradients are reduced in parameter-manifest order,
//! and optimizer moments accumulate in f64 regardless of the model precision.

mod loss;
mod optim;

pub use loss::{bmae_pixel_weights, weighted_mae_mse_loss};
pub use optim::{clip_global_norm, OptimizerState};

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::{self, ModelConfig, ModelError, ModelParams, DBZ_RANGE};
use crate::tensor::{backward, Scalar, Tape, Tensor, TensorError};

/// Errors surfaced by the training stack.
#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training aborted: {0}")]
    Diverged(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<V> = std::result::Result<V, TrainError>;

/// Hyperparameters for one training run.
///
/// The defaults are the published ones where the model description fixes them
/// (learning rate, clipping, weight decay) and conventional ones elsewhere.
/// The B-MAE breakpoints/weights are a configuration default over dBZ, not a
/// ground-truth schedule; see [`bmae_pixel_weights`].
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of `total_steps` after which weight averaging begins.
    pub swa_start_fraction: f64,
    /// Snapshot cadence once averaging has begun.
    pub swa_every_steps: usize,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    /// Reflectivity breakpoints (dBZ, strictly increasing) for pixel weights.
    pub bmae_breakpoints: Vec<f64>,
    /// Pixel weights per reflectivity band; one longer than the breakpoints.
    pub bmae_weights: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            grad_clip_norm: 1.0,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            swa_start_fraction: 0.75,
            swa_every_steps: 10,
            batch_size: 1,
            total_steps: 300,
            seed: 0,
            bmae_breakpoints: vec![12.0, 18.0, 23.0],
            bmae_weights: vec![1.0, 2.0, 5.0, 10.0],
        }
    }
}

impl TrainConfig {
    /// Reject configurations that cannot run. Zero learning rate and zero
    /// weight decay are allowed (they freeze parameters, which is a useful
    /// debugging mode); everything that gets divided by must be positive.
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || self.weight_decay < 0.0 {
            return Err(TrainError::Config(
                "learning_rate and weight_decay must be non-negative".into(),
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(TrainError::Config("grad_clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0,1)".into()));
        }
        if self.eps <= 0.0 {
            return Err(TrainError::Config("adam eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.swa_start_fraction) {
            return Err(TrainError::Config(
                "swa_start_fraction must lie in [0,1)".into(),
            ));
        }
        if self.swa_every_steps == 0 || self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::Config(
                "swa_every_steps, batch_size and total_steps must be positive".into(),
            ));
        }
        loss::validate_schedule(&self.bmae_breakpoints, &self.bmae_weights)?;
        Ok(())
    }

    /// First step (1-based) at which a weight-averaging snapshot is taken.
    pub fn swa_start_step(&self) -> usize {
        ((self.swa_start_fraction * self.total_steps as f64).ceil() as usize).max(1)
    }
}

/// One training example: an input window, optional conditioning frames, and
/// the target window, all in the normalized reflectivity domain.
#[derive(Debug, Clone)]
pub struct TrainSample<T: Scalar> {
    /// `[B, T_in, 1, side, side]`, values in `[0,1]`.
    pub frames: Tensor<T>,
    /// `[B, K, 1, side, side]` when the model conditions on external guidance.
    pub hrrr: Option<Tensor<T>>,
    /// `[B, T_out, 1, side, side]`, values in `[0,1]`.
    pub target: Tensor<T>,
}

/// Loss measurements for one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub raw_loss: f64,
    /// Exponential moving average of the raw loss (smoothing factor 0.05,
    /// seeded with the first raw value).
    pub smoothed_loss: f64,
}

/// What a finished run hands back: the averaged weights and the loss trace.
/// The live parameters are updated in place through the `params` argument.
pub struct TrainOutcome<T: Scalar> {
    pub swa_params: ModelParams<T>,
    pub trace: Vec<StepRecord>,
}

const SMOOTHING: f64 = 0.05;

/// Run the optimization loop: forward → loss → backward → clip → Adam step,
/// with weight-averaging snapshots in the tail of the run.
///
/// Samples are visited in a seeded shuffle order, reshuffled each epoch. The
/// observer fires after every step with the fresh record and the live
/// parameters — the CLI uses it for periodic checkpoints; pass `|_, _| Ok(())`
/// when no side channel is needed. A non-finite loss aborts the run.
pub fn train_loop<T: Scalar>(
    params: &mut ModelParams<T>,
    model_config: &ModelConfig,
    samples: &[TrainSample<T>],
    config: &TrainConfig,
    mut observer: impl FnMut(&StepRecord, &ModelParams<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Config("no training samples".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);

    let mut state = OptimizerState::new();
    let mut trace = Vec::with_capacity(config.total_steps);
    let mut smoothed = f64::NAN;
    let swa_start = config.swa_start_step();

    for step in 1..=config.total_steps {
        let cursor = (step - 1) % samples.len();
        if step > 1 && cursor == 0 {
            order.shuffle(&mut rng);
        }
        let sample = &samples[order[cursor]];

        let tape = Tape::new();
        let tracked = params.tracked(&tape);
        let pred = model::forward(
            &sample.frames,
            sample.hrrr.as_ref(),
            &tracked,
            model_config,
        )?;
        let weights = pixel_weights_for(&sample.target, config)?;
        let loss = weighted_mae_mse_loss(&pred, &sample.target, &weights)?;
        let raw = loss.item().as_f64();
        if !raw.is_finite() {
            return Err(TrainError::Diverged(format!(
                "non-finite loss {raw} at step {step}"
            )));
        }
        backward(&loss, tape)?;
        drop(tracked);

        let mut grads = collect_grads(params);
        clip_global_norm(&mut grads, config.grad_clip_norm);
        state.adam_step(params, &grads, config);

        if step >= swa_start && (step - swa_start) % config.swa_every_steps == 0 {
            state.swa_update(params);
        }

        smoothed = if smoothed.is_nan() {
            raw
        } else {
            (1.0 - SMOOTHING) * smoothed + SMOOTHING * raw
        };
        let record = StepRecord {
            step,
            raw_loss: raw,
            smoothed_loss: smoothed,
        };
        observer(&record, params)?;
        trace.push(record);
    }

    let swa_params = state.swa_finalize(params)?;
    Ok(TrainOutcome { swa_params, trace })
}

/// Pixel weights for a normalized target: rescale to dBZ, then apply the
/// piecewise-constant B-MAE schedule.
pub fn pixel_weights_for<T: Scalar>(
    target: &Tensor<T>,
    config: &TrainConfig,
) -> Result<Tensor<T>> {
    let dbz: Vec<T> = target
        .data()
        .iter()
        .map(|v| T::from_f64(v.as_f64() * DBZ_RANGE))
        .collect();
    let truth_dbz = Tensor::new(target.shape().to_vec(), dbz);
    bmae_pixel_weights(&truth_dbz, &config.bmae_breakpoints, &config.bmae_weights)
}

/// Pull gradients out of every parameter, in manifest order. Parameters the
/// loss never touched contribute zeros so the optimizer stays index-aligned.
pub fn collect_grads<T: Scalar>(params: &mut ModelParams<T>) -> Vec<Vec<T>> {
    let mut grads = Vec::new();
    params.visit_mut(|t| {
        grads.push(
            t.take_grad()
                .unwrap_or_else(|| vec![T::zero(); t.numel()]),
        );
    });
    grads
}

/// Write a loss trace as CSV: `step,raw_loss,smoothed_loss`.
pub fn write_loss_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,raw_loss,smoothed_loss")?;
    for r in trace {
        writeln!(out, "{},{},{}", r.step, r.raw_loss, r.smoothed_loss)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_sample(seed: u64) -> (ModelConfig, TrainSample<f32>) {
        use rand::Rng;
        let config = ModelConfig::toy();
        let side = config.input_side();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..0.8)).collect();
            Tensor::new(shape, data)
        };
        let frames = fill(vec![1, config.t_in, 1, side, side]);
        let hrrr = fill(vec![1, config.hrrr_frames, 1, config.target_size, config.target_size]);
        let target = fill(vec![1, config.t_out, 1, config.target_size, config.target_size]);
        (
            config,
            TrainSample {
                frames,
                hrrr: Some(hrrr),
                target,
            },
        )
    }

    #[test]
    fn default_config_validates() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = TrainConfig::default();
        c.grad_clip_norm = 0.0;
        assert!(c.validate().is_err());

        let mut c = TrainConfig::default();
        c.swa_start_fraction = 1.0;
        assert!(c.validate().is_err());

        let mut c = TrainConfig::default();
        c.bmae_breakpoints = vec![18.0, 12.0];
        c.bmae_weights = vec![1.0, 2.0, 3.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_parameters_and_trace_is_flat() {
        let (config, sample) = toy_sample(7);
        let mut params = model::init_params(&config, 1).unwrap();
        let before: Vec<Vec<f32>> = params.named().iter().map(|(_, t)| t.data().to_vec()).collect();

        let mut cfg = TrainConfig::default();
        cfg.learning_rate = 0.0;
        cfg.weight_decay = 0.0;
        cfg.total_steps = 4;
        let out = train_loop(&mut params, &config, &[sample], &cfg, |_, _| Ok(())).unwrap();

        let after: Vec<Vec<f32>> = params.named().iter().map(|(_, t)| t.data().to_vec()).collect();
        assert_eq!(before, after, "lr=0 must leave parameters untouched");
        for r in &out.trace {
            assert_eq!(r.raw_loss, out.trace[0].raw_loss, "flat trace expected");
        }
    }

    #[test]
    fn same_seed_gives_identical_traces() {
        let (config, sample) = toy_sample(11);
        let mut cfg = TrainConfig::default();
        cfg.total_steps = 5;

        let run = |seed: u64| {
            let mut params = model::init_params(&config, 3).unwrap();
            let mut c = cfg.clone();
            c.seed = seed;
            train_loop(&mut params, &config, &[sample.clone()], &c, |_, _| Ok(()))
                .unwrap()
                .trace
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a, b, "same seed must reproduce the loss trace bit-for-bit");
    }

    #[test]
    fn short_overfit_run_reduces_loss() {
        let (config, sample) = toy_sample(5);
        let mut params = model::init_params(&config, 9).unwrap();
        let mut cfg = TrainConfig::default();
        cfg.total_steps = 40;
        cfg.learning_rate = 2e-3;
        let out = train_loop(&mut params, &config, &[sample], &cfg, |_, _| Ok(())).unwrap();
        let first = out.trace.first().unwrap().raw_loss;
        let last = out.trace.last().unwrap().smoothed_loss;
        assert!(
            last < first,
            "repeating one sample must reduce the loss: first {first}, last {last}"
        );
    }

    #[test]
    fn swa_snapshots_cover_the_tail_of_the_run() {
        let mut cfg = TrainConfig::default();
        cfg.total_steps = 20;
        cfg.swa_start_fraction = 0.75;
        cfg.swa_every_steps = 2;
        // snapshots at steps 15, 17, 19
        assert_eq!(cfg.swa_start_step(), 15);

        let (config, sample) = toy_sample(13);
        let mut params = model::init_params(&config, 2).unwrap();
        let mut seen = Vec::new();
        let swa_start = cfg.swa_start_step();
        let every = cfg.swa_every_steps;
        let out = train_loop(&mut params, &config, &[sample], &cfg, |r, _| {
            if r.step >= swa_start && (r.step - swa_start) % every == 0 {
                seen.push(r.step);
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![15, 17, 19]);
        // averaged parameters differ from the live ones (training kept moving
        // after the last snapshot contribution)
        let live = params.named();
        let avg = out.swa_params.named();
        assert!(live
            .iter()
            .zip(&avg)
            .any(|((_, a), (_, b))| a.data() != b.data()));
    }

    #[test]
    fn loss_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let trace = vec![
            StepRecord {
                step: 1,
                raw_loss: 0.5,
                smoothed_loss: 0.5,
            },
            StepRecord {
                step: 2,
                raw_loss: 0.25,
                smoothed_loss: 0.4875,
            },
        ];
        write_loss_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,raw_loss,smoothed_loss"));
        assert_eq!(lines.next(), Some("1,0.5,0.5"));
        assert_eq!(lines.next(), Some("2,0.25,0.4875"));
        assert_eq!(lines.next(), None);
    }
}
