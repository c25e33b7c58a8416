//! Experiment configuration: a flat key=value file aggregating the model,
//! training, data-generation, and windowing knobs, plus the ablation variant
//! flag. Every key has a default, so the smallest valid file is empty; the
//! effective configuration is snapshotted into each run directory in
//! canonical form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nowcast_core::config::KvConfig;
use nowcast_core::data::{SyntheticConfig, WindowConfig};
use nowcast_core::model::ModelConfig;
use nowcast_core::train::TrainConfig;

use crate::{CliError, Result};

/// The four ablation configurations: which of the viewport and conditioning
/// branches are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Base,
    Hrrr,
    Lv,
    HrrrLv,
}

impl Variant {
    pub fn use_lv(self) -> bool {
        matches!(self, Variant::Lv | Variant::HrrrLv)
    }

    pub fn use_hrrr(self) -> bool {
        matches!(self, Variant::Hrrr | Variant::HrrrLv)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Hrrr => "hrrr",
            Variant::Lv => "lv",
            Variant::HrrrLv => "hrrr_lv",
        }
    }
}

impl FromStr for Variant {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "base" => Ok(Variant::Base),
            "hrrr" => Ok(Variant::Hrrr),
            "lv" => Ok(Variant::Lv),
            "hrrr_lv" => Ok(Variant::HrrrLv),
            other => Err(CliError::Usage(format!(
                "unknown variant {other:?}; expected base, hrrr, lv, or hrrr_lv"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fully resolved experiment: model geometry with the variant applied, plus
/// all run parameters. One seed drives everything derived (sequence seeds,
/// surrogate seeds, shuffle order).
#[derive(Debug, Clone)]
pub struct Experiment {
    pub variant: Variant,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Generation parameters; `side` is always the full viewport so every
    /// variant can consume the same sequences, and `seed` is re-derived per
    /// sequence.
    pub synth: SyntheticConfig,
    pub window: WindowConfig,
    /// Sequences emitted by `gen-data`.
    pub sequences: usize,
    /// Conditioning surrogate fidelity in [0,1]; 1 = subsampled truth.
    pub hrrr_quality: f64,
    pub flow_levels: usize,
    pub flow_window: usize,
}

const KNOWN_KEYS: &[&str] = &[
    "model",
    "variant",
    "seed",
    "data.sequences",
    "data.frames",
    "data.cadence_minutes",
    "data.cells",
    "data.amp_min",
    "data.amp_max",
    "data.sigma_min",
    "data.sigma_max",
    "data.velocity_x",
    "data.velocity_y",
    "data.rotation",
    "data.growth_min",
    "data.growth_max",
    "data.noise_dbz",
    "window.input_cadence_min",
    "window.target_cadence_min",
    "window.stride_frames",
    "hrrr.quality",
    "flow.levels",
    "flow.window",
    "train.learning_rate",
    "train.grad_clip_norm",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.swa_start_fraction",
    "train.swa_every_steps",
    "train.batch_size",
    "train.total_steps",
    "train.bmae_breakpoints",
    "train.bmae_weights",
];

fn parse_list(key: &str, text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|p| {
            p.trim().parse::<f64>().map_err(|_| {
                CliError::Usage(format!("key {key:?}: cannot parse {p:?} as a number"))
            })
        })
        .collect()
}

impl Experiment {
    pub fn load(path: &Path, variant_override: Option<&str>) -> Result<Experiment> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        Experiment::from_text(&text, variant_override)
    }

    pub fn from_text(text: &str, variant_override: Option<&str>) -> Result<Experiment> {
        let kv = KvConfig::parse(text)?;
        kv.ensure_known(KNOWN_KEYS)?;

        let variant: Variant = match variant_override {
            Some(v) => v.parse()?,
            None => kv.raw("variant").unwrap_or("hrrr_lv").parse()?,
        };
        let seed: u64 = kv.get_or("seed", 0)?;

        let mut model = match kv.raw("model").unwrap_or("toy") {
            "toy" => ModelConfig::toy(),
            "full" => ModelConfig::default(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown model {other:?}; expected toy or full"
                )))
            }
        };
        model.use_lv = variant.use_lv();
        model.use_hrrr = variant.use_hrrr();
        model.validate()?;

        let synth_default = SyntheticConfig::default();
        let synth = SyntheticConfig {
            // the full viewport, regardless of variant: base-variant windows
            // are center-cropped later, so all variants share one dataset
            side: model.lv_factor * model.target_size,
            frames: kv.get_or("data.frames", 24)?,
            cadence_minutes: kv.get_or("data.cadence_minutes", 2)?,
            cells: kv.get_or("data.cells", synth_default.cells)?,
            amplitude_dbz: (
                kv.get_or("data.amp_min", synth_default.amplitude_dbz.0)?,
                kv.get_or("data.amp_max", synth_default.amplitude_dbz.1)?,
            ),
            sigma_px: (
                kv.get_or("data.sigma_min", synth_default.sigma_px.0)?,
                kv.get_or("data.sigma_max", synth_default.sigma_px.1)?,
            ),
            velocity: (
                kv.get_or("data.velocity_x", synth_default.velocity.0)?,
                kv.get_or("data.velocity_y", synth_default.velocity.1)?,
            ),
            rotation: kv.get_or("data.rotation", synth_default.rotation)?,
            growth: (
                kv.get_or("data.growth_min", synth_default.growth.0)?,
                kv.get_or("data.growth_max", synth_default.growth.1)?,
            ),
            noise_dbz: kv.get_or("data.noise_dbz", synth_default.noise_dbz)?,
            seed, // per-sequence seeds derive from this at generation time
        };
        synth.validate()?;

        let window = WindowConfig {
            t_in: model.t_in,
            t_out: model.t_out,
            input_cadence_min: kv.get_or("window.input_cadence_min", 2)?,
            target_cadence_min: kv.get_or("window.target_cadence_min", 2)?,
            stride_frames: kv.get_or("window.stride_frames", 4)?,
        };
        // windows must fit inside a generated sequence
        let last_minute = (window.t_in as i32 - 1) * window.input_cadence_min
            + window.t_out as i32 * window.target_cadence_min;
        let span_minutes = (synth.frames as i32 - 1) * synth.cadence_minutes;
        if last_minute > span_minutes {
            return Err(CliError::Usage(format!(
                "windows span {last_minute} minutes but sequences cover only {span_minutes}; \
                 raise data.frames or shorten the window"
            )));
        }

        let train_default = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: kv.get_or("train.learning_rate", train_default.learning_rate)?,
            grad_clip_norm: kv.get_or("train.grad_clip_norm", train_default.grad_clip_norm)?,
            weight_decay: kv.get_or("train.weight_decay", train_default.weight_decay)?,
            beta1: kv.get_or("train.beta1", train_default.beta1)?,
            beta2: kv.get_or("train.beta2", train_default.beta2)?,
            eps: kv.get_or("train.eps", train_default.eps)?,
            swa_start_fraction: kv
                .get_or("train.swa_start_fraction", train_default.swa_start_fraction)?,
            swa_every_steps: kv.get_or("train.swa_every_steps", train_default.swa_every_steps)?,
            batch_size: kv.get_or("train.batch_size", train_default.batch_size)?,
            total_steps: kv.get_or("train.total_steps", train_default.total_steps)?,
            seed,
            bmae_breakpoints: match kv.raw("train.bmae_breakpoints") {
                Some(text) => parse_list("train.bmae_breakpoints", text)?,
                None => train_default.bmae_breakpoints.clone(),
            },
            bmae_weights: match kv.raw("train.bmae_weights") {
                Some(text) => parse_list("train.bmae_weights", text)?,
                None => train_default.bmae_weights.clone(),
            },
        };
        train.validate()?;

        let hrrr_quality: f64 = kv.get_or("hrrr.quality", 0.9)?;
        if !(0.0..=1.0).contains(&hrrr_quality) {
            return Err(CliError::Usage(format!(
                "hrrr.quality must lie in [0,1], got {hrrr_quality}"
            )));
        }

        Ok(Experiment {
            variant,
            seed,
            model,
            train,
            synth,
            window,
            sequences: kv.get_or("data.sequences", 4)?,
            hrrr_quality,
            flow_levels: kv.get_or("flow.levels", 3)?,
            flow_window: kv.get_or("flow.window", 9)?,
        })
    }

    /// Seed for generated sequence `i`.
    pub fn sequence_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    /// Seed for the conditioning surrogate of window `j` of sequence `i`.
    pub fn surrogate_seed(&self, i: usize, j: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add((i as u64) * 1_000)
            .wrapping_add(j as u64)
    }

    /// Canonical key=value rendering of the effective configuration, with
    /// every default made explicit. Written into each run directory.
    pub fn snapshot(&self) -> String {
        let mut kv = KvConfig::default();
        let model_name = if self.model.target_size == ModelConfig::toy().target_size {
            "toy"
        } else {
            "full"
        };
        kv.set("model", model_name);
        kv.set("variant", self.variant);
        kv.set("seed", self.seed);
        kv.set("data.sequences", self.sequences);
        kv.set("data.frames", self.synth.frames);
        kv.set("data.cadence_minutes", self.synth.cadence_minutes);
        kv.set("data.cells", self.synth.cells);
        kv.set("data.amp_min", self.synth.amplitude_dbz.0);
        kv.set("data.amp_max", self.synth.amplitude_dbz.1);
        kv.set("data.sigma_min", self.synth.sigma_px.0);
        kv.set("data.sigma_max", self.synth.sigma_px.1);
        kv.set("data.velocity_x", self.synth.velocity.0);
        kv.set("data.velocity_y", self.synth.velocity.1);
        kv.set("data.rotation", self.synth.rotation);
        kv.set("data.growth_min", self.synth.growth.0);
        kv.set("data.growth_max", self.synth.growth.1);
        kv.set("data.noise_dbz", self.synth.noise_dbz);
        kv.set("window.input_cadence_min", self.window.input_cadence_min);
        kv.set("window.target_cadence_min", self.window.target_cadence_min);
        kv.set("window.stride_frames", self.window.stride_frames);
        kv.set("hrrr.quality", self.hrrr_quality);
        kv.set("flow.levels", self.flow_levels);
        kv.set("flow.window", self.flow_window);
        kv.set("train.learning_rate", self.train.learning_rate);
        kv.set("train.grad_clip_norm", self.train.grad_clip_norm);
        kv.set("train.weight_decay", self.train.weight_decay);
        kv.set("train.beta1", self.train.beta1);
        kv.set("train.beta2", self.train.beta2);
        kv.set("train.eps", self.train.eps);
        kv.set("train.swa_start_fraction", self.train.swa_start_fraction);
        kv.set("train.swa_every_steps", self.train.swa_every_steps);
        kv.set("train.batch_size", self.train.batch_size);
        kv.set("train.total_steps", self.train.total_steps);
        let join = |v: &[f64]| {
            v.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        };
        kv.set("train.bmae_breakpoints", join(&self.train.bmae_breakpoints));
        kv.set("train.bmae_weights", join(&self.train.bmae_weights));
        kv.to_text()
    }
}
