//! Sliding-window extraction: input frames at one cadence, target frames at
//! a coarser one, selected by matching minute offsets.

use super::{DataError, RadarSequence, Result};
use crate::model::{ModelConfig, DBZ_RANGE};
use crate::tensor::Tensor;
use crate::train::TrainSample;

/// Windowing schedule. Defaults follow the production layout: 20 inputs at a
/// 4-minute cadence (minutes 0–76), then 45 targets at an 8-minute cadence
/// (minutes 84–436), the first target one target-cadence after the last
/// input.
#[derive(Debug, Clone)]
pub struct WindowConfig {
    pub t_in: usize,
    pub t_out: usize,
    pub input_cadence_min: i32,
    pub target_cadence_min: i32,
    /// Window start stride, in native frames.
    pub stride_frames: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            t_in: 20,
            t_out: 45,
            input_cadence_min: 4,
            target_cadence_min: 8,
            stride_frames: 1,
        }
    }
}

impl WindowConfig {
    /// A miniature schedule matching [`ModelConfig::toy`]: 4 inputs and 6
    /// targets at the native 2-minute cadence.
    pub fn toy() -> Self {
        WindowConfig {
            t_in: 4,
            t_out: 6,
            input_cadence_min: 2,
            target_cadence_min: 2,
            stride_frames: 4,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 || self.stride_frames == 0 {
            return Err(DataError::Config(
                "window frame counts and stride must be positive".into(),
            ));
        }
        if self.input_cadence_min <= 0 || self.target_cadence_min <= 0 {
            return Err(DataError::Config("window cadences must be positive".into()));
        }
        Ok(())
    }

    /// Minute offsets of the window's frames relative to its start: inputs
    /// first, then targets.
    fn schedule(&self) -> (Vec<i32>, Vec<i32>) {
        let inputs: Vec<i32> = (0..self.t_in)
            .map(|i| i as i32 * self.input_cadence_min)
            .collect();
        let last_in = *inputs.last().unwrap();
        let targets: Vec<i32> = (1..=self.t_out)
            .map(|j| last_in + j as i32 * self.target_cadence_min)
            .collect();
        (inputs, targets)
    }
}

/// One training/evaluation example in the dBZ domain: `[T_in, H, W]` inputs
/// and `[T_out, H, W]` targets at the window's cadences, plus the conditioning
/// frames once a surrogate has been attached.
#[derive(Debug, Clone)]
pub struct DatasetWindow {
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    /// `[K, 1, H, W]` conditioning frames in dBZ; filled in by the caller
    /// (see `make_hrrr_surrogate`), absent until then.
    pub hrrr: Option<Tensor<f32>>,
    pub input_minutes: Vec<i32>,
    pub target_minutes: Vec<i32>,
}

/// Cut sliding windows out of a sequence. A window is emitted for every
/// start frame (stepping by `stride_frames`) whose full minute schedule is
/// present in the sequence; a sequence too short for one window yields an
/// empty list.
pub fn window_dataset(seq: &RadarSequence, config: &WindowConfig) -> Result<Vec<DatasetWindow>> {
    config.validate()?;
    let offsets = seq.minute_offsets();
    let (in_sched, out_sched) = config.schedule();
    let side = seq.side();
    let hw = side * side;

    let index_of = |minute: i32| offsets.binary_search(&minute).ok();

    let mut windows = Vec::new();
    let mut start = 0usize;
    while start < offsets.len() {
        let base = offsets[start];
        let in_idx: Option<Vec<usize>> =
            in_sched.iter().map(|m| index_of(base + m)).collect();
        let out_idx: Option<Vec<usize>> =
            out_sched.iter().map(|m| index_of(base + m)).collect();
        if let (Some(in_idx), Some(out_idx)) = (in_idx, out_idx) {
            let gather = |idx: &[usize]| {
                let mut data = Vec::with_capacity(idx.len() * hw);
                for &i in idx {
                    data.extend_from_slice(&seq.frames().data()[i * hw..(i + 1) * hw]);
                }
                Tensor::new(vec![idx.len(), side, side], data)
            };
            windows.push(DatasetWindow {
                input: gather(&in_idx),
                target: gather(&out_idx),
                hrrr: None,
                input_minutes: in_sched.iter().map(|m| base + m).collect(),
                target_minutes: out_sched.iter().map(|m| base + m).collect(),
            });
        }
        start += config.stride_frames;
    }
    Ok(windows)
}

/// Keep the central `size`×`size` patch of every frame in a `[T, H, W]`
/// stack.
pub fn center_crop(frames: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (t, h, w) = match frames.shape() {
        [t, h, w] => (*t, *h, *w),
        other => {
            return Err(DataError::Config(format!(
                "center_crop input must be [T,H,W], got {other:?}"
            )))
        }
    };
    if size == 0 || size > h || size > w {
        return Err(DataError::Config(format!(
            "crop size {size} outside frame {h}x{w}"
        )));
    }
    let y0 = (h - size) / 2;
    let x0 = (w - size) / 2;
    let mut data = Vec::with_capacity(t * size * size);
    for ti in 0..t {
        for y in y0..y0 + size {
            let row = ti * h * w + y * w + x0;
            data.extend_from_slice(&frames.data()[row..row + size]);
        }
    }
    Ok(Tensor::new(vec![t, size, size], data))
}

impl DatasetWindow {
    /// Convert to a normalized training sample for `model_config`: inputs
    /// stay at the full viewport, targets are center-cropped to the model's
    /// output size, and everything maps from dBZ to `[0,1]` by clamping at
    /// the normalization ceiling.
    pub fn to_sample(&self, model_config: &ModelConfig) -> Result<TrainSample<f32>> {
        let side = model_config.input_side();
        let (t_in, h, w) = match self.input.shape() {
            [t, h, w] => (*t, *h, *w),
            other => {
                return Err(DataError::Config(format!(
                    "window input must be [T,H,W], got {other:?}"
                )))
            }
        };
        if h != side || w != side {
            return Err(DataError::Config(format!(
                "window frames are {h}x{w}, model expects {side}x{side}"
            )));
        }
        if t_in != model_config.t_in || self.target.shape()[0] != model_config.t_out {
            return Err(DataError::Config(format!(
                "window has {t_in}/{} frames, model expects {}/{}",
                self.target.shape()[0],
                model_config.t_in,
                model_config.t_out
            )));
        }

        let normalize = |t: &Tensor<f32>, shape: Vec<usize>| {
            let data = t
                .data()
                .iter()
                .map(|v| (f64::from(*v).clamp(0.0, DBZ_RANGE) / DBZ_RANGE) as f32)
                .collect();
            Tensor::new(shape, data)
        };

        let frames = normalize(&self.input, vec![1, t_in, 1, side, side]);
        let size = model_config.target_size;
        let cropped = center_crop(&self.target, size)?;
        let target = normalize(&cropped, vec![1, model_config.t_out, 1, size, size]);
        let hrrr = match (&self.hrrr, model_config.use_hrrr) {
            (Some(h), true) => {
                let (k, hh, hw_) = match h.shape() {
                    [k, c, hh, hw_] if *c == 1 => (*k, *hh, *hw_),
                    other => {
                        return Err(DataError::Config(format!(
                            "conditioning frames must be [K,1,H,W], got {other:?}"
                        )))
                    }
                };
                if k != model_config.hrrr_frames || hh != size || hw_ != size {
                    return Err(DataError::Config(format!(
                        "conditioning frames {:?}, model expects [{},1,{size},{size}]",
                        h.shape(),
                        model_config.hrrr_frames
                    )));
                }
                Some(normalize(h, vec![1, k, 1, size, size]))
            }
            (_, false) => None,
            (None, true) => {
                return Err(DataError::Config(
                    "model conditions on guidance frames but the window has none".into(),
                ))
            }
        };
        Ok(TrainSample {
            frames,
            hrrr,
            target,
        })
    }
}
