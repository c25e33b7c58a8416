//! Radar sequences on disk and in memory: synthetic generation, HRRR-style
//! surrogate conditioning, dataset windowing, and the NWRS container.

mod container;
mod synthetic;
mod window;

pub use container::{read_sequence, write_sequence};
pub use synthetic::{gen_synthetic_sequence, make_hrrr_surrogate, SurrogateParams, SyntheticConfig};
pub use window::{center_crop, window_dataset, DatasetWindow, WindowConfig};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid data config: {0}")]
    Config(String),
    #[error("malformed sequence file at byte {pos}: {detail}")]
    Format { pos: u64, detail: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<V> = std::result::Result<V, DataError>;

/// Maximum reflectivity the generator and container accept, the physical
/// hail ceiling.
pub const MAX_DBZ: f64 = 75.0;

/// Georeferencing stub for a sequence. Only the cell size is persisted in the
/// sequence container; the origin is runtime metadata and reads back as (0,0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMeta {
    pub origin_km: (f64, f64),
    pub cell_km: f64,
}

impl Default for GridMeta {
    fn default() -> Self {
        GridMeta {
            origin_km: (0.0, 0.0),
            cell_km: 1.0,
        }
    }
}

/// A reflectivity sequence: `[T, H, W]` frames in dBZ on a square grid, with
/// a strictly increasing minute offset per frame.
#[derive(Debug, Clone)]
pub struct RadarSequence {
    frames: Tensor<f32>,
    minute_offsets: Vec<i32>,
    pub grid_meta: GridMeta,
    pub id: String,
}

impl RadarSequence {
    /// Validating constructor: square frames, one strictly increasing minute
    /// offset per frame, all values finite and within `[0, MAX_DBZ]`.
    pub fn new(
        frames: Tensor<f32>,
        minute_offsets: Vec<i32>,
        grid_meta: GridMeta,
        id: String,
    ) -> Result<RadarSequence> {
        let (t, h, w) = match frames.shape() {
            [t, h, w] => (*t, *h, *w),
            other => {
                return Err(DataError::Config(format!(
                    "sequence frames must be [T,H,W], got {other:?}"
                )))
            }
        };
        if t == 0 {
            return Err(DataError::Config("sequence needs at least one frame".into()));
        }
        if h != w {
            return Err(DataError::Config(format!(
                "sequence grid must be square, got {h}x{w}"
            )));
        }
        if minute_offsets.len() != t {
            return Err(DataError::Config(format!(
                "expected {t} minute offsets, got {}",
                minute_offsets.len()
            )));
        }
        if minute_offsets.windows(2).any(|p| p[0] >= p[1]) {
            return Err(DataError::Config(
                "minute offsets must be strictly increasing".into(),
            ));
        }
        if let Some(v) = frames
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || f64::from(**v) > MAX_DBZ)
        {
            return Err(DataError::Config(format!(
                "reflectivity {v} outside [0, {MAX_DBZ}] dBZ"
            )));
        }
        Ok(RadarSequence {
            frames,
            minute_offsets,
            grid_meta,
            id,
        })
    }

    /// `[T, H, W]` reflectivity in dBZ.
    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn minute_offsets(&self) -> &[i32] {
        &self.minute_offsets
    }

    pub fn len(&self) -> usize {
        self.minute_offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty sequences
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[1]
    }

    /// One frame as `[H, W]`.
    pub fn frame(&self, t: usize) -> Tensor<f32> {
        let side = self.side();
        let hw = side * side;
        Tensor::new(
            vec![side, side],
            self.frames.data()[t * hw..(t + 1) * hw].to_vec(),
        )
    }
}
