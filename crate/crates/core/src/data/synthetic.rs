//! Synthetic reflectivity sequences and the degraded-forecast surrogate.
//!
//! The generator sums advected anisotropic Gaussian cells over a square
//! domain: each cell drifts in a shared velocity field (uniform component
//! plus solid-body rotation about the domain center), grows or decays
//! exponentially, and the field gains clipped per-pixel noise. It is a
//! desk-scale stand-in for sampling a radar archive — cheap, deterministic,
//! and with enough coherent motion for extrapolation methods to latch onto.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, GridMeta, RadarSequence, Result, MAX_DBZ};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    /// Domain side, pixels.
    pub side: usize,
    /// Frame count.
    pub frames: usize,
    /// Native cadence between frames, minutes.
    pub cadence_minutes: i32,
    /// Number of reflectivity cells.
    pub cells: usize,
    /// Per-cell peak amplitude range, dBZ.
    pub amplitude_dbz: (f64, f64),
    /// Per-axis Gaussian width range, pixels.
    pub sigma_px: (f64, f64),
    /// Uniform advection component, pixels per frame.
    pub velocity: (f64, f64),
    /// Solid-body rotation about the domain center, radians per frame.
    pub rotation: f64,
    /// Per-frame exponential growth-rate range (negative = decay).
    pub growth: (f64, f64),
    /// Amplitude of the additive per-pixel noise, dBZ.
    pub noise_dbz: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            side: 80,
            frames: 221,
            cadence_minutes: 2,
            cells: 6,
            amplitude_dbz: (20.0, 45.0),
            sigma_px: (3.0, 10.0),
            velocity: (0.6, 0.25),
            rotation: 0.002,
            growth: (-0.01, 0.01),
            noise_dbz: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.frames == 0 {
            return Err(DataError::Config(
                "domain side and frame count must be positive".into(),
            ));
        }
        if self.cadence_minutes <= 0 {
            return Err(DataError::Config("cadence must be positive".into()));
        }
        if self.sigma_px.0 <= 0.0 || self.sigma_px.1 < self.sigma_px.0 {
            return Err(DataError::Config(
                "cell widths must be positive with min ≤ max".into(),
            ));
        }
        if self.noise_dbz < 0.0 {
            return Err(DataError::Config("noise level must be non-negative".into()));
        }
        Ok(())
    }
}

struct Cell {
    x: f64,
    y: f64,
    amp: f64,
    sx: f64,
    sy: f64,
    rate: f64,
}

pub fn gen_synthetic_sequence(config: &SyntheticConfig) -> Result<RadarSequence> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let side = config.side;
    let range = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    };

    let mut cells: Vec<Cell> = (0..config.cells)
        .map(|_| Cell {
            x: range(&mut rng, (0.2 * side as f64, 0.8 * side as f64)),
            y: range(&mut rng, (0.2 * side as f64, 0.8 * side as f64)),
            amp: range(&mut rng, config.amplitude_dbz),
            sx: range(&mut rng, config.sigma_px),
            sy: range(&mut rng, config.sigma_px),
            rate: range(&mut rng, config.growth),
        })
        .collect();

    let mid = (side as f64 - 1.0) / 2.0;
    let mut data = vec![0f32; config.frames * side * side];
    for t in 0..config.frames {
        let frame = &mut data[t * side * side..(t + 1) * side * side];
        for cell in &cells {
            let amp = cell.amp * (cell.rate * t as f64).exp();
            if amp < 1e-3 {
                continue;
            }
            // evaluate only inside a ±4σ bounding box
            let reach_x = 4.0 * cell.sx;
            let reach_y = 4.0 * cell.sy;
            let x0 = ((cell.x - reach_x).floor().max(0.0)) as usize;
            let x1 = ((cell.x + reach_x).ceil().min(side as f64 - 1.0)) as usize;
            let y0 = ((cell.y - reach_y).floor().max(0.0)) as usize;
            let y1 = ((cell.y + reach_y).ceil().min(side as f64 - 1.0)) as usize;
            if x0 > x1 || y0 > y1 {
                continue;
            }
            let inv2sx = 1.0 / (2.0 * cell.sx * cell.sx);
            let inv2sy = 1.0 / (2.0 * cell.sy * cell.sy);
            for y in y0..=y1 {
                let dy = y as f64 - cell.y;
                let ey = dy * dy * inv2sy;
                for x in x0..=x1 {
                    let dx = x as f64 - cell.x;
                    let v = amp * (-(dx * dx * inv2sx + ey)).exp();
                    frame[y * side + x] += v as f32;
                }
            }
        }
        if config.noise_dbz > 0.0 {
            for v in frame.iter_mut() {
                *v += rng.gen_range(-config.noise_dbz..config.noise_dbz) as f32;
            }
        }
        for v in frame.iter_mut() {
            *v = v.clamp(0.0, MAX_DBZ as f32);
        }

        // advect the cell centers for the next frame
        for cell in cells.iter_mut() {
            let rx = cell.x - mid;
            let ry = cell.y - mid;
            cell.x += config.velocity.0 - config.rotation * ry;
            cell.y += config.velocity.1 + config.rotation * rx;
        }
    }

    let offsets = (0..config.frames)
        .map(|t| t as i32 * config.cadence_minutes)
        .collect();
    RadarSequence::new(
        Tensor::new(vec![config.frames, side, side], data),
        offsets,
        GridMeta::default(),
        format!("synthetic-{}", config.seed),
    )
}

/// Degradation knobs for the conditioning surrogate. The effective blur,
/// displacement, and noise all scale with `1 − quality`.
#[derive(Debug, Clone)]
pub struct SurrogateParams {
    /// Box-blur passes at full degradation.
    pub blur_passes: usize,
    /// Maximum random displacement, pixels, at full degradation.
    pub max_shift_px: f64,
    /// Maximum additive noise amplitude, dBZ, at full degradation.
    pub max_noise_dbz: f64,
}

impl Default for SurrogateParams {
    fn default() -> Self {
        SurrogateParams {
            blur_passes: 2,
            max_shift_px: 3.0,
            max_noise_dbz: 5.0,
        }
    }
}

/// Build `k` conditioning frames from the true targets: subsample at a coarse
/// cadence, then degrade by blur, a random sub-pixel displacement, and noise,
/// all scaled by `1 − quality`. `quality = 1` returns the subsampled truth
/// exactly; the same seed always produces the same degradation directions, so
/// the error is monotone in quality.
///
/// Input is `[T_out, H, W]`, output `[k, 1, H, W]`, both in dBZ.
pub fn make_hrrr_surrogate(
    truth_targets: &Tensor<f32>,
    k: usize,
    quality: f64,
    seed: u64,
    params: &SurrogateParams,
) -> Result<Tensor<f32>> {
    let (t_out, h, w) = match truth_targets.shape() {
        [t, h, w] => (*t, *h, *w),
        other => {
            return Err(DataError::Config(format!(
                "surrogate input must be [T,H,W], got {other:?}"
            )))
        }
    };
    if k == 0 || k > t_out {
        return Err(DataError::Config(format!(
            "surrogate frame count {k} must be in 1..={t_out}"
        )));
    }
    if !(0.0..=1.0).contains(&quality) {
        return Err(DataError::Config(format!(
            "quality {quality} must lie in [0,1]"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 - quality;
    let hw = h * w;
    let mut out = Vec::with_capacity(k * hw);
    for j in 0..k {
        // even index spacing across the target span, endpoints included
        let idx = if k == 1 {
            0
        } else {
            ((j as f64) * (t_out as f64 - 1.0) / (k as f64 - 1.0)).round() as usize
        };
        let mut frame: Vec<f32> = truth_targets.data()[idx * hw..(idx + 1) * hw].to_vec();

        // blur: blend toward the box-blurred frame by the degradation factor
        if params.blur_passes > 0 && s > 0.0 {
            let mut blurred = frame.clone();
            for _ in 0..params.blur_passes {
                blurred = box_blur(&blurred, h, w);
            }
            for (f, b) in frame.iter_mut().zip(&blurred) {
                *f = ((1.0 - s) * f64::from(*f) + s * f64::from(*b)) as f32;
            }
        }

        // seeded displacement direction; magnitude scales with degradation.
        // Draw even when the shift ends up zero so the noise stream doesn't
        // depend on quality.
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let mag = s * params.max_shift_px;
        if mag > 0.0 {
            frame = shift_bilinear(&frame, h, w, mag * angle.cos(), mag * angle.sin());
        }

        for v in frame.iter_mut() {
            let noise = rng.gen_range(-1.0..1.0) * s * params.max_noise_dbz;
            *v = (f64::from(*v) + noise).clamp(0.0, MAX_DBZ) as f32;
        }
        out.extend_from_slice(&frame);
    }
    Ok(Tensor::new(vec![k, 1, h, w], out))
}

/// 3×3 box blur with edge clamping.
fn box_blur(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut dst = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += f64::from(src[yy * w + xx]);
                }
            }
            dst[y * w + x] = (acc / 9.0) as f32;
        }
    }
    dst
}

/// Sample `src` at (x−dx, y−dy) with bilinear interpolation, zero outside.
fn shift_bilinear(src: &[f32], h: usize, w: usize, dx: f64, dy: f64) -> Vec<f32> {
    let mut dst = vec![0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let sx = x as f64 - dx;
            let sy = y as f64 - dy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let mut acc = 0.0f64;
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let yy = y0 as i64 + oy;
                    let xx = x0 as i64 + ox;
                    if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                        acc += wy * wx * f64::from(src[yy as usize * w + xx as usize]);
                    }
                }
            }
            dst[y * w + x] = acc as f32;
        }
    }
    dst
}
