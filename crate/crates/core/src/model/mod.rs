//! The encoder-forecaster ConvLSTM nowcasting network.
//!
//! Three stacked layers, each an input convolution plus a ConvLSTM cell. The
//! encoder walks the input frames top-down through down-convolutions; a
//! learned weighting over all encoder hidden states initializes the
//! forecaster, which rolls the horizon out frame by frame through
//! up-convolutions and a small prediction head. An optional conditioning
//! branch injects coarse numerical-weather-model rasters into the deepest
//! forecaster cell. Reflectivity enters and leaves the network normalized to
//! [0,1] (dBZ / 70, clamped).

use thiserror::Error;

use crate::tensor::{Scalar, Tensor, TensorError};

mod cell;
mod checkpoint;
mod net;

pub use cell::{convlstm_cell_step, LayerState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{bridge_hidden, encode, forecast, forward, hrrr_encode, lv_stack, lv_unstack};

/// Reflectivity ceiling used for normalization: dBZ in [0, DBZ_RANGE] maps
/// onto [0, 1]. Also the `data_range` the image-quality metrics assume.
pub const DBZ_RANGE: f64 = 70.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model config: {0}")]
    Config(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {pos}: {detail}")]
    Format { pos: u64, detail: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Geometry of one encoder/forecaster layer pair.
///
/// `down_*` is the encoder's input convolution, `up_*` the forecaster's
/// output transposed convolution; `hidden` is the ConvLSTM state width and
/// `cell_kernel` its (odd, same-padding) gate kernel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub down_kernel: usize,
    pub down_stride: usize,
    pub down_padding: usize,
    pub down_out: usize,
    pub hidden: usize,
    pub cell_kernel: usize,
    pub up_kernel: usize,
    pub up_stride: usize,
    pub up_padding: usize,
    pub up_out: usize,
}

/// Full network configuration. [`ModelConfig::default`] is the full-size
/// model; [`ModelConfig::toy`] is a miniature with the same topology for
/// tests and smoke runs.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input frames consumed (T_i).
    pub t_in: usize,
    /// Forecast frames produced (T_o).
    pub t_out: usize,
    /// Viewport segmentation factor F: the input raster covers F× the target
    /// square per side and is tiled into F² channels.
    pub lv_factor: usize,
    /// Side of the (square) forecast raster.
    pub target_size: usize,
    pub layers: Vec<LayerSpec>,
    /// Channel width between the two head convolutions.
    pub head_mid: usize,
    pub group_norm_groups: usize,
    pub group_norm_eps: f64,
    pub leaky_slope: f64,
    /// Feed the F²-channel tiled viewport instead of a single-channel raster.
    pub use_lv: bool,
    /// Enable the conditioning branch (and its parameters).
    pub use_hrrr: bool,
    /// Conditioning frames supplied per window (K), interpolated to T_o.
    pub hrrr_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_in: 20,
            t_out: 45,
            lv_factor: 5,
            target_size: 256,
            layers: vec![
                LayerSpec {
                    down_kernel: 6,
                    down_stride: 3,
                    down_padding: 0,
                    down_out: 16,
                    hidden: 64,
                    cell_kernel: 3,
                    up_kernel: 7,
                    up_stride: 3,
                    up_padding: 0,
                    up_out: 16,
                },
                LayerSpec {
                    down_kernel: 5,
                    down_stride: 3,
                    down_padding: 1,
                    down_out: 192,
                    hidden: 192,
                    cell_kernel: 3,
                    up_kernel: 5,
                    up_stride: 3,
                    up_padding: 1,
                    up_out: 64,
                },
                LayerSpec {
                    down_kernel: 3,
                    down_stride: 2,
                    down_padding: 1,
                    down_out: 192,
                    hidden: 192,
                    cell_kernel: 3,
                    up_kernel: 4,
                    up_stride: 2,
                    up_padding: 1,
                    up_out: 192,
                },
            ],
            head_mid: 16,
            group_norm_groups: 4,
            group_norm_eps: 1e-5,
            leaky_slope: 0.2,
            use_lv: true,
            use_hrrr: true,
            hrrr_frames: 7,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration with the full topology: 4 input frames, 6
    /// output frames, 5×5 viewport tiling onto a 16-pixel target square.
    pub fn toy() -> Self {
        ModelConfig {
            t_in: 4,
            t_out: 6,
            lv_factor: 5,
            target_size: 16,
            layers: vec![
                LayerSpec {
                    down_kernel: 4,
                    down_stride: 2,
                    down_padding: 1,
                    down_out: 8,
                    hidden: 8,
                    cell_kernel: 3,
                    up_kernel: 4,
                    up_stride: 2,
                    up_padding: 1,
                    up_out: 6,
                },
                LayerSpec {
                    down_kernel: 4,
                    down_stride: 2,
                    down_padding: 1,
                    down_out: 10,
                    hidden: 10,
                    cell_kernel: 3,
                    up_kernel: 4,
                    up_stride: 2,
                    up_padding: 1,
                    up_out: 8,
                },
                LayerSpec {
                    down_kernel: 4,
                    down_stride: 2,
                    down_padding: 1,
                    down_out: 12,
                    hidden: 12,
                    cell_kernel: 3,
                    up_kernel: 4,
                    up_stride: 2,
                    up_padding: 1,
                    up_out: 10,
                },
            ],
            head_mid: 6,
            group_norm_groups: 4,
            group_norm_eps: 1e-5,
            leaky_slope: 0.2,
            use_lv: true,
            use_hrrr: true,
            hrrr_frames: 3,
        }
    }

    /// Side length of the raw input raster.
    pub fn input_side(&self) -> usize {
        if self.use_lv {
            self.lv_factor * self.target_size
        } else {
            self.target_size
        }
    }

    /// Channel count the first encoder convolution sees.
    pub fn input_channels(&self) -> usize {
        if self.use_lv {
            self.lv_factor * self.lv_factor
        } else {
            1
        }
    }

    /// Channel width of the conditioning tensor entering the deepest
    /// forecaster cell (also used for the zero placeholder when the
    /// conditioning branch is off).
    pub fn conditioning_channels(&self) -> usize {
        self.layers.last().map(|l| l.down_out).unwrap_or(0)
    }

    /// Input channel width of each forecaster cell: the deepest layer takes
    /// the conditioning tensor, every other layer the up-convolved features
    /// of the layer above it.
    pub fn forecaster_cell_in(&self, layer: usize) -> usize {
        if layer + 1 == self.layers.len() {
            self.conditioning_channels()
        } else {
            self.layers[layer + 1].up_out
        }
    }

    /// Encoder spatial sizes per layer, outermost first.
    pub fn layer_sizes(&self) -> Result<Vec<usize>> {
        let mut sizes = Vec::with_capacity(self.layers.len());
        let mut s = self.target_size;
        for (i, l) in self.layers.iter().enumerate() {
            if l.down_kernel > s + 2 * l.down_padding || l.down_stride == 0 {
                return Err(ModelError::Config(format!(
                    "layer {i}: down conv {k}x{k}/s{st} does not fit a {s}-pixel input",
                    k = l.down_kernel,
                    st = l.down_stride
                )));
            }
            let next = crate::tensor::conv::conv_out_size(s, l.down_kernel, l.down_stride, l.down_padding);
            if next >= s || next == 0 {
                return Err(ModelError::Config(format!(
                    "layer {i}: down conv must shrink the raster, got {s} -> {next}"
                )));
            }
            sizes.push(next);
            s = next;
        }
        Ok(sizes)
    }

    /// Validate the whole geometry: strictly decreasing encoder sizes, an
    /// exactly inverting forecaster chain, and well-formed cell/norm widths.
    pub fn validate(&self) -> Result<()> {
        if self.t_in == 0 || self.t_out == 0 {
            return Err(ModelError::Config("t_in and t_out must be >= 1".into()));
        }
        if self.lv_factor == 0 || self.target_size == 0 {
            return Err(ModelError::Config("lv_factor and target_size must be >= 1".into()));
        }
        if self.layers.is_empty() {
            return Err(ModelError::Config("at least one layer required".into()));
        }
        if self.head_mid == 0 {
            return Err(ModelError::Config("head_mid must be >= 1".into()));
        }
        if !(self.group_norm_eps > 0.0) {
            return Err(ModelError::Config("group_norm_eps must be positive".into()));
        }
        let sizes = self.layer_sizes()?;
        // the forecaster must walk the size chain back exactly
        for (i, l) in self.layers.iter().enumerate().rev() {
            let from = sizes[i];
            let to = if i == 0 { self.target_size } else { sizes[i - 1] };
            if l.up_kernel + (from - 1) * l.up_stride <= 2 * l.up_padding {
                return Err(ModelError::Config(format!(
                    "layer {i}: up conv padding swallows the output"
                )));
            }
            let got = crate::tensor::conv::conv_transpose_out_size(
                from,
                l.up_kernel,
                l.up_stride,
                l.up_padding,
            );
            if got != to {
                return Err(ModelError::Config(format!(
                    "layer {i}: up conv maps {from} -> {got}, expected {to}"
                )));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.hidden == 0 || l.down_out == 0 || l.up_out == 0 {
                return Err(ModelError::Config(format!("layer {i}: zero channel width")));
            }
            if l.cell_kernel % 2 == 0 {
                return Err(ModelError::Config(format!(
                    "layer {i}: cell kernel must be odd for same-size gates"
                )));
            }
            let gates = 4 * l.hidden;
            if self.group_norm_groups == 0 || gates % self.group_norm_groups != 0 {
                return Err(ModelError::Config(format!(
                    "layer {i}: {gates} gate channels not divisible into {} groups",
                    self.group_norm_groups
                )));
            }
        }
        if self.use_hrrr && self.hrrr_frames < 2 {
            return Err(ModelError::Config(
                "conditioning needs at least 2 frames to interpolate".into(),
            ));
        }
        Ok(())
    }
}

/// Weight + bias of one convolution.
#[derive(Debug, Clone)]
pub struct ConvParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Parameters of one ConvLSTM cell: the fused four-gate convolution and the
/// group-norm affine applied to its output.
#[derive(Debug, Clone)]
pub struct CellParams<T: Scalar = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gn_weight: Tensor<T>,
    pub gn_bias: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams<T: Scalar = f32> {
    pub down: ConvParams<T>,
    pub cell: CellParams<T>,
}

#[derive(Debug, Clone)]
pub struct ForecasterLayerParams<T: Scalar = f32> {
    pub cell: CellParams<T>,
    pub up: ConvParams<T>,
}

/// All trainable arrays of the network. Layer vectors are indexed outermost
/// (finest raster) first; the forecaster runs them deepest-first at inference.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Scalar = f32> {
    /// Shared per-time weighting of encoder hidden states.
    pub bridge_w: Tensor<T>,
    pub encoder: Vec<EncoderLayerParams<T>>,
    /// Conditioning down-conv stack; empty when the branch is disabled.
    pub hrrr: Vec<ConvParams<T>>,
    pub forecaster: Vec<ForecasterLayerParams<T>>,
    pub head0: ConvParams<T>,
    pub head2: ConvParams<T>,
}

/// Expected (name, shape) of every parameter under `config`, in checkpoint
/// order. The names follow the architecture-table row labels.
pub fn parameter_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut m = Vec::new();
    m.push(("hidden-state-weights".to_string(), vec![config.t_in]));
    let mut in_ch = config.input_channels();
    for (i, l) in config.layers.iter().enumerate() {
        let k = l.down_kernel;
        m.push((format!("L{i}-encoder-downsconv-weight"), vec![l.down_out, in_ch, k, k]));
        m.push((format!("L{i}-encoder-downsconv-bias"), vec![l.down_out]));
        let ck = l.cell_kernel;
        m.push((
            format!("L{i}-encoder-convlstmcell-weight"),
            vec![4 * l.hidden, l.down_out + l.hidden, ck, ck],
        ));
        m.push((format!("L{i}-encoder-convlstmcell-bias"), vec![4 * l.hidden]));
        m.push((format!("L{i}-encoder-groupnorm-weight"), vec![4 * l.hidden]));
        m.push((format!("L{i}-encoder-groupnorm-bias"), vec![4 * l.hidden]));
        in_ch = l.hidden;
    }
    if config.use_hrrr {
        let mut in_ch = 1;
        for (i, l) in config.layers.iter().enumerate() {
            let k = l.down_kernel;
            m.push((
                format!("HRRR-conditioning-downconv-{i}-weight"),
                vec![l.down_out, in_ch, k, k],
            ));
            m.push((format!("HRRR-conditioning-downconv-{i}-bias"), vec![l.down_out]));
            in_ch = l.down_out;
        }
    }
    for (i, l) in config.layers.iter().enumerate().rev() {
        let cx = config.forecaster_cell_in(i);
        let ck = l.cell_kernel;
        m.push((
            format!("L{i}-forecaster-convlstmcell-weight"),
            vec![4 * l.hidden, cx + l.hidden, ck, ck],
        ));
        m.push((format!("L{i}-forecaster-convlstmcell-bias"), vec![4 * l.hidden]));
        m.push((format!("L{i}-forecaster-groupnorm-weight"), vec![4 * l.hidden]));
        m.push((format!("L{i}-forecaster-groupnorm-bias"), vec![4 * l.hidden]));
        let uk = l.up_kernel;
        m.push((format!("L{i}-forecaster-upconv-weight"), vec![l.hidden, l.up_out, uk, uk]));
        m.push((format!("L{i}-forecaster-upconv-bias"), vec![l.up_out]));
    }
    let head_in = config.layers[0].up_out;
    m.push(("final-conv.0.weight".to_string(), vec![config.head_mid, head_in, 3, 3]));
    m.push(("final-conv.0.bias".to_string(), vec![config.head_mid]));
    m.push(("final-conv.2.weight".to_string(), vec![1, config.head_mid, 1, 1]));
    m.push(("final-conv.2.bias".to_string(), vec![1]));
    m
}

impl<T: Scalar> ModelParams<T> {
    /// Every parameter with its checkpoint name, in manifest order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
    let mut v: Vec<(String, &Tensor<T>)> = Vec::new();
        v.push(("hidden-state-weights".to_string(), &self.bridge_w));
        for (i, l) in self.encoder.iter().enumerate() {
            v.push((format!("L{i}-encoder-downsconv-weight"), &l.down.weight));
            v.push((format!("L{i}-encoder-downsconv-bias"), &l.down.bias));
            v.push((format!("L{i}-encoder-convlstmcell-weight"), &l.cell.weight));
            v.push((format!("L{i}-encoder-convlstmcell-bias"), &l.cell.bias));
            v.push((format!("L{i}-encoder-groupnorm-weight"), &l.cell.gn_weight));
            v.push((format!("L{i}-encoder-groupnorm-bias"), &l.cell.gn_bias));
        }
        for (i, c) in self.hrrr.iter().enumerate() {
            v.push((format!("HRRR-conditioning-downconv-{i}-weight"), &c.weight));
            v.push((format!("HRRR-conditioning-downconv-{i}-bias"), &c.bias));
        }
        for (i, l) in self.forecaster.iter().enumerate().rev() {
            v.push((format!("L{i}-forecaster-convlstmcell-weight"), &l.cell.weight));
            v.push((format!("L{i}-forecaster-convlstmcell-bias"), &l.cell.bias));
            v.push((format!("L{i}-forecaster-groupnorm-weight"), &l.cell.gn_weight));
            v.push((format!("L{i}-forecaster-groupnorm-bias"), &l.cell.gn_bias));
            v.push((format!("L{i}-forecaster-upconv-weight"), &l.up.weight));
            v.push((format!("L{i}-forecaster-upconv-bias"), &l.up.bias));
        }
        v.push(("final-conv.0.weight".to_string(), &self.head0.weight));
        v.push(("final-conv.0.bias".to_string(), &self.head0.bias));
        v.push(("final-conv.2.weight".to_string(), &self.head2.weight));
        v.push(("final-conv.2.bias".to_string(), &self.head2.bias));
        v
    }

    /// Visit every parameter mutably, in manifest order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&mut Tensor<T>)) {
        f(&mut self.bridge_w);
        for l in &mut self.encoder {
            f(&mut l.down.weight);
            f(&mut l.down.bias);
            f(&mut l.cell.weight);
            f(&mut l.cell.bias);
            f(&mut l.cell.gn_weight);
            f(&mut l.cell.gn_bias);
        }
        for c in &mut self.hrrr {
            f(&mut c.weight);
            f(&mut c.bias);
        }
        for l in self.forecaster.iter_mut().rev() {
            f(&mut l.cell.weight);
            f(&mut l.cell.bias);
            f(&mut l.cell.gn_weight);
            f(&mut l.cell.gn_bias);
            f(&mut l.up.weight);
            f(&mut l.up.bias);
        }
        f(&mut self.head0.weight);
        f(&mut self.head0.bias);
        f(&mut self.head2.weight);
        f(&mut self.head2.bias);
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Handle-clone of every parameter attached to `tape`, sharing storage
    /// with `self` so gradients land where the optimizer can see them.
    pub fn tracked(&self, tape: &crate::tensor::Tape<T>) -> ModelParams<T> {
        let track_conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.tracked(tape),
            bias: c.bias.tracked(tape),
        };
        let track_cell = |c: &CellParams<T>| CellParams {
            weight: c.weight.tracked(tape),
            bias: c.bias.tracked(tape),
            gn_weight: c.gn_weight.tracked(tape),
            gn_bias: c.gn_bias.tracked(tape),
        };
        ModelParams {
            bridge_w: self.bridge_w.tracked(tape),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    down: track_conv(&l.down),
                    cell: track_cell(&l.cell),
                })
                .collect(),
            hrrr: self.hrrr.iter().map(track_conv).collect(),
            forecaster: self
                .forecaster
                .iter()
                .map(|l| ForecasterLayerParams {
                    cell: track_cell(&l.cell),
                    up: track_conv(&l.up),
                })
                .collect(),
            head0: track_conv(&self.head0),
            head2: track_conv(&self.head2),
        }
    }

    /// Elementwise cast of every parameter.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let cast_conv = |c: &ConvParams<T>| ConvParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        let cast_cell = |c: &CellParams<T>| CellParams {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            gn_weight: c.gn_weight.cast(),
            gn_bias: c.gn_bias.cast(),
        };
        ModelParams {
            bridge_w: self.bridge_w.cast(),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerParams {
                    down: cast_conv(&l.down),
                    cell: cast_cell(&l.cell),
                })
                .collect(),
            hrrr: self.hrrr.iter().map(cast_conv).collect(),
            forecaster: self
                .forecaster
                .iter()
                .map(|l| ForecasterLayerParams {
                    cell: cast_cell(&l.cell),
                    up: cast_conv(&l.up),
                })
                .collect(),
            head0: cast_conv(&self.head0),
            head2: cast_conv(&self.head2),
        }
    }
}

/// Deterministic parameter initialization: conv kernels uniform in
/// ±1/√fan_in, biases zero, norm affine at identity, and the hidden-state
/// weighting one-hot on the last time index (so an untrained bridge behaves
/// like a plain last-state encoder-forecaster).
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    use rand::{Rng, SeedableRng};
    config.validate()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // out_ch is passed explicitly: plain conv weights are [Cout,Cin,k,k] but
    // transposed-conv weights are [Cin,Cout,k,k]
    let mut conv_init = move |shape: Vec<usize>, fan_in: usize, out_ch: usize| -> ConvParams<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        ConvParams {
            weight: Tensor::new(shape, data),
            bias: Tensor::zeros([out_ch]),
        }
    };
    let cell_init = |conv: ConvParams<T>| -> CellParams<T> {
        let gates = conv.weight.shape()[0];
        CellParams {
            weight: conv.weight,
            bias: conv.bias,
            gn_weight: Tensor::ones([gates]),
            gn_bias: Tensor::zeros([gates]),
        }
    };

    let mut bridge = vec![T::zero(); config.t_in];
    bridge[config.t_in - 1] = T::one();

    let mut encoder = Vec::new();
    let mut in_ch = config.input_channels();
    for l in &config.layers {
        let k = l.down_kernel;
        let down = conv_init(vec![l.down_out, in_ch, k, k], in_ch * k * k, l.down_out);
        let ck = l.cell_kernel;
        let cin = l.down_out + l.hidden;
        let cell = cell_init(conv_init(vec![4 * l.hidden, cin, ck, ck], cin * ck * ck, 4 * l.hidden));
        encoder.push(EncoderLayerParams { down, cell });
        in_ch = l.hidden;
    }

    let mut hrrr = Vec::new();
    if config.use_hrrr {
        let mut in_ch = 1;
        for l in &config.layers {
            let k = l.down_kernel;
            hrrr.push(conv_init(vec![l.down_out, in_ch, k, k], in_ch * k * k, l.down_out));
            in_ch = l.down_out;
        }
    }

    // the architecture table (and the checkpoint) orders forecaster layers
    // deepest-first; initialization draws must follow it for reproducibility
    let mut forecaster_rev = Vec::new();
    for (i, l) in config.layers.iter().enumerate().rev() {
        let cx = config.forecaster_cell_in(i);
        let ck = l.cell_kernel;
        let cin = cx + l.hidden;
        let cell = cell_init(conv_init(vec![4 * l.hidden, cin, ck, ck], cin * ck * ck, 4 * l.hidden));
        let uk = l.up_kernel;
        let up = conv_init(vec![l.hidden, l.up_out, uk, uk], l.hidden * uk * uk, l.up_out);
        forecaster_rev.push(ForecasterLayerParams { cell, up });
    }
    forecaster_rev.reverse();

    let head_in = config.layers[0].up_out;
    let head0 = conv_init(vec![config.head_mid, head_in, 3, 3], head_in * 9, config.head_mid);
    let head2 = conv_init(vec![1, config.head_mid, 1, 1], config.head_mid, 1);

    Ok(ModelParams {
        bridge_w: Tensor::new(vec![config.t_in], bridge),
        encoder,
        hrrr,
        forecaster: forecaster_rev,
        head0,
        head2,
    })
}
