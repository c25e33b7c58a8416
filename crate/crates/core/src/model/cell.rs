//! The ConvLSTM cell shared by encoder and forecaster layers.

use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor};

use super::{CellParams, Result};

/// Recurrent state of one layer. `h` and `c` share shape `[B,Ch,H,W]`.
#[derive(Debug, Clone)]
pub struct LayerState<T: Scalar = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> LayerState<T> {
    pub fn zeros(batch: usize, channels: usize, h: usize, w: usize) -> Self {
        LayerState {
            h: Tensor::zeros([batch, channels, h, w]),
            c: Tensor::zeros([batch, channels, h, w]),
        }
    }
}

/// One ConvLSTM step.
///
/// Input and previous hidden state are concatenated and pushed through the
/// fused four-gate convolution (stride 1, same padding); the gate tensor is
/// group-normalized before the nonlinearities. Gate blocks along the channel
/// axis are, in order: input `i`, forget `f`, candidate `g`, output `o`:
///
/// ```text
/// c' = σ(f)∘c + σ(i)∘tanh(g)
/// h' = σ(o)∘tanh(c')
/// ```
pub fn convlstm_cell_step<T: Scalar>(
    x: &Tensor<T>,
    state: &LayerState<T>,
    params: &CellParams<T>,
    gn_groups: usize,
    gn_eps: f64,
) -> Result<LayerState<T>> {
    let k = params.weight.shape()[2];
    let xh = ops::concat_channels(&[x, &state.h])?;
    let gates = crate::tensor::conv::conv2d(&xh, &params.weight, &params.bias, 1, k / 2)?;
    let gates = crate::tensor::conv::group_norm(
        &gates,
        gn_groups,
        &params.gn_weight,
        &params.gn_bias,
        gn_eps,
    )?;

    let ch = gates.shape()[1] / 4;
    let i = ops::sigmoid(&ops::slice_channels(&gates, 0, ch)?);
    let f = ops::sigmoid(&ops::slice_channels(&gates, ch, ch)?);
    let g = ops::tanh(&ops::slice_channels(&gates, 2 * ch, ch)?);
    let o = ops::sigmoid(&ops::slice_channels(&gates, 3 * ch, ch)?);

    let c_new = ops::add(&ops::mul(&f, &state.c)?, &ops::mul(&i, &g)?)?;
    let h_new = ops::mul(&o, &ops::tanh(&c_new))?;
    Ok(LayerState { h: h_new, c: c_new })
}
