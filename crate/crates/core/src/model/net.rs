//! Network assembly: viewport tiling, encoder, hidden-state bridge,
//! conditioning branch, forecaster, and the end-to-end forward pass.

use crate::tensor::conv::{conv2d, conv_transpose2d};
use crate::tensor::ops;
use crate::tensor::{Scalar, Tensor, TensorError};

use super::cell::{convlstm_cell_step, LayerState};
use super::{ModelConfig, ModelError, ModelParams, Result};

/// Tile a `[B,1,F·S,F·S]` raster into `[B,F²,S,S]`: tile (r,c) becomes
/// channel `r·F + c`. Lossless; [`lv_unstack`] inverts it exactly.
pub fn lv_stack<T: Scalar>(frame: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b0, c0, h0, w0) = match frame.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(TensorError::Shape {
                op: "lv_stack",
                detail: format!("expected [B,1,H,W], got {other:?}"),
            }
            .into())
        }
    };
    if c0 != 1 || h0 != w0 || factor == 0 || h0 % factor != 0 {
        return Err(TensorError::Config {
            op: "lv_stack",
            detail: format!("cannot tile [{b0},{c0},{h0},{w0}] by factor {factor}"),
        }
        .into());
    }
    let s = h0 / factor;
    let mut data = vec![T::zero(); frame.numel()];
    for b in 0..b0 {
        for r in 0..factor {
            for c in 0..factor {
                let ch = r * factor + c;
                for i in 0..s {
                    let src = (b * h0 + r * s + i) * w0 + c * s;
                    let dst = ((b * factor * factor + ch) * s + i) * s;
                    data[dst..dst + s].copy_from_slice(&frame.data()[src..src + s]);
                }
            }
        }
    }
    Ok(Tensor::new(vec![b0, factor * factor, s, s], data))
}

/// Inverse of [`lv_stack`]: reassemble `[B,F²,S,S]` into `[B,1,F·S,F·S]`.
pub fn lv_unstack<T: Scalar>(stacked: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (b0, c0, s, w0) = match stacked.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(TensorError::Shape {
                op: "lv_unstack",
                detail: format!("expected [B,F²,S,S], got {other:?}"),
            }
            .into())
        }
    };
    if factor == 0 || c0 != factor * factor || s != w0 {
        return Err(TensorError::Config {
            op: "lv_unstack",
            detail: format!("[{b0},{c0},{s},{w0}] is not a factor-{factor} tiling"),
        }
        .into());
    }
    let side = factor * s;
    let mut data = vec![T::zero(); stacked.numel()];
    for b in 0..b0 {
        for ch in 0..c0 {
            let (r, c) = (ch / factor, ch % factor);
            for i in 0..s {
                let src = ((b * c0 + ch) * s + i) * s;
                let dst = (b * side + r * s + i) * side + c * s;
                data[dst..dst + s].copy_from_slice(&stacked.data()[src..src + s]);
            }
        }
    }
    Ok(Tensor::new(vec![b0, 1, side, side], data))
}

/// Run the encoder over `frames: [B,T,Cin,S,S]`.
///
/// Per time step each layer applies its down-convolution (+ leaky ReLU) to
/// the layer below's hidden state and steps its cell. Returns the full
/// per-layer hidden-state history (`[B,T,Ch_l,H_l,W_l]` each) and the final
/// cell states.
pub fn encode<T: Scalar>(
    frames: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<(Vec<Tensor<T>>, Vec<LayerState<T>>)> {
    let (b0, t0) = match frames.shape() {
        [b, t, _, _, _] => (*b, *t),
        other => {
            return Err(TensorError::Shape {
                op: "encode",
                detail: format!("expected [B,T,C,S,S], got {other:?}"),
            }
            .into())
        }
    };
    let sizes = config.layer_sizes()?;
    let nl = config.layers.len();
    let mut states: Vec<LayerState<T>> = config
        .layers
        .iter()
        .zip(&sizes)
        .map(|(l, &s)| LayerState::zeros(b0, l.hidden, s, s))
        .collect();
    let mut history: Vec<Vec<Tensor<T>>> = vec![Vec::with_capacity(t0); nl];

    for t in 0..t0 {
        let mut inp = ops::index_time(frames, t)?;
        for l in 0..nl {
            let spec = &config.layers[l];
            let lp = &params.encoder[l];
            let d = conv2d(&inp, &lp.down.weight, &lp.down.bias, spec.down_stride, spec.down_padding)?;
            let d = ops::leaky_relu(&d, config.leaky_slope);
            let next = convlstm_cell_step(
                &d,
                &states[l],
                &lp.cell,
                config.group_norm_groups,
                config.group_norm_eps,
            )?;
            history[l].push(next.h.clone());
            inp = next.h.clone();
            states[l] = next;
        }
    }

    let stacks = history
        .into_iter()
        .map(|frames| {
            let refs: Vec<&Tensor<T>> = frames.iter().collect();
            ops::stack_time(&refs).map_err(ModelError::from)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stacks, states))
}

/// Collapse an encoder hidden-state history `[B,m,C,H,W]` into one state via
/// the shared trainable weighting `w: [m]`.
pub fn bridge_hidden<T: Scalar>(hidden_stack: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let sum = ops::temporal_weighted_sum(hidden_stack, w)?;
    let shape: Vec<usize> = {
        let s = sum.shape();
        vec![s[0], s[2], s[3], s[4]]
    };
    Ok(ops::reshape(&sum, shape)?)
}

/// Encode conditioning rasters `[B,K,1,S,S]` for the forecaster: linear
/// temporal interpolation to `t_out` frames, then the three-stage
/// down-convolution (+ leaky ReLU) stack applied per frame. Output is
/// `[B,t_out,C3,H3,W3]`, matching the deepest layer's raster.
pub fn hrrr_encode<T: Scalar>(
    hrrr_frames: &Tensor<T>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    match hrrr_frames.shape() {
        [_, _, 1, s1, s2] if *s1 == config.target_size && *s2 == config.target_size => {}
        other => {
            return Err(TensorError::Shape {
                op: "hrrr_encode",
                detail: format!(
                    "expected [B,K,1,{s},{s}], got {other:?}",
                    s = config.target_size
                ),
            }
            .into())
        }
    }
    let interp = ops::temporal_linear_interp(hrrr_frames, config.t_out)?;
    let mut encoded = Vec::with_capacity(config.t_out);
    for t in 0..config.t_out {
        let mut x = ops::index_time(&interp, t)?;
        for (stage, spec) in params.hrrr.iter().zip(&config.layers) {
            let y = conv2d(&x, &stage.weight, &stage.bias, spec.down_stride, spec.down_padding)?;
            x = ops::leaky_relu(&y, config.leaky_slope);
        }
        encoded.push(x);
    }
    let refs: Vec<&Tensor<T>> = encoded.iter().collect();
    Ok(ops::stack_time(&refs)?)
}

/// Roll the forecaster out for `t_out` steps from the bridged states.
///
/// Each step feeds the deepest cell its conditioning frame (zeros when the
/// branch is off), then cascades hidden states downward through the
/// up-convolutions; the outermost features pass through the two-convolution
/// head to produce that step's frame. Returns `[B,t_out,1,S,S]`.
pub fn forecast<T: Scalar>(
    bridged: &[LayerState<T>],
    conditioning: Option<&Tensor<T>>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let nl = config.layers.len();
    if bridged.len() != nl {
        return Err(ModelError::Config(format!(
            "forecast: {} states for {nl} layers",
            bridged.len()
        )));
    }
    let b0 = bridged[0].h.shape()[0];
    let sizes = config.layer_sizes()?;
    let deep = *sizes.last().unwrap();
    let c3 = config.conditioning_channels();
    if let Some(cond) = conditioning {
        let want = [b0, config.t_out, c3, deep, deep];
        if cond.shape() != want {
            return Err(TensorError::Shape {
                op: "forecast",
                detail: format!("conditioning {:?}, expected {want:?}", cond.shape()),
            }
            .into());
        }
    }

    let mut states = bridged.to_vec();
    let mut frames = Vec::with_capacity(config.t_out);
    for t in 0..config.t_out {
        let mut x = match conditioning {
            Some(cond) => ops::index_time(cond, t)?,
            None => Tensor::zeros([b0, c3, deep, deep]),
        };
        for l in (0..nl).rev() {
            let spec = &config.layers[l];
            let lp = &params.forecaster[l];
            let next = convlstm_cell_step(
                &x,
                &states[l],
                &lp.cell,
                config.group_norm_groups,
                config.group_norm_eps,
            )?;
            x = ops::leaky_relu(
                &conv_transpose2d(&next.h, &lp.up.weight, &lp.up.bias, spec.up_stride, spec.up_padding)?,
                config.leaky_slope,
            );
            states[l] = next;
        }
        let y = conv2d(&x, &params.head0.weight, &params.head0.bias, 1, 1)?;
        let y = ops::leaky_relu(&y, config.leaky_slope);
        let y = conv2d(&y, &params.head2.weight, &params.head2.bias, 1, 0)?;
        frames.push(y);
    }
    let refs: Vec<&Tensor<T>> = frames.iter().collect();
    Ok(ops::stack_time(&refs)?)
}

/// End-to-end forward pass.
///
/// `frames` is the normalized input window `[B,T_i,1,side,side]` where side
/// is `F·S` under viewport tiling and `S` otherwise; `hrrr` is the optional
/// conditioning window `[B,K,1,S,S]`, required iff the config enables it.
/// Returns normalized predictions `[B,T_o,1,S,S]`.
pub fn forward<T: Scalar>(
    frames: &Tensor<T>,
    hrrr: Option<&Tensor<T>>,
    params: &ModelParams<T>,
    config: &ModelConfig,
) -> Result<Tensor<T>> {
    let (b0, t0, c0, h0, w0) = match frames.shape() {
        [b, t, c, h, w] => (*b, *t, *c, *h, *w),
        other => {
            return Err(TensorError::Shape {
                op: "forward",
                detail: format!("expected [B,T,1,side,side], got {other:?}"),
            }
            .into())
        }
    };
    let side = config.input_side();
    if t0 != config.t_in || c0 != 1 || h0 != side || w0 != side {
        return Err(ModelError::Config(format!(
            "forward: input {:?}, expected [{b0},{},1,{side},{side}]",
            frames.shape(),
            config.t_in
        )));
    }

    let encoder_input = if config.use_lv {
        let mut tiled = Vec::with_capacity(t0);
        for t in 0..t0 {
            tiled.push(lv_stack(&ops::index_time(frames, t)?, config.lv_factor)?);
        }
        let refs: Vec<&Tensor<T>> = tiled.iter().collect();
        ops::stack_time(&refs)?
    } else {
        frames.clone()
    };

    let (stacks, finals) = encode(&encoder_input, params, config)?;
    let bridged: Vec<LayerState<T>> = stacks
        .iter()
        .zip(&finals)
        .map(|(stack, fin)| {
            Ok(LayerState {
                h: bridge_hidden(stack, &params.bridge_w)?,
                c: fin.c.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let conditioning = match (config.use_hrrr, hrrr) {
        (true, Some(h)) => Some(hrrr_encode(h, params, config)?),
        (true, None) => {
            return Err(ModelError::Config(
                "forward: config enables conditioning but no frames were supplied".into(),
            ))
        }
        (false, _) => None,
    };

    forecast(&bridged, conditioning.as_ref(), params, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n: usize = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn lv_stack_tiles_row_major() {
        // 10×10 raster filled with its tile index: channel k must be constant k
        let f = 5usize;
        let s = 2usize;
        let side = f * s;
        let mut data = vec![0.0f32; side * side];
        for (i, v) in data.iter_mut().enumerate() {
            let (y, x) = (i / side, i % side);
            *v = ((y / s) * f + (x / s)) as f32;
        }
        let frame = Tensor::new(vec![1, 1, side, side], data);
        let stacked = lv_stack(&frame, f).unwrap();
        assert_eq!(stacked.shape(), &[1, f * f, s, s]);
        for ch in 0..f * f {
            let block = &stacked.data()[ch * s * s..(ch + 1) * s * s];
            assert!(block.iter().all(|&v| v == ch as f32), "channel {ch}");
        }
        // and the round trip is exact
        let back = lv_unstack(&stacked, f).unwrap();
        assert_eq!(back.data(), frame.data());
    }

    #[test]
    fn lv_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = random_tensor(&mut rng, &[2, 1, 6, 6]);
        let stacked = lv_stack(&frame, 1).unwrap();
        assert_eq!(stacked.shape(), &[2, 1, 6, 6]);
        assert_eq!(stacked.data(), frame.data());
        assert_eq!(lv_unstack(&stacked, 1).unwrap().data(), frame.data());
    }

    #[test]
    fn lv_stack_rejects_indivisible_side() {
        let frame = Tensor::<f32>::zeros([1, 1, 10, 10]);
        assert!(lv_stack(&frame, 3).is_err());
    }

    #[test]
    fn lv_round_trip_full_viewport() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = random_tensor(&mut rng, &[1, 1, 1280, 1280]);
        let stacked = lv_stack(&frame, 5).unwrap();
        assert_eq!(stacked.shape(), &[1, 25, 256, 256]);
        let back = lv_unstack(&stacked, 5).unwrap();
        assert_eq!(back.data(), frame.data());
    }

    #[test]
    fn encoder_shapes_follow_the_size_chain() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frames = random_tensor(
            &mut rng,
            &[1, cfg.t_in, cfg.input_channels(), cfg.target_size, cfg.target_size],
        );
        let (stacks, finals) = encode(&frames, &params, &cfg).unwrap();
        assert_eq!(stacks.len(), 3);
        assert_eq!(stacks[0].shape(), &[1, cfg.t_in, 8, 8, 8]);
        assert_eq!(stacks[1].shape(), &[1, cfg.t_in, 10, 4, 4]);
        assert_eq!(stacks[2].shape(), &[1, cfg.t_in, 12, 2, 2]);
        for (stack, fin) in stacks.iter().zip(&finals) {
            // last history entry is the final hidden state
            let last = ops::index_time(stack, cfg.t_in - 1).unwrap();
            assert_eq!(last.data(), fin.h.data());
        }
    }

    #[test]
    fn single_step_encoder_equals_one_cell_step() {
        let mut cfg = ModelConfig::toy();
        cfg.t_in = 1;
        let params = init_params::<f32>(&cfg, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames = random_tensor(&mut rng, &[1, 1, 25, 16, 16]);
        let (stacks, finals) = encode(&frames, &params, &cfg).unwrap();
        assert_eq!(stacks[0].shape()[1], 1);
        assert_eq!(
            ops::index_time(&stacks[2], 0).unwrap().data(),
            finals[2].h.data()
        );
    }

    #[test]
    fn toy_forward_shape_and_determinism() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frames = random_tensor(&mut rng, &[1, cfg.t_in, 1, cfg.input_side(), cfg.input_side()]);
        let hrrr = random_tensor(
            &mut rng,
            &[1, cfg.hrrr_frames, 1, cfg.target_size, cfg.target_size],
        );
        let a = forward(&frames, Some(&hrrr), &params, &cfg).unwrap();
        assert_eq!(a.shape(), &[1, cfg.t_out, 1, 16, 16]);
        let b = forward(&frames, Some(&hrrr), &params, &cfg).unwrap();
        assert_eq!(a.data(), b.data(), "forward must be deterministic");
    }

    #[test]
    fn conditioning_shapes_and_constant_input() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 13).unwrap();
        let hrrr = Tensor::full([1, cfg.hrrr_frames, 1, 16, 16], 0.4);
        let enc = hrrr_encode(&hrrr, &params, &cfg).unwrap();
        assert_eq!(enc.shape(), &[1, cfg.t_out, 12, 2, 2]);
        // constant-in-time input: every conditioning frame identical
        let first = ops::index_time(&enc, 0).unwrap();
        for t in 1..cfg.t_out {
            let ft = ops::index_time(&enc, t).unwrap();
            assert_eq!(ft.data(), first.data(), "frame {t}");
        }
    }

    #[test]
    fn missing_conditioning_frames_is_an_error() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 1).unwrap();
        let frames = Tensor::zeros([1, cfg.t_in, 1, cfg.input_side(), cfg.input_side()]);
        assert!(forward(&frames, None, &params, &cfg).is_err());
    }

    #[test]
    fn no_lv_variant_runs_single_channel() {
        let mut cfg = ModelConfig::toy();
        cfg.use_lv = false;
        cfg.use_hrrr = false;
        let params = init_params::<f32>(&cfg, 17).unwrap();
        assert_eq!(params.encoder[0].down.weight.shape()[1], 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let frames = random_tensor(&mut rng, &[1, cfg.t_in, 1, 16, 16]);
        let out = forward(&frames, None, &params, &cfg).unwrap();
        assert_eq!(out.shape(), &[1, cfg.t_out, 1, 16, 16]);
    }

    /// With the bridge at its one-hot(last) init and no conditioning branch,
    /// the network must agree exactly with a forecaster started from the
    /// plain last-step encoder states.
    #[test]
    fn one_hot_bridge_reduces_to_last_state_behaviour() {
        let mut cfg = ModelConfig::toy();
        cfg.use_hrrr = false;
        let params = init_params::<f32>(&cfg, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frames = random_tensor(&mut rng, &[1, cfg.t_in, 1, cfg.input_side(), cfg.input_side()]);

        let full = forward(&frames, None, &params, &cfg).unwrap();

        // by hand: encode, take the final states directly, forecast
        let mut tiled = Vec::new();
        for t in 0..cfg.t_in {
            tiled.push(lv_stack(&ops::index_time(&frames, t).unwrap(), cfg.lv_factor).unwrap());
        }
        let refs: Vec<&Tensor<f32>> = tiled.iter().collect();
        let enc_in = ops::stack_time(&refs).unwrap();
        let (_, finals) = encode(&enc_in, &params, &cfg).unwrap();
        let manual = forecast(&finals, None, &params, &cfg).unwrap();

        assert_eq!(full.data(), manual.data());
    }
}
