//! Differentiable tensor operations.
//!
//! Every op computes its forward value eagerly; when any input is attached to
//! a tape, the op also records a backward rule that routes output gradient to
//! the tracked inputs. Ops with data- or config-dependent preconditions return
//! `Result`; unconditional elementwise maps return the tensor directly.
//!
//! Temporal ops use the layout `[B, T, C, H, W]` with time in dimension 1.

use super::{tape_of, Result, Scalar, Tensor, TensorError};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

/// Elementwise `a + b`.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let tape = tape_of(&[a, b]);
    let out = Tensor::op_result("add", a.shape().to_vec(), data, tape.clone());
    if let Some(core) = tape {
        let (sa, sb) = (a.saved(), b.saved());
        core.record(&out, move |g| {
            if sa.is_tracked() {
                sa.acc(g.to_vec());
            }
            if sb.is_tracked() {
                sb.acc(g.to_vec());
            }
        });
    }
    Ok(out)
}

/// Elementwise `a - b`.
pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    let tape = tape_of(&[a, b]);
    let out = Tensor::op_result("sub", a.shape().to_vec(), data, tape.clone());
    if let Some(core) = tape {
        let (sa, sb) = (a.saved(), b.saved());
        core.record(&out, move |g| {
            if sa.is_tracked() {
                sa.acc(g.to_vec());
            }
            if sb.is_tracked() {
                sb.acc(g.iter().map(|&gi| -gi).collect());
            }
        });
    }
    Ok(out)
}

/// Elementwise `a * b` (Hadamard product).
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let tape = tape_of(&[a, b]);
    let out = Tensor::op_result("mul", a.shape().to_vec(), data, tape.clone());
    if let Some(core) = tape {
        let (sa, sb) = (a.saved(), b.saved());
        core.record(&out, move |g| {
            if sa.is_tracked() {
                sa.acc(g.iter().zip(sb.data()).map(|(&gi, &y)| gi * y).collect());
            }
            if sb.is_tracked() {
                sb.acc(g.iter().zip(sa.data()).map(|(&gi, &x)| gi * x).collect());
            }
        });
    }
    Ok(out)
}

/// `x * c` for a plain scalar constant `c` (not differentiable w.r.t. `c`).
pub fn scale<T: Scalar>(x: &Tensor<T>, c: T) -> Tensor<T> {
    let data = x.data().iter().map(|&v| v * c).collect();
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("scale", x.shape().to_vec(), data, tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            sx.acc(g.iter().map(|&gi| gi * c).collect());
        });
    }
    out
}

/// Elementwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    /// `x` for `x > 0`, `slope * x` otherwise.
    LeakyRelu { slope: f64 },
    Sigmoid,
    Tanh,
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data: Vec<T> = match kind {
        Activation::LeakyRelu { slope } => {
            let s = T::from_f64(slope);
            x.data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { v * s })
                .collect()
        }
        Activation::Sigmoid => x
            .data()
            .iter()
            .map(|&v| T::one() / (T::one() + (-v).exp()))
            .collect(),
        Activation::Tanh => x.data().iter().map(|&v| v.tanh()).collect(),
    };
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("activation", x.shape().to_vec(), data, tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        // Sigmoid / tanh differentiate through the output; leaky ReLU through
        // the input sign (slope at exactly zero).
        let sy = out.saved();
        core.record(&out, move |g| {
            let gx: Vec<T> = match kind {
                Activation::LeakyRelu { slope } => {
                    let s = T::from_f64(slope);
                    g.iter()
                        .zip(sx.data())
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { gi * s })
                        .collect()
                }
                Activation::Sigmoid => g
                    .iter()
                    .zip(sy.data())
                    .map(|(&gi, &y)| gi * y * (T::one() - y))
                    .collect(),
                Activation::Tanh => g
                    .iter()
                    .zip(sy.data())
                    .map(|(&gi, &y)| gi * (T::one() - y * y))
                    .collect(),
            };
            sx.acc(gx);
        });
    }
    out
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    activation(x, Activation::LeakyRelu { slope })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Sigmoid)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    activation(x, Activation::Tanh)
}

/// Sum of all elements, accumulated in f64, returned as a scalar tensor.
pub fn sum<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("sum", Vec::new(), vec![T::from_f64(total)], tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        let n = x.numel();
        core.record(&out, move |g| {
            sx.acc(vec![g[0]; n]);
        });
    }
    out
}

/// Mean of all elements, accumulated in f64, returned as a scalar tensor.
pub fn mean<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.numel();
    let total: f64 = x.data().iter().map(|v| v.as_f64()).sum();
    let tape = tape_of(&[x]);
    let out = Tensor::op_result(
        "mean",
        Vec::new(),
        vec![T::from_f64(total / n as f64)],
        tape.clone(),
    );
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            let gi = g[0] / T::from_f64(n as f64);
            sx.acc(vec![gi; n]);
        });
    }
    out
}

fn dims4<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
    match x.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        other => Err(TensorError::Shape {
            op,
            detail: format!("expected rank-4 [B,C,H,W], got {other:?}"),
        }),
    }
}

fn dims5<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    match x.shape() {
        [b, t, c, h, w] => Ok((*b, *t, *c, *h, *w)),
        other => Err(TensorError::Shape {
            op,
            detail: format!("expected rank-5 [B,T,C,H,W], got {other:?}"),
        }),
    }
}

/// Concatenate `[B,Ci,H,W]` tensors along the channel dimension.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(TensorError::Config {
            op: "concat_channels",
            detail: "no parts given".into(),
        });
    }
    let (b0, _, h0, w0) = dims4("concat_channels", parts[0])?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (b, c, h, w) = dims4("concat_channels", p)?;
        if (b, h, w) != (b0, h0, w0) {
            return Err(TensorError::Shape {
                op: "concat_channels",
                detail: format!("part {:?} does not match [{b0},_,{h0},{w0}]", p.shape()),
            });
        }
        channels.push(c);
    }
    let c_total: usize = channels.iter().sum();
    let hw = h0 * w0;

    let mut data = Vec::with_capacity(b0 * c_total * hw);
    for b in 0..b0 {
        for (p, &c) in parts.iter().zip(&channels) {
            let block = c * hw;
            data.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }

    let tape = tape_of(parts);
    let out = Tensor::op_result(
        "concat_channels",
        vec![b0, c_total, h0, w0],
        data,
        tape.clone(),
    );
    if let Some(core) = tape {
        let saved: Vec<_> = parts.iter().map(|p| p.saved()).collect();
        let chans = channels.clone();
        core.record(&out, move |g| {
            let row = c_total * hw;
            for (i, s) in saved.iter().enumerate() {
                if !s.is_tracked() {
                    continue;
                }
                let block = chans[i] * hw;
                let offset: usize = chans[..i].iter().sum::<usize>() * hw;
                let mut gp = Vec::with_capacity(b0 * block);
                for b in 0..b0 {
                    let start = b * row + offset;
                    gp.extend_from_slice(&g[start..start + block]);
                }
                s.acc(gp);
            }
        });
    }
    Ok(out)
}

/// Channels `[start, start+len)` of a `[B,C,H,W]` tensor.
pub fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let (b0, c0, h0, w0) = dims4("slice_channels", x)?;
    if start + len > c0 {
        return Err(TensorError::Config {
            op: "slice_channels",
            detail: format!("range {start}..{} out of {c0} channels", start + len),
        });
    }
    let hw = h0 * w0;
    let row = c0 * hw;
    let mut data = Vec::with_capacity(b0 * len * hw);
    for b in 0..b0 {
        let s = b * row + start * hw;
        data.extend_from_slice(&x.data()[s..s + len * hw]);
    }
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("slice_channels", vec![b0, len, h0, w0], data, tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            let mut gx = vec![T::zero(); b0 * row];
            for b in 0..b0 {
                let s = b * row + start * hw;
                gx[s..s + len * hw].copy_from_slice(&g[b * len * hw..(b + 1) * len * hw]);
            }
            sx.acc(gx);
        });
    }
    Ok(out)
}

/// Stack `[B,C,H,W]` frames into `[B,T,C,H,W]` (time in dimension 1).
pub fn stack_time<T: Scalar>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(TensorError::Config {
            op: "stack_time",
            detail: "no frames given".into(),
        });
    }
    let (b0, c0, h0, w0) = dims4("stack_time", frames[0])?;
    for f in frames {
        same_shape("stack_time", frames[0], f)?;
    }
    let t = frames.len();
    let chw = c0 * h0 * w0;
    let mut data = vec![T::zero(); b0 * t * chw];
    for (ti, f) in frames.iter().enumerate() {
        for b in 0..b0 {
            data[(b * t + ti) * chw..(b * t + ti + 1) * chw]
                .copy_from_slice(&f.data()[b * chw..(b + 1) * chw]);
        }
    }
    let tape = tape_of(frames);
    let out = Tensor::op_result("stack_time", vec![b0, t, c0, h0, w0], data, tape.clone());
    if let Some(core) = tape {
        let saved: Vec<_> = frames.iter().map(|f| f.saved()).collect();
        core.record(&out, move |g| {
            for (ti, s) in saved.iter().enumerate() {
                if !s.is_tracked() {
                    continue;
                }
                let mut gf = vec![T::zero(); b0 * chw];
                for b in 0..b0 {
                    gf[b * chw..(b + 1) * chw]
                        .copy_from_slice(&g[(b * t + ti) * chw..(b * t + ti + 1) * chw]);
                }
                s.acc(gf);
            }
        });
    }
    Ok(out)
}

/// Frame `t` of a `[B,T,C,H,W]` tensor, as `[B,C,H,W]`.
pub fn index_time<T: Scalar>(x: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    let (b0, t0, c0, h0, w0) = dims5("index_time", x)?;
    if t >= t0 {
        return Err(TensorError::Config {
            op: "index_time",
            detail: format!("frame {t} out of {t0}"),
        });
    }
    let chw = c0 * h0 * w0;
    let mut data = Vec::with_capacity(b0 * chw);
    for b in 0..b0 {
        data.extend_from_slice(&x.data()[(b * t0 + t) * chw..(b * t0 + t + 1) * chw]);
    }
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("index_time", vec![b0, c0, h0, w0], data, tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            let mut gx = vec![T::zero(); b0 * t0 * chw];
            for b in 0..b0 {
                gx[(b * t0 + t) * chw..(b * t0 + t + 1) * chw]
                    .copy_from_slice(&g[b * chw..(b + 1) * chw]);
            }
            sx.acc(gx);
        });
    }
    Ok(out)
}

/// Weighted sum over the time dimension: `out = Σ_i w[i] · hs[:,i]`, keeping a
/// singleton time dimension. Differentiable w.r.t. both `hs` and `w`.
pub fn temporal_weighted_sum<T: Scalar>(hs: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (b0, m, c0, h0, w0) = dims5("temporal_weighted_sum", hs)?;
    if w.shape() != [m] {
        return Err(TensorError::Shape {
            op: "temporal_weighted_sum",
            detail: format!("weights {:?} vs {m} frames", w.shape()),
        });
    }
    let chw = c0 * h0 * w0;
    let mut data = vec![T::zero(); b0 * chw];
    for b in 0..b0 {
        for i in 0..m {
            let wi = w.data()[i];
            let src = &hs.data()[(b * m + i) * chw..(b * m + i + 1) * chw];
            let dst = &mut data[b * chw..(b + 1) * chw];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += wi * s;
            }
        }
    }
    let tape = tape_of(&[hs, w]);
    let out = Tensor::op_result(
        "temporal_weighted_sum",
        vec![b0, 1, c0, h0, w0],
        data,
        tape.clone(),
    );
    if let Some(core) = tape {
        let (shs, sw) = (hs.saved(), w.saved());
        core.record(&out, move |g| {
            if shs.is_tracked() {
                let mut ghs = vec![T::zero(); b0 * m * chw];
                for b in 0..b0 {
                    let gb = &g[b * chw..(b + 1) * chw];
                    for i in 0..m {
                        let wi = sw.data()[i];
                        let dst = &mut ghs[(b * m + i) * chw..(b * m + i + 1) * chw];
                        for (d, &gi) in dst.iter_mut().zip(gb) {
                            *d = wi * gi;
                        }
                    }
                }
                shs.acc(ghs);
            }
            if sw.is_tracked() {
                let mut gw = vec![T::zero(); m];
                for (i, gw_i) in gw.iter_mut().enumerate() {
                    let mut acc = 0f64;
                    for b in 0..b0 {
                        let gb = &g[b * chw..(b + 1) * chw];
                        let src = &shs.data()[(b * m + i) * chw..(b * m + i + 1) * chw];
                        for (&gi, &s) in gb.iter().zip(src) {
                            acc += gi.as_f64() * s.as_f64();
                        }
                    }
                    *gw_i = T::from_f64(acc);
                }
                sw.acc(gw);
            }
        });
    }
    Ok(out)
}

/// Resample `[B,K,C,H,W]` to `t_out` frames by linear interpolation in time.
///
/// Output frame `j` sits at normalized position `j/(t_out-1)` across the input
/// span, so both endpoints are preserved; `t_out == K` is the identity. A
/// single requested frame (`t_out == 1`) takes the first input frame.
pub fn temporal_linear_interp<T: Scalar>(x: &Tensor<T>, t_out: usize) -> Result<Tensor<T>> {
    let (b0, k, c0, h0, w0) = dims5("temporal_linear_interp", x)?;
    if t_out == 0 {
        return Err(TensorError::Config {
            op: "temporal_linear_interp",
            detail: "t_out must be >= 1".into(),
        });
    }
    if k < 2 && t_out > 1 {
        return Err(TensorError::Config {
            op: "temporal_linear_interp",
            detail: format!("cannot interpolate {k} frame(s) to {t_out}"),
        });
    }
    let chw = c0 * h0 * w0;

    // (left frame, right frame, right weight) for each output frame
    let coeffs: Vec<(usize, usize, f64)> = (0..t_out)
        .map(|j| {
            if t_out == 1 {
                return (0, 0, 0.0);
            }
            let tau = j as f64 * (k - 1) as f64 / (t_out - 1) as f64;
            let k0 = (tau.floor() as usize).min(k - 1);
            if k0 == k - 1 {
                (k0, k0, 0.0)
            } else {
                (k0, k0 + 1, tau - k0 as f64)
            }
        })
        .collect();

    let mut data = vec![T::zero(); b0 * t_out * chw];
    for b in 0..b0 {
        for (j, &(k0, k1, alpha)) in coeffs.iter().enumerate() {
            let bw = T::from_f64(alpha);
            let left = &x.data()[(b * k + k0) * chw..(b * k + k0 + 1) * chw];
            let right = &x.data()[(b * k + k1) * chw..(b * k + k1 + 1) * chw];
            let dst = &mut data[(b * t_out + j) * chw..(b * t_out + j + 1) * chw];
            // l + α(r−l) rather than (1−α)l + αr: preserves constant inputs and
            // the endpoint frames exactly, which matters in f32.
            for ((d, &l), &r) in dst.iter_mut().zip(left).zip(right) {
                *d = l + bw * (r - l);
            }
        }
    }
    let tape = tape_of(&[x]);
    let out = Tensor::op_result(
        "temporal_linear_interp",
        vec![b0, t_out, c0, h0, w0],
        data,
        tape.clone(),
    );
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            let mut gx = vec![T::zero(); b0 * k * chw];
            for b in 0..b0 {
                for (j, &(k0, k1, alpha)) in coeffs.iter().enumerate() {
                    let a = T::from_f64(1.0 - alpha);
                    let bw = T::from_f64(alpha);
                    let gj = &g[(b * t_out + j) * chw..(b * t_out + j + 1) * chw];
                    for (e, &gi) in gj.iter().enumerate() {
                        gx[(b * k + k0) * chw + e] += a * gi;
                        if k1 != k0 {
                            gx[(b * k + k1) * chw + e] += bw * gi;
                        }
                    }
                }
            }
            sx.acc(gx);
        });
    }
    Ok(out)
}

/// View the same elements under a new shape (element count must match).
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
    let shape = shape.into();
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(TensorError::Shape {
            op: "reshape",
            detail: format!("{:?} -> {:?}", x.shape(), shape),
        });
    }
    let tape = tape_of(&[x]);
    let out = Tensor::op_result("reshape", shape, x.data().to_vec(), tape.clone());
    if let Some(core) = tape {
        let sx = x.saved();
        core.record(&out, move |g| {
            sx.acc(g.to_vec());
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, Tape};

    fn t<T: Scalar>(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Tensor<T> {
        Tensor::new(shape, data.into_iter().map(T::from_f64).collect())
    }

    #[test]
    fn elementwise_identities() {
        let x = t::<f32>([2, 2], vec![1.0, -2.0, 3.0, 0.5]);
        let zeros = Tensor::zeros([2, 2]);
        let ones = Tensor::ones([2, 2]);
        assert_eq!(add(&x, &zeros).unwrap().data(), x.data());
        assert_eq!(mul(&x, &ones).unwrap().data(), x.data());
        let d = sub(&t::<f32>([1], vec![3.0]), &t::<f32>([1], vec![1.0])).unwrap();
        assert_eq!(d.data(), &[2.0]);
    }

    #[test]
    fn elementwise_shape_mismatch_is_error() {
        let a = Tensor::<f32>::zeros([2, 2]);
        let b = Tensor::<f32>::zeros([2, 3]);
        assert!(add(&a, &b).is_err());
    }

    #[test]
    fn activation_values() {
        let x = t::<f32>([3], vec![-1.0, 0.0, 2.0]);
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(sigmoid(&t::<f32>([1], vec![0.0])).data(), &[0.5]);
        assert_eq!(tanh(&t::<f32>([1], vec![0.0])).data(), &[0.0]);
    }

    #[test]
    fn sum_and_mean() {
        let x = t::<f64>([4], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(sum(&x).item(), 10.0);
        assert_eq!(mean(&x).item(), 2.5);
    }

    #[test]
    fn sum_grad_is_ones_and_square_grad_is_2x() {
        let tape = Tape::new();
        let x = t::<f64>([3], vec![1.0, -2.0, 3.0]);
        let xt = x.tracked(&tape);
        let loss = sum(&mul(&xt, &xt).unwrap());
        backward(&loss, tape).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);

        let tape = Tape::new();
        let y = t::<f64>([3], vec![5.0, 6.0, 7.0]);
        let yt = y.tracked(&tape);
        let loss = sum(&yt);
        backward(&loss, tape).unwrap();
        assert_eq!(y.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = t::<f32>([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t::<f32>([1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[1, 2, 2, 2]);
        assert_eq!(slice_channels(&cat, 0, 1).unwrap().data(), a.data());
        assert_eq!(slice_channels(&cat, 1, 1).unwrap().data(), b.data());
        // single part is the identity
        assert_eq!(concat_channels(&[&a]).unwrap().data(), a.data());
    }

    #[test]
    fn concat_matches_gate_input_width() {
        let x = Tensor::<f32>::zeros([1, 192, 14, 14]);
        let h = Tensor::<f32>::zeros([1, 192, 14, 14]);
        let cat = concat_channels(&[&x, &h]).unwrap();
        assert_eq!(cat.shape(), &[1, 384, 14, 14]);
    }

    #[test]
    fn concat_grad_splits_by_part_and_batch() {
        let tape = Tape::new();
        let a = t::<f64>([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t::<f64>([2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let at = a.tracked(&tape);
        let bt = b.tracked(&tape);
        let cat = concat_channels(&[&at, &bt]).unwrap();
        // weight the second part by 3 so the two grads differ
        let w = Tensor::new(
            vec![2, 2, 1, 2],
            vec![1.0, 1.0, 3.0, 3.0, 1.0, 1.0, 3.0, 3.0],
        );
        let loss = sum(&mul(&cat, &w).unwrap());
        backward(&loss, tape).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0; 4]);
        assert_eq!(b.grad().unwrap(), vec![3.0; 4]);
    }

    #[test]
    fn stack_and_index_time_round_trip() {
        let f0 = t::<f32>([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let f1 = t::<f32>([2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let st = stack_time(&[&f0, &f1]).unwrap();
        assert_eq!(st.shape(), &[2, 2, 1, 1, 2]);
        assert_eq!(index_time(&st, 0).unwrap().data(), f0.data());
        assert_eq!(index_time(&st, 1).unwrap().data(), f1.data());
    }

    #[test]
    fn weighted_sum_one_hot_selects_frame() {
        let f0 = t::<f32>([1, 2, 2, 2], vec![1.0; 8]);
        let f1 = t::<f32>([1, 2, 2, 2], vec![2.0; 8]);
        let hs = stack_time(&[&f0, &f1]).unwrap();
        let w = t::<f32>([2], vec![0.0, 1.0]);
        let out = temporal_weighted_sum(&hs, &w).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2, 2]);
        assert_eq!(out.data(), f1.data());
    }

    #[test]
    fn weighted_sum_of_identical_frames_with_unit_mass() {
        let f = t::<f32>([1, 1, 1, 3], vec![4.0, 5.0, 6.0]);
        let hs = stack_time(&[&f, &f, &f]).unwrap();
        let w = t::<f32>([3], vec![0.25, 0.5, 0.25]);
        let out = temporal_weighted_sum(&hs, &w).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn weighted_sum_matches_loop_oracle() {
        // m=3 frames of 2x2, single channel, weights fixed by hand
        let f0 = t::<f64>([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let f1 = t::<f64>([1, 1, 2, 2], vec![-1.0, 0.5, 2.0, 8.0]);
        let f2 = t::<f64>([1, 1, 2, 2], vec![10.0, -3.0, 0.0, 1.0]);
        let hs = stack_time(&[&f0, &f1, &f2]).unwrap();
        let w = t::<f64>([3], vec![0.2, -0.7, 1.1]);
        let out = temporal_weighted_sum(&hs, &w).unwrap();
        let mut want = vec![0.0; 4];
        for (wi, f) in [(0.2, &f0), (-0.7, &f1), (1.1, &f2)] {
            for (o, &v) in want.iter_mut().zip(f.data()) {
                *o += wi * v;
            }
        }
        for (got, want) in out.data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn interp_endpoints_and_midpoints() {
        // two frames of constant value 0 and 8, resampled to five
        let f0 = Tensor::<f32>::zeros([1, 1, 1, 1]);
        let f1 = Tensor::<f32>::full([1, 1, 1, 1], 8.0);
        let x = stack_time(&[&f0, &f1]).unwrap();
        let y = temporal_linear_interp(&x, 5).unwrap();
        assert_eq!(y.shape(), &[1, 5, 1, 1, 1]);
        assert_eq!(y.data(), &[0.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn interp_identity_and_constant_cases() {
        let f0 = t::<f32>([1, 1, 1, 2], vec![1.0, 2.0]);
        let f1 = t::<f32>([1, 1, 1, 2], vec![3.0, 4.0]);
        let f2 = t::<f32>([1, 1, 1, 2], vec![5.0, 6.0]);
        let x = stack_time(&[&f0, &f1, &f2]).unwrap();
        // t_out == K is the identity
        let same = temporal_linear_interp(&x, 3).unwrap();
        assert_eq!(same.data(), x.data());
        // constant input stays constant at any t_out
        let c = Tensor::<f32>::full([1, 2, 1, 1, 1], 7.0);
        let y = temporal_linear_interp(&c, 6).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn interp_rejects_single_frame_expansion() {
        let x = Tensor::<f32>::zeros([1, 1, 1, 2, 2]);
        assert!(temporal_linear_interp(&x, 4).is_err());
    }

    #[test]
    fn reshape_preserves_data_and_grad() {
        let tape = Tape::new();
        let x = t::<f64>([2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let xt = x.tracked(&tape);
        let y = reshape(&xt, [4]).unwrap();
        assert_eq!(y.data(), x.data());
        let loss = sum(&mul(&y, &y).unwrap());
        backward(&loss, tape).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0, 8.0]);
    }
}
