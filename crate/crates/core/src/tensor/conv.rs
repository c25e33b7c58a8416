//! 2D convolution, transposed convolution, and group normalization.
//!
//! The convolutions run as im2col + GEMM. A naive nested-loop implementation
//! of each lives in [`reference`]; the packed path must agree with it to
//! within 1e-6 and the test suite enforces that, so the reference kernels are
//! the oracle and the GEMM path is the one the model actually calls.

use super::gemm::gemm_into;
use super::{tape_of, Result, Scalar, Tensor, TensorError};

/// Output side length of a convolution: floor((n + 2p - k)/s) + 1.
pub fn conv_out_size(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n + 2 * padding - k) / stride + 1
}

/// Output side length of a transposed convolution: (n-1)·s - 2p + k.
pub fn conv_transpose_out_size(n: usize, k: usize, stride: usize, padding: usize) -> usize {
    (n - 1) * stride + k - 2 * padding
}

/// Gather kernel windows into a column matrix.
///
/// `src` is one sample, `[c, canvas_h, canvas_w]`. Window `(gh, gw)` covers
/// canvas pixels `(gh·s - p + ki, gw·s - p + kj)`; out-of-canvas taps read 0.
/// `cols` is filled as `[c·k·k, grid_h·grid_w]`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    c: usize,
    canvas_h: usize,
    canvas_w: usize,
    grid_h: usize,
    grid_w: usize,
    k: usize,
    s: usize,
    p: usize,
    cols: &mut [T],
) {
    let grid = grid_h * grid_w;
    debug_assert_eq!(src.len(), c * canvas_h * canvas_w);
    debug_assert_eq!(cols.len(), c * k * k * grid);
    let p = p as isize;
    for ci in 0..c {
        let plane = &src[ci * canvas_h * canvas_w..(ci + 1) * canvas_h * canvas_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * grid;
                for gh in 0..grid_h {
                    let ih = (gh * s) as isize + ki as isize - p;
                    let out_row = &mut cols[row + gh * grid_w..row + (gh + 1) * grid_w];
                    if ih < 0 || ih >= canvas_h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[ih as usize * canvas_w..(ih as usize + 1) * canvas_w];
                    for (gw, out) in out_row.iter_mut().enumerate() {
                        let iw = (gw * s) as isize + kj as isize - p;
                        *out = if iw >= 0 && iw < canvas_w as isize {
                            src_row[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto the canvas.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    canvas_h: usize,
    canvas_w: usize,
    grid_h: usize,
    grid_w: usize,
    k: usize,
    s: usize,
    p: usize,
    dst: &mut [T],
) {
    let grid = grid_h * grid_w;
    debug_assert_eq!(dst.len(), c * canvas_h * canvas_w);
    debug_assert_eq!(cols.len(), c * k * k * grid);
    let p = p as isize;
    for ci in 0..c {
        let plane = &mut dst[ci * canvas_h * canvas_w..(ci + 1) * canvas_h * canvas_w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * grid;
                for gh in 0..grid_h {
                    let ih = (gh * s) as isize + ki as isize - p;
                    if ih < 0 || ih >= canvas_h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut plane[ih as usize * canvas_w..(ih as usize + 1) * canvas_w];
                    let src_row = &cols[row + gh * grid_w..row + (gh + 1) * grid_w];
                    for (gw, &v) in src_row.iter().enumerate() {
                        let iw = (gw * s) as isize + kj as isize - p;
                        if iw >= 0 && iw < canvas_w as isize {
                            dst_row[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
}

fn check_conv_args<T: Scalar>(
    op: &'static str,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    weight_in_dim: usize, // which weight axis must match x's channels
) -> Result<ConvDims> {
    let (b, cin, h, w) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(TensorError::Shape {
                op,
                detail: format!("input must be [B,C,H,W], got {other:?}"),
            })
        }
    };
    let (w0, w1, kh, kw) = match weight.shape() {
        [a, b, kh, kw] => (*a, *b, *kh, *kw),
        other => {
            return Err(TensorError::Shape {
                op,
                detail: format!("weight must be rank 4, got {other:?}"),
            })
        }
    };
    if kh != kw {
        return Err(TensorError::Config {
            op,
            detail: format!("only square kernels supported, got {kh}x{kw}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::Config {
            op,
            detail: "stride must be >= 1".into(),
        });
    }
    let (w_in, w_out) = if weight_in_dim == 0 { (w0, w1) } else { (w1, w0) };
    if w_in != cin {
        return Err(TensorError::Config {
            op,
            detail: format!("input has {cin} channels but weight expects {w_in}"),
        });
    }
    if bias.shape() != [w_out] {
        return Err(TensorError::Shape {
            op,
            detail: format!("bias {:?} vs {w_out} output channels", bias.shape()),
        });
    }
    Ok(ConvDims {
        b,
        cin,
        h,
        w,
        cout: w_out,
        k: kh,
    })
}

/// 2D convolution with zero padding.
///
/// `x: [B,Cin,H,W]`, `weight: [Cout,Cin,k,k]`, `bias: [Cout]` →
/// `[B,Cout,H',W']` with `H' = floor((H+2p-k)/s)+1`. Differentiable w.r.t.
/// all three tensor arguments.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = check_conv_args("conv2d", x, weight, bias, stride, 1)?;
    if d.k > d.h + 2 * padding || d.k > d.w + 2 * padding {
        return Err(TensorError::Config {
            op: "conv2d",
            detail: format!(
                "kernel {k} larger than padded input {h}x{w} (p={padding})",
                k = d.k,
                h = d.h,
                w = d.w
            ),
        });
    }
    let oh = conv_out_size(d.h, d.k, stride, padding);
    let ow = conv_out_size(d.w, d.k, stride, padding);
    let ckk = d.cin * d.k * d.k;
    let grid = oh * ow;

    let mut out = vec![T::zero(); d.b * d.cout * grid];
    let mut cols = vec![T::zero(); ckk * grid];
    for b in 0..d.b {
        let xb = &x.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
        im2col(xb, d.cin, d.h, d.w, oh, ow, d.k, stride, padding, &mut cols);
        let ob = &mut out[b * d.cout * grid..(b + 1) * d.cout * grid];
        gemm_into(d.cout, ckk, grid, weight.data(), false, &cols, false, T::zero(), ob);
        for co in 0..d.cout {
            let bv = bias.data()[co];
            for v in &mut ob[co * grid..(co + 1) * grid] {
                *v += bv;
            }
        }
    }

    let tape = tape_of(&[x, weight, bias]);
    let out = Tensor::op_result("conv2d", vec![d.b, d.cout, oh, ow], out, tape.clone());
    if let Some(core) = tape {
        let (sx, sw, sb) = (x.saved(), weight.saved(), bias.saved());
        core.record(&out, move |g| {
            let mut cols = vec![T::zero(); ckk * grid];
            if sw.is_tracked() {
                let mut gw = vec![T::zero(); d.cout * ckk];
                for b in 0..d.b {
                    let xb = &sx.data()[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w];
                    im2col(xb, d.cin, d.h, d.w, oh, ow, d.k, stride, padding, &mut cols);
                    let gb = &g[b * d.cout * grid..(b + 1) * d.cout * grid];
                    // gW += gOut · colsᵀ, accumulated across the batch
                    gemm_into(d.cout, grid, ckk, gb, false, &cols, true, T::one(), &mut gw);
                }
                sw.acc(gw);
            }
            if sx.is_tracked() {
                let mut gx = vec![T::zero(); d.b * d.cin * d.h * d.w];
                for b in 0..d.b {
                    let gb = &g[b * d.cout * grid..(b + 1) * d.cout * grid];
                    // cols grad = Wᵀ · gOut, then scattered back onto the input
                    gemm_into(ckk, d.cout, grid, sw.data(), true, gb, false, T::zero(), &mut cols);
                    col2im(
                        &cols,
                        d.cin,
                        d.h,
                        d.w,
                        oh,
                        ow,
                        d.k,
                        stride,
                        padding,
                        &mut gx[b * d.cin * d.h * d.w..(b + 1) * d.cin * d.h * d.w],
                    );
                }
                sx.acc(gx);
            }
            if sb.is_tracked() {
                let mut gbias = vec![T::zero(); d.cout];
                for (co, gb) in gbias.iter_mut().enumerate() {
                    let mut acc = 0f64;
                    for b in 0..d.b {
                        let block = &g[(b * d.cout + co) * grid..(b * d.cout + co + 1) * grid];
                        acc += block.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    *gb = T::from_f64(acc);
                }
                sb.acc(gbias);
            }
        });
    }
    Ok(out)
}

/// Transposed 2D convolution (the adjoint of [`conv2d`] w.r.t. its input).
///
/// `x: [B,Cin,H,W]`, `weight: [Cin,Cout,k,k]`, `bias: [Cout]` →
/// `[B,Cout,H',W']` with `H' = (H-1)·s - 2p + k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let d = check_conv_args("conv_transpose2d", x, weight, bias, stride, 0)?;
    let span = (d.h - 1) * stride + d.k;
    if span <= 2 * padding || (d.w - 1) * stride + d.k <= 2 * padding {
        return Err(TensorError::Config {
            op: "conv_transpose2d",
            detail: format!("padding {padding} consumes the whole output"),
        });
    }
    let oh = conv_transpose_out_size(d.h, d.k, stride, padding);
    let ow = conv_transpose_out_size(d.w, d.k, stride, padding);
    let ckk = d.cout * d.k * d.k;
    let grid = d.h * d.w;

    let mut out = vec![T::zero(); d.b * d.cout * oh * ow];
    let mut cols = vec![T::zero(); ckk * grid];
    for b in 0..d.b {
        let xb = &x.data()[b * d.cin * grid..(b + 1) * d.cin * grid];
        // cols = Wᵀ · x, where W is [Cin, Cout·k·k]
        gemm_into(ckk, d.cin, grid, weight.data(), true, xb, false, T::zero(), &mut cols);
        let ob = &mut out[b * d.cout * oh * ow..(b + 1) * d.cout * oh * ow];
        col2im(&cols, d.cout, oh, ow, d.h, d.w, d.k, stride, padding, ob);
        for co in 0..d.cout {
            let bv = bias.data()[co];
            for v in &mut ob[co * oh * ow..(co + 1) * oh * ow] {
                *v += bv;
            }
        }
    }

    let tape = tape_of(&[x, weight, bias]);
    let out = Tensor::op_result("conv_transpose2d", vec![d.b, d.cout, oh, ow], out, tape.clone());
    if let Some(core) = tape {
        let (sx, sw, sb) = (x.saved(), weight.saved(), bias.saved());
        core.record(&out, move |g| {
            let mut cols = vec![T::zero(); ckk * grid];
            let need_cols = sx.is_tracked() || sw.is_tracked();
            let mut gx = sx
                .is_tracked()
                .then(|| vec![T::zero(); d.b * d.cin * grid]);
            let mut gw = sw.is_tracked().then(|| vec![T::zero(); d.cin * ckk]);
            for b in 0..d.b {
                let gb = &g[b * d.cout * oh * ow..(b + 1) * d.cout * oh * ow];
                if need_cols {
                    im2col(gb, d.cout, oh, ow, d.h, d.w, d.k, stride, padding, &mut cols);
                }
                if let Some(gx) = gx.as_mut() {
                    // input grad is a plain convolution of the output grad
                    gemm_into(
                        d.cin,
                        ckk,
                        grid,
                        sw.data(),
                        false,
                        &cols,
                        false,
                        T::zero(),
                        &mut gx[b * d.cin * grid..(b + 1) * d.cin * grid],
                    );
                }
                if let Some(gw) = gw.as_mut() {
                    let xb = &sx.data()[b * d.cin * grid..(b + 1) * d.cin * grid];
                    gemm_into(d.cin, grid, ckk, xb, false, &cols, true, T::one(), gw);
                }
            }
            if let Some(gx) = gx {
                sx.acc(gx);
            }
            if let Some(gw) = gw {
                sw.acc(gw);
            }
            if sb.is_tracked() {
                let mut gbias = vec![T::zero(); d.cout];
                let plane = oh * ow;
                for (co, gbv) in gbias.iter_mut().enumerate() {
                    let mut acc = 0f64;
                    for b in 0..d.b {
                        let block = &g[(b * d.cout + co) * plane..(b * d.cout + co + 1) * plane];
                        acc += block.iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    *gbv = T::from_f64(acc);
                }
                sb.acc(gbias);
            }
        });
    }
    Ok(out)
}

/// Group normalization over `[B,C,H,W]`.
///
/// Each (sample, group) block is shifted to zero mean and scaled to unit
/// variance (population variance, stabilized by `eps`), then transformed by
/// the per-channel affine `gamma`, `beta`.
pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let (b0, c0, h0, w0) = match x.shape() {
        [b, c, h, w] => (*b, *c, *h, *w),
        other => {
            return Err(TensorError::Shape {
                op: "group_norm",
                detail: format!("input must be [B,C,H,W], got {other:?}"),
            })
        }
    };
    if groups == 0 || c0 % groups != 0 {
        return Err(TensorError::Config {
            op: "group_norm",
            detail: format!("{c0} channels not divisible into {groups} groups"),
        });
    }
    if gamma.shape() != [c0] || beta.shape() != [c0] {
        return Err(TensorError::Shape {
            op: "group_norm",
            detail: format!(
                "gamma {:?} / beta {:?} vs {c0} channels",
                gamma.shape(),
                beta.shape()
            ),
        });
    }
    if !(eps > 0.0) {
        return Err(TensorError::Config {
            op: "group_norm",
            detail: "eps must be positive".into(),
        });
    }
    let cpg = c0 / groups;
    let hw = h0 * w0;
    let d = cpg * hw;

    // per (sample, group): mean and 1/sqrt(var + eps), in f64
    let mut stats = Vec::with_capacity(b0 * groups);
    let mut out = vec![T::zero(); x.numel()];
    for b in 0..b0 {
        for g in 0..groups {
            let base = (b * c0 + g * cpg) * hw;
            let block = &x.data()[base..base + d];
            let mean = block.iter().map(|v| v.as_f64()).sum::<f64>() / d as f64;
            let var = block
                .iter()
                .map(|v| {
                    let e = v.as_f64() - mean;
                    e * e
                })
                .sum::<f64>()
                / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv));
            let (mean_t, inv_t) = (T::from_f64(mean), T::from_f64(inv));
            for (i, (&v, o)) in block.iter().zip(&mut out[base..base + d]).enumerate() {
                let c = g * cpg + i / hw;
                let xhat = (v - mean_t) * inv_t;
                *o = gamma.data()[c] * xhat + beta.data()[c];
            }
        }
    }

    let tape = tape_of(&[x, gamma, beta]);
    let out = Tensor::op_result("group_norm", vec![b0, c0, h0, w0], out, tape.clone());
    if let Some(core) = tape {
        let (sx, sgamma, sbeta) = (x.saved(), gamma.saved(), beta.saved());
        core.record(&out, move |gout| {
            let mut gx = sx.is_tracked().then(|| vec![T::zero(); b0 * c0 * hw]);
            let mut ggamma = sgamma.is_tracked().then(|| vec![0f64; c0]);
            let mut gbeta = sbeta.is_tracked().then(|| vec![0f64; c0]);
            for b in 0..b0 {
                for g in 0..groups {
                    let base = (b * c0 + g * cpg) * hw;
                    let (mean, inv) = stats[b * groups + g];
                    let xblk = &sx.data()[base..base + d];
                    let gblk = &gout[base..base + d];

                    if let Some(gg) = ggamma.as_mut() {
                        for c_off in 0..cpg {
                            let c = g * cpg + c_off;
                            let mut acc = 0f64;
                            for i in c_off * hw..(c_off + 1) * hw {
                                let xhat = (xblk[i].as_f64() - mean) * inv;
                                acc += gblk[i].as_f64() * xhat;
                            }
                            gg[c] += acc;
                        }
                    }
                    if let Some(gb) = gbeta.as_mut() {
                        for c_off in 0..cpg {
                            let c = g * cpg + c_off;
                            gb[c] += gblk[c_off * hw..(c_off + 1) * hw]
                                .iter()
                                .map(|v| v.as_f64())
                                .sum::<f64>();
                        }
                    }
                    if let Some(gx) = gx.as_mut() {
                        // fused normalization backward, sums in f64
                        let mut sum1 = 0f64;
                        let mut sum2 = 0f64;
                        for i in 0..d {
                            let c = g * cpg + i / hw;
                            let dxhat = gblk[i].as_f64() * sgamma.data()[c].as_f64();
                            let xhat = (xblk[i].as_f64() - mean) * inv;
                            sum1 += dxhat;
                            sum2 += dxhat * xhat;
                        }
                        let dn = d as f64;
                        for i in 0..d {
                            let c = g * cpg + i / hw;
                            let dxhat = gblk[i].as_f64() * sgamma.data()[c].as_f64();
                            let xhat = (xblk[i].as_f64() - mean) * inv;
                            gx[base + i] =
                                T::from_f64(inv * (dxhat - (sum1 + xhat * sum2) / dn));
                        }
                    }
                }
            }
            if let Some(gx) = gx {
                sx.acc(gx);
            }
            if let Some(gg) = ggamma {
                sgamma.acc(gg.into_iter().map(T::from_f64).collect());
            }
            if let Some(gb) = gbeta {
                sbeta.acc(gb.into_iter().map(T::from_f64).collect());
            }
        });
    }
    Ok(out)
}

/// Naive nested-loop kernels, kept as the correctness oracle for the packed
/// GEMM path. Forward only; never recorded on a tape.
pub mod reference {
    use super::*;

    pub fn conv2d_direct<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let d = check_conv_args("conv2d_direct", x, weight, bias, stride, 1)?;
        let oh = conv_out_size(d.h, d.k, stride, padding);
        let ow = conv_out_size(d.w, d.k, stride, padding);
        let mut out = vec![T::zero(); d.b * d.cout * oh * ow];
        let p = padding as isize;
        for b in 0..d.b {
            for co in 0..d.cout {
                for gh in 0..oh {
                    for gw in 0..ow {
                        let mut acc = bias.data()[co];
                        for ci in 0..d.cin {
                            for ki in 0..d.k {
                                for kj in 0..d.k {
                                    let ih = (gh * stride) as isize + ki as isize - p;
                                    let iw = (gw * stride) as isize + kj as isize - p;
                                    if ih < 0
                                        || iw < 0
                                        || ih >= d.h as isize
                                        || iw >= d.w as isize
                                    {
                                        continue;
                                    }
                                    let xv = x.data()[((b * d.cin + ci) * d.h
                                        + ih as usize)
                                        * d.w
                                        + iw as usize];
                                    let wv = weight.data()
                                        [((co * d.cin + ci) * d.k + ki) * d.k + kj];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * d.cout + co) * oh + gh) * ow + gw] = acc;
                    }
                }
            }
        }
        Ok(Tensor::new(vec![d.b, d.cout, oh, ow], out))
    }

    pub fn conv_transpose2d_direct<T: Scalar>(
        x: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let d = check_conv_args("conv_transpose2d_direct", x, weight, bias, stride, 0)?;
        let oh = conv_transpose_out_size(d.h, d.k, stride, padding);
        let ow = conv_transpose_out_size(d.w, d.k, stride, padding);
        let mut out = vec![T::zero(); d.b * d.cout * oh * ow];
        for b in 0..d.b {
            for co in 0..d.cout {
                for v in &mut out[(b * d.cout + co) * oh * ow..(b * d.cout + co + 1) * oh * ow]
                {
                    *v = bias.data()[co];
                }
            }
            for ci in 0..d.cin {
                for h in 0..d.h {
                    for w in 0..d.w {
                        let xv = x.data()[((b * d.cin + ci) * d.h + h) * d.w + w];
                        for co in 0..d.cout {
                            for ki in 0..d.k {
                                for kj in 0..d.k {
                                    let oh_pos =
                                        (h * stride + ki) as isize - padding as isize;
                                    let ow_pos =
                                        (w * stride + kj) as isize - padding as isize;
                                    if oh_pos < 0
                                        || ow_pos < 0
                                        || oh_pos >= oh as isize
                                        || ow_pos >= ow as isize
                                    {
                                        continue;
                                    }
                                    let wv = weight.data()
                                        [((ci * d.cout + co) * d.k + ki) * d.k + kj];
                                    out[((b * d.cout + co) * oh + oh_pos as usize) * ow
                                        + ow_pos as usize] += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![d.b, d.cout, oh, ow], out))
    }
}
