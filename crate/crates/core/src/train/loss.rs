//! The weighted MAE+MSE training loss and its per-pixel weight schedule.

use super::{Result, TrainError};
use crate::tensor::{tape_of, Scalar, Tensor, TensorError};

pub(super) fn validate_schedule(breakpoints: &[f64], weights: &[f64]) -> Result<()> {
    if weights.len() != breakpoints.len() + 1 {
        return Err(TrainError::Config(format!(
            "weight schedule needs len(weights) == len(breakpoints)+1, got {} and {}",
            weights.len(),
            breakpoints.len()
        )));
    }
    if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TrainError::Config(
            "weight breakpoints must be strictly increasing".into(),
        ));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(TrainError::Config(
            "weights must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

/// Piecewise-constant pixel weights keyed on ground-truth reflectivity (dBZ).
///
/// A pixel below the first breakpoint gets `weights[0]`; one at or above
/// breakpoint `i` (and below the next) gets `weights[i+1]`. With no
/// breakpoints and a single weight, the loss degenerates to plain MAE+MSE.
/// The result is a constant tensor; no gradient flows into it.
pub fn bmae_pixel_weights<T: Scalar>(
    truth_dbz: &Tensor<T>,
    breakpoints: &[f64],
    weights: &[f64],
) -> Result<Tensor<T>> {
    validate_schedule(breakpoints, weights)?;
    let data: Vec<T> = truth_dbz
        .data()
        .iter()
        .map(|v| {
            let dbz = v.as_f64();
            let band = breakpoints.partition_point(|b| *b <= dbz);
            T::from_f64(weights[band])
        })
        .collect();
    Ok(Tensor::new(truth_dbz.shape().to_vec(), data))
}

/// Weighted blend of absolute and squared error:
/// `mean(w ∘ (|pred−truth| + (pred−truth)²) / 2)`.
///
/// Fused into one differentiable node; the sum accumulates in f64 so the loss
/// value does not depend on element order even in single precision. The
/// absolute-error subgradient at zero is taken as 0, so `pred == truth` has
/// both zero loss and zero gradient.
pub fn weighted_mae_mse_loss<T: Scalar>(
    pred: &Tensor<T>,
    truth: &Tensor<T>,
    w: &Tensor<T>,
) -> Result<Tensor<T>> {
    if pred.shape() != truth.shape() || pred.shape() != w.shape() {
        return Err(TensorError::Shape {
            op: "weighted_mae_mse_loss",
            detail: format!(
                "pred {:?}, truth {:?}, w {:?} must match",
                pred.shape(),
                truth.shape(),
                w.shape()
            ),
        }
        .into());
    }
    let n = pred.numel();
    let mut total = 0.0f64;
    for ((p, t), wi) in pred.data().iter().zip(truth.data()).zip(w.data()) {
        let d = p.as_f64() - t.as_f64();
        total += wi.as_f64() * (d.abs() + d * d) / 2.0;
    }
    let tape = tape_of(&[pred, truth, w]);
    let out = Tensor::op_result(
        "weighted_mae_mse_loss",
        Vec::new(),
        vec![T::from_f64(total / n as f64)],
        tape.clone(),
    );
    if let Some(core) = tape {
        let sp = pred.saved();
        let st = truth.saved();
        let sw = w.saved();
        core.record(&out, move |g| {
            let g0 = g[0].as_f64() / n as f64;
            if sp.is_tracked() || st.is_tracked() {
                let gp: Vec<T> = sp
                    .data()
                    .iter()
                    .zip(st.data())
                    .zip(sw.data())
                    .map(|((p, t), wi)| {
                        let d = p.as_f64() - t.as_f64();
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        T::from_f64(g0 * wi.as_f64() * (sign + 2.0 * d) / 2.0)
                    })
                    .collect();
                if st.is_tracked() {
                    st.acc(gp.iter().map(|v| T::zero() - *v).collect());
                }
                sp.acc(gp);
            }
            if sw.is_tracked() {
                let gw: Vec<T> = sp
                    .data()
                    .iter()
                    .zip(st.data())
                    .map(|(p, t)| {
                        let d = p.as_f64() - t.as_f64();
                        T::from_f64(g0 * (d.abs() + d * d) / 2.0)
                    })
                    .collect();
                sw.acc(gw);
            }
        });
    }
    Ok(out)
}
