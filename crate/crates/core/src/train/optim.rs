//! Adam with coupled L2 weight decay, global-norm clipping, and weight
//! averaging. Moments and averages accumulate in f64 no matter what precision
//! the model trains in.

use super::{Result, TrainConfig, TrainError};
use crate::model::ModelParams;
use crate::tensor::Scalar;

/// Scale all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the applied scale (1.0 when no clipping was needed). Zero
/// gradients pass through untouched.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum();
    let norm = sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.iter_mut() {
        for v in g.iter_mut() {
            *v = T::from_f64(v.as_f64() * scale);
        }
    }
    scale
}

/// Optimizer state: Adam moments plus the running weight average.
///
/// Buffers are laid out in parameter-manifest order and allocated lazily on
/// the first step, sized from the gradients.
pub struct OptimizerState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
    swa_sum: Vec<Vec<f64>>,
    swa_count: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState {
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
            swa_sum: Vec::new(),
            swa_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn swa_snapshots(&self) -> u64 {
        self.swa_count
    }

    /// One Adam update with bias correction. Weight decay enters as an
    /// additive L2 term on the gradient (plain Adam, not the decoupled
    /// variant). `grads` must be in manifest order, matching `params`.
    pub fn adam_step<T: Scalar>(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &[Vec<T>],
        config: &TrainConfig,
    ) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        debug_assert_eq!(self.m.len(), grads.len(), "gradient layout changed");

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);

        let mut idx = 0;
        params.visit_mut(|p| {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            debug_assert_eq!(g.len(), p.numel(), "gradient/parameter size mismatch");
            p.update_data(|data| {
                for (j, x) in data.iter_mut().enumerate() {
                    let grad = g[j].as_f64() + config.weight_decay * x.as_f64();
                    m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * grad;
                    v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * grad * grad;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    let next =
                        x.as_f64() - config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
                    *x = T::from_f64(next);
                }
            });
            idx += 1;
        });
    }

    /// Fold the current parameters into the running average.
    pub fn swa_update<T: Scalar>(&mut self, params: &ModelParams<T>) {
        let named = params.named();
        if self.swa_sum.is_empty() {
            self.swa_sum = named.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        }
        for ((_, t), sum) in named.iter().zip(self.swa_sum.iter_mut()) {
            for (s, x) in sum.iter_mut().zip(t.data()) {
                *s += x.as_f64();
            }
        }
        self.swa_count += 1;
    }

    /// The arithmetic mean of all snapshots, as a fresh parameter set shaped
    /// like `like`. The live parameters are left untouched.
    pub fn swa_finalize<T: Scalar>(&self, like: &ModelParams<T>) -> Result<ModelParams<T>> {
        if self.swa_count == 0 {
            return Err(TrainError::Config(
                "weight averaging finalized before any snapshot".into(),
            ));
        }
        let mut out = like.clone();
        let inv = 1.0 / self.swa_count as f64;
        let mut idx = 0;
        out.visit_mut(|p| {
            let sum = &self.swa_sum[idx];
            p.update_data(|data| {
                for (x, s) in data.iter_mut().zip(sum) {
                    *x = T::from_f64(s * inv);
                }
            });
            idx += 1;
        });
        Ok(out)
    }
}

impl Default for OptimizerState {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};
    use rand::{Rng, SeedableRng};

    #[test]
    fn small_gradients_pass_through_unclipped() {
        let mut grads = vec![vec![0.3f64, 0.4]];
        let scale = clip_global_norm(&mut grads, 1.0);
        assert_eq!(scale, 1.0);
        assert_eq!(grads[0], vec![0.3, 0.4]);
    }

    #[test]
    fn large_gradients_are_scaled_to_the_max_norm() {
        // ‖[3,4]‖ = 5 → scale 0.2
        let mut grads = vec![vec![3.0f64], vec![4.0]];
        let scale = clip_global_norm(&mut grads, 1.0);
        assert!((scale - 0.2).abs() < 1e-15);
        let norm = (grads[0][0].powi(2) + grads[1][0].powi(2)).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradients_stay_zero() {
        let mut grads = vec![vec![0.0f32; 8]];
        let scale = clip_global_norm(&mut grads, 1.0);
        assert_eq!(scale, 1.0);
        assert!(grads[0].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn clipping_never_increases_the_norm() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut grads: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let before: f64 = grads
                .iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            clip_global_norm(&mut grads, 1.0);
            let after: f64 = grads
                .iter()
                .flatten()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(after <= before + 1e-12);
            assert!(after <= 1.0 + 1e-6);
        }
    }

    /// One Adam step on a toy model against the update formula evaluated by
    /// hand, in double precision.
    #[test]
    fn first_step_matches_hand_computed_adam() {
        let config = ModelConfig::toy();
        let mut params = init_params::<f64>(&config, 5).unwrap();
        let before: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();

        // synthetic gradients: a recognizable pattern per parameter
        let grads: Vec<Vec<f64>> = before
            .iter()
            .map(|p| p.iter().enumerate().map(|(i, _)| 0.01 * (i as f64 + 1.0)).collect())
            .collect();

        let cfg = TrainConfig::default();
        let mut state = OptimizerState::new();
        state.adam_step(&mut params, &grads, &cfg);

        let after: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();

        for (pi, (b, a)) in before.iter().zip(&after).enumerate() {
            for (j, (x0, x1)) in b.iter().zip(a).enumerate() {
                let g = grads[pi][j] + cfg.weight_decay * x0;
                let m = (1.0 - cfg.beta1) * g;
                let v = (1.0 - cfg.beta2) * g * g;
                let m_hat = m / (1.0 - cfg.beta1);
                let v_hat = v / (1.0 - cfg.beta2);
                let expect = x0 - cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
                assert!(
                    (x1 - expect).abs() <= 1e-10,
                    "param {pi} elem {j}: {x1} vs {expect}"
                );
            }
        }
    }

    #[test]
    fn zero_gradients_and_zero_decay_freeze_parameters() {
        let config = ModelConfig::toy();
        let mut params = init_params::<f64>(&config, 6).unwrap();
        let before: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        let grads: Vec<Vec<f64>> = before.iter().map(|p| vec![0.0; p.len()]).collect();

        let mut cfg = TrainConfig::default();
        cfg.weight_decay = 0.0;
        let mut state = OptimizerState::new();
        state.adam_step(&mut params, &grads, &cfg);

        let after: Vec<Vec<f64>> = params
            .named()
            .iter()
            .map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn identical_runs_take_identical_trajectories() {
        let config = ModelConfig::toy();
        let cfg = TrainConfig::default();
        let run = || {
            let mut params = init_params::<f32>(&config, 8).unwrap();
            let mut state = OptimizerState::new();
            for step in 0..3 {
                let grads: Vec<Vec<f32>> = params
                    .named()
                    .iter()
                    .map(|(_, t)| {
                        (0..t.numel())
                            .map(|i| 0.001 * ((i + step) as f32).sin())
                            .collect()
                    })
                    .collect();
                state.adam_step(&mut params, &grads, &cfg);
            }
            params
                .named()
                .iter()
                .flat_map(|(_, t)| t.data().to_vec())
                .collect::<Vec<f32>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn average_of_identical_snapshots_is_the_snapshot() {
        let config = ModelConfig::toy();
        let params = init_params::<f64>(&config, 11).unwrap();
        let mut state = OptimizerState::new();
        state.swa_update(&params);
        state.swa_update(&params);
        let avg = state.swa_finalize(&params).unwrap();
        for ((_, a), (_, b)) in params.named().iter().zip(avg.named().iter()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn average_matches_an_explicit_mean() {
        let config = ModelConfig::toy();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut state = OptimizerState::new();
        let mut snapshots: Vec<Vec<f64>> = Vec::new();
        let mut params = init_params::<f64>(&config, 13).unwrap();
        for _ in 0..4 {
            params.visit_mut(|p| {
                p.update_data(|data| {
                    for x in data.iter_mut() {
                        *x = rng.gen_range(-1.0..1.0);
                    }
                });
            });
            snapshots.push(
                params
                    .named()
                    .iter()
                    .flat_map(|(_, t)| t.data().to_vec())
                    .collect(),
            );
            state.swa_update(&params);
        }
        let avg = state.swa_finalize(&params).unwrap();
        let got: Vec<f64> = avg
            .named()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        for (j, g) in got.iter().enumerate() {
            let mean: f64 = snapshots.iter().map(|s| s[j]).sum::<f64>() / snapshots.len() as f64;
            assert!((g - mean).abs() < 1e-6, "elem {j}: {g} vs {mean}");
        }
        assert_eq!(state.swa_snapshots(), 4);
    }

    #[test]
    fn finalize_without_snapshots_is_an_error() {
        let config = ModelConfig::toy();
        let params = init_params::<f64>(&config, 1).unwrap();
        let state = OptimizerState::new();
        assert!(state.swa_finalize(&params).is_err());
    }
}
