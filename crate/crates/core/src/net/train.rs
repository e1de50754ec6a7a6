use rand::seq::SliceRandom;
use rand::Rng;

use super::forward::{loss_and_gradients, LossConfig};
use super::UtilityNetParams;
use crate::error::{Error, Result};
use crate::replay::ReplayRecord;

pub const DEFAULT_LEARNING_RATE: f64 = 1e-3;

/// Adaptive-moment optimizer state with one first/second moment per
/// parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: UtilityNetParams,
    pub second_moment: UtilityNetParams,
}

impl OptimizerState {
    pub fn new(params: &UtilityNetParams, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first_moment: UtilityNetParams::zeros(params.dims()),
            second_moment: UtilityNetParams::zeros(params.dims()),
        }
    }

    /// Applies one update from `grads`.
    pub fn apply(&mut self, params: &mut UtilityNetParams, grads: &UtilityNetParams) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bias1 = 1.0 - b1.powi(self.step as i32);
        let bias2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let eps = self.eps;
        let grads = grads.tensors();
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(self.first_moment.tensors_mut())
            .zip(self.second_moment.tensors_mut())
            .zip(grads);
        for ((((_, p), (_, m)), (_, v)), (_, g)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            loss: LossConfig::default(),
        }
    }
}

/// Runs `cfg.epochs` passes over `buffer` in shuffled minibatches and
/// returns the mean training loss of each epoch.
pub fn train_epochs<R: Rng + ?Sized>(
    params: &mut UtilityNetParams,
    opt: &mut OptimizerState,
    buffer: &[ReplayRecord],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    if buffer.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot train on an empty buffer".into(),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| buffer[i].clone()));
            let (report, grads) = loss_and_gradients(params, &batch, &cfg.loss)?;
            total += report.total * chunk.len() as f64;
            opt.apply(params, &grads);
        }
        losses.push(total / buffer.len() as f64);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RoutingContext;
    use crate::net::NetDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn records(n: usize, seed: u64) -> Vec<ReplayRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(-1.0..1.0);
                let a = rng.random_range(0..3);
                // Reward depends on context and action.
                let reward = (0.5 + 0.4 * x * (a as f64 - 1.0)).clamp(0.0, 1.0);
                ReplayRecord {
                    context: RoutingContext::new(
                        vec![x, 1.0 - x, x * x, 0.3],
                        [x, 0.0, 1.0],
                        i % 2,
                    ),
                    action: a,
                    reward,
                    gate_label: x > 0.3,
                    gate_open: false,
                    slice_index: 0,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let dims = NetDims::new(4, 2, 3).unwrap();
        let mut p = UtilityNetParams::init(dims, &mut ChaCha8Rng::seed_from_u64(1));
        let before = p.clone();
        let mut opt = OptimizerState::new(&p, DEFAULT_LEARNING_RATE);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let losses = train_epochs(
            &mut p,
            &mut opt,
            &records(10, 0),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(losses.is_empty());
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let dims = NetDims::new(4, 2, 3).unwrap();
        let mut p = UtilityNetParams::init(dims, &mut ChaCha8Rng::seed_from_u64(1));
        let mut opt = OptimizerState::new(&p, DEFAULT_LEARNING_RATE);
        let buffer = records(500, 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 64,
            ..Default::default()
        };
        let losses = train_epochs(
            &mut p,
            &mut opt,
            &buffer,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!(losses.len(), 5);
        assert!(losses[4] < losses[0], "{losses:?}");
    }

    #[test]
    fn training_is_bit_reproducible() {
        let dims = NetDims::new(4, 2, 3).unwrap();
        let buffer = records(300, 5);
        let run = || {
            let mut p = UtilityNetParams::init(dims, &mut ChaCha8Rng::seed_from_u64(8));
            let mut opt = OptimizerState::new(&p, DEFAULT_LEARNING_RATE);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 50,
                ..Default::default()
            };
            train_epochs(
                &mut p,
                &mut opt,
                &buffer,
                &cfg,
                &mut ChaCha8Rng::seed_from_u64(9),
            )
            .unwrap();
            (p, opt)
        };
        let (a, oa) = run();
        let (b, ob) = run();
        for ((_, x), (_, y)) in a.tensors().iter().zip(b.tensors()) {
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        assert_eq!(oa, ob);
    }

    #[test]
    fn empty_buffer_is_an_error() {
        let dims = NetDims::new(4, 2, 3).unwrap();
        let mut p = UtilityNetParams::zeros(dims);
        let mut opt = OptimizerState::new(&p, DEFAULT_LEARNING_RATE);
        let res = train_epochs(
            &mut p,
            &mut opt,
            &[],
            &TrainConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(res.is_err());
    }
}
