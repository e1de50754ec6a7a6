//! Reference routers: uniform random, per-sample cheapest, per-sample best
//! quality, and a binary strong/weak router.
//!
//! The binary router stands in for a fine-tuned BERT strong/weak
//! classifier: a logistic head over the same precomputed embeddings the
//! neural policy sees.

use rand::Rng;

use crate::data::{RoutingContext, Sample};
use crate::error::{Error, Result};
use crate::net::sigmoid;
use crate::policy::argmax;
use crate::reward::{reward_table, RewardParams};

pub fn random_policy<R: Rng + ?Sized>(num_actions: usize, rng: &mut R) -> usize {
    rng.random_range(0..num_actions)
}

/// Cheapest action for this sample; ties go to the lowest index.
pub fn mincost_policy(sample: &Sample) -> usize {
    let neg: Vec<f64> = sample.cost.iter().map(|c| -c).collect();
    argmax(&neg)
}

/// Highest-quality action for this sample; ties go to the lowest index.
pub fn maxquality_policy(sample: &Sample) -> usize {
    argmax(&sample.quality)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRouterParams {
    pub strong_action: usize,
    pub weak_action: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub threshold: f64,
}

impl BinaryRouterParams {
    pub fn logit(&self, embedding: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(embedding)
                .map(|(w, x)| w * x)
                .sum::<f64>()
    }

    pub fn strong_probability(&self, ctx: &RoutingContext) -> f64 {
        sigmoid(self.logit(&ctx.embedding))
    }
}

/// Full-batch gradient-descent settings for the logistic head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogisticFit {
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for LogisticFit {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.5,
            l2: 1e-4,
        }
    }
}

/// Per-sample labels: 1 when the strong action's reward is at least the weak
/// action's.
pub fn strong_wins_labels(
    train: &[Sample],
    cmax: f64,
    reward: &RewardParams,
    strong: usize,
    weak: usize,
) -> Vec<bool> {
    train
        .iter()
        .map(|s| {
            let r = reward_table(s, cmax, reward);
            r[strong] >= r[weak]
        })
        .collect()
}

/// Picks the actions with the highest and lowest mean reward on `train` and
/// fits a logistic classifier on embeddings predicting when the strong one
/// is at least as good as the weak one.
pub fn fit_binary_router(
    train: &[Sample],
    cmax: f64,
    reward: &RewardParams,
    fit: &LogisticFit,
) -> Result<BinaryRouterParams> {
    let first = train
        .first()
        .ok_or_else(|| Error::InvalidArgument("binary router needs a non-empty slice".into()))?;
    let k = first.quality.len();
    let mut mean = vec![0.0; k];
    for s in train {
        for (m, r) in mean.iter_mut().zip(reward_table(s, cmax, reward)) {
            *m += r;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let strong = argmax(&mean);
    let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
    let weak = argmax(&neg);
    if strong == weak {
        return Err(Error::InvalidArgument(
            "all actions have equal mean reward; strong and weak coincide".into(),
        ));
    }

    let labels = strong_wins_labels(train, cmax, reward, strong, weak);
    let dim = first.context.embedding.len();
    let n = train.len() as f64;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    let mut grad = vec![0.0; dim];
    for _ in 0..fit.iterations {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for (s, &y) in train.iter().zip(&labels) {
            let x = &s.context.embedding;
            let z = bias
                + weights
                    .iter()
                    .zip(x.iter())
                    .map(|(w, xi)| w * xi)
                    .sum::<f64>();
            let err = sigmoid(z) - if y { 1.0 } else { 0.0 };
            grad.iter_mut()
                .zip(x.iter())
                .for_each(|(g, xi)| *g += err * xi);
            grad_b += err;
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= fit.learning_rate * (g / n + fit.l2 * *w);
        }
        bias -= fit.learning_rate * grad_b / n;
    }
    Ok(BinaryRouterParams {
        strong_action: strong,
        weak_action: weak,
        weights,
        bias,
        threshold: 0.5,
    })
}

pub fn binary_route(params: &BinaryRouterParams, ctx: &RoutingContext) -> usize {
    if params.strong_probability(ctx) >= params.threshold {
        params.strong_action
    } else {
        params.weak_action
    }
}
