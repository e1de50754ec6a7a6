//! Utility reward coupling answer quality with normalized cost.

use crate::data::{normalize_cost, Sample};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_COST: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardParams {
    /// Cost-penalty strength.
    pub lambda_cost: f64,
}

impl RewardParams {
    pub fn new(lambda_cost: f64) -> Result<Self> {
        if !(lambda_cost.is_finite() && lambda_cost >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "reward lambda must be finite and non-negative, got {lambda_cost}"
            )));
        }
        Ok(Self { lambda_cost })
    }
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda_cost: DEFAULT_LAMBDA_COST,
        }
    }
}

/// `q * exp(-lambda * c_norm)`.
pub fn utility_reward(quality: f64, cost_norm: f64, params: &RewardParams) -> f64 {
    quality * (-params.lambda_cost * cost_norm).exp()
}

/// Rewards of every action for one sample.
///
/// This reads the full-information ground truth, so it belongs to metrics
/// and oracles. Routing policies must go through
/// [`crate::harness::FeedbackOracle`] instead.
pub fn reward_table(sample: &Sample, cmax: f64, params: &RewardParams) -> Vec<f64> {
    sample
        .quality
        .iter()
        .zip(&sample.cost)
        .map(|(&q, &c)| utility_reward(q, normalize_cost(c, cmax), params))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::RoutingContext;
    use proptest::prelude::*;

    fn sample(quality: Vec<f64>, cost: Vec<f64>) -> Sample {
        Sample {
            id: "s".into(),
            context: RoutingContext::new(vec![0.0, 0.0], [0.0; 3], 0),
            quality,
            cost,
        }
    }

    #[test]
    fn closed_forms() {
        let p = RewardParams::default();
        assert_eq!(utility_reward(0.8, 0.0, &p), 0.8);
        assert_eq!(
            utility_reward(0.37, 0.6, &RewardParams::new(0.0).unwrap()),
            0.37
        );
        let r = utility_reward(1.0, 1.0, &p);
        assert!((r - 0.367_879_441_171_442_3).abs() < 1e-12, "{r}");
    }

    #[test]
    fn table_cells() {
        let p = RewardParams::default();
        let t = reward_table(&sample(vec![1.0, 1.0], vec![0.0, 4.0]), 4.0, &p);
        assert_eq!(t[0], 1.0);
        assert!((t[1] - (-1.0f64).exp()).abs() < 1e-15);

        let zeros = reward_table(&sample(vec![0.0; 3], vec![1.0, 2.0, 3.0]), 3.0, &p);
        assert_eq!(zeros, vec![0.0; 3]);

        let q = vec![0.1, 0.5, 0.9];
        let free = reward_table(
            &sample(q.clone(), vec![1.0, 2.0, 3.0]),
            3.0,
            &RewardParams::new(0.0).unwrap(),
        );
        assert_eq!(free, q);
    }

    #[test]
    fn rejects_negative_lambda() {
        assert!(RewardParams::new(-0.1).is_err());
        assert!(RewardParams::new(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn bounded_and_scaling(q in 0.0f64..=1.0, c in 0.0f64..=1.0, lam in 0.0f64..10.0) {
            let p = RewardParams::new(lam).unwrap();
            let r = utility_reward(q, c, &p);
            prop_assert!((0.0..=q).contains(&r));
            prop_assert!((r - q * utility_reward(1.0, c, &p)).abs() < 1e-15);
        }

        #[test]
        fn monotone(q1 in 0.0f64..=1.0, q2 in 0.0f64..=1.0, c1 in 0.0f64..=1.0, c2 in 0.0f64..=1.0, lam in 0.0f64..10.0) {
            let p = RewardParams::new(lam).unwrap();
            let (qlo, qhi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let (clo, chi) = if c1 <= c2 { (c1, c2) } else { (c2, c1) };
            prop_assert!(utility_reward(qlo, c1, &p) <= utility_reward(qhi, c1, &p));
            prop_assert!(utility_reward(q1, chi, &p) <= utility_reward(q1, clo, &p));
        }
    }
}
