//! Neural UCB action selection over the network's last hidden layer.
//!
//! All actions share one inverse covariance `A⁻¹` over the augmented
//! feature `g(x, a) = [h(x, a); 1]`. It starts at `I / λ₀`, receives a
//! Sherman–Morrison downdate for every chosen action and is rebuilt from the
//! replay buffer after each training round.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::data::RoutingContext;
use crate::error::{Error, Result};
use crate::net::{
    forward_all_actions, last_hidden_batch, train_epochs, OptimizerState, TrainConfig,
    UtilityNetParams, LAST_HIDDEN,
};
use crate::replay::ReplayRecord;

/// Dimension of the augmented UCB feature.
pub const FEATURE_DIM: usize = LAST_HIDDEN + 1;

const SYMMETRY_TOL: f64 = 1e-9;
const NEGATIVE_FORM_TOL: f64 = 1e-9;
const REBUILD_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UcbConfig {
    /// Exploration coefficient.
    pub beta: f64,
    /// Ridge initializer, `A = λ₀ I` before any update.
    pub lambda0: f64,
    /// Gate probability at or above which the bonus is used.
    pub tau_g: f64,
}

impl Default for UcbConfig {
    fn default() -> Self {
        Self {
            beta: 1.0,
            lambda0: 1.0,
            tau_g: 0.5,
        }
    }
}

impl UcbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("ucb.beta", "must be finite and non-negative"));
        }
        if !(self.lambda0.is_finite() && self.lambda0 > 0.0) {
            return Err(Error::config("ucb.lambda0", "must be finite and positive"));
        }
        if !self.tau_g.is_finite() {
            return Err(Error::config("ucb.tau_g", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UcbState {
    a_inv: DMatrix<f64>,
    pub config: UcbConfig,
    update_count: usize,
}

impl UcbState {
    pub fn new(dim: usize, config: UcbConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            a_inv: DMatrix::identity(dim, dim) / config.lambda0,
            config,
            update_count: 0,
        })
    }

    pub fn a_inv(&self) -> &DMatrix<f64> {
        &self.a_inv
    }

    pub fn dim(&self) -> usize {
        self.a_inv.nrows()
    }

    pub fn update_count(&self) -> usize {
        self.update_count
    }

    /// `gᵀ A⁻¹ g`, with floating-point residue below zero clamped away.
    pub fn quadratic_form(&self, g: &DVector<f64>) -> Result<f64> {
        self.check_len(g)?;
        let q = g.dot(&(&self.a_inv * g));
        if !q.is_finite() || q < -NEGATIVE_FORM_TOL {
            return Err(Error::Corrupted(format!("quadratic form {q}")));
        }
        Ok(q.max(0.0))
    }

    pub fn bonus(&self, g: &DVector<f64>) -> Result<f64> {
        Ok(self.config.beta * self.quadratic_form(g)?.sqrt())
    }

    fn check_len(&self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature has {} entries, covariance is {}x{}",
                g.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn symmetrize(&mut self) {
        let t = self.a_inv.transpose();
        self.a_inv += t;
        self.a_inv *= 0.5;
    }

    /// Largest absolute asymmetry `|A⁻¹ - A⁻ᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        (&self.a_inv - self.a_inv.transpose()).amax()
    }

    pub fn is_symmetric(&self) -> bool {
        self.asymmetry() < SYMMETRY_TOL
    }
}

/// `[h; 1]`.
pub fn augment_feature(h: &[f64]) -> DVector<f64> {
    DVector::from_iterator(h.len() + 1, h.iter().copied().chain(std::iter::once(1.0)))
}

/// Returns `(mu + bonus, bonus)` with `bonus = β sqrt(gᵀ A⁻¹ g)`.
pub fn ucb_score(mu: f64, g: &DVector<f64>, state: &UcbState) -> Result<(f64, f64)> {
    let bonus = state.bonus(g)?;
    Ok((mu + bonus, bonus))
}

/// Sherman–Morrison downdate of `A⁻¹` for `A ← A + g gᵀ`.
pub fn rank1_update(state: &mut UcbState, g: &DVector<f64>) -> Result<()> {
    state.check_len(g)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite UCB feature".into()));
    }
    let a_inv_g = &state.a_inv * g;
    let denom = 1.0 + g.dot(&a_inv_g);
    if !(denom.is_finite() && denom > 0.0) {
        return Err(Error::Corrupted(format!(
            "Sherman-Morrison denominator {denom}"
        )));
    }
    state.a_inv.ger(-1.0 / denom, &a_inv_g, &a_inv_g, 1.0);
    state.symmetrize();
    state.update_count += 1;
    Ok(())
}

/// Resets `A⁻¹` to `(λ₀ I + Σ g gᵀ)⁻¹` over the given features.
pub fn rebuild_from_features<'a>(
    state: &mut UcbState,
    features: impl IntoIterator<Item = &'a DVector<f64>>,
) -> Result<()> {
    let dim = state.dim();
    let mut a = DMatrix::identity(dim, dim) * state.config.lambda0;
    let mut count = 0;
    for g in features {
        state.check_len(g)?;
        a.ger(1.0, g, g, 1.0);
        count += 1;
    }
    install_inverse(state, a, count)
}

fn install_inverse(state: &mut UcbState, a: DMatrix<f64>, count: usize) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::Corrupted(
            "non-finite covariance during rebuild".into(),
        ));
    }
    let chol = a
        .cholesky()
        .ok_or_else(|| Error::Corrupted("covariance is not positive definite".into()))?;
    state.a_inv = chol.inverse();
    state.symmetrize();
    state.update_count = count;
    Ok(())
}

/// Recomputes every buffered (context, chosen action) feature under the
/// current network and inverts `λ₀ I + Σ g gᵀ` directly.
pub fn rebuild(
    state: &mut UcbState,
    nets: &UtilityNetParams,
    buffer: &[ReplayRecord],
) -> Result<()> {
    let dim = state.dim();
    if dim != FEATURE_DIM {
        return Err(Error::Dimension(format!(
            "covariance is {dim}x{dim}, network features need {FEATURE_DIM}"
        )));
    }
    let mut a = DMatrix::identity(dim, dim) * state.config.lambda0;
    for chunk in buffer.chunks(REBUILD_CHUNK) {
        let pairs: Vec<_> = chunk.iter().map(|r| (&r.context, r.action)).collect();
        let h = last_hidden_batch(nets, &pairs)?;
        let mut g = DMatrix::from_element(chunk.len(), dim, 1.0);
        for (i, row) in h.rows().into_iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                g[(i, j)] = *v;
            }
        }
        a.gemm_tr(1.0, &g, &g, 1.0);
    }
    install_inverse(state, a, buffer.len())
}

/// Outcome of one routing decision.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub chosen_action: usize,
    pub safe_action: usize,
    pub used_ucb: bool,
    pub gate_prob: f64,
    pub mu_scores: Vec<f64>,
    pub bonus_scores: Vec<f64>,
    pub ucb_scores: Vec<f64>,
    /// `g(x, a)` for every action.
    pub features: Vec<DVector<f64>>,
}

impl Decision {
    pub fn chosen_feature(&self) -> &DVector<f64> {
        &self.features[self.chosen_action]
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Gated selection. Returns `(chosen, safe, used_ucb)`.
pub fn select_action(
    mu: &[f64],
    bonus: &[f64],
    gate_prob: f64,
    tau_g: f64,
) -> (usize, usize, bool) {
    let safe = argmax(mu);
    if gate_prob >= tau_g {
        let scores: Vec<f64> = mu.iter().zip(bonus).map(|(m, b)| m + b).collect();
        (argmax(&scores), safe, true)
    } else {
        (safe, safe, false)
    }
}

pub fn decide(nets: &UtilityNetParams, state: &UcbState, ctx: &RoutingContext) -> Result<Decision> {
    let traces = forward_all_actions(nets, ctx)?;
    let gate_prob = traces[0].gate_prob;
    let features: Vec<DVector<f64>> = traces
        .iter()
        .map(|t| augment_feature(t.h_last.as_slice().expect("contiguous activations")))
        .collect();
    let mut mu_scores = Vec::with_capacity(traces.len());
    let mut bonus_scores = Vec::with_capacity(traces.len());
    let mut ucb_scores = Vec::with_capacity(traces.len());
    for (t, g) in traces.iter().zip(&features) {
        let (score, bonus) = ucb_score(t.mu, g, state)?;
        mu_scores.push(t.mu);
        bonus_scores.push(bonus);
        ucb_scores.push(score);
    }
    let (chosen, safe, used_ucb) =
        select_action(&mu_scores, &bonus_scores, gate_prob, state.config.tau_g);
    Ok(Decision {
        chosen_action: chosen,
        safe_action: safe,
        used_ucb,
        gate_prob,
        mu_scores,
        bonus_scores,
        ucb_scores,
        features,
    })
}

/// Network, optimizer and shared covariance of a neural UCB router.
#[derive(Debug, Clone)]
pub struct NeuralUcbAgent {
    pub params: UtilityNetParams,
    pub optimizer: OptimizerState,
    pub ucb: UcbState,
    pub train: TrainConfig,
}

impl NeuralUcbAgent {
    pub fn new(
        params: UtilityNetParams,
        optimizer: OptimizerState,
        ucb: UcbConfig,
        train: TrainConfig,
    ) -> Result<Self> {
        Ok(Self {
            params,
            optimizer,
            ucb: UcbState::new(FEATURE_DIM, ucb)?,
            train,
        })
    }

    pub fn decide(&self, ctx: &RoutingContext) -> Result<Decision> {
        decide(&self.params, &self.ucb, ctx)
    }

    /// Covariance update with the feature of the action actually taken.
    pub fn update(&mut self, feature: &DVector<f64>) -> Result<()> {
        rank1_update(&mut self.ucb, feature)
    }

    /// Trains on the whole buffer, then rebuilds the covariance. Returns the
    /// per-epoch training loss.
    pub fn train_and_rebuild<R: Rng + ?Sized>(
        &mut self,
        buffer: &[ReplayRecord],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        let losses = if buffer.is_empty() {
            Vec::new()
        } else {
            train_epochs(
                &mut self.params,
                &mut self.optimizer,
                buffer,
                &self.train,
                rng,
            )?
        };
        rebuild(&mut self.ucb, &self.params, buffer)?;
        Ok(losses)
    }
}
