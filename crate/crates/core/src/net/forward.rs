use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};

use super::{
    Affine, UtilityNetParams, ACTION_EMBED, FEATURE_INPUT, LAST_HIDDEN, TEXT_HIDDEN, TRUNK_WIDTH,
};
use crate::data::{RoutingContext, NUM_FEATURES};
use crate::error::{Error, Result};
use crate::replay::ReplayRecord;

/// Activations of one (context, action) pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub action: usize,
    pub text_pre: Array1<f64>,
    pub h_emb: Array1<f64>,
    pub feature_pre: Array1<f64>,
    pub h_feat: Array1<f64>,
    pub utility_pre: [Array1<f64>; 3],
    /// Last hidden utility layer, the UCB feature `h(x, a)`.
    pub h_last: Array1<f64>,
    /// Raw utility head output; never squashed.
    pub mu: f64,
    pub gate_pre: Array1<f64>,
    pub gate_logit: f64,
    pub gate_prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Transition point between the quadratic and linear Huber zones.
    pub huber_delta: f64,
    /// Weight of the gate BCE term relative to the utility Huber term.
    pub gate_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            huber_delta: 1.0,
            gate_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub utility: f64,
    pub gate: f64,
}

/// Context-only part of the network for a batch of contexts.
struct Trunk {
    inputs: Array2<f64>,
    text_pre: Array2<f64>,
    feature_inputs: Array2<f64>,
    feature_pre: Array2<f64>,
    /// `[h_emb, h_feat]`, one row per context.
    repr: Array2<f64>,
    gate_pre: Array2<f64>,
    gate_act: Array2<f64>,
    gate_logit: Array1<f64>,
}

struct UtilityPass {
    inputs: Array2<f64>,
    pre: [Array2<f64>; 3],
    act: [Array2<f64>; 3],
    mu: Array1<f64>,
}

fn affine(layer: &Affine, x: &ArrayView2<f64>) -> Array2<f64> {
    x.dot(&layer.weight) + &layer.bias
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_context(params: &UtilityNetParams, ctx: &RoutingContext) -> Result<()> {
    let dims = params.dims();
    if ctx.embedding.len() != dims.embed_dim {
        return Err(Error::Dimension(format!(
            "embedding has {} entries, network expects {}",
            ctx.embedding.len(),
            dims.embed_dim
        )));
    }
    if ctx.domain_id >= dims.num_domains {
        return Err(Error::InvalidArgument(format!(
            "domain id {} outside [0, {})",
            ctx.domain_id, dims.num_domains
        )));
    }
    Ok(())
}

fn check_action(params: &UtilityNetParams, action: usize) -> Result<()> {
    let k = params.dims().num_actions;
    if action >= k {
        return Err(Error::InvalidArgument(format!(
            "action {action} outside [0, {k})"
        )));
    }
    Ok(())
}

fn trunk(params: &UtilityNetParams, contexts: &[&RoutingContext]) -> Trunk {
    let b = contexts.len();
    let e = params.dims().embed_dim;
    let mut inputs = Array2::zeros((b, e));
    let mut feature_inputs = Array2::zeros((b, FEATURE_INPUT));
    for (i, ctx) in contexts.iter().enumerate() {
        inputs
            .row_mut(i)
            .iter_mut()
            .zip(ctx.embedding.iter())
            .for_each(|(dst, src)| *dst = *src);
        let mut row = feature_inputs.row_mut(i);
        for (j, f) in ctx.features.iter().enumerate() {
            row[j] = *f;
        }
        row.slice_mut(s![NUM_FEATURES..])
            .assign(&params.domain_emb.row(ctx.domain_id));
    }
    let text_pre = affine(&params.text, &inputs.view());
    let feature_pre = affine(&params.feature, &feature_inputs.view());
    let repr = concatenate![Axis(1), relu(&text_pre), relu(&feature_pre)];
    let gate_pre = affine(&params.gating, &repr.view());
    let gate_act = relu(&gate_pre);
    let gate_logit = affine(&params.gating_head, &gate_act.view())
        .column(0)
        .to_owned();
    Trunk {
        inputs,
        text_pre,
        feature_inputs,
        feature_pre,
        repr,
        gate_pre,
        gate_act,
        gate_logit,
    }
}

/// Utility branch for rows of `repr` paired with `actions`.
fn utility_pass(
    params: &UtilityNetParams,
    repr: ArrayView2<f64>,
    actions: &[usize],
) -> UtilityPass {
    let mut action_rows = Array2::zeros((actions.len(), ACTION_EMBED));
    for (i, &a) in actions.iter().enumerate() {
        action_rows.row_mut(i).assign(&params.action_emb.row(a));
    }
    let inputs = concatenate![Axis(1), repr, action_rows];
    let pre0 = affine(&params.utility[0], &inputs.view());
    let act0 = relu(&pre0);
    let pre1 = affine(&params.utility[1], &act0.view());
    let act1 = relu(&pre1);
    let pre2 = affine(&params.utility[2], &act1.view());
    let act2 = relu(&pre2);
    let mu = affine(&params.utility_head, &act2.view())
        .column(0)
        .to_owned();
    UtilityPass {
        inputs,
        pre: [pre0, pre1, pre2],
        act: [act0, act1, act2],
        mu,
    }
}

fn trace(
    trunk: &Trunk,
    row: usize,
    pass: &UtilityPass,
    prow: usize,
    action: usize,
) -> ForwardTrace {
    let repr = trunk.repr.row(row);
    let gate_logit = trunk.gate_logit[row];
    ForwardTrace {
        action,
        text_pre: trunk.text_pre.row(row).to_owned(),
        h_emb: repr.slice(s![..TEXT_HIDDEN]).to_owned(),
        feature_pre: trunk.feature_pre.row(row).to_owned(),
        h_feat: repr.slice(s![TEXT_HIDDEN..]).to_owned(),
        utility_pre: [
            pass.pre[0].row(prow).to_owned(),
            pass.pre[1].row(prow).to_owned(),
            pass.pre[2].row(prow).to_owned(),
        ],
        h_last: pass.act[2].row(prow).to_owned(),
        mu: pass.mu[prow],
        gate_pre: trunk.gate_pre.row(row).to_owned(),
        gate_logit,
        gate_prob: sigmoid(gate_logit),
    }
}

pub fn forward(
    params: &UtilityNetParams,
    ctx: &RoutingContext,
    action: usize,
) -> Result<ForwardTrace> {
    check_context(params, ctx)?;
    check_action(params, action)?;
    let trunk = trunk(params, &[ctx]);
    let pass = utility_pass(params, trunk.repr.view(), &[action]);
    Ok(trace(&trunk, 0, &pass, 0, action))
}

/// Forward pass for every action of one context. The context trunk and the
/// gate are evaluated once and shared by all actions.
pub fn forward_all_actions(
    params: &UtilityNetParams,
    ctx: &RoutingContext,
) -> Result<Vec<ForwardTrace>> {
    check_context(params, ctx)?;
    let k = params.dims().num_actions;
    let trunk = trunk(params, &[ctx]);
    let repr = trunk
        .repr
        .broadcast((k, TRUNK_WIDTH))
        .expect("single row broadcasts");
    let actions: Vec<usize> = (0..k).collect();
    let pass = utility_pass(params, repr, &actions);
    Ok(actions
        .iter()
        .map(|&a| trace(&trunk, 0, &pass, a, a))
        .collect())
}

/// Last hidden utility features `h(x, a)` for many (context, action) pairs,
/// one row per pair.
pub fn last_hidden_batch(
    params: &UtilityNetParams,
    pairs: &[(&RoutingContext, usize)],
) -> Result<Array2<f64>> {
    for (ctx, a) in pairs {
        check_context(params, ctx)?;
        check_action(params, *a)?;
    }
    let contexts: Vec<&RoutingContext> = pairs.iter().map(|(c, _)| *c).collect();
    let actions: Vec<usize> = pairs.iter().map(|(_, a)| *a).collect();
    let trunk = trunk(params, &contexts);
    let [_, _, last] = utility_pass(params, trunk.repr.view(), &actions).act;
    Ok(last)
}

/// Huber loss and its derivative with respect to the prediction.
fn huber(residual: f64, delta: f64) -> (f64, f64) {
    if residual.abs() <= delta {
        (0.5 * residual * residual, residual)
    } else {
        (
            delta * (residual.abs() - 0.5 * delta),
            delta * residual.signum(),
        )
    }
}

/// Binary cross-entropy on a logit, and its derivative with respect to the
/// logit. Evaluated in the overflow-free `softplus` form.
fn bce_with_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - target)
}

fn relu_mask(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    grad.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// `xᵀ δ` in the standard layout the flat parameter views require.
fn weight_grad(x: &ArrayView2<f64>, delta: &Array2<f64>) -> Array2<f64> {
    x.t().dot(delta).as_standard_layout().into_owned()
}

/// Batch-mean `Huber(mu, r) + w_g * BCE(p, y_gate)` and its exact gradient
/// with respect to every parameter.
pub fn loss_and_gradients(
    params: &UtilityNetParams,
    batch: &[ReplayRecord],
    cfg: &LossConfig,
) -> Result<(LossReport, UtilityNetParams)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty training batch".into()));
    }
    for rec in batch {
        check_context(params, &rec.context)?;
        check_action(params, rec.action)?;
    }
    let b = batch.len();
    let inv_b = 1.0 / b as f64;
    let contexts: Vec<&RoutingContext> = batch.iter().map(|r| &r.context).collect();
    let actions: Vec<usize> = batch.iter().map(|r| r.action).collect();
    let trunk = trunk(params, &contexts);
    let pass = utility_pass(params, trunk.repr.view(), &actions);

    let mut utility_loss = 0.0;
    let mut gate_loss = 0.0;
    let mut d_mu = Array2::zeros((b, 1));
    let mut d_logit = Array2::zeros((b, 1));
    for (i, rec) in batch.iter().enumerate() {
        let (l, g) = huber(pass.mu[i] - rec.reward, cfg.huber_delta);
        utility_loss += l;
        d_mu[[i, 0]] = g * inv_b;
        let (l, g) = bce_with_logit(trunk.gate_logit[i], rec.gate_target());
        gate_loss += l;
        d_logit[[i, 0]] = cfg.gate_weight * g * inv_b;
    }
    utility_loss *= inv_b;
    gate_loss *= inv_b;
    let report = LossReport {
        total: utility_loss + cfg.gate_weight * gate_loss,
        utility: utility_loss,
        gate: gate_loss,
    };

    let mut grads = UtilityNetParams::zeros(params.dims());

    // Utility branch.
    grads.utility_head.weight = weight_grad(&pass.act[2].view(), &d_mu);
    grads.utility_head.bias = d_mu.sum_axis(Axis(0));
    let mut d_act = d_mu.dot(&params.utility_head.weight.t());
    for layer in (0..3).rev() {
        let mut d_pre = d_act;
        relu_mask(&mut d_pre, &pass.pre[layer]);
        let input = if layer == 0 {
            pass.inputs.view()
        } else {
            pass.act[layer - 1].view()
        };
        grads.utility[layer].weight = weight_grad(&input, &d_pre);
        grads.utility[layer].bias = d_pre.sum_axis(Axis(0));
        d_act = d_pre.dot(&params.utility[layer].weight.t());
    }
    let d_utility_input = d_act;

    // Gating branch.
    grads.gating_head.weight = weight_grad(&trunk.gate_act.view(), &d_logit);
    grads.gating_head.bias = d_logit.sum_axis(Axis(0));
    let mut d_gate_pre = d_logit.dot(&params.gating_head.weight.t());
    relu_mask(&mut d_gate_pre, &trunk.gate_pre);
    grads.gating.weight = weight_grad(&trunk.repr.view(), &d_gate_pre);
    grads.gating.bias = d_gate_pre.sum_axis(Axis(0));

    // The shared trunk receives both branches' contributions.
    let mut d_repr = d_gate_pre.dot(&params.gating.weight.t());
    d_repr += &d_utility_input.slice(s![.., ..TRUNK_WIDTH]);

    let mut d_text_pre = d_repr.slice(s![.., ..TEXT_HIDDEN]).to_owned();
    relu_mask(&mut d_text_pre, &trunk.text_pre);
    grads.text.weight = weight_grad(&trunk.inputs.view(), &d_text_pre);
    grads.text.bias = d_text_pre.sum_axis(Axis(0));

    let mut d_feature_pre = d_repr.slice(s![.., TEXT_HIDDEN..]).to_owned();
    relu_mask(&mut d_feature_pre, &trunk.feature_pre);
    grads.feature.weight = weight_grad(&trunk.feature_inputs.view(), &d_feature_pre);
    grads.feature.bias = d_feature_pre.sum_axis(Axis(0));
    let d_feature_inputs = d_feature_pre.dot(&params.feature.weight.t());

    for (i, rec) in batch.iter().enumerate() {
        let mut dom = grads.domain_emb.row_mut(rec.context.domain_id);
        dom += &d_feature_inputs.slice(s![i, NUM_FEATURES..]);
        let mut act = grads.action_emb.row_mut(rec.action);
        act += &d_utility_input.slice(s![i, TRUNK_WIDTH..]);
    }
    debug_assert_eq!(grads.utility_head.weight.nrows(), LAST_HIDDEN);
    Ok((report, grads))
}
