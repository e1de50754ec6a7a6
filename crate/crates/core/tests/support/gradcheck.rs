//! Backprop against central finite differences on a reduced network,
//! shared by the gradient-check and acceptance tests.
//!
//! The loss is re-evaluated by an independent forward implementation over
//! the flat parameter views. A perturbed parameter only changes one unit of
//! one layer, so the evaluator propagates from that unit onward instead of
//! rerunning the whole network; every one of the ~200k parameters is still
//! checked with its own two-sided difference.

use banditroute::data::RoutingContext;
use banditroute::net::{
    loss_and_gradients, LossConfig, NetDims, UtilityNetParams, ACTION_EMBED, DOMAIN_EMBED,
    FEATURE_INPUT, GATE_HIDDEN, TRUNK_WIDTH, UTILITY_INPUT, UTILITY_WIDTHS,
};
use banditroute::ReplayRecord;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
// Floor on the denominator so that gradients that vanish up to rounding
// compare absolutely.
const SCALE_FLOOR: f64 = 1e-6;

const W0: usize = UTILITY_WIDTHS[0];
const W1: usize = UTILITY_WIDTHS[1];
const W2: usize = UTILITY_WIDTHS[2];

/// Flat copies of every tensor, indexed like `TENSOR_NAMES`.
struct Flat(Vec<Vec<f64>>);

impl Flat {
    fn of(p: &UtilityNetParams) -> Self {
        Flat(p.tensors().into_iter().map(|(_, v)| v.to_vec()).collect())
    }
    fn t(&self, i: usize) -> &[f64] {
        &self.0[i]
    }
}

// Tensor indices.
const TEXT_W: usize = 0;
const TEXT_B: usize = 1;
const DOMAIN: usize = 2;
const FEAT_W: usize = 3;
const FEAT_B: usize = 4;
const ACTION: usize = 5;
const U0_W: usize = 6;
const U0_B: usize = 7;
const U1_W: usize = 8;
const U1_B: usize = 9;
const U2_W: usize = 10;
const U2_B: usize = 11;
const HEAD_W: usize = 12;
const HEAD_B: usize = 13;
const GATE_W: usize = 14;
const GATE_B: usize = 15;
const GHEAD_W: usize = 16;
const GHEAD_B: usize = 17;

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let out = b.len();
    let mut y = b.to_vec();
    for (i, xi) in x.iter().enumerate() {
        if *xi != 0.0 {
            let row = &w[i * out..(i + 1) * out];
            y.iter_mut().zip(row).for_each(|(yj, wj)| *yj += xi * wj);
        }
    }
    y
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached activations of one record.
struct Cache {
    uin: Vec<f64>,
    pre0: Vec<f64>,
    act0: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    pre2: Vec<f64>,
    gin: Vec<f64>,
    gpre: Vec<f64>,
    mu: f64,
    logit: f64,
}

struct Oracle<'a> {
    p: &'a Flat,
    rec: &'a ReplayRecord,
    cfg: LossConfig,
}

impl Oracle<'_> {
    fn uin_and_gin(&self) -> (Vec<f64>, Vec<f64>) {
        let p = self.p;
        let ctx = &self.rec.context;
        let h_emb = relu(&affine(p.t(TEXT_W), p.t(TEXT_B), &ctx.embedding));
        let d = ctx.domain_id;
        let mut fin = ctx.features.to_vec();
        fin.extend_from_slice(&p.t(DOMAIN)[d * DOMAIN_EMBED..(d + 1) * DOMAIN_EMBED]);
        assert_eq!(fin.len(), FEATURE_INPUT);
        let h_feat = relu(&affine(p.t(FEAT_W), p.t(FEAT_B), &fin));
        let mut gin = h_emb;
        gin.extend(h_feat);
        assert_eq!(gin.len(), TRUNK_WIDTH);
        let a = self.rec.action;
        let mut uin = gin.clone();
        uin.extend_from_slice(&self.p.t(ACTION)[a * ACTION_EMBED..(a + 1) * ACTION_EMBED]);
        assert_eq!(uin.len(), UTILITY_INPUT);
        (uin, gin)
    }

    fn mu_from_pre2(&self, pre2: &[f64]) -> f64 {
        dot(&relu(pre2), self.p.t(HEAD_W)) + self.p.t(HEAD_B)[0]
    }

    fn mu_from_pre1(&self, pre1: &[f64]) -> f64 {
        self.mu_from_pre2(&affine(self.p.t(U2_W), self.p.t(U2_B), &relu(pre1)))
    }

    fn mu_from_uin(&self, uin: &[f64]) -> f64 {
        let pre0 = affine(self.p.t(U0_W), self.p.t(U0_B), uin);
        self.mu_from_pre1(&affine(self.p.t(U1_W), self.p.t(U1_B), &relu(&pre0)))
    }

    fn logit_from_gpre(&self, gpre: &[f64]) -> f64 {
        dot(&relu(gpre), self.p.t(GHEAD_W)) + self.p.t(GHEAD_B)[0]
    }

    fn logit_from_gin(&self, gin: &[f64]) -> f64 {
        self.logit_from_gpre(&affine(self.p.t(GATE_W), self.p.t(GATE_B), gin))
    }

    fn cache(&self) -> Cache {
        let p = self.p;
        let (uin, gin) = self.uin_and_gin();
        let pre0 = affine(p.t(U0_W), p.t(U0_B), &uin);
        let act0 = relu(&pre0);
        let pre1 = affine(p.t(U1_W), p.t(U1_B), &act0);
        let act1 = relu(&pre1);
        let pre2 = affine(p.t(U2_W), p.t(U2_B), &act1);
        let gpre = affine(p.t(GATE_W), p.t(GATE_B), &gin);
        Cache {
            mu: self.mu_from_pre2(&pre2),
            logit: self.logit_from_gpre(&gpre),
            uin,
            pre0,
            act0,
            pre1,
            act1,
            pre2,
            gin,
            gpre,
        }
    }

    fn loss(&self, mu: f64, logit: f64) -> f64 {
        let r = mu - self.rec.reward;
        let d = self.cfg.huber_delta;
        let huber = if r.abs() <= d {
            0.5 * r * r
        } else {
            d * (r.abs() - 0.5 * d)
        };
        let y = if self.rec.gate_label { 1.0 } else { 0.0 };
        let bce = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
        huber + self.cfg.gate_weight * bce
    }
}

/// Loss of one record after parameter `(tensor, index)` moved by `e`. Sets
/// `kink` when a ReLU at the perturbed unit changed regime, which would
/// make the difference quotient meaningless there.
fn perturbed_loss(
    o: &Oracle<'_>,
    c: &Cache,
    params: &mut Flat,
    tensor: usize,
    index: usize,
    e: f64,
    kink: &mut bool,
) -> f64 {
    let regime = |a: f64, b: f64| (a > 0.0) != (b > 0.0);
    let (mu, logit) = match tensor {
        U0_W | U0_B => {
            let (i, j) = if tensor == U0_W {
                (index / W0, index % W0)
            } else {
                (usize::MAX, index)
            };
            let x = if tensor == U0_W { c.uin[i] } else { 1.0 };
            let new = c.pre0[j] + e * x;
            *kink |= regime(new, c.pre0[j]);
            let delta = new.max(0.0) - c.act0[j];
            let w1 = &o.p.t(U1_W)[j * W1..(j + 1) * W1];
            let pre1: Vec<f64> = c.pre1.iter().zip(w1).map(|(p, w)| p + delta * w).collect();
            (o.mu_from_pre1(&pre1), c.logit)
        }
        U1_W | U1_B => {
            let (i, j) = if tensor == U1_W {
                (index / W1, index % W1)
            } else {
                (usize::MAX, index)
            };
            let x = if tensor == U1_W { c.act0[i] } else { 1.0 };
            let new = c.pre1[j] + e * x;
            *kink |= regime(new, c.pre1[j]);
            let delta = new.max(0.0) - c.act1[j];
            let w2 = &o.p.t(U2_W)[j * W2..(j + 1) * W2];
            let pre2: Vec<f64> = c.pre2.iter().zip(w2).map(|(p, w)| p + delta * w).collect();
            (o.mu_from_pre2(&pre2), c.logit)
        }
        U2_W | U2_B => {
            let (i, j) = if tensor == U2_W {
                (index / W2, index % W2)
            } else {
                (usize::MAX, index)
            };
            let x = if tensor == U2_W { c.act1[i] } else { 1.0 };
            let mut pre2 = c.pre2.clone();
            pre2[j] += e * x;
            *kink |= regime(pre2[j], c.pre2[j]);
            (o.mu_from_pre2(&pre2), c.logit)
        }
        GATE_W | GATE_B => {
            let (i, j) = if tensor == GATE_W {
                (index / GATE_HIDDEN, index % GATE_HIDDEN)
            } else {
                (usize::MAX, index)
            };
            let x = if tensor == GATE_W { c.gin[i] } else { 1.0 };
            let mut gpre = c.gpre.clone();
            gpre[j] += e * x;
            *kink |= regime(gpre[j], c.gpre[j]);
            (c.mu, o.logit_from_gpre(&gpre))
        }
        HEAD_W | HEAD_B | GHEAD_W | GHEAD_B => {
            params.0[tensor][index] += e;
            let o2 = Oracle { p: params, ..*o };
            let out = match tensor {
                HEAD_W | HEAD_B => (o2.mu_from_pre2(&c.pre2), c.logit),
                _ => (c.mu, o2.logit_from_gpre(&c.gpre)),
            };
            params.0[tensor][index] -= e;
            out
        }
        // Trunk and embeddings: rerun everything downstream of the inputs.
        _ => {
            params.0[tensor][index] += e;
            let o2 = Oracle { p: params, ..*o };
            let (uin, gin) = o2.uin_and_gin();
            let out = (o2.mu_from_uin(&uin), o2.logit_from_gin(&gin));
            params.0[tensor][index] -= e;
            out
        }
    };
    o.loss(mu, logit)
}

pub fn batch(rng: &mut ChaCha8Rng) -> Vec<ReplayRecord> {
    (0..2)
        .map(|i| ReplayRecord {
            context: RoutingContext::new(
                (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
                [rng.random_range(0.0..1.0), rng.random_range(0.0..2.0), 1.0],
                i + 1,
            ),
            action: 2 * i,
            // The second target is far enough to exercise the linear zone.
            reward: if i == 0 { 0.7 } else { 3.0 },
            gate_label: i == 0,
            gate_open: false,
            slice_index: 0,
        })
        .collect()
}

/// Summary of one full sweep over every parameter.
#[derive(Debug)]
pub struct GradCheck {
    pub param_count: usize,
    pub checked: usize,
    pub kinks: usize,
    /// `|backprop loss - oracle loss|`.
    pub loss_gap: f64,
    pub worst_rel: f64,
    pub worst_at: String,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.checked == self.param_count
            && self.kinks == 0
            && self.loss_gap < 1e-12
            && self.worst_rel < REL_TOL
    }
}

/// Checks every gradient of a (E=6, D=3, K=3) network initialized from
/// `seed` on a two-record batch.
pub fn check_reduced_net(seed: u64) -> GradCheck {
    let dims = NetDims::new(6, 3, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = UtilityNetParams::init(dims, &mut rng);
    let batch = batch(&mut rng);
    let cfg = LossConfig::default();
    let (report, grads) = loss_and_gradients(&params, &batch, &cfg).unwrap();

    let flat = Flat::of(&params);
    let mut scratch = Flat::of(&params);
    let oracles: Vec<Oracle<'_>> = batch
        .iter()
        .map(|rec| Oracle { p: &flat, rec, cfg })
        .collect();
    let caches: Vec<Cache> = oracles.iter().map(Oracle::cache).collect();
    let base: f64 = oracles
        .iter()
        .zip(&caches)
        .map(|(o, c)| o.loss(c.mu, c.logit))
        .sum::<f64>()
        / batch.len() as f64;
    let mut checked = 0usize;
    let mut kinks = 0usize;
    let mut worst = (0.0_f64, "", 0usize, 0.0, 0.0);
    for (t, (name, grad)) in grads.tensors().into_iter().enumerate() {
        for (i, &analytic) in grad.iter().enumerate() {
            let mut kink = false;
            let mut side = |e: f64| {
                oracles
                    .iter()
                    .zip(&caches)
                    .map(|(o, c)| perturbed_loss(o, c, &mut scratch, t, i, e, &mut kink))
                    .sum::<f64>()
                    / batch.len() as f64
            };
            let numeric = (side(EPS) - side(-EPS)) / (2.0 * EPS);
            kinks += usize::from(kink);
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR);
            if rel > worst.0 {
                worst = (rel, name, i, analytic, numeric);
            }
            checked += 1;
        }
    }
    GradCheck {
        param_count: dims.param_count(),
        checked,
        kinks,
        loss_gap: (report.total - base).abs(),
        worst_rel: worst.0,
        worst_at: format!(
            "{}[{}]: backprop {} vs numeric {}",
            worst.1, worst.2, worst.3, worst.4
        ),
    }
}
