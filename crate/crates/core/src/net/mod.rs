//! Two-branch utility network.
//!
//! ```text
//! embedding ─ text MLP (E→256) ───────────────┬──────────────┐
//! features ⊕ domain emb (3+16) ─ MLP (19→32) ─┤              │
//!                                             ├ gate MLP (288→64) → head (64→1) → p(x)
//! action emb (K×32) ──────────────────────────┴ utility MLP (320→256→256→128) → head (128→1) → μ(x,a)
//! ```
//!
//! The 128-wide output of the utility MLP is the feature vector the UCB
//! policy uses for its confidence bonus.

mod checkpoint;
mod forward;
mod train;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::data::NUM_FEATURES;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_VERSION};
pub(crate) use forward::sigmoid;
pub use forward::{
    forward, forward_all_actions, last_hidden_batch, loss_and_gradients, ForwardTrace, LossConfig,
    LossReport,
};
pub use train::{train_epochs, OptimizerState, TrainConfig, DEFAULT_LEARNING_RATE};

pub const TEXT_HIDDEN: usize = 256;
pub const DOMAIN_EMBED: usize = 16;
pub const FEATURE_INPUT: usize = NUM_FEATURES + DOMAIN_EMBED;
pub const FEATURE_HIDDEN: usize = 32;
pub const ACTION_EMBED: usize = 32;
/// Width of the context trunk `[h_emb, h_feat]` feeding the gate.
pub const TRUNK_WIDTH: usize = TEXT_HIDDEN + FEATURE_HIDDEN;
pub const UTILITY_INPUT: usize = TRUNK_WIDTH + ACTION_EMBED;
pub const UTILITY_WIDTHS: [usize; 3] = [256, 256, 128];
/// Width of the last hidden utility layer, `h(x, a)`.
pub const LAST_HIDDEN: usize = UTILITY_WIDTHS[2];
pub const GATE_HIDDEN: usize = 64;

const EMBEDDING_INIT_STD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetDims {
    pub embed_dim: usize,
    pub num_domains: usize,
    pub num_actions: usize,
}

impl NetDims {
    pub fn new(embed_dim: usize, num_domains: usize, num_actions: usize) -> Result<Self> {
        if embed_dim == 0 || num_domains == 0 || num_actions == 0 {
            return Err(Error::Dimension(format!(
                "network dims must be positive, got E={embed_dim} D={num_domains} K={num_actions}"
            )));
        }
        Ok(Self {
            embed_dim,
            num_domains,
            num_actions,
        })
    }

    /// Number of trainable scalars for these dims.
    pub fn param_count(&self) -> usize {
        let affine = |i: usize, o: usize| i * o + o;
        affine(self.embed_dim, TEXT_HIDDEN)
            + self.num_domains * DOMAIN_EMBED
            + affine(FEATURE_INPUT, FEATURE_HIDDEN)
            + self.num_actions * ACTION_EMBED
            + affine(UTILITY_INPUT, UTILITY_WIDTHS[0])
            + affine(UTILITY_WIDTHS[0], UTILITY_WIDTHS[1])
            + affine(UTILITY_WIDTHS[1], UTILITY_WIDTHS[2])
            + affine(LAST_HIDDEN, 1)
            + affine(TRUNK_WIDTH, GATE_HIDDEN)
            + affine(GATE_HIDDEN, 1)
    }
}

/// Dense layer `y = x W + b` with `W` stored as (in, out).
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_simple_fn((input, output), || dist.sample(rng)),
            bias: Array1::from_shape_simple_fn(output, || dist.sample(rng)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// Names of every parameter tensor, in declaration (and checkpoint) order.
pub const TENSOR_NAMES: [&str; 18] = [
    "text.weight",
    "text.bias",
    "domain_emb",
    "feature.weight",
    "feature.bias",
    "action_emb",
    "utility.0.weight",
    "utility.0.bias",
    "utility.1.weight",
    "utility.1.bias",
    "utility.2.weight",
    "utility.2.bias",
    "utility_head.weight",
    "utility_head.bias",
    "gating.weight",
    "gating.bias",
    "gating_head.weight",
    "gating_head.bias",
];

/// All weights of the network. The same shape doubles as a gradient and
/// moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityNetParams {
    dims: NetDims,
    pub text: Affine,
    pub domain_emb: Array2<f64>,
    pub feature: Affine,
    pub action_emb: Array2<f64>,
    pub utility: [Affine; 3],
    pub utility_head: Affine,
    pub gating: Affine,
    pub gating_head: Affine,
}

impl UtilityNetParams {
    pub fn zeros(dims: NetDims) -> Self {
        let [w0, w1, w2] = UTILITY_WIDTHS;
        let params = Self {
            dims,
            text: Affine::zeros(dims.embed_dim, TEXT_HIDDEN),
            domain_emb: Array2::zeros((dims.num_domains, DOMAIN_EMBED)),
            feature: Affine::zeros(FEATURE_INPUT, FEATURE_HIDDEN),
            action_emb: Array2::zeros((dims.num_actions, ACTION_EMBED)),
            utility: [
                Affine::zeros(UTILITY_INPUT, w0),
                Affine::zeros(w0, w1),
                Affine::zeros(w1, w2),
            ],
            utility_head: Affine::zeros(LAST_HIDDEN, 1),
            gating: Affine::zeros(TRUNK_WIDTH, GATE_HIDDEN),
            gating_head: Affine::zeros(GATE_HIDDEN, 1),
        };
        assert_eq!(params.param_count(), dims.param_count());
        params
    }

    pub fn init<R: Rng + ?Sized>(dims: NetDims, rng: &mut R) -> Self {
        let [w0, w1, w2] = UTILITY_WIDTHS;
        let emb = Normal::new(0.0, EMBEDDING_INIT_STD).expect("valid std");
        let text = Affine::init(dims.embed_dim, TEXT_HIDDEN, rng);
        let domain_emb =
            Array2::from_shape_simple_fn((dims.num_domains, DOMAIN_EMBED), || emb.sample(rng));
        let feature = Affine::init(FEATURE_INPUT, FEATURE_HIDDEN, rng);
        let action_emb =
            Array2::from_shape_simple_fn((dims.num_actions, ACTION_EMBED), || emb.sample(rng));
        let utility = [
            Affine::init(UTILITY_INPUT, w0, rng),
            Affine::init(w0, w1, rng),
            Affine::init(w1, w2, rng),
        ];
        let params = Self {
            dims,
            text,
            domain_emb,
            feature,
            action_emb,
            utility,
            utility_head: Affine::init(LAST_HIDDEN, 1, rng),
            gating: Affine::init(TRUNK_WIDTH, GATE_HIDDEN, rng),
            gating_head: Affine::init(GATE_HIDDEN, 1, rng),
        };
        assert_eq!(params.param_count(), dims.param_count());
        params
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let slices: [&[f64]; 18] = [
            flat(&self.text.weight),
            flat1(&self.text.bias),
            flat(&self.domain_emb),
            flat(&self.feature.weight),
            flat1(&self.feature.bias),
            flat(&self.action_emb),
            flat(&self.utility[0].weight),
            flat1(&self.utility[0].bias),
            flat(&self.utility[1].weight),
            flat1(&self.utility[1].bias),
            flat(&self.utility[2].weight),
            flat1(&self.utility[2].bias),
            flat(&self.utility_head.weight),
            flat1(&self.utility_head.bias),
            flat(&self.gating.weight),
            flat1(&self.gating.bias),
            flat(&self.gating_head.weight),
            flat1(&self.gating_head.bias),
        ];
        TENSOR_NAMES.into_iter().zip(slices).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let [u0, u1, u2] = &mut self.utility;
        let slices: [&mut [f64]; 18] = [
            flat_mut(&mut self.text.weight),
            flat1_mut(&mut self.text.bias),
            flat_mut(&mut self.domain_emb),
            flat_mut(&mut self.feature.weight),
            flat1_mut(&mut self.feature.bias),
            flat_mut(&mut self.action_emb),
            flat_mut(&mut u0.weight),
            flat1_mut(&mut u0.bias),
            flat_mut(&mut u1.weight),
            flat1_mut(&mut u1.bias),
            flat_mut(&mut u2.weight),
            flat1_mut(&mut u2.bias),
            flat_mut(&mut self.utility_head.weight),
            flat1_mut(&mut self.utility_head.bias),
            flat_mut(&mut self.gating.weight),
            flat1_mut(&mut self.gating.bias),
            flat_mut(&mut self.gating_head.weight),
            flat1_mut(&mut self.gating_head.bias),
        ];
        TENSOR_NAMES.into_iter().zip(slices).collect()
    }
}

fn flat(a: &Array2<f64>) -> &[f64] {
    a.as_slice()
        .expect("parameters are stored in standard layout")
}

fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice()
        .expect("parameters are stored in standard layout")
}

fn flat_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are stored in standard layout")
}

fn flat1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut()
        .expect("parameters are stored in standard layout")
}
