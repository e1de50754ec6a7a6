//! Simulated-online replay over an ordered, fully labelled dataset.
//!
//! The stream is cut into contiguous slices. Within a slice every sample is
//! routed and only the chosen action's outcome is revealed; between slices
//! the neural policy retrains on the replay buffer and rebuilds `A⁻¹`.
//! Baselines run over the same stream without the update/train steps.

pub mod compare;
pub mod metrics;

use std::cell::Cell;
use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::baselines::{
    binary_route, fit_binary_router, maxquality_policy, mincost_policy, random_policy,
    BinaryRouterParams, LogisticFit,
};
use crate::data::{normalize_cost, Dataset, RoutingContext, Sample};
use crate::error::{Error, Result};
use crate::net::{
    save_checkpoint, LossConfig, NetDims, OptimizerState, TrainConfig, UtilityNetParams,
    DEFAULT_LEARNING_RATE,
};
use crate::policy::{rebuild, NeuralUcbAgent, UcbConfig};
use crate::replay::ReplayRecord;
use crate::reward::{reward_table, utility_reward, RewardParams};

pub use metrics::{compute_slice_metrics, domains_csv, metrics_csv, MetricsTable, SliceMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyKind {
    NeuralUcb,
    Random,
    MinCost,
    MaxQuality,
    BinaryRouter,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::NeuralUcb,
        PolicyKind::Random,
        PolicyKind::MinCost,
        PolicyKind::MaxQuality,
        PolicyKind::BinaryRouter,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::NeuralUcb => "neural_ucb",
            PolicyKind::Random => "random",
            PolicyKind::MinCost => "min_cost",
            PolicyKind::MaxQuality => "max_quality",
            PolicyKind::BinaryRouter => "binary_router",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config("policy.kind", format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Warmstart {
    UniformRandomFirstSlice,
    None,
}

impl Warmstart {
    pub fn as_str(self) -> &'static str {
        match self {
            Warmstart::UniformRandomFirstSlice => "uniform_random_first_slice",
            Warmstart::None => "none",
        }
    }
}

impl FromStr for Warmstart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform_random_first_slice" => Ok(Warmstart::UniformRandomFirstSlice),
            "none" => Ok(Warmstart::None),
            _ => Err(Error::config(
                "protocol.warmstart",
                format!("unknown mode {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProtocolConfig {
    pub num_slices: usize,
    pub replay_epochs: usize,
    pub seed: u64,
    pub warmstart: Warmstart,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            num_slices: 20,
            replay_epochs: 5,
            seed: 0,
            warmstart: Warmstart::UniformRandomFirstSlice,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slices == 0 {
            return Err(Error::config("protocol.slices", "must be at least 1"));
        }
        Ok(())
    }
}

/// Hyperparameters of the neural policy that are not part of the UCB rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeuralConfig {
    pub ucb: UcbConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Shortfall of the realized reward below the predicted mean beyond
    /// which the gate label is 1.
    pub gate_margin: f64,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        Self {
            ucb: UcbConfig::default(),
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 16,
            loss: LossConfig::default(),
            gate_margin: 0.05,
        }
    }
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        self.ucb.validate()?;
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(
                "train.learning_rate",
                "must be finite and positive",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.loss.huber_delta.is_finite() && self.loss.huber_delta > 0.0) {
            return Err(Error::config(
                "train.huber_delta",
                "must be finite and positive",
            ));
        }
        if !(self.loss.gate_weight.is_finite() && self.loss.gate_weight >= 0.0) {
            return Err(Error::config(
                "train.gate_weight",
                "must be finite and non-negative",
            ));
        }
        if !self.gate_margin.is_finite() {
            return Err(Error::config("train.gate_margin", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSpec {
    pub policy: PolicyKind,
    pub protocol: ProtocolConfig,
    pub reward: RewardParams,
    pub neural: NeuralConfig,
}

impl RunSpec {
    pub fn new(policy: PolicyKind, protocol: ProtocolConfig) -> Self {
        Self {
            policy,
            protocol,
            reward: RewardParams::default(),
            neural: NeuralConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.neural.validate()
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.protocol.replay_epochs,
            batch_size: self.neural.batch_size,
            loss: self.neural.loss,
        }
    }
}

/// Contiguous in-order slices whose sizes differ by at most one.
pub fn slice_ranges(n: usize, num_slices: usize) -> Result<Vec<Range<usize>>> {
    if num_slices == 0 {
        return Err(Error::config("protocol.slices", "must be at least 1"));
    }
    if num_slices > n {
        return Err(Error::config(
            "protocol.slices",
            format!("{num_slices} slices for {n} samples leaves empty slices"),
        ));
    }
    let (base, extra) = (n / num_slices, n % num_slices);
    let mut start = 0;
    Ok((0..num_slices)
        .map(|t| {
            let end = start + base + usize::from(t < extra);
            let r = start..end;
            start = end;
            r
        })
        .collect())
}

/// Outcome revealed for the one action a policy took.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feedback {
    pub quality: f64,
    pub cost: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AccessCounts {
    /// Single-action outcomes revealed.
    pub revealed: u64,
    /// Reads of a full row of per-action outcomes.
    pub full_reads: u64,
}

/// The only path from a policy to the labels. Contexts are free; outcomes
/// are revealed one chosen action at a time, and full-row reads (needed by
/// the oracle baselines and the supervised router fit) are counted
/// separately.
#[derive(Debug)]
pub struct FeedbackOracle<'a> {
    dataset: &'a Dataset,
    reward: RewardParams,
    revealed: Cell<u64>,
    full_reads: Cell<u64>,
}

impl<'a> FeedbackOracle<'a> {
    pub fn new(dataset: &'a Dataset, reward: RewardParams) -> Self {
        Self {
            dataset,
            reward,
            revealed: Cell::new(0),
            full_reads: Cell::new(0),
        }
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.dataset.num_actions()
    }

    pub fn context(&self, i: usize) -> &'a RoutingContext {
        &self.dataset.samples()[i].context
    }

    pub fn reveal(&self, i: usize, action: usize) -> Result<Feedback> {
        let s = &self.dataset.samples()[i];
        if action >= s.quality.len() {
            return Err(Error::InvalidArgument(format!(
                "action {action} outside [0, {})",
                s.quality.len()
            )));
        }
        self.revealed.set(self.revealed.get() + 1);
        let (quality, cost) = (s.quality[action], s.cost[action]);
        Ok(Feedback {
            quality,
            cost,
            reward: utility_reward(
                quality,
                normalize_cost(cost, self.dataset.cmax()),
                &self.reward,
            ),
        })
    }

    pub fn full_row(&self, i: usize) -> &'a Sample {
        self.full_reads.set(self.full_reads.get() + 1);
        &self.dataset.samples()[i]
    }

    pub fn reward_table(&self, i: usize) -> Vec<f64> {
        reward_table(self.full_row(i), self.dataset.cmax(), &self.reward)
    }

    pub fn counts(&self) -> AccessCounts {
        AccessCounts {
            revealed: self.revealed.get(),
            full_reads: self.full_reads.get(),
        }
    }
}

const STREAM_NET_INIT: u64 = 1;
const STREAM_WARMSTART: u64 = 2;
const STREAM_RANDOM: u64 = 3;
const STREAM_TRAIN: u64 = 4;

/// Independent deterministic stream per (purpose, slice), so a run resumed
/// at a slice boundary draws exactly what an uninterrupted one would.
fn stream_rng(seed: u64, purpose: u64, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | slice as u64);
    rng
}

/// A freshly initialized network for `dataset` under `seed`.
pub fn init_network(dataset: &Dataset, seed: u64) -> Result<UtilityNetParams> {
    let h = dataset.header();
    let dims = NetDims::new(h.embed_dim, h.num_domains, h.num_actions)?;
    Ok(UtilityNetParams::init(
        dims,
        &mut stream_rng(seed, STREAM_NET_INIT, 0),
    ))
}

#[derive(Debug, Clone)]
enum PolicyState {
    Neural(Box<NeuralUcbAgent>),
    Random,
    MinCost,
    MaxQuality,
    Binary(Option<BinaryRouterParams>),
}

/// A protocol run that can be advanced one slice at a time.
#[derive(Debug)]
pub struct Simulation<'a> {
    dataset: &'a Dataset,
    oracle: FeedbackOracle<'a>,
    spec: RunSpec,
    ranges: Vec<Range<usize>>,
    state: PolicyState,
    buffer: Vec<ReplayRecord>,
    metrics: Vec<SliceMetrics>,
    train_losses: Vec<Vec<f64>>,
}

impl<'a> Simulation<'a> {
    pub fn new(dataset: &'a Dataset, spec: RunSpec) -> Result<Self> {
        spec.validate()?;
        let state = match spec.policy {
            PolicyKind::NeuralUcb => {
                let params = init_network(dataset, spec.protocol.seed)?;
                let opt = OptimizerState::new(&params, spec.neural.learning_rate);
                PolicyState::Neural(Box::new(NeuralUcbAgent::new(
                    params,
                    opt,
                    spec.neural.ucb,
                    spec.train_config(),
                )?))
            }
            PolicyKind::Random => PolicyState::Random,
            PolicyKind::MinCost => PolicyState::MinCost,
            PolicyKind::MaxQuality => PolicyState::MaxQuality,
            PolicyKind::BinaryRouter => PolicyState::Binary(None),
        };
        Ok(Self {
            dataset,
            oracle: FeedbackOracle::new(dataset, spec.reward),
            spec,
            ranges: slice_ranges(dataset.len(), spec.protocol.num_slices)?,
            state,
            buffer: Vec::new(),
            metrics: Vec::new(),
            train_losses: Vec::new(),
        })
    }

    /// Continues a neural run from the state saved at a slice boundary:
    /// network and optimizer from a checkpoint plus the replay buffer and
    /// metrics of the completed slices. `A⁻¹` is rebuilt from the buffer.
    pub fn resume(
        dataset: &'a Dataset,
        spec: RunSpec,
        params: UtilityNetParams,
        optimizer: OptimizerState,
        buffer: Vec<ReplayRecord>,
        metrics: Vec<SliceMetrics>,
    ) -> Result<Self> {
        if spec.policy != PolicyKind::NeuralUcb {
            return Err(Error::InvalidArgument(
                "only neural runs resume from a checkpoint".into(),
            ));
        }
        let mut sim = Self::new(dataset, spec)?;
        let done = metrics.len();
        let expected: usize = sim.ranges[..done.min(sim.ranges.len())]
            .iter()
            .map(|r| r.len())
            .sum();
        if done > sim.ranges.len() || buffer.len() != expected {
            return Err(Error::Alignment(format!(
                "{} buffered records for {done} completed slices (expected {expected})",
                buffer.len()
            )));
        }
        let mut agent =
            NeuralUcbAgent::new(params, optimizer, spec.neural.ucb, spec.train_config())?;
        if !buffer.is_empty() {
            rebuild(&mut agent.ucb, &agent.params, &buffer)?;
        }
        sim.state = PolicyState::Neural(Box::new(agent));
        sim.buffer = buffer;
        sim.metrics = metrics;
        Ok(sim)
    }

    pub fn spec(&self) -> &RunSpec {
        &self.spec
    }

    pub fn num_slices(&self) -> usize {
        self.ranges.len()
    }

    pub fn next_slice(&self) -> usize {
        self.metrics.len()
    }

    pub fn is_finished(&self) -> bool {
        self.next_slice() == self.ranges.len()
    }

    pub fn buffer(&self) -> &[ReplayRecord] {
        &self.buffer
    }

    pub fn metrics(&self) -> &[SliceMetrics] {
        &self.metrics
    }

    /// Per-epoch losses of each training round run by this object.
    pub fn train_losses(&self) -> &[Vec<f64>] {
        &self.train_losses
    }

    pub fn oracle_counts(&self) -> AccessCounts {
        self.oracle.counts()
    }

    pub fn agent(&self) -> Option<&NeuralUcbAgent> {
        match &self.state {
            PolicyState::Neural(a) => Some(a),
            _ => None,
        }
    }

    pub fn binary_router(&self) -> Option<&BinaryRouterParams> {
        match &self.state {
            PolicyState::Binary(p) => p.as_ref(),
            _ => None,
        }
    }

    /// Routes every sample of the next slice, then (neural only) trains and
    /// rebuilds. Errors carry slice/sample coordinates.
    pub fn run_slice(&mut self) -> Result<&SliceMetrics> {
        let t = self.next_slice();
        let range = self
            .ranges
            .get(t)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument("all slices already run".into()))?;
        let start = self.buffer.len();
        let at = |i: usize| {
            move |e: Error| Error::Protocol {
                slice: t,
                sample: i,
                source: Box::new(e),
            }
        };
        let seed = self.spec.protocol.seed;
        let k = self.oracle.num_actions();

        match &mut self.state {
            PolicyState::Neural(agent) => {
                let warm =
                    t == 0 && self.spec.protocol.warmstart == Warmstart::UniformRandomFirstSlice;
                let mut warm_rng = stream_rng(seed, STREAM_WARMSTART, t);
                for i in range.clone() {
                    let ctx = self.oracle.context(i);
                    let d = agent.decide(ctx).map_err(at(i))?;
                    let (action, gate_open) = if warm {
                        (random_policy(k, &mut warm_rng), false)
                    } else {
                        (d.chosen_action, d.used_ucb)
                    };
                    let fb = self.oracle.reveal(i, action).map_err(at(i))?;
                    agent.update(&d.features[action]).map_err(at(i))?;
                    self.buffer.push(ReplayRecord {
                        context: ctx.clone(),
                        action,
                        reward: fb.reward,
                        gate_label: d.mu_scores[action] - fb.reward > self.spec.neural.gate_margin,
                        gate_open,
                        slice_index: t,
                    });
                }
                let mut rng = stream_rng(seed, STREAM_TRAIN, t);
                let losses = agent
                    .train_and_rebuild(&self.buffer, &mut rng)
                    .map_err(at(range.end.saturating_sub(1)))?;
                self.train_losses.push(losses);
            }
            PolicyState::Binary(router) => {
                if router.is_none() && k > 1 {
                    let train: Vec<Sample> = range
                        .clone()
                        .map(|i| self.oracle.full_row(i).clone())
                        .collect();
                    *router = Some(
                        fit_binary_router(
                            &train,
                            self.dataset.cmax(),
                            &self.spec.reward,
                            &LogisticFit::default(),
                        )
                        .map_err(at(range.start))?,
                    );
                }
                for i in range.clone() {
                    let ctx = self.oracle.context(i);
                    let action = router.as_ref().map_or(0, |p| binary_route(p, ctx));
                    push_plain(&mut self.buffer, &self.oracle, i, action, t).map_err(at(i))?;
                }
            }
            PolicyState::Random => {
                let mut rng = stream_rng(seed, STREAM_RANDOM, t);
                for i in range.clone() {
                    let action = random_policy(k, &mut rng);
                    push_plain(&mut self.buffer, &self.oracle, i, action, t).map_err(at(i))?;
                }
            }
            PolicyState::MinCost | PolicyState::MaxQuality => {
                let min_cost = matches!(self.state, PolicyState::MinCost);
                for i in range.clone() {
                    let row = self.oracle.full_row(i);
                    let action = if min_cost {
                        mincost_policy(row)
                    } else {
                        maxquality_policy(row)
                    };
                    push_plain(&mut self.buffer, &self.oracle, i, action, t).map_err(at(i))?;
                }
            }
        }

        let prev = self.metrics.last().map_or(0.0, |m| m.cum_reward);
        let m = compute_slice_metrics(
            t,
            &self.buffer[start..],
            &self.dataset.samples()[range],
            self.dataset.cmax(),
            &self.spec.reward,
            prev,
        )?;
        self.metrics.push(m);
        Ok(self.metrics.last().expect("just pushed"))
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_slice()?;
        }
        Ok(())
    }

    pub fn into_output(self) -> RunOutput {
        let counts = self.oracle.counts();
        let (network, binary_router) = match self.state {
            PolicyState::Neural(a) => (Some((a.params, a.optimizer)), None),
            PolicyState::Binary(p) => (None, p),
            _ => (None, None),
        };
        RunOutput {
            policy: self.spec.policy,
            metrics: self.metrics,
            records: self.buffer,
            network,
            binary_router,
            counts,
            train_losses: self.train_losses,
        }
    }
}

fn push_plain(
    buffer: &mut Vec<ReplayRecord>,
    oracle: &FeedbackOracle<'_>,
    i: usize,
    action: usize,
    slice: usize,
) -> Result<()> {
    let fb = oracle.reveal(i, action)?;
    buffer.push(ReplayRecord {
        context: oracle.context(i).clone(),
        action,
        reward: fb.reward,
        gate_label: false,
        gate_open: false,
        slice_index: slice,
    });
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub policy: PolicyKind,
    pub metrics: Vec<SliceMetrics>,
    pub records: Vec<ReplayRecord>,
    pub network: Option<(UtilityNetParams, OptimizerState)>,
    pub binary_router: Option<BinaryRouterParams>,
    pub counts: AccessCounts,
    pub train_losses: Vec<Vec<f64>>,
}

impl RunOutput {
    pub fn actions(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.action).collect()
    }

    /// Writes `metrics.csv`, `domains.csv` and, for neural runs,
    /// `checkpoint.bin` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(METRICS_FILE), metrics_csv(&self.metrics))?;
        fs::write(dir.join(DOMAINS_FILE), domains_csv(&self.metrics))?;
        if let Some((params, opt)) = &self.network {
            save_checkpoint(params, opt, dir.join(CHECKPOINT_FILE))?;
        }
        Ok(())
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const DOMAINS_FILE: &str = "domains.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn run_protocol(dataset: &Dataset, spec: RunSpec) -> Result<RunOutput> {
    let mut sim = Simulation::new(dataset, spec)?;
    sim.run_to_end()?;
    Ok(sim.into_output())
}
