//! Flat `key = value` run configuration with dotted keys.
//!
//! ```text
//! # comments and blank lines are ignored
//! data.path = runs/bench.txt
//! policy.kind = neural_ucb
//! ucb.beta = 1.0
//! protocol.slices = 20
//! ```
//!
//! Instead of `data.path`, `data.synthetic = true` together with the
//! `synthetic.*` keys generates the dataset in memory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::{fmt_float, generate_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::harness::{PolicyKind, ProtocolConfig, RunSpec};
use crate::reward::RewardParams;

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Path(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Path(p) => Dataset::load(p),
            DataSource::Synthetic(spec) => generate_synthetic(spec),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub spec: RunSpec,
    pub output_dir: Option<PathBuf>,
}

/// Keys whose default values the method description leaves open.
pub const UNSPECIFIED_KEYS: [&str; 13] = [
    "reward.lambda",
    "ucb.tau_g",
    "train.batch_size",
    "train.huber_delta",
    "train.gate_weight",
    "train.gate_margin",
    "protocol.seed",
    "protocol.warmstart",
    "synthetic.seed",
    "synthetic.samples",
    "synthetic.actions",
    "synthetic.domains",
    "synthetic.embed_dim",
];

#[derive(Debug, Default)]
struct Builder {
    data_path: Option<String>,
    synthetic: Option<bool>,
    syn: SyntheticSpec,
    spec: Option<RunSpec>,
    output_dir: Option<String>,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected true or false, got {value:?}"),
        )),
    }
}

impl Builder {
    fn spec(&mut self) -> &mut RunSpec {
        self.spec
            .get_or_insert_with(|| RunSpec::new(PolicyKind::NeuralUcb, ProtocolConfig::default()))
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.path" => self.data_path = Some(value.to_owned()),
            "data.synthetic" => self.synthetic = Some(parse_bool(key, value)?),
            "synthetic.seed" => self.syn.seed = parse_num(key, value)?,
            "synthetic.samples" => self.syn.num_samples = parse_num(key, value)?,
            "synthetic.actions" => self.syn.num_actions = parse_num(key, value)?,
            "synthetic.domains" => self.syn.num_domains = parse_num(key, value)?,
            "synthetic.embed_dim" => self.syn.embed_dim = parse_num(key, value)?,
            "policy.kind" => self.spec().policy = value.parse()?,
            "ucb.beta" => self.spec().neural.ucb.beta = parse_num(key, value)?,
            "ucb.lambda0" => self.spec().neural.ucb.lambda0 = parse_num(key, value)?,
            "ucb.tau_g" => self.spec().neural.ucb.tau_g = parse_num(key, value)?,
            "reward.lambda" => {
                self.spec().reward = RewardParams::new(parse_num(key, value)?)
                    .map_err(|e| Error::config(key, e.to_string()))?
            }
            "protocol.slices" => self.spec().protocol.num_slices = parse_num(key, value)?,
            "protocol.epochs" => self.spec().protocol.replay_epochs = parse_num(key, value)?,
            "protocol.seed" => self.spec().protocol.seed = parse_num(key, value)?,
            "protocol.warmstart" => self.spec().protocol.warmstart = value.parse()?,
            "train.learning_rate" => self.spec().neural.learning_rate = parse_num(key, value)?,
            "train.batch_size" => self.spec().neural.batch_size = parse_num(key, value)?,
            "train.huber_delta" => self.spec().neural.loss.huber_delta = parse_num(key, value)?,
            "train.gate_weight" => self.spec().neural.loss.gate_weight = parse_num(key, value)?,
            "train.gate_margin" => self.spec().neural.gate_margin = parse_num(key, value)?,
            "output.dir" => self.output_dir = Some(value.to_owned()),
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<RunConfig> {
        let spec = *self.spec();
        spec.validate()?;
        let data = match (self.data_path, self.synthetic.unwrap_or(false)) {
            (Some(_), true) => {
                return Err(Error::config(
                    "data.path",
                    "set either data.path or data.synthetic, not both",
                ))
            }
            (Some(p), false) if p.is_empty() => return Err(Error::config("data.path", "is empty")),
            (Some(p), false) => DataSource::Path(PathBuf::from(p)),
            (None, true) => DataSource::Synthetic(self.syn),
            (None, false) => return Err(Error::config("data.path", "missing dataset path")),
        };
        Ok(RunConfig {
            data,
            spec,
            output_dir: self.output_dir.filter(|s| !s.is_empty()).map(PathBuf::from),
        })
    }
}

fn split_line(line: &str) -> Option<std::result::Result<(&str, &str), ()>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return None;
    }
    Some(
        line.split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or(()),
    )
}

impl RunConfig {
    /// Parses a config file's text and applies `overrides` (as `key=value`
    /// pairs) on top.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut b = Builder::default();
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in text.lines().enumerate() {
            match split_line(line) {
                None => continue,
                Some(Err(())) => return Err(Error::parse(idx + 1, "expected `key = value`")),
                Some(Ok((k, v))) => {
                    if !seen.insert(k.to_owned()) {
                        return Err(Error::config(
                            k,
                            format!("duplicate key on line {}", idx + 1),
                        ));
                    }
                    b.set(k, v)?;
                }
            }
        }
        for (k, v) in overrides {
            b.set(k, v)?;
        }
        b.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Every key with its resolved value; parsing the snapshot yields an
    /// identical config.
    pub fn snapshot(&self) -> String {
        let s = &self.spec;
        let mut entries: Vec<(&str, String)> = Vec::new();
        match &self.data {
            DataSource::Path(p) => entries.push(("data.path", p.display().to_string())),
            DataSource::Synthetic(syn) => {
                entries.push(("data.synthetic", "true".into()));
                entries.push(("synthetic.seed", syn.seed.to_string()));
                entries.push(("synthetic.samples", syn.num_samples.to_string()));
                entries.push(("synthetic.actions", syn.num_actions.to_string()));
                entries.push(("synthetic.domains", syn.num_domains.to_string()));
                entries.push(("synthetic.embed_dim", syn.embed_dim.to_string()));
            }
        }
        entries.extend([
            ("policy.kind", s.policy.to_string()),
            ("ucb.beta", fmt_float(s.neural.ucb.beta)),
            ("ucb.lambda0", fmt_float(s.neural.ucb.lambda0)),
            ("ucb.tau_g", fmt_float(s.neural.ucb.tau_g)),
            ("reward.lambda", fmt_float(s.reward.lambda_cost)),
            ("protocol.slices", s.protocol.num_slices.to_string()),
            ("protocol.epochs", s.protocol.replay_epochs.to_string()),
            ("protocol.seed", s.protocol.seed.to_string()),
            (
                "protocol.warmstart",
                s.protocol.warmstart.as_str().to_owned(),
            ),
            ("train.learning_rate", fmt_float(s.neural.learning_rate)),
            ("train.batch_size", s.neural.batch_size.to_string()),
            ("train.huber_delta", fmt_float(s.neural.loss.huber_delta)),
            ("train.gate_weight", fmt_float(s.neural.loss.gate_weight)),
            ("train.gate_margin", fmt_float(s.neural.gate_margin)),
        ]);
        if let Some(dir) = &self.output_dir {
            entries.push(("output.dir", dir.display().to_string()));
        }
        let mut out = String::new();
        for (k, v) in entries {
            if UNSPECIFIED_KEYS.contains(&k) {
                out.push_str("# paper-unspecified\n");
            }
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// A starting config on a small synthetic stream with every default
    /// written out.
    pub fn template() -> String {
        let cfg = RunConfig {
            data: DataSource::Synthetic(SyntheticSpec::default()),
            spec: RunSpec::new(PolicyKind::NeuralUcb, ProtocolConfig::default()),
            output_dir: None,
        };
        cfg.snapshot()
    }
}
