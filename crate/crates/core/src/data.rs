//! Dataset model, the line-delimited dataset format, the seeded synthetic
//! generator and logarithmic cost normalization.
//!
//! A dataset file starts with one header record followed by one record per
//! sample:
//!
//! ```text
//! HDR K=2 D=1 E=2 CMAX=3.0000000000000000e0 MODELS=small,large
//! SMP id=q0 d=0 emb=0.1,0.2 feat=1,2,3 q=0.5,0.9 c=1,3
//! ```
//!
//! Floats are written with 17 significant digits so that every value
//! survives a write/read cycle bit-for-bit.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Number of auxiliary features carried by every context.
pub const NUM_FEATURES: usize = 3;

const CMAX_REL_TOL: f64 = 1e-9;

/// What the routing policy is allowed to see about a query.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingContext {
    pub embedding: Arc<[f64]>,
    pub features: [f64; NUM_FEATURES],
    pub domain_id: usize,
}

impl RoutingContext {
    pub fn new(embedding: Vec<f64>, features: [f64; NUM_FEATURES], domain_id: usize) -> Self {
        Self {
            embedding: embedding.into(),
            features,
            domain_id,
        }
    }
}

/// One query with full-information ground truth for every action.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub context: RoutingContext,
    pub quality: Vec<f64>,
    pub cost: Vec<f64>,
}

impl Sample {
    pub fn domain_id(&self) -> usize {
        self.context.domain_id
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHeader {
    pub num_actions: usize,
    pub num_domains: usize,
    pub embed_dim: usize,
    pub cmax: f64,
    pub model_names: Vec<String>,
}

/// An ordered stream of samples. Sample order is the replay order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset, validating every sample against the header and
    /// cross-checking the header's `cmax` against the data.
    pub fn new(header: DatasetHeader, samples: Vec<Sample>) -> Result<Self> {
        validate_header(&header)?;
        for (i, s) in samples.iter().enumerate() {
            validate_sample(&header, s).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("sample {i}: {msg}")),
                Error::InvalidArgument(msg) => Error::InvalidArgument(format!("sample {i}: {msg}")),
                other => other,
            })?;
        }
        let observed = max_cost(&samples);
        check_cmax(header.cmax, observed)?;
        Ok(Self { header, samples })
    }

    /// Builds a dataset whose header `cmax` is taken from the data.
    pub fn from_samples(
        num_domains: usize,
        model_names: Vec<String>,
        samples: Vec<Sample>,
    ) -> Result<Self> {
        let embed_dim = samples
            .first()
            .map(|s| s.context.embedding.len())
            .ok_or_else(|| Error::InvalidArgument("dataset has no samples".into()))?;
        let header = DatasetHeader {
            num_actions: model_names.len(),
            num_domains,
            embed_dim,
            cmax: max_cost(&samples),
            model_names,
        };
        Self::new(header, samples)
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.header.num_actions
    }

    pub fn cmax(&self) -> f64 {
        self.header.cmax
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read(BufReader::new(file))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let reader = BufReader::new(reader);
        let mut header: Option<DatasetHeader> = None;
        let mut samples = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            match &header {
                None => header = Some(parse_header(line, lineno)?),
                Some(h) => {
                    let sample = parse_sample(line, lineno)?;
                    validate_sample(h, &sample).map_err(|e| match e {
                        Error::Dimension(msg) => Error::Dimension(format!("line {lineno}: {msg}")),
                        Error::InvalidArgument(msg) => Error::parse(lineno, msg),
                        other => other,
                    })?;
                    samples.push(sample);
                }
            }
        }
        let header = header.ok_or_else(|| Error::parse(1, "missing HDR record"))?;
        Self::new(header, samples)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let h = &self.header;
        writeln!(
            w,
            "HDR K={} D={} E={} CMAX={} MODELS={}",
            h.num_actions,
            h.num_domains,
            h.embed_dim,
            fmt_float(h.cmax),
            h.model_names.join(",")
        )?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            let _ = write!(line, "SMP id={} d={} emb=", s.id, s.context.domain_id);
            push_floats(&mut line, &s.context.embedding);
            line.push_str(" feat=");
            push_floats(&mut line, &s.context.features);
            line.push_str(" q=");
            push_floats(&mut line, &s.quality);
            line.push_str(" c=");
            push_floats(&mut line, &s.cost);
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("dataset text is UTF-8")
    }
}

/// Canonical float encoding: 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn push_floats(out: &mut String, xs: &[f64]) {
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_float(*x));
    }
}

fn max_cost(samples: &[Sample]) -> f64 {
    samples
        .iter()
        .flat_map(|s| s.cost.iter().copied())
        .fold(0.0, f64::max)
}

fn check_cmax(declared: f64, observed: f64) -> Result<()> {
    let scale = declared.abs().max(observed.abs()).max(f64::MIN_POSITIVE);
    if (declared - observed).abs() > CMAX_REL_TOL * scale {
        return Err(Error::InvalidArgument(format!(
            "header CMAX {declared} disagrees with observed maximum cost {observed}"
        )));
    }
    Ok(())
}

fn validate_header(h: &DatasetHeader) -> Result<()> {
    if h.num_actions == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if h.num_domains == 0 {
        return Err(Error::InvalidArgument("D must be at least 1".into()));
    }
    if h.embed_dim == 0 {
        return Err(Error::InvalidArgument("E must be at least 1".into()));
    }
    if h.model_names.len() != h.num_actions {
        return Err(Error::Dimension(format!(
            "{} model names for K={}",
            h.model_names.len(),
            h.num_actions
        )));
    }
    if !(h.cmax.is_finite() && h.cmax > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "CMAX must be positive and finite, got {}",
            h.cmax
        )));
    }
    for name in &h.model_names {
        if name.is_empty() || name.contains([',', ' ', '\t']) {
            return Err(Error::InvalidArgument(format!(
                "model name {name:?} must be non-empty without commas or whitespace"
            )));
        }
    }
    Ok(())
}

fn validate_sample(h: &DatasetHeader, s: &Sample) -> Result<()> {
    if s.id.is_empty() || s.id.contains(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!(
            "sample id {:?} must be non-empty without whitespace",
            s.id
        )));
    }
    if s.context.embedding.len() != h.embed_dim {
        return Err(Error::Dimension(format!(
            "embedding has {} entries, header E={}",
            s.context.embedding.len(),
            h.embed_dim
        )));
    }
    if s.quality.len() != h.num_actions {
        return Err(Error::Dimension(format!(
            "quality has {} entries, header K={}",
            s.quality.len(),
            h.num_actions
        )));
    }
    if s.cost.len() != h.num_actions {
        return Err(Error::Dimension(format!(
            "cost has {} entries, header K={}",
            s.cost.len(),
            h.num_actions
        )));
    }
    if s.context.domain_id >= h.num_domains {
        return Err(Error::Dimension(format!(
            "domain id {} outside [0, {})",
            s.context.domain_id, h.num_domains
        )));
    }
    let finite = s.context.embedding.iter().chain(&s.context.features);
    if finite.into_iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "non-finite embedding or feature".into(),
        ));
    }
    if s.quality.iter().any(|q| !(0.0..=1.0).contains(q)) {
        return Err(Error::InvalidArgument("quality outside [0, 1]".into()));
    }
    if s.cost.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
        return Err(Error::InvalidArgument(
            "cost must be finite and non-negative".into(),
        ));
    }
    Ok(())
}

fn fields(line: &str) -> impl Iterator<Item = &str> {
    line.split_ascii_whitespace()
}

fn key_value(token: &str, lineno: usize) -> Result<(&str, &str)> {
    token
        .split_once('=')
        .ok_or_else(|| Error::parse(lineno, format!("expected key=value, got {token:?}")))
}

fn parse_usize(v: &str, key: &str, lineno: usize) -> Result<usize> {
    v.parse()
        .map_err(|_| Error::parse(lineno, format!("{key}: invalid integer {v:?}")))
}

fn parse_float(v: &str, key: &str, lineno: usize) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::parse(lineno, format!("{key}: invalid float {v:?}")))
}

fn parse_floats(v: &str, key: &str, lineno: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| parse_float(x, key, lineno)).collect()
}

fn parse_header(line: &str, lineno: usize) -> Result<DatasetHeader> {
    let mut it = fields(line);
    if it.next() != Some("HDR") {
        return Err(Error::parse(lineno, "first record must be HDR"));
    }
    let (mut k, mut d, mut e, mut cmax, mut models) = (None, None, None, None, None);
    for tok in it {
        let (key, v) = key_value(tok, lineno)?;
        match key {
            "K" => k = Some(parse_usize(v, key, lineno)?),
            "D" => d = Some(parse_usize(v, key, lineno)?),
            "E" => e = Some(parse_usize(v, key, lineno)?),
            "CMAX" => cmax = Some(parse_float(v, key, lineno)?),
            "MODELS" => models = Some(v.split(',').map(str::to_owned).collect::<Vec<_>>()),
            other => {
                return Err(Error::parse(
                    lineno,
                    format!("unknown header key {other:?}"),
                ))
            }
        }
    }
    let missing = |name: &str| Error::parse(lineno, format!("header missing {name}"));
    let header = DatasetHeader {
        num_actions: k.ok_or_else(|| missing("K"))?,
        num_domains: d.ok_or_else(|| missing("D"))?,
        embed_dim: e.ok_or_else(|| missing("E"))?,
        cmax: cmax.ok_or_else(|| missing("CMAX"))?,
        model_names: models.ok_or_else(|| missing("MODELS"))?,
    };
    validate_header(&header).map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::parse(lineno, msg),
        other => other,
    })?;
    Ok(header)
}

fn parse_sample(line: &str, lineno: usize) -> Result<Sample> {
    let mut it = fields(line);
    if it.next() != Some("SMP") {
        return Err(Error::parse(lineno, "expected SMP record"));
    }
    let (mut id, mut d, mut emb, mut feat, mut q, mut c) = (None, None, None, None, None, None);
    for tok in it {
        let (key, v) = key_value(tok, lineno)?;
        match key {
            "id" => id = Some(v.to_owned()),
            "d" => d = Some(parse_usize(v, key, lineno)?),
            "emb" => emb = Some(parse_floats(v, key, lineno)?),
            "feat" => feat = Some(parse_floats(v, key, lineno)?),
            "q" => q = Some(parse_floats(v, key, lineno)?),
            "c" => c = Some(parse_floats(v, key, lineno)?),
            other => {
                return Err(Error::parse(
                    lineno,
                    format!("unknown sample key {other:?}"),
                ))
            }
        }
    }
    let missing = |name: &str| Error::parse(lineno, format!("sample missing {name}"));
    let feat = feat.ok_or_else(|| missing("feat"))?;
    let features: [f64; NUM_FEATURES] = feat.as_slice().try_into().map_err(|_| {
        Error::Dimension(format!(
            "line {lineno}: feat has {} entries, expected {NUM_FEATURES}",
            feat.len()
        ))
    })?;
    Ok(Sample {
        id: id.ok_or_else(|| missing("id"))?,
        context: RoutingContext::new(
            emb.ok_or_else(|| missing("emb"))?,
            features,
            d.ok_or_else(|| missing("d"))?,
        ),
        quality: q.ok_or_else(|| missing("q"))?,
        cost: c.ok_or_else(|| missing("c"))?,
    })
}

/// Logarithmic cost normalization `log(1 + c) / log(1 + cmax)`, clamped to 1
/// for costs above `cmax`.
pub fn normalize_cost(cost: f64, cmax: f64) -> f64 {
    debug_assert!(cmax > 0.0);
    let c = cost.max(0.0);
    if c >= cmax {
        return 1.0;
    }
    c.ln_1p() / cmax.ln_1p()
}

/// [`normalize_cost`] bound to a dataset's `cmax`, counting costs that had to
/// be clamped.
#[derive(Debug)]
pub struct CostNormalizer {
    cmax: f64,
    clamped: AtomicU64,
}

impl CostNormalizer {
    pub fn new(cmax: f64) -> Result<Self> {
        if !(cmax.is_finite() && cmax > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cmax must be positive, got {cmax}"
            )));
        }
        Ok(Self {
            cmax,
            clamped: AtomicU64::new(0),
        })
    }

    pub fn cmax(&self) -> f64 {
        self.cmax
    }

    pub fn normalize(&self, cost: f64) -> f64 {
        if cost > self.cmax {
            let n = self.clamped.fetch_add(1, Ordering::Relaxed) + 1;
            log::warn!(
                "cost {cost} exceeds cmax {}; clamped (total {n})",
                self.cmax
            );
        }
        normalize_cost(cost, self.cmax)
    }

    /// Number of costs above `cmax` seen so far.
    pub fn clamped_count(&self) -> u64 {
        self.clamped.load(Ordering::Relaxed)
    }
}

/// Arguments of [`generate_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub num_samples: usize,
    pub num_actions: usize,
    pub num_domains: usize,
    pub embed_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            num_samples: 2000,
            num_actions: 5,
            num_domains: 8,
            embed_dim: 16,
        }
    }
}

/// A generated dataset together with the noise-free quality the generator
/// planted for every (sample, action).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub planted_quality: Vec<Vec<f64>>,
}

// Generator shape. Capabilities span [-CAPABILITY_SPAN, CAPABILITY_SPAN],
// prices rise geometrically from 1 to PRICE_SPREAD, and weak answers are
// up to (1 + VERBOSITY) times longer than confident ones. EASE shifts
// difficulty down so that a good share of queries is within reach of the
// cheaper models.
const CAPABILITY_SPAN: f64 = 1.2;
const SPECIALIZATION: f64 = 0.8;
const QUALITY_SLOPE: f64 = 5.0;
const QUALITY_NOISE: f64 = 0.05;
const PRICE_SPREAD: f64 = 5.0625;
const VERBOSITY: f64 = 3.0;
const EMBED_NOISE: f64 = 0.1;
const DATED_PENALTY: f64 = 1.5;
const EASE: f64 = 0.9;

/// Seeded desk-scale stand-in for a routing benchmark. See
/// [`generate_synthetic_with_truth`] for the planted structure.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    generate_synthetic_with_truth(spec).map(|s| s.dataset)
}

/// Every domain owns a centre and an orthogonal unit "difficulty direction"
/// in embedding space. A query's embedding is `centre + t * direction +
/// noise` with latent `t` uniform in [-1, 1], and its difficulty is
/// `offset_d + scale_d * <embedding, direction> - ease`. Quality of action
/// `a` is `sigmoid(slope * (capability_{d,a} - difficulty))` plus small
/// noise, with capabilities increasing in `a` (except a dated model 1 when
/// `K >= 3`) and perturbed per domain. Cost is
/// `price_a * length * (1 + verbosity * (1 - quality))`, so price, and hence
/// typical cost, increases with capability.
pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    let &SyntheticSpec {
        seed,
        num_samples: n,
        num_actions: k,
        num_domains: d,
        embed_dim: e,
    } = spec;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!(
            "n={n} must be at least K={k}"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidArgument("D must be at least 1".into()));
    }
    if e < 2 {
        return Err(Error::InvalidArgument(format!("E={e} must be at least 2")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut centres = Vec::with_capacity(d);
    let mut directions = Vec::with_capacity(d);
    for _ in 0..d {
        let mut c: Vec<f64> = (0..e).map(|_| normal(&mut rng)).collect();
        normalize(&mut c);
        let mut u: Vec<f64> = (0..e).map(|_| normal(&mut rng)).collect();
        let along = dot(&u, &c);
        u.iter_mut().zip(&c).for_each(|(ui, ci)| *ui -= along * ci);
        normalize(&mut u);
        centres.push(c);
        directions.push(u);
    }
    let scales: Vec<f64> = (0..d).map(|_| rng.random_range(0.8..1.6)).collect();
    let offsets: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let capability: Vec<Vec<f64>> = (0..d)
        .map(|_| {
            (0..k)
                .map(|a| base_capability(a, k) + SPECIALIZATION * normal(&mut rng))
                .collect()
        })
        .collect();
    let prices: Vec<f64> = (0..k).map(|a| price(a, k)).collect();

    let weights: Vec<f64> = (1..=d).map(|i| 1.0 / (i as f64).sqrt()).collect();
    let total: f64 = weights.iter().sum();
    let domain_freq: Vec<f64> = weights.iter().map(|w| w / total * d as f64).collect();
    let domain_dist = WeightedIndex::new(&weights).expect("domain weights are positive and finite");

    let mut samples = Vec::with_capacity(n);
    let mut planted = Vec::with_capacity(n);
    let embed_noise = EMBED_NOISE / (e as f64).sqrt();
    for i in 0..n {
        let dom = domain_dist.sample(&mut rng);
        let t: f64 = rng.random_range(-1.0..1.0);
        let embedding: Vec<f64> = (0..e)
            .map(|j| centres[dom][j] + t * directions[dom][j] + embed_noise * normal(&mut rng))
            .collect();
        let difficulty = offsets[dom] + scales[dom] * dot(&embedding, &directions[dom]) - EASE;
        let length = (0.3 * t + 0.4 * normal(&mut rng)).exp();
        let tokens = 200.0 * length;

        let q_bar: Vec<f64> = capability[dom]
            .iter()
            .map(|cap| sigmoid(QUALITY_SLOPE * (cap - difficulty)))
            .collect();
        let quality: Vec<f64> = q_bar
            .iter()
            .map(|q| (q + QUALITY_NOISE * normal(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let cost: Vec<f64> = q_bar
            .iter()
            .zip(&prices)
            .map(|(q, p)| p * length * (1.0 + VERBOSITY * (1.0 - q)))
            .collect();

        let features = [tokens / 1000.0, tokens.ln_1p(), domain_freq[dom]];
        samples.push(Sample {
            id: format!("syn{i}"),
            context: RoutingContext::new(embedding, features, dom),
            quality,
            cost,
        });
        planted.push(q_bar);
    }

    let model_names = (0..k).map(|a| format!("model{a}")).collect();
    let dataset = Dataset::from_samples(d, model_names, samples)?;
    Ok(SyntheticDataset {
        dataset,
        planted_quality: planted,
    })
}

fn base_capability(a: usize, k: usize) -> f64 {
    if k == 1 {
        return 0.0;
    }
    let cap = -CAPABILITY_SPAN + 2.0 * CAPABILITY_SPAN * a as f64 / (k - 1) as f64;
    // With three or more models, model 1 is a dated one: priced above the
    // cheapest but weaker than it.
    if k >= 3 && a == 1 {
        cap - DATED_PENALTY
    } else {
        cap
    }
}

fn price(a: usize, k: usize) -> f64 {
    if k == 1 {
        1.0
    } else {
        PRICE_SPREAD.powf(a as f64 / (k - 1) as f64)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
