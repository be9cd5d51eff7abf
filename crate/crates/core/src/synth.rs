//! Structural-causal-model generator and sample windowing.
//!
//! Non-target variables follow a linear VAR at the coarse (monthly) scale.
//! Each coarse step expands to `oci_stride` fine steps: climate indices hold
//! their value for the whole block, local weather adds intra-block noise with
//! zero block mean, so block-mean resampling returns the coarse process plus
//! the (periodic) seasonal cycle. Binary labels are Bernoulli draws from a
//! logistic rule over lagged fine-scale values.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{DataError, MultiSeries, VarKind, Variable};
use crate::pcmci::{CausalGraph, Link};
use crate::rng::SeedStreams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid spec: {0}")]
    Spec(String),
    #[error("VAR is unstable (spectral radius {0:.4} ≥ 1)")]
    Unstable(f64),
    #[error("cannot reach positive rate {requested}: {reason}")]
    Calibration { requested: f64, reason: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Coarse-scale VAR coefficient `source_{m-lag} → target_m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmLink {
    pub source: String,
    pub lag: usize,
    pub target: String,
    pub coeff: f64,
}

fn one() -> usize {
    1
}

/// Linear label term `weight · x_{s-lag}` (lag in fine steps).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTerm {
    pub var: String,
    pub weight: f64,
    #[serde(default = "one")]
    pub lag: usize,
}

/// Pairwise synergy `weight · a_{s-lag} · b_{s-lag}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynergyTerm {
    pub a: String,
    pub b: String,
    pub weight: f64,
    #[serde(default = "one")]
    pub lag: usize,
}

/// `P(y_s = 1) = σ(Σ w x + Σ s x x + bias)`, bias calibrated to `positive_rate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRule {
    pub terms: Vec<LabelTerm>,
    #[serde(default)]
    pub synergy: Vec<SynergyTerm>,
    pub positive_rate: f64,
}

impl LabelRule {
    /// Largest lag any term uses; labels before it are fixed at 0.
    pub fn max_lag(&self) -> usize {
        self.terms
            .iter()
            .map(|t| t.lag)
            .chain(self.synergy.iter().map(|s| s.lag))
            .max()
            .unwrap_or(1)
    }
}

fn default_burn_in() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub name: String,
    pub variables: Vec<Variable>,
    pub links: Vec<ScmLink>,
    /// Innovation standard deviation per variable (the target's entry is unused).
    pub noise_std: Vec<f64>,
    pub seasonal_amplitude: Vec<f64>,
    /// Seasonal period in coarse steps.
    pub period: usize,
    /// Fine steps per coarse step.
    pub oci_stride: usize,
    /// Intra-block noise of local variables at the fine scale.
    pub weather_std: f64,
    pub label: LabelRule,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
}

/// Preset names accepted by [`ScmSpec::preset`].
pub const PRESETS: [&str; 4] = ["fig6-default", "mediterranean", "boreal", "planted-lag"];

fn link(source: &str, lag: usize, target: &str, coeff: f64) -> ScmLink {
    ScmLink {
        source: source.into(),
        lag,
        target: target.into(),
        coeff,
    }
}

fn term(var: &str, weight: f64, lag: usize) -> LabelTerm {
    LabelTerm {
        var: var.into(),
        weight,
        lag,
    }
}

impl ScmSpec {
    /// Seven variables: fire; local t2m, tp, vpd; indices nao, ao, nino34.
    pub fn fig6_default() -> Self {
        let variables = vec![
            Variable::new("fire", VarKind::Target),
            Variable::new("t2m", VarKind::Local),
            Variable::new("tp", VarKind::Local),
            Variable::new("vpd", VarKind::Local),
            Variable::new("nao", VarKind::Oci),
            Variable::new("ao", VarKind::Oci),
            Variable::new("nino34", VarKind::Oci),
        ];
        let links = vec![
            link("nino34", 1, "nino34", 0.8),
            link("ao", 1, "ao", 0.5),
            link("nino34", 2, "ao", 0.3),
            link("nao", 1, "nao", 0.4),
            link("ao", 1, "nao", 0.4),
            link("t2m", 1, "t2m", 0.5),
            link("nao", 1, "t2m", 0.4),
            link("nino34", 3, "t2m", 0.3),
            link("tp", 1, "tp", 0.3),
            link("ao", 2, "tp", 0.4),
            link("vpd", 1, "vpd", 0.4),
            link("t2m", 1, "vpd", 0.5),
            link("tp", 1, "vpd", -0.4),
        ];
        Self {
            name: "fig6-default".into(),
            variables,
            links,
            noise_std: vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            seasonal_amplitude: vec![0.0, 1.0, 0.5, 0.8, 0.0, 0.0, 0.0],
            period: 12,
            oci_stride: 4,
            weather_std: 0.5,
            label: LabelRule {
                terms: vec![term("t2m", 1.0, 1), term("vpd", 1.0, 1), term("tp", -0.8, 1)],
                synergy: vec![SynergyTerm {
                    a: "t2m".into(),
                    b: "vpd".into(),
                    weight: 0.5,
                    lag: 1,
                }],
                positive_rate: 0.011,
            },
            burn_in: 200,
        }
    }

    /// The fig6-default process at 1.1% positives.
    pub fn mediterranean() -> Self {
        Self {
            name: "mediterranean".into(),
            ..Self::fig6_default()
        }
    }

    /// The fig6-default process at 0.0737% positives.
    pub fn boreal() -> Self {
        let mut s = Self::fig6_default();
        s.name = "boreal".into();
        s.label.positive_rate = 0.000737;
        s
    }

    /// Labels driven by one climate index at a long lag, plus weak local terms.
    ///
    /// The label at fine step `s` depends on `nino34` at `s − 27`; with a
    /// horizon of 1 and 4-step blocks that falls in block lag 7 of the index
    /// window (lag 1 = most recent block).
    pub fn planted_lag() -> Self {
        let mut s = Self::fig6_default();
        s.name = "planted-lag".into();
        s.links.retain(|l| !(l.source == "nino34" && l.target == "nino34"));
        s.links.push(link("nino34", 1, "nino34", 0.2));
        s.label = LabelRule {
            terms: vec![term("nino34", 3.0, 27), term("t2m", 0.3, 1)],
            synergy: Vec::new(),
            positive_rate: 0.05,
        };
        s
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "fig6-default" => Some(Self::fig6_default()),
            "mediterranean" => Some(Self::mediterranean()),
            "boreal" => Some(Self::boreal()),
            "planted-lag" => Some(Self::planted_lag()),
            _ => None,
        }
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.variables
            .iter()
            .position(|v| v.name == name)
            .ok_or_else(|| SynthError::Spec(format!("unknown variable {name:?}")))
    }

    pub fn target_index(&self) -> Result<usize> {
        let targets: Vec<usize> = (0..self.variables.len())
            .filter(|&i| self.variables[i].kind == VarKind::Target)
            .collect();
        match targets.as_slice() {
            [t] => Ok(*t),
            _ => Err(SynthError::Spec(format!(
                "expected exactly one target, found {}",
                targets.len()
            ))),
        }
    }

    pub fn max_lag(&self) -> usize {
        self.links.iter().map(|l| l.lag).max().unwrap_or(0)
    }

    /// Checks names, kinds, lags and parameter ranges; does not check stability.
    pub fn validate(&self) -> Result<()> {
        let n = self.variables.len();
        let target = self.target_index()?;
        if self.noise_std.len() != n || self.seasonal_amplitude.len() != n {
            return Err(SynthError::Spec(format!(
                "noise_std and seasonal_amplitude need {n} entries"
            )));
        }
        if self.noise_std.iter().any(|s| !(s.is_finite() && *s >= 0.0))
            || self.seasonal_amplitude.iter().any(|a| !a.is_finite())
            || !(self.weather_std.is_finite() && self.weather_std >= 0.0)
        {
            return Err(SynthError::Spec("noise and amplitudes must be finite, noise ≥ 0".into()));
        }
        if self.period == 0 || self.oci_stride == 0 {
            return Err(SynthError::Spec("period and oci_stride must be positive".into()));
        }
        for l in &self.links {
            let (i, j) = (self.index_of(&l.source)?, self.index_of(&l.target)?);
            if l.lag == 0 {
                return Err(SynthError::Spec(format!(
                    "link {} -> {} must have lag ≥ 1",
                    l.source, l.target
                )));
            }
            if i == target || j == target {
                return Err(SynthError::Spec("VAR links may not involve the target".into()));
            }
            let (ki, kj) = (self.variables[i].kind, self.variables[j].kind);
            if ki == VarKind::Local && kj == VarKind::Oci {
                return Err(SynthError::Spec(format!(
                    "local {} may not drive climate index {}",
                    l.source, l.target
                )));
            }
            if !l.coeff.is_finite() {
                return Err(SynthError::Spec("non-finite coefficient".into()));
            }
        }
        let r = &self.label;
        if !(r.positive_rate > 0.0 && r.positive_rate < 1.0) {
            return Err(SynthError::Calibration {
                requested: r.positive_rate,
                reason: "rate must lie in (0, 1)".into(),
            });
        }
        for t in &r.terms {
            self.check_driver(&t.var, t.lag, target)?;
        }
        for s in &r.synergy {
            self.check_driver(&s.a, s.lag, target)?;
            self.check_driver(&s.b, s.lag, target)?;
        }
        Ok(())
    }

    fn check_driver(&self, name: &str, lag: usize, target: usize) -> Result<()> {
        if self.index_of(name)? == target {
            return Err(SynthError::Spec("label rule may not reference the target".into()));
        }
        if lag == 0 {
            return Err(SynthError::Spec(format!("label term on {name} needs lag ≥ 1")));
        }
        Ok(())
    }

    /// Spectral radius of the coarse VAR's companion matrix.
    pub fn spectral_radius(&self) -> Result<f64> {
        let n = self.variables.len();
        let p = self.max_lag();
        if p == 0 {
            return Ok(0.0);
        }
        let dim = n * p;
        let mut m = vec![0.0; dim * dim];
        for l in &self.links {
            let (i, j) = (self.index_of(&l.source)?, self.index_of(&l.target)?);
            m[j * dim + (l.lag - 1) * n + i] += l.coeff;
        }
        for k in n..dim {
            m[k * dim + (k - n)] = 1.0;
        }
        Ok(spectral_radius(&m, dim))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        hex_digest(json.as_bytes())
    }

    /// The generating graph: lagged VAR links plus label drivers into the target.
    ///
    /// Link strengths carry the generating coefficient clamped to `[-1, 1]`;
    /// p-values are 0. Label drivers appear at coarse lag `lag / oci_stride`.
    pub fn ground_truth(&self) -> Result<CausalGraph> {
        let target = self.target_index()?;
        let mut links: BTreeMap<(usize, usize, usize), f64> = BTreeMap::new();
        for l in &self.links {
            let key = (self.index_of(&l.source)?, l.lag, self.index_of(&l.target)?);
            *links.entry(key).or_insert(0.0) += l.coeff;
        }
        let mut add_driver = |name: &str, lag: usize, w: f64| -> Result<()> {
            let key = (self.index_of(name)?, lag / self.oci_stride, target);
            let e = links.entry(key).or_insert(0.0);
            if e.abs() < w.abs() {
                *e = w;
            }
            Ok(())
        };
        for t in &self.label.terms {
            add_driver(&t.var, t.lag, t.weight)?;
        }
        for s in &self.label.synergy {
            add_driver(&s.a, s.lag, s.weight)?;
            add_driver(&s.b, s.lag, s.weight)?;
        }
        Ok(CausalGraph {
            variables: self.variables.clone(),
            tau_max: links.keys().map(|k| k.1).max().unwrap_or(0),
            alpha: 0.0,
            links: links
                .into_iter()
                .filter(|(_, c)| *c != 0.0)
                .map(|((source, lag, target), c)| Link {
                    source,
                    lag,
                    target,
                    mci: c.clamp(-1.0, 1.0),
                    pvalue: 0.0,
                })
                .collect(),
        })
    }
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Gelfand estimate `‖M^(2^k)‖^(1/2^k)` with renormalized repeated squaring.
fn spectral_radius(m: &[f64], n: usize) -> f64 {
    let frob = |a: &[f64]| a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut a = m.to_vec();
    let mut log_scale = 0.0;
    let steps = 14;
    for _ in 0..steps {
        let mut sq = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let x = a[i * n + k];
                if x == 0.0 {
                    continue;
                }
                for j in 0..n {
                    sq[i * n + j] += x * a[k * n + j];
                }
            }
        }
        log_scale *= 2.0;
        let s = frob(&sq);
        if s == 0.0 {
            return 0.0;
        }
        sq.iter_mut().for_each(|v| *v /= s);
        log_scale += s.ln();
        a = sq;
    }
    ((frob(&a).ln() + log_scale) / f64::from(1u32 << steps)).exp()
}

/// Random inputs of one simulation, exposed so tests can perturb them.
#[derive(Debug, Clone, PartialEq)]
pub struct Innovations {
    /// `[burn_in + months][n_vars]` standard-normal VAR shocks.
    pub shocks: Vec<Vec<f64>>,
    /// `[months · stride][n_vars]` standard-normal intra-block noise.
    pub weather: Vec<Vec<f64>>,
    /// `[T]` uniforms driving the Bernoulli labels.
    pub uniforms: Vec<f64>,
}

impl Innovations {
    pub fn draw(spec: &ScmSpec, t: usize, streams: &SeedStreams) -> Self {
        let n = spec.variables.len();
        let months = t.div_ceil(spec.oci_stride);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut rng = streams.rng("synth/shocks");
        let shocks = (0..spec.burn_in + months)
            .map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut rng = streams.rng("synth/weather");
        let weather = (0..months * spec.oci_stride)
            .map(|_| (0..n).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut rng = streams.rng("synth/labels");
        let uniforms = (0..t).map(|_| rng.random::<f64>()).collect();
        Self {
            shocks,
            weather,
            uniforms,
        }
    }
}

/// Simulates the non-target variables at the fine scale (target column zero).
pub fn simulate(spec: &ScmSpec, t: usize, innov: &Innovations) -> Result<MultiSeries> {
    spec.validate()?;
    let rho = spec.spectral_radius()?;
    if rho >= 1.0 {
        return Err(SynthError::Unstable(rho));
    }
    let n = spec.variables.len();
    let k = spec.oci_stride;
    let months = t.div_ceil(k);
    let total = spec.burn_in + months;
    if innov.shocks.len() < total || innov.weather.len() < months * k {
        return Err(SynthError::Contract("innovations too short for T".into()));
    }
    let target = spec.target_index()?;
    let links: Vec<(usize, usize, usize, f64)> = spec
        .links
        .iter()
        .map(|l| Ok((spec.index_of(&l.source)?, l.lag, spec.index_of(&l.target)?, l.coeff)))
        .collect::<Result<_>>()?;
    let mut coarse = vec![vec![0.0; n]; total];
    for m in 0..total {
        for v in 0..n {
            if v != target {
                coarse[m][v] = spec.noise_std[v] * innov.shocks[m][v];
            }
        }
        for &(i, lag, j, c) in &links {
            if m >= lag {
                coarse[m][j] += c * coarse[m - lag][i];
            }
        }
    }
    let coarse = &coarse[spec.burn_in..];
    let cycle = (k * spec.period) as f64;
    let tau = std::f64::consts::TAU;
    let mut columns = vec![vec![0.0; t]; n];
    for (v, col) in columns.iter_mut().enumerate() {
        let amp = spec.seasonal_amplitude[v];
        match spec.variables[v].kind {
            VarKind::Target => {}
            VarKind::Oci => {
                for (s, x) in col.iter_mut().enumerate() {
                    let m = s / k;
                    *x = coarse[m][v] + amp * (tau * (m * k) as f64 / cycle).sin();
                }
            }
            VarKind::Local => {
                for m in 0..months {
                    let block = &innov.weather[m * k..(m + 1) * k];
                    let mean = block.iter().map(|w| w[v]).sum::<f64>() / k as f64;
                    for (off, w) in block.iter().enumerate() {
                        let s = m * k + off;
                        if s >= t {
                            break;
                        }
                        col[s] = coarse[m][v]
                            + amp * (tau * s as f64 / cycle).sin()
                            + spec.weather_std * (w[v] - mean);
                    }
                }
            }
        }
    }
    Ok(MultiSeries::new(spec.variables.clone(), columns)?)
}

/// Labels and the calibrated bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub y: Vec<usize>,
    pub bias: f64,
    pub realized_rate: f64,
}

struct ResolvedRule {
    terms: Vec<(usize, f64, usize)>,
    synergy: Vec<(usize, usize, f64, usize)>,
    start: usize,
}

fn resolve(series: &MultiSeries, rule: &LabelRule) -> Result<ResolvedRule> {
    let idx = |name: &str| {
        series
            .index_of(name)
            .filter(|&i| series.variables()[i].kind != VarKind::Target)
            .ok_or_else(|| SynthError::Spec(format!("label driver {name:?} is not a non-target variable")))
    };
    let terms = rule
        .terms
        .iter()
        .map(|t| Ok((idx(&t.var)?, t.weight, t.lag)))
        .collect::<Result<Vec<_>>>()?;
    let synergy = rule
        .synergy
        .iter()
        .map(|s| Ok((idx(&s.a)?, idx(&s.b)?, s.weight, s.lag)))
        .collect::<Result<Vec<_>>>()?;
    if terms.iter().any(|t| t.2 == 0) || synergy.iter().any(|s| s.3 == 0) {
        return Err(SynthError::Spec("label lags must be ≥ 1".into()));
    }
    Ok(ResolvedRule {
        terms,
        synergy,
        start: rule.max_lag(),
    })
}

/// Linear predictor without bias; steps before the largest lag are `None`.
fn drive(series: &MultiSeries, r: &ResolvedRule) -> Vec<Option<f64>> {
    (0..series.len())
        .map(|s| {
            if s < r.start {
                return None;
            }
            let lin: f64 = r.terms.iter().map(|&(v, w, lag)| w * series.column(v)[s - lag]).sum();
            let syn: f64 = r
                .synergy
                .iter()
                .map(|&(a, b, w, lag)| w * series.column(a)[s - lag] * series.column(b)[s - lag])
                .sum();
            Some(lin + syn)
        })
        .collect()
}

fn threshold_labels(z: &[Option<f64>], bias: f64, uniforms: &[f64]) -> Vec<usize> {
    z.iter()
        .zip(uniforms)
        .map(|(z, &u)| match z {
            Some(z) => usize::from(u < crate::tensor::tape::sigmoid(z + bias)),
            None => 0,
        })
        .collect()
}

/// Labels for a fixed bias and fixed uniforms.
pub fn label_with_bias(series: &MultiSeries, rule: &LabelRule, bias: f64, uniforms: &[f64]) -> Result<Vec<usize>> {
    if uniforms.len() < series.len() {
        return Err(SynthError::Contract("fewer uniforms than time steps".into()));
    }
    let r = resolve(series, rule)?;
    Ok(threshold_labels(&drive(series, &r), bias, uniforms))
}

/// Bernoulli labels with the bias chosen by bisection so that the realized
/// positive count is `round(rate · eligible)` (accepted within ±10% relative).
pub fn calibrate_labels(series: &MultiSeries, rule: &LabelRule, uniforms: &[f64]) -> Result<Labels> {
    let requested = rule.positive_rate;
    let fail = |reason: String| SynthError::Calibration { requested, reason };
    if !(requested > 0.0 && requested < 1.0) {
        return Err(fail("rate must lie in (0, 1)".into()));
    }
    if uniforms.len() < series.len() {
        return Err(SynthError::Contract("fewer uniforms than time steps".into()));
    }
    let r = resolve(series, rule)?;
    let z = drive(series, &r);
    let eligible = z.iter().filter(|v| v.is_some()).count();
    let want = (requested * eligible as f64).round() as usize;
    if want == 0 {
        return Err(fail(format!("{eligible} eligible steps give zero expected positives")));
    }
    let count = |b: f64| threshold_labels(&z, b, uniforms).iter().sum::<usize>();
    let (mut lo, mut hi) = (-10.0, 10.0);
    while count(lo) > want {
        lo *= 2.0;
        if lo < -1e6 {
            return Err(fail("bias diverged downwards".into()));
        }
    }
    while count(hi) < want {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(fail("bias diverged upwards".into()));
        }
    }
    let mut best = (lo, count(lo));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let c = count(mid);
        if c.abs_diff(want) < best.1.abs_diff(want) {
            best = (mid, c);
        }
        if c == want {
            break;
        }
        if c < want {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (bias, c) = best;
    let realized = c as f64 / eligible as f64;
    if (realized - requested).abs() > 0.1 * requested {
        return Err(fail(format!("closest achievable rate is {realized}")));
    }
    Ok(Labels {
        y: threshold_labels(&z, bias, uniforms),
        bias,
        realized_rate: c as f64 / series.len() as f64,
    })
}

/// Draws uniforms from `rng` and calibrates labels.
pub fn label_fire(series: &MultiSeries, rule: &LabelRule, rng: &mut crate::rng::Rng) -> Result<Labels> {
    let uniforms: Vec<f64> = (0..series.len()).map(|_| rng.random::<f64>()).collect();
    calibrate_labels(series, rule, &uniforms)
}

/// A generated dataset: fine-scale series with labels in the target column.
#[derive(Debug, Clone)]
pub struct Generated {
    pub series: MultiSeries,
    pub labels: Labels,
    pub ground_truth: CausalGraph,
    pub spec: ScmSpec,
}

/// Sidecar metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub variables: Vec<Variable>,
    pub oci_stride: usize,
    pub period: usize,
    pub spec_name: String,
    pub spec_hash: String,
    pub seed: Option<u64>,
    pub positive_rate: f64,
    pub label_bias: f64,
    pub ground_truth: Vec<GroundTruthLink>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLink {
    pub source: String,
    pub lag: usize,
    pub target: String,
    pub coeff: f64,
}

impl Generated {
    pub fn sidecar(&self, seed: Option<u64>) -> Sidecar {
        let names = self.series.names();
        Sidecar {
            variables: self.series.variables().to_vec(),
            oci_stride: self.spec.oci_stride,
            period: self.spec.period,
            spec_name: self.spec.name.clone(),
            spec_hash: self.spec.hash(),
            seed,
            positive_rate: self.labels.realized_rate,
            label_bias: self.labels.bias,
            ground_truth: self
                .ground_truth
                .links
                .iter()
                .map(|l| GroundTruthLink {
                    source: names[l.source].clone(),
                    lag: l.lag,
                    target: names[l.target].clone(),
                    coeff: l.mci,
                })
                .collect(),
        }
    }
}

/// Simulates `t` fine steps of `spec` and labels them.
pub fn generate(spec: &ScmSpec, t: usize, streams: &SeedStreams) -> Result<Generated> {
    spec.validate()?;
    let min_t = 10 * spec.max_lag().max(1) * spec.oci_stride;
    if t < min_t {
        return Err(SynthError::InsufficientData(format!("T = {t} below minimum {min_t}")));
    }
    let innov = Innovations::draw(spec, t, streams);
    generate_from(spec, t, &innov)
}

/// [`generate`] with explicit random inputs.
pub fn generate_from(spec: &ScmSpec, t: usize, innov: &Innovations) -> Result<Generated> {
    let raw = simulate(spec, t, innov)?;
    let labels = calibrate_labels(&raw, &spec.label, &innov.uniforms)?;
    let target = spec.target_index()?;
    let mut columns = raw.columns().to_vec();
    columns[target] = labels.y.iter().map(|&y| y as f64).collect();
    let series = MultiSeries::new(spec.variables.clone(), columns)?;
    Ok(Generated {
        series,
        labels,
        ground_truth: spec.ground_truth()?,
        spec: spec.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub local_len: usize,
    pub oci_len: usize,
    pub stride: usize,
    pub horizon: usize,
}

impl WindowSpec {
    /// Fine steps of input history each sample needs.
    pub fn span(&self) -> usize {
        self.local_len.max(self.stride * self.oci_len)
    }
}

/// One candidate sample: inputs end at `t`, the label sits at `t + horizon`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub t: usize,
    pub label: usize,
    /// `None` when the sample's range straddles a split boundary.
    pub split: Option<Split>,
}

/// Windowed, standardized samples with chronological 70/15/15 splits.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub spec: WindowSpec,
    pub local_names: Vec<String>,
    pub oci_names: Vec<String>,
    pub samples: Vec<Sample>,
    /// Fine-step boundaries `[0, b1) / [b1, b2) / [b2, T)`.
    pub boundaries: (usize, usize),
    /// Per-input (mean, std) from the training segment, locals then indices.
    pub standardization: Vec<(f64, f64)>,
    locals: Vec<Vec<f64>>,
    ocis: Vec<Vec<f64>>,
}

/// Slides windows over `series`, labels taken from `labels`.
pub fn make_windows(series: &MultiSeries, labels: &[usize], spec: WindowSpec) -> Result<WindowSet> {
    if spec.horizon == 0 {
        return Err(SynthError::Contract("horizon must be at least 1".into()));
    }
    if spec.local_len == 0 || spec.oci_len == 0 || spec.stride == 0 {
        return Err(SynthError::Contract("window lengths and stride must be positive".into()));
    }
    let t_len = series.len();
    if labels.len() != t_len {
        return Err(SynthError::Contract("labels and series differ in length".into()));
    }
    let span = spec.span();
    if t_len < span + spec.horizon {
        return Err(SynthError::InsufficientData(format!(
            "T = {t_len} shorter than window span {span} plus horizon {}",
            spec.horizon
        )));
    }
    let local_idx = series.indices_of(VarKind::Local);
    let oci_idx = series.indices_of(VarKind::Oci);
    if local_idx.is_empty() && oci_idx.is_empty() {
        return Err(SynthError::Contract("no input variables".into()));
    }
    let b1 = t_len * 70 / 100;
    let b2 = t_len * 85 / 100;
    let segment = |s: usize| match s {
        _ if s < b1 => Split::Train,
        _ if s < b2 => Split::Val,
        _ => Split::Test,
    };
    let mut standardization = Vec::new();
    let mut standardize = |i: usize| {
        let train = &series.column(i)[..b1.max(2)];
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        standardization.push((mean, sd));
        series.column(i).iter().map(|x| (x - mean) / sd).collect::<Vec<f64>>()
    };
    let locals: Vec<Vec<f64>> = local_idx.iter().map(|&i| standardize(i)).collect();
    let ocis: Vec<Vec<f64>> = oci_idx.iter().map(|&i| standardize(i)).collect();
    let samples = (span - 1..t_len - spec.horizon)
        .map(|t| {
            let (first, last) = (segment(t + 1 - span), segment(t + spec.horizon));
            Sample {
                t,
                label: labels[t + spec.horizon],
                split: (first == last).then_some(first),
            }
        })
        .collect();
    let names = series.names();
    Ok(WindowSet {
        spec,
        local_names: local_idx.iter().map(|&i| names[i].clone()).collect(),
        oci_names: oci_idx.iter().map(|&i| names[i].clone()).collect(),
        samples,
        boundaries: (b1, b2),
        standardization,
        locals,
        ocis,
    })
}

impl WindowSet {
    pub fn n_local(&self) -> usize {
        self.locals.len()
    }

    pub fn n_oci(&self) -> usize {
        self.ocis.len()
    }

    /// Length of a flattened input: `C_l · L_l + C_oci · L_oci`.
    pub fn input_len(&self) -> usize {
        self.n_local() * self.spec.local_len + self.n_oci() * self.spec.oci_len
    }

    /// Indices of samples in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == Some(split))
            .collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Flattened standardized input of sample `i`: each local's window (oldest
    /// first), then each index's block means (oldest block first).
    pub fn flat_input(&self, i: usize) -> Vec<f64> {
        let t = self.samples[i].t;
        let WindowSpec {
            local_len,
            oci_len,
            stride,
            ..
        } = self.spec;
        let mut out = Vec::with_capacity(self.input_len());
        for col in &self.locals {
            out.extend_from_slice(&col[t + 1 - local_len..=t]);
        }
        for col in &self.ocis {
            let start = t + 1 - stride * oci_len;
            for b in 0..oci_len {
                let block = &col[start + b * stride..start + (b + 1) * stride];
                out.push(block.iter().sum::<f64>() / stride as f64);
            }
        }
        out
    }

    /// Fine-step range `[first, last]` that sample `i` reads, label included.
    pub fn footprint(&self, i: usize) -> (usize, usize) {
        let t = self.samples[i].t;
        (t + 1 - self.spec.span(), t + self.spec.horizon)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedStreams;

    fn ar1_spec(coeff: f64) -> ScmSpec {
        ScmSpec {
            name: "ar1".into(),
            variables: vec![Variable::new("y", VarKind::Target), Variable::new("x", VarKind::Local)],
            links: vec![link("x", 1, "x", coeff)],
            noise_std: vec![0.0, 1.0],
            seasonal_amplitude: vec![0.0, 0.0],
            period: 12,
            oci_stride: 1,
            weather_std: 0.0,
            label: LabelRule {
                terms: vec![term("x", 1.0, 1)],
                synergy: vec![],
                positive_rate: 0.1,
            },
            burn_in: 200,
        }
    }

    #[test]
    fn ar1_autocorrelation() {
        let g = generate(&ar1_spec(0.9), 2000, &SeedStreams::new(3)).unwrap();
        let x = g.series.column(1);
        let r = crate::stats::pearson(&x[..1999], &x[1..]).unwrap();
        assert!((r - 0.9).abs() < 0.05, "lag-1 autocorrelation {r}");
    }

    #[test]
    fn unstable_spec_is_rejected() {
        let err = generate(&ar1_spec(1.05), 2000, &SeedStreams::new(1)).unwrap_err();
        assert!(matches!(err, SynthError::Unstable(r) if (r - 1.05).abs() < 1e-3));
    }

    #[test]
    fn companion_radius_of_two_lag_process() {
        // x_t = 0.5 x_{t-1} + 0.3 x_{t-2}: roots of z² − 0.5 z − 0.3.
        let mut s = ar1_spec(0.5);
        s.links.push(link("x", 2, "x", 0.3));
        let expected = (0.5 + (0.25f64 + 1.2).sqrt()) / 2.0;
        assert!((s.spectral_radius().unwrap() - expected).abs() < 1e-3);
        assert!(ScmSpec::fig6_default().spectral_radius().unwrap() < 1.0);
    }

    #[test]
    fn presets_validate_and_respect_mediator_order() {
        for name in PRESETS {
            let spec = ScmSpec::preset(name).unwrap();
            spec.validate().unwrap();
            let g = spec.ground_truth().unwrap();
            let kinds: Vec<VarKind> = spec.variables.iter().map(|v| v.kind).collect();
            let a = crate::pcmci::LinkAssumptions::mediator(&kinds, 7, true);
            for l in &g.links {
                assert!(a.allows(l.source, l.lag, l.target), "{name}: {l:?}");
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let spec = ScmSpec::fig6_default();
        let a = generate(&spec, 2000, &SeedStreams::new(7)).unwrap();
        let b = generate(&spec, 2000, &SeedStreams::new(7)).unwrap();
        assert_eq!(a.series.to_csv(), b.series.to_csv());
        let c = generate(&spec, 2000, &SeedStreams::new(8)).unwrap();
        assert_ne!(a.series.to_csv(), c.series.to_csv());
    }

    #[test]
    fn block_means_recover_coarse_oci_values() {
        let spec = ScmSpec::fig6_default();
        let g = generate(&spec, 400, &SeedStreams::new(2)).unwrap();
        let nao = g.series.column(4);
        for m in 0..100 {
            let block = &nao[m * 4..m * 4 + 4];
            assert!(block.iter().all(|&v| v == block[0]));
        }
    }

    #[test]
    fn labels_calibrate_to_requested_rate() {
        let spec = ScmSpec::mediterranean();
        let g = generate(&spec, 50_000, &SeedStreams::new(4)).unwrap();
        let rate = g.labels.realized_rate;
        assert!((0.0099..=0.0121).contains(&rate), "rate {rate}");
    }

    #[test]
    fn very_negative_bias_gives_no_positives() {
        let spec = ScmSpec::fig6_default();
        let innov = Innovations::draw(&spec, 1000, &SeedStreams::new(5));
        let raw = simulate(&spec, 1000, &innov).unwrap();
        let y = label_with_bias(&raw, &spec.label, -1e3, &innov.uniforms).unwrap();
        assert!(y.iter().all(|&v| v == 0));
    }

    #[test]
    fn unreachable_rate_is_a_calibration_error() {
        let mut spec = ScmSpec::fig6_default();
        spec.label.positive_rate = 1e-6;
        assert!(matches!(
            generate(&spec, 2000, &SeedStreams::new(1)),
            Err(SynthError::Calibration { .. })
        ));
    }

    #[test]
    fn synergy_positives_sit_where_both_drivers_are_large() {
        let mut spec = ScmSpec::fig6_default();
        spec.label = LabelRule {
            terms: vec![term("t2m", 0.0, 1)],
            synergy: vec![SynergyTerm {
                a: "t2m".into(),
                b: "vpd".into(),
                weight: 1.5,
                lag: 1,
            }],
            positive_rate: 0.05,
        };
        let g = generate(&spec, 20_000, &SeedStreams::new(6)).unwrap();
        let (t2m, vpd) = (g.series.column(1), g.series.column(3));
        let prod: Vec<f64> = (1..20_000).map(|s| t2m[s - 1] * vpd[s - 1]).collect();
        let all = prod.iter().sum::<f64>() / prod.len() as f64;
        let pos: Vec<f64> = (1..20_000).filter(|&s| g.labels.y[s] == 1).map(|s| prod[s - 1]).collect();
        let cond = pos.iter().sum::<f64>() / pos.len() as f64;
        assert!(cond > all, "E[xy|y=1] = {cond}, E[xy] = {all}");
    }

    #[test]
    fn labels_ignore_future_noise() {
        let spec = ScmSpec::fig6_default();
        let t = 2000;
        let innov = Innovations::draw(&spec, t, &SeedStreams::new(9));
        let cut_month = 300;
        let mut perturbed = innov.clone();
        for m in spec.burn_in + cut_month..perturbed.shocks.len() {
            perturbed.shocks[m].iter_mut().for_each(|v| *v += 1.0);
        }
        for s in cut_month * spec.oci_stride..perturbed.weather.len() {
            perturbed.weather[s].iter_mut().for_each(|v| *v -= 0.7);
        }
        let a = simulate(&spec, t, &innov).unwrap();
        let b = simulate(&spec, t, &perturbed).unwrap();
        let ya = label_with_bias(&a, &spec.label, -5.0, &innov.uniforms).unwrap();
        let yb = label_with_bias(&b, &spec.label, -5.0, &innov.uniforms).unwrap();
        // Labels at s read inputs at s − 1, so every s ≤ cut is unaffected.
        let cut = cut_month * spec.oci_stride;
        assert_eq!(ya[..=cut], yb[..=cut]);
        assert_ne!(ya[cut + 1..], yb[cut + 1..]);
    }

    fn windows_fixture(t: usize, spec: WindowSpec) -> WindowSet {
        let g = generate(&ScmSpec::fig6_default(), t, &SeedStreams::new(1)).unwrap();
        make_windows(&g.series, &g.labels.y, spec).unwrap()
    }

    #[test]
    fn window_count_and_layout() {
        let spec = WindowSpec {
            local_len: 39,
            oci_len: 10,
            stride: 4,
            horizon: 2,
        };
        let w = windows_fixture(2000, spec);
        assert_eq!(w.samples.len(), 2000 - 40 - 2 + 1);
        assert_eq!(w.flat_input(0).len(), 3 * 39 + 3 * 10);
        assert_eq!(w.samples[0].t, 39);
    }

    #[test]
    fn no_window_crosses_a_split_boundary() {
        let spec = WindowSpec {
            local_len: 12,
            oci_len: 10,
            stride: 4,
            horizon: 3,
        };
        let w = windows_fixture(2000, spec);
        let (b1, b2) = w.boundaries;
        for i in 0..w.samples.len() {
            let (first, last) = w.footprint(i);
            match w.samples[i].split {
                Some(Split::Train) => assert!(last < b1),
                Some(Split::Val) => assert!(first >= b1 && last < b2),
                Some(Split::Test) => assert!(first >= b2),
                None => assert!(first < b1 && last >= b1 || first < b2 && last >= b2),
            }
        }
    }

    #[test]
    fn zero_horizon_is_rejected() {
        let g = generate(&ScmSpec::fig6_default(), 800, &SeedStreams::new(1)).unwrap();
        let spec = WindowSpec {
            local_len: 4,
            oci_len: 2,
            stride: 4,
            horizon: 0,
        };
        assert!(matches!(
            make_windows(&g.series, &g.labels.y, spec),
            Err(SynthError::Contract(_))
        ));
    }
}
