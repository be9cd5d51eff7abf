//! Lagged causal discovery with PCMCI.
//!
//! Discovery runs on a coarse, deseasonalized view of the data (see
//! [`preprocess_causal_stationarity`]). For every variable the PC1 phase
//! prunes lagged parent candidates with iteratively larger conditioning sets;
//! the MCI phase then tests each allowed link conditioned on the parents of
//! both endpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{MultiSeries, VarKind, Variable};
use crate::stats::{parcorr_test, CiTestResult, StatsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PcmciError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("graph file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, PcmciError>;

/// Preprocessed, centered coarse-scale series ready for discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    series: MultiSeries,
}

const CENTER_TOL: f64 = 1e-9;

impl TimeSeriesDataset {
    /// Wraps already-centered data; columns whose mean exceeds `1e-9` are rejected.
    pub fn new(series: MultiSeries) -> Result<Self> {
        for (i, col) in series.columns().iter().enumerate() {
            let mean = col.iter().sum::<f64>() / col.len().max(1) as f64;
            if mean.abs() >= CENTER_TOL {
                return Err(PcmciError::Dataset(format!(
                    "column {i} ({}) has mean {mean:e}; center it first",
                    series.variables()[i].name
                )));
            }
        }
        Ok(Self { series })
    }

    /// Subtracts each column's mean and wraps the result.
    pub fn centered(variables: Vec<Variable>, columns: Vec<Vec<f64>>) -> Result<Self> {
        let columns = columns.into_iter().map(center).collect();
        let series =
            MultiSeries::new(variables, columns).map_err(|e| PcmciError::Dataset(e.to_string()))?;
        Self::new(series)
    }

    pub fn len(&self) -> usize {
        self.series.len()
    }

    pub fn is_empty(&self) -> bool {
        self.series.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.series.n_vars()
    }

    pub fn variables(&self) -> &[Variable] {
        self.series.variables()
    }

    pub fn kinds(&self) -> Vec<VarKind> {
        self.series.variables().iter().map(|v| v.kind).collect()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        self.series.column(i)
    }

    pub fn series(&self) -> &MultiSeries {
        &self.series
    }
}

fn center(mut col: Vec<f64>) -> Vec<f64> {
    let n = col.len().max(1) as f64;
    let mean = col.iter().sum::<f64>() / n;
    col.iter_mut().for_each(|v| *v -= mean);
    // A second pass removes the rounding left by the first.
    let mean = col.iter().sum::<f64>() / n;
    col.iter_mut().for_each(|v| *v -= mean);
    col
}

/// Block-mean resampling, removal of the per-phase climatology and centering.
///
/// `block` fine steps form one coarse step (an incomplete trailing block is
/// dropped); `period` is the seasonal cycle length in coarse steps.
pub fn preprocess_causal_stationarity(
    raw: &MultiSeries,
    block: usize,
    period: usize,
) -> Result<TimeSeriesDataset> {
    if block == 0 || period == 0 {
        return Err(PcmciError::Config("block and period must be positive".into()));
    }
    let coarse = raw.len() / block;
    if coarse < 2 * period {
        return Err(PcmciError::InsufficientData(format!(
            "{} raw steps give {coarse} coarse steps; need at least {}",
            raw.len(),
            2 * period
        )));
    }
    let columns = raw
        .columns()
        .iter()
        .map(|col| {
            let mut m: Vec<f64> = (0..coarse)
                .map(|b| col[b * block..(b + 1) * block].iter().sum::<f64>() / block as f64)
                .collect();
            let mut sums = vec![0.0; period];
            let mut counts = vec![0usize; period];
            for (t, v) in m.iter().enumerate() {
                sums[t % period] += v;
                counts[t % period] += 1;
            }
            for (t, v) in m.iter_mut().enumerate() {
                *v -= sums[t % period] / counts[t % period] as f64;
            }
            center(m)
        })
        .collect();
    TimeSeriesDataset::centered(raw.variables().to_vec(), columns)
}

/// A lagged candidate `X^var_{t-lag}`.
pub type Lagged = (usize, usize);

/// A-priori constraints on the links discovery may consider.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkAssumptions {
    n_vars: usize,
    tau_max: usize,
    allowed: BTreeSet<(usize, usize, usize)>,
}

impl LinkAssumptions {
    /// No links at all.
    pub fn empty(n_vars: usize, tau_max: usize) -> Self {
        Self {
            n_vars,
            tau_max,
            allowed: BTreeSet::new(),
        }
    }

    /// Every link `(i, τ) → j` with `τ ≤ tau_max`, except contemporaneous self-links.
    pub fn complete(n_vars: usize, tau_max: usize, contemporaneous: bool) -> Self {
        let mut a = Self::empty(n_vars, tau_max);
        for j in 0..n_vars {
            for i in 0..n_vars {
                for tau in 0..=tau_max {
                    if tau == 0 && (i == j || !contemporaneous) {
                        continue;
                    }
                    a.allowed.insert((i, tau, j));
                }
            }
        }
        a
    }

    /// Mediator ordering: climate indices drive each other, local weather and
    /// the target; local weather drives local weather and the target; the
    /// target drives nothing.
    pub fn mediator(kinds: &[VarKind], tau_max: usize, contemporaneous: bool) -> Self {
        let mut a = Self::complete(kinds.len(), tau_max, contemporaneous);
        a.allowed.retain(|&(i, _, j)| {
            matches!(
                (kinds[i], kinds[j]),
                (VarKind::Oci, _) | (VarKind::Local, VarKind::Local) | (VarKind::Local, VarKind::Target)
            )
        });
        a
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn tau_max(&self) -> usize {
        self.tau_max
    }

    pub fn allows(&self, source: usize, lag: usize, target: usize) -> bool {
        self.allowed.contains(&(source, lag, target))
    }

    pub fn allow(&mut self, source: usize, lag: usize, target: usize) -> Result<()> {
        if source >= self.n_vars || target >= self.n_vars || lag > self.tau_max {
            return Err(PcmciError::Config(format!(
                "link ({source}, -{lag}) -> {target} outside {} variables / tau_max {}",
                self.n_vars, self.tau_max
            )));
        }
        if lag == 0 && source == target {
            return Err(PcmciError::Config("contemporaneous self-link".into()));
        }
        self.allowed.insert((source, lag, target));
        Ok(())
    }

    /// Removes every link into `target`.
    pub fn forbid_into(&mut self, target: usize) {
        self.allowed.retain(|&(_, _, j)| j != target);
    }

    /// Allowed `(source, lag)` pairs into `target` with `lag ≥ min_lag`, in
    /// (variable, lag) order.
    pub fn candidates_into(&self, target: usize, min_lag: usize) -> Vec<Lagged> {
        self.allowed
            .iter()
            .filter(|&&(_, lag, j)| j == target && lag >= min_lag)
            .map(|&(i, lag, _)| (i, lag))
            .collect()
    }

    pub fn links(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.allowed.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }
}

/// Multiple-testing control applied when thresholding MCI p-values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FdrControl {
    /// Plain `p ≤ α`.
    #[default]
    None,
    /// Benjamini-Hochberg over all tested links, at level `α`.
    BenjaminiHochberg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PcmciConfig {
    pub tau_max: usize,
    pub alpha: f64,
    pub alpha_pc: f64,
    pub p_max: usize,
    pub p_x: usize,
    pub contemporaneous: bool,
    pub fdr: FdrControl,
}

impl Default for PcmciConfig {
    fn default() -> Self {
        Self {
            tau_max: 6,
            alpha: 0.05,
            alpha_pc: 0.2,
            p_max: 10,
            p_x: 10,
            contemporaneous: true,
            fdr: FdrControl::None,
        }
    }
}

impl PcmciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_max == 0 {
            return Err(PcmciError::Config("tau_max must be at least 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(PcmciError::Config(format!("alpha {} outside (0, 1]", self.alpha)));
        }
        if !(self.alpha_pc > 0.0 && self.alpha_pc < 1.0) {
            return Err(PcmciError::Config(format!(
                "alpha_pc {} outside (0, 1)",
                self.alpha_pc
            )));
        }
        Ok(())
    }
}

/// Shared row alignment: every regression uses rows `t ∈ [start, T)`.
///
/// `start = 2·tau_max` so that source parents shifted by the link lag stay
/// inside the series.
fn sample_start(tau_max: usize) -> usize {
    2 * tau_max
}

struct Aligned<'a> {
    data: &'a TimeSeriesDataset,
    start: usize,
}

impl<'a> Aligned<'a> {
    fn new(data: &'a TimeSeriesDataset, tau_max: usize, max_conds: usize) -> Result<Self> {
        let start = sample_start(tau_max);
        let n = data.len().saturating_sub(start);
        if n < max_conds + 4 {
            return Err(PcmciError::InsufficientData(format!(
                "{} coarse steps leave {n} aligned samples, need at least {}",
                data.len(),
                max_conds + 4
            )));
        }
        Ok(Self { data, start })
    }

    fn lagged(&self, (var, lag): Lagged) -> &'a [f64] {
        let col = self.data.column(var);
        &col[self.start - lag..col.len() - lag]
    }

    fn test(&self, x: Lagged, y: Lagged, z: &[Lagged]) -> Result<CiTestResult<f64>> {
        let zs: Vec<&[f64]> = z.iter().map(|&l| self.lagged(l)).collect();
        match parcorr_test(self.lagged(x), self.lagged(y), &zs) {
            Ok(r) => Ok(r),
            Err(StatsError::DegenerateSeries(_)) => {
                log::debug!("degenerate CI test {x:?} vs {y:?} | {z:?}; treating as independent");
                Ok(CiTestResult {
                    statistic: 0.0,
                    pvalue: 1.0,
                    dof: self.data.len() - self.start - 2,
                })
            }
            Err(e) => Err(e.into()),
        }
    }
}

/// Surviving parents of one variable, strongest first, with the minimum
/// absolute test statistic seen during selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParentSet {
    pub parents: Vec<Lagged>,
    pub strength: Vec<f64>,
}

fn sort_by_strength(cands: &mut [Lagged], strength: &BTreeMap<Lagged, f64>) {
    cands.sort_by(|a, b| {
        strength[b]
            .partial_cmp(&strength[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
}

/// PC1 condition selection for variable `j` over its lagged (`τ ≥ 1`) candidates.
pub fn pc1_select_parents(
    data: &TimeSeriesDataset,
    j: usize,
    assumptions: &LinkAssumptions,
    tau_max: usize,
    alpha_pc: f64,
    p_max: usize,
) -> Result<ParentSet> {
    if tau_max == 0 {
        return Err(PcmciError::Config("tau_max must be at least 1".into()));
    }
    if !(alpha_pc > 0.0 && alpha_pc < 1.0) {
        return Err(PcmciError::Config(format!("alpha_pc {alpha_pc} outside (0, 1)")));
    }
    let mut parents: Vec<Lagged> = assumptions
        .candidates_into(j, 1)
        .into_iter()
        .filter(|&(_, lag)| lag <= tau_max)
        .collect();
    if parents.is_empty() {
        return Ok(ParentSet {
            parents,
            strength: Vec::new(),
        });
    }
    let aligned = Aligned::new(data, tau_max, parents.len().min(p_max))?;
    let mut strength: BTreeMap<Lagged, f64> = parents.iter().map(|&p| (p, f64::INFINITY)).collect();
    let target = (j, 0);
    for q in 0..=p_max {
        if q + 1 > parents.len() {
            break;
        }
        let mut keep = Vec::with_capacity(parents.len());
        for &cand in &parents {
            let conds: Vec<Lagged> = parents.iter().copied().filter(|&p| p != cand).take(q).collect();
            let res = aligned.test(cand, target, &conds)?;
            let s = strength.get_mut(&cand).expect("tracked");
            *s = s.min(res.statistic.abs());
            if res.pvalue <= alpha_pc {
                keep.push(cand);
            }
        }
        parents = keep;
        sort_by_strength(&mut parents, &strength);
    }
    let strength = parents.iter().map(|p| strength[p]).collect();
    Ok(ParentSet { parents, strength })
}

/// MCI test of `(source, lag) → target`.
///
/// Conditions on `parents_target` without the tested link, plus the first
/// `p_x` entries of `parents_source` shifted back by `lag`.
pub fn mci_test(
    data: &TimeSeriesDataset,
    link: (usize, usize, usize),
    parents_target: &[Lagged],
    parents_source: &[Lagged],
    p_x: usize,
    tau_max: usize,
) -> Result<CiTestResult<f64>> {
    let (i, tau, j) = link;
    if tau > tau_max || i >= data.n_vars() || j >= data.n_vars() {
        return Err(PcmciError::Config(format!("link ({i}, -{tau}) -> {j} out of range")));
    }
    let mut conds: Vec<Lagged> = parents_target.iter().copied().filter(|&p| p != (i, tau)).collect();
    for &(k, lag) in parents_source.iter().take(p_x) {
        let shifted = (k, lag + tau);
        if shifted.1 > 2 * tau_max {
            continue;
        }
        if shifted != (i, tau) && shifted != (j, 0) && !conds.contains(&shifted) {
            conds.push(shifted);
        }
    }
    let aligned = Aligned::new(data, tau_max, conds.len())?;
    aligned.test((i, tau), (j, 0), &conds)
}

/// One MCI test outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkTest {
    pub source: usize,
    pub lag: usize,
    pub target: usize,
    pub mci: f64,
    pub pvalue: f64,
}

/// Runs MCI for every allowed link given PC1 parents of all variables.
pub fn run_mci(
    data: &TimeSeriesDataset,
    assumptions: &LinkAssumptions,
    parents: &[ParentSet],
    cfg: &PcmciConfig,
) -> Result<Vec<LinkTest>> {
    let mut out = Vec::with_capacity(assumptions.len());
    for (i, tau, j) in assumptions.links() {
        if tau > cfg.tau_max {
            continue;
        }
        let r = mci_test(
            data,
            (i, tau, j),
            &parents[j].parents,
            &parents[i].parents,
            cfg.p_x,
            cfg.tau_max,
        )?;
        out.push(LinkTest {
            source: i,
            lag: tau,
            target: j,
            mci: r.statistic,
            pvalue: r.pvalue,
        });
    }
    Ok(out)
}

/// Keeps links whose (optionally FDR-adjusted) p-value is at most `alpha`.
pub fn threshold(
    variables: &[Variable],
    tests: &[LinkTest],
    tau_max: usize,
    alpha: f64,
    fdr: FdrControl,
) -> CausalGraph {
    let keep: Vec<bool> = match fdr {
        FdrControl::None => tests.iter().map(|t| t.pvalue <= alpha).collect(),
        FdrControl::BenjaminiHochberg => {
            let adj = benjamini_hochberg(&tests.iter().map(|t| t.pvalue).collect::<Vec<_>>());
            adj.iter().map(|&q| q <= alpha).collect()
        }
    };
    let links = tests
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(t, _)| Link {
            source: t.source,
            lag: t.lag,
            target: t.target,
            mci: t.mci,
            pvalue: t.pvalue,
        })
        .collect();
    CausalGraph {
        variables: variables.to_vec(),
        tau_max,
        alpha,
        links,
    }
}

/// Benjamini-Hochberg adjusted p-values.
pub fn benjamini_hochberg(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &idx) in order.iter().enumerate().rev() {
        running = running.min(p[idx] * m as f64 / (rank + 1) as f64);
        adj[idx] = running.min(1.0);
    }
    adj
}

/// Full discovery output.
#[derive(Debug, Clone, PartialEq)]
pub struct PcmciResult {
    pub graph: CausalGraph,
    pub parents: Vec<ParentSet>,
    pub tests: Vec<LinkTest>,
}

/// PC1 for every variable, MCI for every allowed link, then thresholding.
pub fn run_pcmci(
    data: &TimeSeriesDataset,
    assumptions: &LinkAssumptions,
    cfg: &PcmciConfig,
) -> Result<PcmciResult> {
    cfg.validate()?;
    if assumptions.n_vars() != data.n_vars() {
        return Err(PcmciError::Config(format!(
            "assumptions cover {} variables, dataset has {}",
            assumptions.n_vars(),
            data.n_vars()
        )));
    }
    let parents = (0..data.n_vars())
        .map(|j| pc1_select_parents(data, j, assumptions, cfg.tau_max, cfg.alpha_pc, cfg.p_max))
        .collect::<Result<Vec<_>>>()?;
    let tests = run_mci(data, assumptions, &parents, cfg)?;
    let graph = threshold(data.variables(), &tests, cfg.tau_max, cfg.alpha, cfg.fdr);
    Ok(PcmciResult {
        graph,
        parents,
        tests,
    })
}

/// Directed lagged link `X^source_{t-lag} → X^target_t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub source: usize,
    pub lag: usize,
    pub target: usize,
    pub mci: f64,
    pub pvalue: f64,
}

impl Link {
    /// Lag-0 links are kept for diagnostics only; their direction is not identified.
    pub fn is_contemporaneous(&self) -> bool {
        self.lag == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    pub variables: Vec<Variable>,
    pub tau_max: usize,
    pub alpha: f64,
    pub links: Vec<Link>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    variables: Vec<String>,
    #[serde(default)]
    kinds: Vec<VarKind>,
    tau_max: usize,
    alpha: f64,
    links: Vec<LinkFile>,
}

#[derive(Serialize, Deserialize)]
struct LinkFile {
    source: String,
    lag: usize,
    target: String,
    mci: f64,
    pvalue: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    contemporaneous: bool,
}

impl CausalGraph {
    pub fn n_vars(&self) -> usize {
        self.variables.len()
    }

    pub fn has_link(&self, source: usize, lag: usize, target: usize) -> bool {
        self.links
            .iter()
            .any(|l| l.source == source && l.lag == lag && l.target == target)
    }

    /// `(source, lag, target)` triples.
    pub fn edge_set(&self) -> BTreeSet<(usize, usize, usize)> {
        self.links.iter().map(|l| (l.source, l.lag, l.target)).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            variables: self.variables.iter().map(|v| v.name.clone()).collect(),
            kinds: self.variables.iter().map(|v| v.kind).collect(),
            tau_max: self.tau_max,
            alpha: self.alpha,
            links: self
                .links
                .iter()
                .map(|l| LinkFile {
                    source: self.variables[l.source].name.clone(),
                    lag: l.lag,
                    target: self.variables[l.target].name.clone(),
                    mci: l.mci,
                    pvalue: l.pvalue,
                    contemporaneous: l.is_contemporaneous(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| PcmciError::Format(e.to_string()))?;
        if !file.kinds.is_empty() && file.kinds.len() != file.variables.len() {
            return Err(PcmciError::Format("kinds and variables differ in length".into()));
        }
        let variables: Vec<Variable> = file
            .variables
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let kind = file.kinds.get(i).copied().unwrap_or(VarKind::Local);
                Variable::new(name.clone(), kind)
            })
            .collect();
        let find = |name: &str| {
            file.variables
                .iter()
                .position(|v| v == name)
                .ok_or_else(|| PcmciError::Format(format!("unknown variable {name:?} in link")))
        };
        let mut links = Vec::with_capacity(file.links.len());
        for l in &file.links {
            if !(l.mci.abs() <= 1.0) || !(0.0..=1.0).contains(&l.pvalue) {
                return Err(PcmciError::Format(format!(
                    "link {} -> {} has mci {} / pvalue {}",
                    l.source, l.target, l.mci, l.pvalue
                )));
            }
            links.push(Link {
                source: find(&l.source)?,
                lag: l.lag,
                target: find(&l.target)?,
                mci: l.mci,
                pvalue: l.pvalue,
            });
        }
        Ok(Self {
            variables,
            tau_max: file.tau_max,
            alpha: file.alpha,
            links,
        })
    }

    /// Graphviz rendering; contemporaneous links are drawn undirected and dashed.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph causal {\n  rankdir=LR;\n");
        for v in &self.variables {
            let shape = match v.kind {
                VarKind::Target => "doublecircle",
                VarKind::Local => "ellipse",
                VarKind::Oci => "box",
            };
            writeln!(out, "  \"{}\" [shape={shape}];", v.name).unwrap();
        }
        for l in &self.links {
            let style = if l.is_contemporaneous() {
                ", dir=none, style=dashed"
            } else {
                ""
            };
            writeln!(
                out,
                "  \"{}\" -> \"{}\" [label=\"lag {} / {:.3}\"{style}];",
                self.variables[l.source].name, self.variables[l.target].name, l.lag, l.mci
            )
            .unwrap();
        }
        out.push_str("}\n");
        out
    }

    /// Fixed-width link table for terminal output.
    pub fn link_table(&self) -> String {
        let mut out = format!("{:<10} {:>4} {:<10} {:>8} {:>10}\n", "source", "lag", "target", "mci", "pvalue");
        for l in &self.links {
            writeln!(
                out,
                "{:<10} {:>4} {:<10} {:>8.4} {:>10.3e}",
                self.variables[l.source].name, l.lag, self.variables[l.target].name, l.mci, l.pvalue
            )
            .unwrap();
        }
        out
    }
}

/// Edge precision and recall of `found` against `truth`.
///
/// Both are 1 when the respective denominator is empty.
pub fn precision_recall(
    found: &BTreeSet<(usize, usize, usize)>,
    truth: &BTreeSet<(usize, usize, usize)>,
) -> (f64, f64) {
    let tp = found.intersection(truth).count() as f64;
    let precision = if found.is_empty() { 1.0 } else { tp / found.len() as f64 };
    let recall = if truth.is_empty() { 1.0 } else { tp / truth.len() as f64 };
    (precision, recall)
}
