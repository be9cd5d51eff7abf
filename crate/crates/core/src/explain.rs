//! Shapley attributions over groups of input coordinates.
//!
//! A coalition's value is the model's positive-class confidence on an input
//! whose coordinates outside the coalition are replaced by the background
//! mean. [`exact_shapley`] enumerates every coalition; [`shapley_estimate`]
//! averages marginal contributions over random permutations.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Batch, Model, ModelError, ModelKind};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("exact enumeration over {0} groups exceeds the limit of {MAX_EXACT_GROUPS}")]
    TooManyGroups(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, ExplainError>;

pub const MAX_EXACT_GROUPS: usize = 12;

/// Anything that maps flat inputs to a scalar.
pub trait ValueFunction {
    fn n_inputs(&self) -> usize;

    /// Values of several inputs; implementations may batch.
    fn evaluate(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Wraps a plain closure.
pub struct FnValue<F> {
    pub n_inputs: usize,
    pub f: F,
}

impl<F: Fn(&[f64]) -> f64> ValueFunction for FnValue<F> {
    fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn evaluate(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(inputs.iter().map(|x| (self.f)(x)).collect())
    }
}

/// Positive-class confidence of a trained model on a flat input.
///
/// `gnn_corr` derives its adjacency from the batch, so each input is scored
/// alone; the other kinds are batch-independent and scored in chunks.
pub struct ModelValue<'a> {
    pub model: &'a Model<f64>,
}

impl ValueFunction for ModelValue<'_> {
    fn n_inputs(&self) -> usize {
        let c = &self.model.config;
        c.n_local * c.local_len + c.n_oci * c.oci_len
    }

    fn evaluate(&self, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
        let chunk = if self.model.kind == ModelKind::GnnCorr { 1 } else { 256 };
        let mut out = Vec::with_capacity(inputs.len());
        for part in inputs.chunks(chunk) {
            let batch = Batch::from_flat(part, vec![0; part.len()], &self.model.config)?;
            out.extend(self.model.confidence(&batch)?);
        }
        Ok(out)
    }
}

/// A named set of input coordinates that is switched on or off together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGroup {
    pub variable: String,
    /// Block lag for climate-index groups (1 = most recent); `None` for a whole local window.
    pub lag: Option<usize>,
    pub coords: Vec<usize>,
}

impl FeatureGroup {
    pub fn label(&self) -> String {
        match self.lag {
            Some(l) => format!("{}@lag{l}", self.variable),
            None => self.variable.clone(),
        }
    }
}

/// One group per local window and one per (index, block lag), matching the
/// layout of [`crate::synth::WindowSet::flat_input`].
pub fn default_groups(local_names: &[String], oci_names: &[String], local_len: usize, oci_len: usize) -> Vec<FeatureGroup> {
    let mut groups: Vec<FeatureGroup> = local_names
        .iter()
        .enumerate()
        .map(|(i, name)| FeatureGroup {
            variable: name.clone(),
            lag: None,
            coords: (i * local_len..(i + 1) * local_len).collect(),
        })
        .collect();
    let offset = local_names.len() * local_len;
    for (i, name) in oci_names.iter().enumerate() {
        for lag in 1..=oci_len {
            // Blocks are stored oldest first.
            groups.push(FeatureGroup {
                variable: name.clone(),
                lag: Some(lag),
                coords: vec![offset + i * oci_len + (oci_len - lag)],
            });
        }
    }
    groups
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub groups: Vec<FeatureGroup>,
    pub values: Vec<f64>,
    /// Value of the all-masked input (the background mean).
    pub baseline: f64,
    /// Value of the unmasked input.
    pub prediction: f64,
}

fn check_inputs(
    n_inputs: usize,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[FeatureGroup],
) -> Result<Vec<f64>> {
    let bad = |m: String| Err(ExplainError::Contract(m));
    if x.len() != n_inputs {
        return bad(format!("sample has {} inputs, value function expects {n_inputs}", x.len()));
    }
    if background.is_empty() {
        return bad("background set is empty".into());
    }
    if let Some(b) = background.iter().find(|b| b.len() != n_inputs) {
        return bad(format!("background row has {} inputs, expected {n_inputs}", b.len()));
    }
    if groups.is_empty() {
        return bad("no feature groups".into());
    }
    let mut seen = BTreeSet::new();
    for g in groups {
        if g.coords.is_empty() {
            return bad(format!("feature group {} is empty", g.label()));
        }
        for &k in &g.coords {
            if k >= n_inputs || !seen.insert(k) {
                return bad(format!("coordinate {k} of group {} is out of range or repeated", g.label()));
            }
        }
    }
    if seen.len() != n_inputs {
        return bad(format!("groups cover {} of {n_inputs} coordinates", seen.len()));
    }
    let n = background.len() as f64;
    Ok((0..n_inputs).map(|k| background.iter().map(|b| b[k]).sum::<f64>() / n).collect())
}

fn with_groups(x: &[f64], mean: &[f64], groups: &[FeatureGroup], on: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut z = mean.to_vec();
    for (gi, g) in groups.iter().enumerate() {
        if on(gi) {
            for &k in &g.coords {
                z[k] = x[k];
            }
        }
    }
    z
}

/// Exact Shapley values by enumerating all `2^k` coalitions.
pub fn exact_shapley(
    f: &dyn ValueFunction,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[FeatureGroup],
) -> Result<Attribution> {
    let k = groups.len();
    if k > MAX_EXACT_GROUPS {
        return Err(ExplainError::TooManyGroups(k));
    }
    let mean = check_inputs(f.n_inputs(), x, background, groups)?;
    let inputs: Vec<Vec<f64>> = (0..1usize << k)
        .map(|mask| with_groups(x, &mean, groups, |g| mask >> g & 1 == 1))
        .collect();
    let v = f.evaluate(&inputs)?;
    // weight[s] = s! (k − s − 1)! / k!
    let mut fact = vec![1.0f64; k + 1];
    for i in 1..=k {
        fact[i] = fact[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..k).map(|s| fact[s] * fact[k - s - 1] / fact[k]).collect();
    let mut values = vec![0.0; k];
    for mask in 0..1usize << k {
        let size = mask.count_ones() as usize;
        for (i, value) in values.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *value += weight[size] * (v[mask | 1 << i] - v[mask]);
            }
        }
    }
    Ok(Attribution {
        groups: groups.to_vec(),
        values,
        baseline: v[0],
        prediction: v[(1 << k) - 1],
    })
}

/// Permutation-sampling Shapley estimate.
///
/// Each permutation switches groups on one at a time, starting from the
/// background mean; a group's value is its average marginal contribution.
pub fn shapley_estimate(
    f: &dyn ValueFunction,
    x: &[f64],
    background: &[Vec<f64>],
    groups: &[FeatureGroup],
    n_permutations: usize,
    rng: &mut Rng,
) -> Result<Attribution> {
    if n_permutations == 0 {
        return Err(ExplainError::Contract("n_permutations must be at least 1".into()));
    }
    let mean = check_inputs(f.n_inputs(), x, background, groups)?;
    let k = groups.len();
    let ends = f.evaluate(&[mean.clone(), x.to_vec()])?;
    let mut values = vec![0.0; k];
    let mut order: Vec<usize> = (0..k).collect();
    for _ in 0..n_permutations {
        order.shuffle(rng);
        let mut z = mean.clone();
        let mut path = Vec::with_capacity(k - 1);
        for &g in &order[..k - 1] {
            for &c in &groups[g].coords {
                z[c] = x[c];
            }
            path.push(z.clone());
        }
        let mut v = Vec::with_capacity(k + 1);
        v.push(ends[0]);
        v.extend(f.evaluate(&path)?);
        v.push(ends[1]);
        for (step, &g) in order.iter().enumerate() {
            values[g] += v[step + 1] - v[step];
        }
    }
    let n = n_permutations as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(Attribution {
        groups: groups.to_vec(),
        values,
        baseline: ends[0],
        prediction: ends[1],
    })
}

/// Mean absolute attribution per (index, lag) cell and per local window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagMatrix {
    pub oci_names: Vec<String>,
    pub n_lags: usize,
    /// `values[i][l − 1]` for index `i` at lag `l`.
    pub values: Vec<Vec<f64>>,
    pub locals: Vec<(String, f64)>,
}

impl LagMatrix {
    /// Min-max scales each index row to `[0, 1]`. Constant non-zero rows map to 1.
    pub fn scaled(&self) -> LagMatrix {
        let values = self
            .values
            .iter()
            .map(|row| {
                let lo = row.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter()
                    .map(|&v| match () {
                        _ if hi > lo => (v - lo) / (hi - lo),
                        _ if hi > 0.0 => 1.0,
                        _ => 0.0,
                    })
                    .collect()
            })
            .collect();
        LagMatrix {
            values,
            ..self.clone()
        }
    }

    /// `(index, lag)` of the largest cell; ties go to the first in row-major order.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (i, row) in self.values.iter().enumerate() {
            for (l, &v) in row.iter().enumerate() {
                if best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((i, l + 1, v));
                }
            }
        }
        best.map(|(i, l, _)| (i, l))
    }

    /// `variable,kind,window,lag_1..lag_L`; local rows fill `window`, index rows the lags.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable,kind,window");
        for l in 1..=self.n_lags {
            out.push_str(&format!(",lag_{l}"));
        }
        out.push('\n');
        for (name, v) in &self.locals {
            out.push_str(&format!("{name},local,{v}{}\n", ",".repeat(self.n_lags)));
        }
        for (name, row) in self.oci_names.iter().zip(&self.values) {
            out.push_str(&format!("{name},oci,"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Averages `|value|` over samples for each group.
pub fn aggregate_abs_by_lag(attributions: &[Attribution]) -> Result<LagMatrix> {
    let first = attributions
        .first()
        .ok_or_else(|| ExplainError::Contract("no attributions to aggregate".into()))?;
    if attributions.iter().any(|a| a.groups != first.groups) {
        return Err(ExplainError::Contract("attributions use different feature groups".into()));
    }
    let n = attributions.len() as f64;
    let mean_abs: Vec<f64> = (0..first.groups.len())
        .map(|g| attributions.iter().map(|a| a.values[g].abs()).sum::<f64>() / n)
        .collect();
    let mut oci_names: Vec<String> = Vec::new();
    let mut locals = Vec::new();
    let mut n_lags = 0;
    for (g, group) in first.groups.iter().enumerate() {
        match group.lag {
            None => locals.push((group.variable.clone(), mean_abs[g])),
            Some(l) => {
                if !oci_names.contains(&group.variable) {
                    oci_names.push(group.variable.clone());
                }
                n_lags = n_lags.max(l);
            }
        }
    }
    let mut values = vec![vec![0.0; n_lags]; oci_names.len()];
    for (g, group) in first.groups.iter().enumerate() {
        if let Some(l) = group.lag {
            let i = oci_names.iter().position(|n| *n == group.variable).expect("collected above");
            values[i][l - 1] = mean_abs[g];
        }
    }
    Ok(LagMatrix {
        oci_names,
        n_lags,
        values,
        locals,
    })
}

/// Rows are groups, columns are samples (named by `sample_ids`).
pub fn attributions_csv(attributions: &[Attribution], sample_ids: &[String]) -> Result<String> {
    let Some(first) = attributions.first() else {
        return Ok("feature\n".to_string());
    };
    if sample_ids.len() != attributions.len() {
        return Err(ExplainError::Contract("one sample id per attribution is required".into()));
    }
    let mut out = String::from("feature");
    for id in sample_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    let mut row = |label: &str, get: &dyn Fn(&Attribution) -> f64| {
        out.push_str(label);
        for a in attributions {
            out.push_str(&format!(",{}", get(a)));
        }
        out.push('\n');
    };
    for (g, group) in first.groups.iter().enumerate() {
        row(&group.label(), &|a: &Attribution| a.values[g]);
    }
    row("baseline", &|a: &Attribution| a.baseline);
    row("prediction", &|a: &Attribution| a.prediction);
    Ok(out)
}
