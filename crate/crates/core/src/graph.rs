//! Static adjacency matrices over the non-target variables.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::VarKind;
use crate::num::Scalar;
use crate::pcmci::CausalGraph;
use crate::tensor::tape::normalize_parts;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph has no non-target variables")]
    Empty,
    #[error("adjacency needs {expected} weights for {n} nodes, got {actual}")]
    Shape {
        n: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid weight {value} at ({row}, {col}); weights must be finite and non-negative")]
    Weight { row: usize, col: usize, value: f64 },
    #[error("variable {0:?} is not a node of this adjacency")]
    UnknownVariable(String),
    #[error("csv: {0}")]
    Csv(String),
    #[error("corr adjacency needs at least 2 feature columns, got {0}")]
    TooFewFeatures(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyKind {
    Causal,
    Corr,
    Full,
}

/// Weighted `C × C` adjacency, row = source, column = target.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix<T> {
    names: Vec<String>,
    weights: Vec<T>,
    kind: AdjacencyKind,
    normalized: bool,
}

impl<T: Scalar> AdjacencyMatrix<T> {
    pub fn new(names: Vec<String>, weights: Vec<T>, kind: AdjacencyKind) -> Result<Self, GraphError> {
        let n = names.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        if weights.len() != n * n {
            return Err(GraphError::Shape {
                n,
                expected: n * n,
                actual: weights.len(),
            });
        }
        if let Some(idx) = weights.iter().position(|w| !w.is_finite() || *w < T::zero()) {
            return Err(GraphError::Weight {
                row: idx / n,
                col: idx % n,
                value: weights[idx].to_f64_lossy(),
            });
        }
        Ok(Self {
            names,
            weights,
            kind,
            normalized: false,
        })
    }

    /// Wraps weights that were normalized earlier, e.g. read back from a checkpoint.
    pub fn from_normalized(names: Vec<String>, weights: Vec<T>, kind: AdjacencyKind) -> Result<Self, GraphError> {
        let mut a = Self::new(names, weights, kind)?;
        a.normalized = true;
        Ok(a)
    }

    /// All-ones adjacency.
    pub fn full(names: Vec<String>) -> Result<Self, GraphError> {
        let n = names.len();
        Self::new(names, vec![T::one(); n * n], AdjacencyKind::Full)
    }

    pub fn n(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.weights[i * self.n() + j]
    }

    pub fn kind(&self) -> AdjacencyKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.n();
        Tensor::new(vec![n, n], self.weights.clone()).expect("validated weights")
    }

    /// Relabels nodes to follow `order`, permuting rows and columns together.
    pub fn reorder(&self, order: &[String]) -> Result<Self, GraphError> {
        let n = self.n();
        if order.len() != n {
            return Err(GraphError::Shape {
                n,
                expected: n,
                actual: order.len(),
            });
        }
        let idx = order
            .iter()
            .map(|name| {
                self.names
                    .iter()
                    .position(|m| m == name)
                    .ok_or_else(|| GraphError::UnknownVariable(name.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut weights = Vec::with_capacity(n * n);
        for &i in &idx {
            for &j in &idx {
                weights.push(self.at(i, j));
            }
        }
        Ok(Self {
            names: order.to_vec(),
            weights,
            kind: self.kind,
            normalized: self.normalized,
        })
    }

    /// Header row of names, then one row per source node.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for name in &self.names {
            write!(out, ",{name}").unwrap();
        }
        out.push('\n');
        for (i, name) in self.names.iter().enumerate() {
            out.push_str(name);
            for j in 0..self.n() {
                write!(out, ",{}", self.at(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, kind: AdjacencyKind) -> Result<Self, GraphError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| GraphError::Csv("empty file".into()))?
            .split(',')
            .skip(1)
            .map(|s| s.trim().to_string())
            .collect();
        let mut weights = Vec::new();
        for (row, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() + 1 || header.get(row).map(String::as_str) != Some(fields[0].trim()) {
                return Err(GraphError::Csv(format!("malformed row {}", row + 1)));
            }
            for f in &fields[1..] {
                let v: f64 = f.trim().parse().map_err(|e| GraphError::Csv(format!("{e}")))?;
                weights.push(T::from_f64_lossy(v));
            }
        }
        Self::new(header, weights, kind)
    }
}

/// Names of the non-target variables of `g`, locals first then climate
/// indices, each group in graph order.
pub fn node_order(g: &CausalGraph) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for kind in [VarKind::Local, VarKind::Oci] {
        names.extend(g.variables.iter().filter(|v| v.kind == kind).map(|v| v.name.clone()));
    }
    names
}

/// Causal adjacency: `A[i][j] = max_{τ ≥ 1} |mci|` over retained links `(i, τ) → j`.
///
/// The target variable is dropped; nodes follow [`node_order`].
pub fn causal_adjacency(g: &CausalGraph) -> Result<AdjacencyMatrix<f64>, GraphError> {
    let names = node_order(g);
    let n = names.len();
    if n == 0 {
        return Err(GraphError::Empty);
    }
    let pos = |var: usize| names.iter().position(|m| *m == g.variables[var].name);
    let mut weights = vec![0.0; n * n];
    for l in g.links.iter().filter(|l| !l.is_contemporaneous()) {
        if let (Some(i), Some(j)) = (pos(l.source), pos(l.target)) {
            let w = &mut weights[i * n + j];
            *w = f64::max(*w, l.mci.abs());
        }
    }
    AdjacencyMatrix::new(names, weights, AdjacencyKind::Causal)
}

/// `|corrcoef|` of node feature rows (`features[i]` is node `i`'s feature vector).
///
/// Zero-variance rows produce a zero row and column instead of an error.
pub fn corr_adjacency<T: Scalar>(names: Vec<String>, features: &[Vec<T>]) -> Result<AdjacencyMatrix<T>, GraphError> {
    let d = features.first().map_or(0, Vec::len);
    if d < 2 {
        return Err(GraphError::TooFewFeatures(d));
    }
    let t = Tensor::from_rows(features).map_err(|e| GraphError::Csv(e.to_string()))?;
    let mut tape = Tape::new();
    let x = tape.constant(&t);
    let c = tape.abs_corrcoef(x).map_err(|e| GraphError::Csv(e.to_string()))?;
    let weights = tape.value(c).to_vec();
    AdjacencyMatrix::new(names, weights, AdjacencyKind::Corr)
}

/// `Â = D_out^{-1/2} Ã D_in^{-1/2}` where `Ã` is `A` with every diagonal entry
/// raised to at least 1, `D_out` its row sums and `D_in` its column sums.
///
/// Zero input gives the identity; an all-ones input gives a uniform `1/C`
/// matrix. Normalizing an already normalized matrix returns it unchanged.
pub fn normalize_adjacency<T: Scalar>(a: &AdjacencyMatrix<T>) -> AdjacencyMatrix<T> {
    if a.normalized {
        return a.clone();
    }
    let n = a.n();
    let (tilde, row, col, _) = normalize_parts(&a.weights, n);
    let weights = (0..n * n).map(|k| tilde[k] * row[k / n] * col[k % n]).collect();
    AdjacencyMatrix {
        names: a.names.clone(),
        weights,
        kind: a.kind,
        normalized: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Variable;
    use crate::pcmci::Link;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("v{i}")).collect()
    }

    fn graph(links: Vec<Link>) -> CausalGraph {
        CausalGraph {
            variables: vec![
                Variable::new("fire", VarKind::Target),
                Variable::new("t2m", VarKind::Local),
                Variable::new("nao", VarKind::Oci),
            ],
            tau_max: 6,
            alpha: 0.05,
            links,
        }
    }

    fn link(source: usize, lag: usize, target: usize, mci: f64) -> Link {
        Link {
            source,
            lag,
            target,
            mci,
            pvalue: 0.001,
        }
    }

    #[test]
    fn empty_graph_gives_zero_matrix() {
        let a = causal_adjacency(&graph(vec![])).unwrap();
        assert_eq!(a.names(), &["t2m".to_string(), "nao".to_string()]);
        assert!(a.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn single_link_uses_absolute_mci_and_drops_target() {
        let g = graph(vec![link(2, 1, 1, -0.6), link(1, 1, 0, 0.9), link(2, 2, 0, 0.4)]);
        let a = causal_adjacency(&g).unwrap();
        assert_eq!(a.n(), 2);
        assert_eq!(a.at(1, 0), 0.6);
        assert_eq!(a.at(0, 0) + a.at(0, 1) + a.at(1, 1), 0.0);
    }

    #[test]
    fn max_over_lags_and_self_loops() {
        let g = graph(vec![
            link(2, 1, 1, 0.2),
            link(2, 3, 1, -0.5),
            link(1, 1, 1, 0.3),
            link(2, 0, 1, 0.9),
        ]);
        let a = causal_adjacency(&g).unwrap();
        assert_eq!(a.at(1, 0), 0.5);
        assert_eq!(a.at(0, 0), 0.3);
    }

    #[test]
    fn only_target_means_empty_error() {
        let g = CausalGraph {
            variables: vec![Variable::new("fire", VarKind::Target)],
            tau_max: 1,
            alpha: 0.05,
            links: vec![],
        };
        assert_eq!(causal_adjacency(&g), Err(GraphError::Empty));
    }

    #[test]
    fn corr_cases() {
        let same = corr_adjacency(names(2), &[vec![1.0f64, 2.0, 4.0], vec![1.0, 2.0, 4.0]]).unwrap();
        assert!(same.weights().iter().all(|w| (w - 1.0).abs() < 1e-12));
        let anti = corr_adjacency(names(2), &[vec![1.0f64, 2.0, 4.0], vec![-1.0, -2.0, -4.0]]).unwrap();
        assert!((anti.at(0, 1) - 1.0).abs() < 1e-12);
        let orth = corr_adjacency(names(2), &[vec![1.0f64, -1.0, 1.0, -1.0], vec![1.0, 1.0, -1.0, -1.0]]).unwrap();
        assert!(orth.at(0, 1).abs() < 1e-12);
        assert!((orth.at(0, 0) - 1.0).abs() < 1e-12);
        let flat = corr_adjacency(names(2), &[vec![3.0, 3.0, 3.0], vec![1.0, 2.0, 0.0]]).unwrap();
        assert_eq!(flat.at(0, 0), 0.0);
        assert_eq!(flat.at(0, 1), 0.0);
        assert_eq!(flat.at(1, 1), 1.0);
    }

    #[test]
    fn normalization_reference_cases() {
        let z = AdjacencyMatrix::<f64>::new(names(3), vec![0.0; 9], AdjacencyKind::Causal).unwrap();
        let nz = normalize_adjacency(&z);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(nz.at(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        let ones = AdjacencyMatrix::<f64>::full(names(2)).unwrap();
        let n1 = normalize_adjacency(&ones);
        assert!(n1.is_normalized());
        assert!(n1.weights().iter().all(|&w| (w - 0.5).abs() < 1e-15));
        assert_eq!(normalize_adjacency(&n1), n1);
    }

    #[test]
    fn csv_roundtrip() {
        let a = AdjacencyMatrix::new(names(2), vec![0.0, 0.25, 1.5, 0.125], AdjacencyKind::Causal).unwrap();
        let back = AdjacencyMatrix::<f64>::from_csv(&a.to_csv(), AdjacencyKind::Causal).unwrap();
        assert_eq!(a, back);
        assert!(a.to_csv().starts_with("source,v0,v1\n"));
    }

    fn spectral_norm(a: &[f64], n: usize) -> f64 {
        // Power iteration on AᵀA.
        let mut v = vec![1.0; n];
        let mut lambda = 0.0;
        for _ in 0..500 {
            let av: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum()).collect();
            let w: Vec<f64> = (0..n).map(|j| (0..n).map(|i| a[i * n + j] * av[i]).sum()).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        lambda.sqrt()
    }

    proptest! {
        #[test]
        fn normalized_spectrum_and_symmetry(w in prop::collection::vec(0.0f64..3.0, 16), sym in any::<bool>()) {
            let mut w = w;
            if sym {
                for i in 0..4 { for j in 0..i { w[j * 4 + i] = w[i * 4 + j]; } }
            }
            let a = AdjacencyMatrix::new(names(4), w.clone(), AdjacencyKind::Causal).unwrap();
            let nz = normalize_adjacency(&a);
            prop_assert!(spectral_norm(nz.weights(), 4) <= 1.0 + 1e-9);
            let is_sym = (0..4).all(|i| (0..4).all(|j| (nz.at(i, j) - nz.at(j, i)).abs() < 1e-12));
            let in_sym = (0..4).all(|i| (0..4).all(|j| w[i * 4 + j] == w[j * 4 + i]));
            prop_assert_eq!(is_sym, in_sym);
            for i in 0..4 {
                for j in 0..4 {
                    if i != j && w[i * 4 + j] == 0.0 {
                        prop_assert_eq!(nz.at(i, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn causal_adjacency_is_permutation_equivariant(
            mcis in prop::collection::vec(-1.0f64..1.0, 6),
            perm in Just(vec![2usize, 0, 1]).prop_shuffle(),
        ) {
            let vars = vec![
                Variable::new("a", VarKind::Local),
                Variable::new("b", VarKind::Local),
                Variable::new("c", VarKind::Local),
                Variable::new("y", VarKind::Target),
            ];
            let pairs = [(0, 1), (1, 2), (2, 0), (0, 0), (1, 0), (2, 1)];
            let links: Vec<Link> = pairs.iter().zip(&mcis).map(|(&(i, j), &m)| link(i, 1, j, m)).collect();
            let g = CausalGraph { variables: vars.clone(), tau_max: 2, alpha: 0.05, links: links.clone() };
            let pv: Vec<Variable> = perm.iter().map(|&p| vars[p].clone()).chain([vars[3].clone()]).collect();
            let inv = |old: usize| if old == 3 { 3 } else { perm.iter().position(|&p| p == old).unwrap() };
            let plinks = links.iter().map(|l| link(inv(l.source), 1, inv(l.target), l.mci)).collect();
            let pg = CausalGraph { variables: pv, tau_max: 2, alpha: 0.05, links: plinks };
            let a = causal_adjacency(&g).unwrap();
            let b = causal_adjacency(&pg).unwrap().reorder(a.names()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
