//! Temporal encoders, graph convolution and the classifiers built from them.
//!
//! Every input variable is a node. A recurrent encoder shared by all
//! variables turns each node's lag window into a `hidden_dim` feature
//! vector. Graph models mix node features with two convolution layers
//! `LeakyReLU(LayerNorm(Âᵀ H W))`, average the nodes and classify; the
//! recurrent baselines average the encodings directly.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{normalize_adjacency, AdjacencyKind, AdjacencyMatrix, GraphError};
use crate::num::{c, Scalar};
use crate::rng::Rng;
use crate::synth::WindowSet;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lstm,
    Gru,
    GnnCorr,
    GnnFull,
    GnnCausal,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::Lstm,
        ModelKind::Gru,
        ModelKind::GnnCorr,
        ModelKind::GnnFull,
        ModelKind::GnnCausal,
    ];

    pub fn is_graph(self) -> bool {
        matches!(self, ModelKind::GnnCorr | ModelKind::GnnFull | ModelKind::GnnCausal)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Gru => "gru",
            ModelKind::GnnCorr => "gnn_corr",
            ModelKind::GnnFull => "gnn_full",
            ModelKind::GnnCausal => "gnn_causal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub gnn_hidden: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub n_local: usize,
    pub n_oci: usize,
    pub local_len: usize,
    pub oci_len: usize,
    pub horizon: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            gnn_hidden: 64,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
            n_local: 3,
            n_oci: 3,
            local_len: 39,
            oci_len: 10,
            horizon: 1,
        }
    }
}

impl ModelConfig {
    pub fn n_nodes(&self) -> usize {
        self.n_local + self.n_oci
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::Config(m.into()));
        if self.hidden_dim == 0 || self.gnn_hidden == 0 {
            return bad("hidden dimensions must be at least 1");
        }
        if self.local_len == 0 || self.oci_len == 0 {
            return bad("lag windows must be at least 1 step");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if self.n_nodes() == 0 {
            return bad("model needs at least one input variable");
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in (0, 1)");
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive");
        }
        Ok(())
    }
}

/// A mini-batch of lag windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `B × C_l × L_l`.
    pub x_local: Tensor<T>,
    /// `B × C_oci × L_oci`.
    pub x_oci: Tensor<T>,
    pub y: Vec<usize>,
    pub horizon: usize,
}

impl<T: Scalar> Batch<T> {
    /// Builds a batch from flattened inputs laid out as in [`WindowSet::flat_input`].
    pub fn from_flat(rows: &[Vec<T>], y: Vec<usize>, cfg: &ModelConfig) -> Result<Self> {
        let (cl, ll, co, lo) = (cfg.n_local, cfg.local_len, cfg.n_oci, cfg.oci_len);
        let split = cl * ll;
        if rows.is_empty() || rows.len() != y.len() {
            return Err(ModelError::Contract(format!(
                "batch of {} inputs with {} labels",
                rows.len(),
                y.len()
            )));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != split + co * lo) {
            return Err(ModelError::Contract(format!(
                "flat input of length {}, expected {}",
                r.len(),
                split + co * lo
            )));
        }
        if let Some(&l) = y.iter().find(|&&l| l > 1) {
            return Err(ModelError::Contract(format!("label {l} is not 0 or 1")));
        }
        let b = rows.len();
        let local: Vec<T> = rows.iter().flat_map(|r| r[..split].iter().copied()).collect();
        let oci: Vec<T> = rows.iter().flat_map(|r| r[split..].iter().copied()).collect();
        Ok(Self {
            x_local: Tensor::new(vec![b, cl, ll], local)?,
            x_oci: Tensor::new(vec![b, co, lo], oci)?,
            y,
            horizon: cfg.horizon,
        })
    }

    pub fn from_windows(w: &WindowSet, idx: &[usize], cfg: &ModelConfig) -> Result<Self> {
        let rows: Vec<Vec<T>> = idx
            .iter()
            .map(|&i| w.flat_input(i).into_iter().map(T::from_f64_lossy).collect())
            .collect();
        Self::from_flat(&rows, w.labels(idx), cfg)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index(name).map(move |i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| tape.param(t)).collect(),
        }
    }
}

/// Parameter leaves recorded on a tape.
pub struct Bound {
    names: Vec<String>,
    pub vars: Vec<Var>,
}

impl Bound {
    fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| ModelError::Contract(format!("missing parameter {name}")))
    }
}

/// Shape, and whether Xavier init applies (otherwise constant fill).
enum Init {
    Xavier,
    Zeros,
    Ones,
}

fn layout(kind: ModelKind, cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (h, g) = (cfg.hidden_dim, cfg.gnn_hidden);
    let mut out = Vec::new();
    let (prefix, gates): (&str, &[&str]) = match kind {
        ModelKind::Gru => ("gru", &["z", "r", "n"]),
        _ => ("lstm", &["i", "f", "g", "o"]),
    };
    for gate in gates {
        out.push((format!("{prefix}.w_{gate}"), vec![1, h], Init::Xavier));
        out.push((format!("{prefix}.u_{gate}"), vec![h, h], Init::Xavier));
        out.push((format!("{prefix}.b_{gate}"), vec![h], Init::Zeros));
    }
    if kind.is_graph() {
        out.push(("gcn1.kernel".into(), vec![h, g], Init::Xavier));
        out.push(("gcn1.ln_gamma".into(), vec![g], Init::Ones));
        out.push(("gcn1.ln_beta".into(), vec![g], Init::Zeros));
        out.push(("gcn2.kernel".into(), vec![g, h], Init::Xavier));
        out.push(("gcn2.ln_gamma".into(), vec![h], Init::Ones));
        out.push(("gcn2.ln_beta".into(), vec![h], Init::Zeros));
    }
    out.push(("classifier.weight".into(), vec![h, 2], Init::Xavier));
    out.push(("classifier.bias".into(), vec![2], Init::Zeros));
    out
}

/// Final hidden state of an LSTM run over each row of `series` (`N × L`).
///
/// Gate parameters are looked up as `lstm.{w,u,b}_{i,f,g,o}`.
pub fn lstm_encode<T: Scalar>(tape: &mut Tape<T>, series: &Tensor<T>, p: &Bound) -> Result<Var> {
    let (n, len) = rows_cols(series)?;
    let h_dim = tape.shape(p.get("lstm.u_i")?)[0];
    let mut h = tape.constant(&Tensor::zeros(vec![n, h_dim]));
    let mut cell = tape.constant(&Tensor::zeros(vec![n, h_dim]));
    for k in 0..len {
        let x = step_input(tape, series, k);
        let gate = |tape: &mut Tape<T>, name: &str, h: Var| -> Result<Var> {
            let xw = tape.matmul(x, p.get(&format!("lstm.w_{name}"))?)?;
            let hu = tape.matmul(h, p.get(&format!("lstm.u_{name}"))?)?;
            let s = tape.add(xw, hu)?;
            Ok(tape.add_row(s, p.get(&format!("lstm.b_{name}"))?)?)
        };
        let i = gate(tape, "i", h)?;
        let i = tape.sigmoid(i)?;
        let f = gate(tape, "f", h)?;
        let f = tape.sigmoid(f)?;
        let g = gate(tape, "g", h)?;
        let g = tape.tanh(g)?;
        let o = gate(tape, "o", h)?;
        let o = tape.sigmoid(o)?;
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        cell = tape.add(keep, write)?;
        let squashed = tape.tanh(cell)?;
        h = tape.mul(o, squashed)?;
    }
    Ok(h)
}

/// Final hidden state of a GRU run over each row of `series` (`N × L`).
///
/// `z` update, `r` reset, candidate `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`,
/// `h' = n + z ⊙ (h − n)`.
pub fn gru_encode<T: Scalar>(tape: &mut Tape<T>, series: &Tensor<T>, p: &Bound) -> Result<Var> {
    let (n, len) = rows_cols(series)?;
    let h_dim = tape.shape(p.get("gru.u_z")?)[0];
    let mut h = tape.constant(&Tensor::zeros(vec![n, h_dim]));
    for k in 0..len {
        let x = step_input(tape, series, k);
        let affine = |tape: &mut Tape<T>, name: &str, h: Var| -> Result<Var> {
            let xw = tape.matmul(x, p.get(&format!("gru.w_{name}"))?)?;
            let hu = tape.matmul(h, p.get(&format!("gru.u_{name}"))?)?;
            let s = tape.add(xw, hu)?;
            Ok(tape.add_row(s, p.get(&format!("gru.b_{name}"))?)?)
        };
        let z = affine(tape, "z", h)?;
        let z = tape.sigmoid(z)?;
        let r = affine(tape, "r", h)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = affine(tape, "n", rh)?;
        let cand = tape.tanh(cand)?;
        let diff = tape.sub(h, cand)?;
        let gated = tape.mul(z, diff)?;
        h = tape.add(cand, gated)?;
    }
    Ok(h)
}

fn rows_cols<T: Scalar>(series: &Tensor<T>) -> Result<(usize, usize)> {
    match series.shape() {
        [n, l] if *n > 0 && *l > 0 => Ok((*n, *l)),
        s => Err(ModelError::Contract(format!("encoder input must be non-empty N × L, got {s:?}"))),
    }
}

fn step_input<T: Scalar>(tape: &mut Tape<T>, series: &Tensor<T>, k: usize) -> Var {
    let (n, len) = (series.shape()[0], series.shape()[1]);
    let col: Vec<T> = (0..n).map(|r| series.data()[r * len + k]).collect();
    tape.constant(&Tensor::new(vec![n, 1], col).expect("finite input"))
}

/// One graph convolution `LeakyReLU(LayerNorm(Âᵀ H W))` on a batch of node rows.
#[allow(clippy::too_many_arguments)]
pub fn gcn_layer<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    adj_norm: Var,
    kernel: Var,
    gamma: Var,
    beta: Var,
    slope: T,
    eps: T,
) -> Result<Var> {
    let mixed = tape.graph_mix(adj_norm, nodes)?;
    let z = tape.matmul(mixed, kernel)?;
    let z = tape.layer_norm(z, gamma, beta, eps)?;
    Ok(tape.leaky_relu(z, slope)?)
}

/// [`gcn_layer`] with a value-level adjacency; it must already be normalized.
#[allow(clippy::too_many_arguments)]
pub fn gcn_layer_with<T: Scalar>(
    tape: &mut Tape<T>,
    nodes: Var,
    adj: &AdjacencyMatrix<T>,
    kernel: Var,
    gamma: Var,
    beta: Var,
    slope: T,
    eps: T,
) -> Result<Var> {
    if !adj.is_normalized() {
        return Err(ModelError::Contract("gcn_layer needs a normalized adjacency".into()));
    }
    let a = tape.constant(&adj.to_tensor());
    gcn_layer(tape, nodes, a, kernel, gamma, beta, slope, eps)
}

/// A classifier with its parameters and, for causal/full graphs, its fixed adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    /// Normalized adjacency for `gnn_causal` / `gnn_full`, in node order.
    pub adjacency: Option<AdjacencyMatrix<T>>,
    /// Node names: locals then climate indices.
    pub nodes: Vec<String>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with Xavier-normal weights, zero biases and unit LN scales.
    ///
    /// `adjacency` is required for `gnn_causal` (any node order; it is
    /// reordered to `nodes`) and ignored by the other kinds.
    pub fn new(
        kind: ModelKind,
        config: ModelConfig,
        nodes: Vec<String>,
        adjacency: Option<&AdjacencyMatrix<T>>,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        if nodes.len() != config.n_nodes() {
            return Err(ModelError::Contract(format!(
                "{} node names for {} variables",
                nodes.len(),
                config.n_nodes()
            )));
        }
        let adjacency = match kind {
            ModelKind::GnnCausal => {
                let a = adjacency.ok_or_else(|| {
                    ModelError::Contract("gnn_causal needs a causal adjacency".into())
                })?;
                Some(normalize_adjacency(&a.reorder(&nodes)?))
            }
            ModelKind::GnnFull => Some(normalize_adjacency(&AdjacencyMatrix::full(nodes.clone())?)),
            _ => None,
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, init) in layout(kind, &config) {
            let t = match init {
                Init::Xavier => crate::train::xavier_init(&shape, rng)?,
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => {
                    let n = shape.iter().product();
                    Tensor::new(shape, vec![T::one(); n])?
                }
            };
            names.push(name);
            tensors.push(t.requiring_grad());
        }
        Ok(Self {
            kind,
            config,
            params: ModelParams { names, tensors },
            adjacency,
            nodes,
        })
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<usize> {
        let cfg = &self.config;
        let b = batch.len();
        let expect_l = [b, cfg.n_local, cfg.local_len];
        let expect_o = [b, cfg.n_oci, cfg.oci_len];
        if b == 0 || batch.x_local.shape() != expect_l || batch.x_oci.shape() != expect_o {
            return Err(ModelError::Contract(format!(
                "batch shapes {:?} / {:?} do not match model ({expect_l:?} / {expect_o:?})",
                batch.x_local.shape(),
                batch.x_oci.shape()
            )));
        }
        Ok(b)
    }

    /// Node features `(B·C) × H`, sample-major, locals first.
    fn encode(&self, tape: &mut Tape<T>, batch: &Batch<T>, p: &Bound) -> Result<Var> {
        let b = self.check_batch(batch)?;
        let (cl, co) = (self.config.n_local, self.config.n_oci);
        let mut parts = Vec::new();
        for (x, c, len) in [
            (&batch.x_local, cl, self.config.local_len),
            (&batch.x_oci, co, self.config.oci_len),
        ] {
            if c == 0 {
                continue;
            }
            let series = Tensor::new(vec![b * c, len], x.data().to_vec())?;
            let h = match self.kind {
                ModelKind::Gru => gru_encode(tape, &series, p)?,
                _ => lstm_encode(tape, &series, p)?,
            };
            parts.push(h);
        }
        let stacked = tape.concat_rows(&parts)?;
        let c = cl + co;
        let index: Vec<usize> = (0..b * c)
            .map(|r| {
                let (s, node) = (r / c, r % c);
                if node < cl {
                    s * cl + node
                } else {
                    b * cl + s * co + (node - cl)
                }
            })
            .collect();
        Ok(tape.gather_rows(stacked, &index)?)
    }

    /// Normalized `|corrcoef|` of node features, each node's `B·H` values flattened.
    fn corr_adjacency_var(&self, tape: &mut Tape<T>, nodes: Var, b: usize) -> Result<Var> {
        let c = self.config.n_nodes();
        let h = self.config.hidden_dim;
        let index: Vec<usize> = (0..c * b).map(|r| (r % b) * c + r / b).collect();
        let by_node = tape.gather_rows(nodes, &index)?;
        let flat = tape.reshape(by_node, vec![c, b * h])?;
        let a = tape.abs_corrcoef(flat)?;
        Ok(tape.normalize_adjacency(a)?)
    }

    /// Records the forward pass; returns `B × 2` logits and the bound parameters.
    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<(Var, Bound)> {
        let p = self.params.bind(tape);
        let nodes = self.encode(tape, batch, &p)?;
        let c = self.config.n_nodes();
        let pooled_input = if self.kind.is_graph() {
            let adj = match self.kind {
                ModelKind::GnnCorr => {
                    if self.config.hidden_dim * batch.len() < 2 {
                        return Err(ModelError::Contract(
                            "gnn_corr needs at least two feature values per node".into(),
                        ));
                    }
                    self.corr_adjacency_var(tape, nodes, batch.len())?
                }
                _ => {
                    let a = self
                        .adjacency
                        .as_ref()
                        .ok_or_else(|| ModelError::Contract("graph model without adjacency".into()))?;
                    if a.n() != c {
                        return Err(ModelError::Contract(format!(
                            "adjacency has {} nodes, model has {c}",
                            a.n()
                        )));
                    }
                    tape.constant(&a.to_tensor())
                }
            };
            let slope = c_of(self.config.leaky_slope);
            let eps = c_of(self.config.ln_eps);
            let h1 = gcn_layer(
                tape,
                nodes,
                adj,
                p.get("gcn1.kernel")?,
                p.get("gcn1.ln_gamma")?,
                p.get("gcn1.ln_beta")?,
                slope,
                eps,
            )?;
            gcn_layer(
                tape,
                h1,
                adj,
                p.get("gcn2.kernel")?,
                p.get("gcn2.ln_gamma")?,
                p.get("gcn2.ln_beta")?,
                slope,
                eps,
            )?
        } else {
            nodes
        };
        let pooled = tape.group_mean(pooled_input, c)?;
        let logits = tape.matmul(pooled, p.get("classifier.weight")?)?;
        let logits = tape.add_row(logits, p.get("classifier.bias")?)?;
        Ok((logits, p))
    }

    /// Mean cross-entropy on `batch`; returns the loss node, probabilities and bound parameters.
    pub fn loss(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<(Var, Tensor<T>, Bound)> {
        let (logits, p) = self.forward(tape, batch)?;
        let (loss, probs) = tape.softmax_cross_entropy(logits, &batch.y)?;
        Ok((loss, probs, p))
    }

    /// Loss value and its gradient for every parameter tensor, in parameter order.
    pub fn loss_and_gradients(&self, batch: &Batch<T>) -> Result<(T, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let (loss, _, bound) = self.loss(&mut tape, batch)?;
        tape.backward(loss)?;
        let grads = bound
            .vars
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
            .collect();
        Ok((tape.scalar(loss), grads))
    }

    /// Loss value only.
    pub fn loss_value(&self, batch: &Batch<T>) -> Result<T> {
        let mut tape = Tape::new();
        let (loss, _, _) = self.loss(&mut tape, batch)?;
        Ok(tape.scalar(loss))
    }

    /// Which side of each piecewise-linear kink the forward pass sits on;
    /// see [`Tape::kink_signature`].
    pub fn kink_signature(&self, batch: &Batch<T>) -> Result<Vec<bool>> {
        let mut tape = Tape::new();
        self.forward(&mut tape, batch)?;
        Ok(tape.kink_signature())
    }

    /// `B × 2` logits without gradient bookkeeping.
    pub fn logits(&self, batch: &Batch<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, batch)?;
        Ok(tape.tensor(logits))
    }

    /// Positive-class softmax confidence per sample.
    pub fn confidence(&self, batch: &Batch<T>) -> Result<Vec<T>> {
        let l = self.logits(batch)?;
        Ok((0..batch.len())
            .map(|r| crate::tensor::tape::sigmoid(l.at(r, 1) - l.at(r, 0)))
            .collect())
    }

    pub fn save(&self, dir: &Path, stem: &str, seed: u64, config_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.params.n_values() * 8);
        for t in &self.params.tensors {
            for v in t.data() {
                bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
            }
        }
        std::fs::write(dir.join(format!("{stem}.bin")), bytes)?;
        let manifest = Manifest {
            kind: self.kind,
            config: self.config.clone(),
            nodes: self.nodes.clone(),
            params: self
                .params
                .names
                .iter()
                .zip(&self.params.tensors)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            adjacency: self.adjacency.as_ref().map(|a| AdjacencyEntry {
                kind: a.kind(),
                names: a.names().to_vec(),
                weights: a.weights().iter().map(|w| w.to_f64_lossy()).collect(),
            }),
            seed,
            config_hash: config_hash.to_string(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(dir.join(format!("{stem}.json")), json)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<(Self, Manifest)> {
        let text = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        manifest.config.validate()?;
        let bytes = std::fs::read(dir.join(format!("{stem}.bin")))?;
        let expected_layout = layout(manifest.kind, &manifest.config);
        let total: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if bytes.len() != total * 8 || expected_layout.len() != manifest.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} bytes for {total} values / {} tensors",
                bytes.len(),
                manifest.params.len()
            )));
        }
        let mut values = bytes
            .chunks_exact(8)
            .map(|ch| T::from_f64_lossy(f64::from_le_bytes(ch.try_into().expect("8 bytes"))));
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (entry, (name, shape, _)) in manifest.params.iter().zip(expected_layout) {
            if entry.name != name || entry.shape != shape {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let n = shape.iter().product();
            let data: Vec<T> = values.by_ref().take(n).collect();
            names.push(name);
            tensors.push(Tensor::new(shape, data)?.requiring_grad());
        }
        let adjacency = match &manifest.adjacency {
            Some(a) => {
                let w = a.weights.iter().map(|&v| T::from_f64_lossy(v)).collect();
                Some(AdjacencyMatrix::from_normalized(a.names.clone(), w, a.kind)?)
            }
            None => None,
        };
        let model = Self {
            kind: manifest.kind,
            config: manifest.config.clone(),
            params: ModelParams { names, tensors },
            adjacency,
            nodes: manifest.nodes.clone(),
        };
        Ok((model, manifest))
    }
}

fn c_of<T: Scalar>(v: f64) -> T {
    c(v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Normalized adjacency weights as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyEntry {
    pub kind: AdjacencyKind,
    pub names: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: ModelKind,
    pub config: ModelConfig,
    pub nodes: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub adjacency: Option<AdjacencyEntry>,
    pub seed: u64,
    pub config_hash: String,
}
