use super::{check_finite, Result, Tensor, TensorError};
use crate::num::{c, Scalar};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, factor: T },
    Sigmoid { a: Var },
    Tanh { a: Var },
    LeakyRelu { a: Var, slope: T },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum { a: Var },
    Column { a: Var, col: usize },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    GatherRows { a: Var, index: Vec<usize> },
    GraphMix { adj: Var, x: Var, nodes: usize },
    GroupMean { a: Var, group: usize },
    AbsCorrcoef {
        a: Var,
        unit: Vec<T>,
        norms: Vec<T>,
        sign: Vec<T>,
    },
    NormalizeAdjacency {
        a: Var,
        tilde: Vec<T>,
        row_scale: Vec<T>,
        col_scale: Vec<T>,
        diag_pass: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Entries are pushed in creation order, so the node list is already a
/// topological order; [`Tape::backward`] walks it once in reverse. A tape
/// supports a single backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        check_finite(op_name, &value)?;
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mat(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(&self.node(v).shape).ok_or_else(|| {
            TensorError::Contract(format!("{op} expects a 2-D operand, got {:?}", self.node(v).shape))
        })
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.clone(),
            grad: None,
        }
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    /// Side of every kink recorded so far: LeakyReLU inputs (`x ≥ 0`) and
    /// off-diagonal correlation signs inside `abs_corrcoef` (`r ≥ 0`).
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece,
    /// which is what a finite-difference probe needs.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { a, .. } => {
                    out.extend(self.value(*a).iter().map(|&x| x >= T::zero()));
                }
                Op::AbsCorrcoef { sign, .. } => {
                    let n = node.shape[0];
                    out.extend(
                        (0..n * n)
                            .filter(|k| k / n != k % n)
                            .map(|k| sign[k] >= T::zero()),
                    );
                }
                _ => {}
            }
        }
        out
    }

    /// Records a leaf that tracks gradients iff `t.requires_grad()`.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never tracks gradients.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape.clone(),
            value: t.data.clone(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat("matmul", a)?;
        let (k2, n) = self.mat("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-`n` bias to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.mat("add_row", a)?;
        if self.value(bias).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let rg = self.rg(&[a, bias]);
        let shape = self.shape(a).to_vec();
        self.push("add_row", shape, out, Op::AddRow { a, bias }, rg)
    }

    fn map(&mut self, op_name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.shape(a).to_vec();
        self.push(op_name, shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.map("scale", a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map("tanh", a, |x| x.tanh(), Op::Tanh { a })
    }

    /// `y = x` for `x ≥ 0`, `slope · x` otherwise. `slope` must lie in (0, 1).
    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var> {
        if !(slope > T::zero() && slope < T::one()) {
            return Err(TensorError::Contract(format!(
                "leaky_relu slope {slope} outside (0, 1)"
            )));
        }
        self.map(
            "leaky_relu",
            a,
            |x| if x >= T::zero() { x } else { slope * x },
            Op::LeakyRelu { a, slope },
        )
    }

    /// Row-wise layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d < 2 {
            return Err(TensorError::Degenerate(format!(
                "layer_norm needs a feature dimension of at least 2, got {d}"
            )));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        if !(eps > T::zero()) {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let xs = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = xs.len() / d;
        let dn = T::from_usize_lossy(d);
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for k in 0..d {
                let h = (row[k] - mean) * inv;
                xhat[r * d + k] = h;
                out[r * d + k] = g[k] * h + b[k];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = self.shape(x).to_vec();
        self.push(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    ///
    /// Returns the scalar loss node and the `B × K` probability matrix.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Tensor<T>)> {
        let (b, k) = self.mat("softmax_cross_entropy", logits)?;
        if labels.len() != b {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: vec![b, k],
                right: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::Label { row, label });
        }
        let z = self.value(logits);
        let mut probs = vec![T::zero(); b * k];
        let mut loss = T::zero();
        for r in 0..b {
            let row = &z[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            for j in 0..k {
                probs[r * k + j] = (row[j] - lse).exp();
            }
            loss += lse - row[labels[r]];
        }
        loss /= T::from_usize_lossy(b);
        let rg = self.rg(&[logits]);
        let probs_t = Tensor::new(vec![b, k], probs.clone())?;
        let v = self.push(
            "softmax_cross_entropy",
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )?;
        Ok((v, probs_t))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", vec![1], vec![s], Op::Sum { a }, rg)
    }

    /// Column `col` of an `m × n` matrix as an `m × 1` matrix.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let (m, n) = self.mat("column", a)?;
        if col >= n {
            return Err(TensorError::Contract(format!("column {col} out of range for width {n}")));
        }
        let v = self.value(a);
        let out = (0..m).map(|i| v[i * n + col]).collect();
        let rg = self.rg(&[a]);
        self.push("column", vec![m, 1], out, Op::Column { a, col }, rg)
    }

    /// Stacks 2-D parts with equal width on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Contract("concat_rows of nothing".into()));
        };
        let (_, n) = self.mat("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (m, n2) = self.mat("concat_rows", p)?;
            if n2 != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += m;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            vec![rows, n],
            out,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape,
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", shape, out, Op::Reshape { a }, rg)
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.mat("gather_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(TensorError::Contract(format!("gather_rows index {bad} >= {m}")));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&v[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[a]);
        self.push(
            "gather_rows",
            vec![index.len(), n],
            out,
            Op::GatherRows {
                a,
                index: index.to_vec(),
            },
            rg,
        )
    }

    /// Message passing over a batch of graphs sharing one `C × C` adjacency.
    ///
    /// `x` holds `B · C` node rows, sample-major. Node `j` of each sample receives
    /// `Σ_i adj[i][j] · x_i`, i.e. messages flow from row index to column index.
    pub fn graph_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (c1, c2) = self.mat("graph_mix", adj)?;
        let (rows, h) = self.mat("graph_mix", x)?;
        if c1 != c2 || c1 == 0 || rows % c1 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "graph_mix",
                left: vec![c1, c2],
                right: vec![rows, h],
            });
        }
        let nodes = c1;
        let a = self.value(adj);
        let xv = self.value(x);
        let mut out = vec![T::zero(); rows * h];
        for b in 0..rows / nodes {
            let base = b * nodes;
            for i in 0..nodes {
                let src = &xv[(base + i) * h..(base + i + 1) * h];
                for j in 0..nodes {
                    let w = a[i * nodes + j];
                    if w == T::zero() {
                        continue;
                    }
                    let dst = &mut out[(base + j) * h..(base + j + 1) * h];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += w * s;
                    }
                }
            }
        }
        let rg = self.rg(&[adj, x]);
        self.push("graph_mix", vec![rows, h], out, Op::GraphMix { adj, x, nodes }, rg)
    }

    /// Averages each run of `group` consecutive rows: `(B·G) × H → B × H`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let (rows, h) = self.mat("group_mean", a)?;
        if group == 0 || rows % group != 0 {
            return Err(TensorError::Contract(format!(
                "group_mean: {rows} rows not divisible into groups of {group}"
            )));
        }
        let v = self.value(a);
        let b = rows / group;
        let inv = T::one() / T::from_usize_lossy(group);
        let mut out = vec![T::zero(); b * h];
        for r in 0..rows {
            let g = r / group;
            for k in 0..h {
                out[g * h + k] += v[r * h + k] * inv;
            }
        }
        let rg = self.rg(&[a]);
        self.push("group_mean", vec![b, h], out, Op::GroupMean { a, group }, rg)
    }

    /// Absolute Pearson correlation between the rows of a `C × d` matrix.
    ///
    /// Rows with (numerically) zero variance yield a zero row and column.
    pub fn abs_corrcoef(&mut self, a: Var) -> Result<Var> {
        let (rows, d) = self.mat("abs_corrcoef", a)?;
        if d < 2 {
            return Err(TensorError::Degenerate(format!(
                "abs_corrcoef needs at least 2 columns, got {d}"
            )));
        }
        let v = self.value(a);
        let dn = T::from_usize_lossy(d);
        let mut unit = vec![T::zero(); rows * d];
        let mut norms = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let scale = row.iter().fold(T::zero(), |m, &x| m.max(x.abs()));
            let norm = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>().sqrt();
            if norm <= T::epsilon() * c::<T>(16.0) * (T::one() + scale) * dn.sqrt() {
                log::warn!("abs_corrcoef: row {r} has zero variance; using a zero adjacency row");
                continue;
            }
            norms[r] = norm;
            for k in 0..d {
                unit[r * d + k] = (row[k] - mean) / norm;
            }
        }
        let mut out = vec![T::zero(); rows * rows];
        let mut sign = vec![T::zero(); rows * rows];
        for i in 0..rows {
            if norms[i] == T::zero() {
                continue;
            }
            for j in 0..rows {
                if norms[j] == T::zero() {
                    continue;
                }
                let r = if i == j {
                    T::one()
                } else {
                    let dot: T = (0..d).map(|k| unit[i * d + k] * unit[j * d + k]).sum();
                    dot.max(-T::one()).min(T::one())
                };
                out[i * rows + j] = r.abs();
                sign[i * rows + j] = if r > T::zero() {
                    T::one()
                } else if r < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                };
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            "abs_corrcoef",
            vec![rows, rows],
            out,
            Op::AbsCorrcoef { a, unit, norms, sign },
            rg,
        )
    }

    /// `D_out^{-1/2} Ã D_in^{-1/2}` with `Ã` the input carrying unit self-loops.
    ///
    /// See [`crate::graph::normalize_adjacency`] for the value-level contract.
    pub fn normalize_adjacency(&mut self, a: Var) -> Result<Var> {
        let (n, n2) = self.mat("normalize_adjacency", a)?;
        if n != n2 {
            return Err(TensorError::ShapeMismatch {
                op: "normalize_adjacency",
                left: vec![n, n2],
                right: vec![n2, n],
            });
        }
        let v = self.value(a);
        if let Some(i) = v.iter().position(|&x| x < T::zero()) {
            return Err(TensorError::Contract(format!(
                "normalize_adjacency needs non-negative weights (flat index {i})"
            )));
        }
        let (tilde, row_scale, col_scale, diag_pass) = normalize_parts(v, n);
        let out = (0..n * n)
            .map(|idx| tilde[idx] * row_scale[idx / n] * col_scale[idx % n])
            .collect();
        let rg = self.rg(&[a]);
        self.push(
            "normalize_adjacency",
            vec![n, n],
            out,
            Op::NormalizeAdjacency {
                a,
                tilde,
                row_scale,
                col_scale,
                diag_pass,
            },
            rg,
        )
    }

    /// Runs reverse-mode differentiation from a scalar root.
    ///
    /// Every node that tracks gradients gets a gradient buffer; nodes not on a
    /// path to `root` keep zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.node(root).value.len() != 1 {
            return Err(TensorError::NonScalarRoot(self.node(root).shape.clone()));
        }
        self.backward_done = true;
        self.grads = self
            .nodes
            .iter()
            .map(|n| n.requires_grad.then(|| vec![T::zero(); n.value.len()]))
            .collect();
        if !self.node(root).requires_grad {
            return Ok(());
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().all(|v| *v == T::zero()) {
                self.grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds leaf gradients into the matching parameter tensors.
    pub fn accumulate_grads(&self, vars: &[Var], params: &mut [Tensor<T>]) -> Result<()> {
        if vars.len() != params.len() {
            return Err(TensorError::Contract("vars/params length mismatch".into()));
        }
        for (v, p) in vars.iter().zip(params.iter_mut()) {
            if let (Some(g), Some(dst)) = (self.grad(*v), p.grad_mut()) {
                for (d, &s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if let Some(g) = self.grads[v.0].as_mut() {
            f(g);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[T]) {
        // Temporarily take the op to appease the borrow checker; restored below.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = dims2(&self.nodes[a.0].shape).unwrap();
                let n = self.nodes[b.0].shape[1];
                if self.wants(*a) {
                    let bv = &self.nodes[b.0].value;
                    let mut da = vec![T::zero(); m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = T::zero();
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    self.acc(*a, |dst| add_into(dst, &da));
                }
                if self.wants(*b) {
                    let av = &self.nodes[a.0].value;
                    let mut db = vec![T::zero(); k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                    self.acc(*b, |dst| add_into(dst, &db));
                }
            }
            Op::Add { a, b } => {
                self.acc(*a, |dst| add_into(dst, g));
                self.acc(*b, |dst| add_into(dst, g));
            }
            Op::Sub { a, b } => {
                self.acc(*a, |dst| add_into(dst, g));
                self.acc(*b, |dst| dst.iter_mut().zip(g).for_each(|(d, &s)| *d -= s));
            }
            Op::Mul { a, b } => {
                if self.wants(*a) {
                    let d: Vec<T> = g.iter().zip(&self.nodes[b.0].value).map(|(&s, &y)| s * y).collect();
                    self.acc(*a, |dst| add_into(dst, &d));
                }
                if self.wants(*b) {
                    let d: Vec<T> = g.iter().zip(&self.nodes[a.0].value).map(|(&s, &x)| s * x).collect();
                    self.acc(*b, |dst| add_into(dst, &d));
                }
            }
            Op::AddRow { a, bias } => {
                self.acc(*a, |dst| add_into(dst, g));
                let n = self.nodes[bias.0].value.len();
                self.acc(*bias, |dst| {
                    for (i, &s) in g.iter().enumerate() {
                        dst[i % n] += s;
                    }
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.acc(*a, |dst| dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s * f));
            }
            Op::Sigmoid { a } => {
                let y = &self.nodes[idx].value;
                let d: Vec<T> = g.iter().zip(y).map(|(&s, &y)| s * y * (T::one() - y)).collect();
                self.acc(*a, |dst| add_into(dst, &d));
            }
            Op::Tanh { a } => {
                let y = &self.nodes[idx].value;
                let d: Vec<T> = g.iter().zip(y).map(|(&s, &y)| s * (T::one() - y * y)).collect();
                self.acc(*a, |dst| add_into(dst, &d));
            }
            Op::LeakyRelu { a, slope } => {
                let x = &self.nodes[a.0].value;
                let sl = *slope;
                let d: Vec<T> = g
                    .iter()
                    .zip(x)
                    .map(|(&s, &x)| if x >= T::zero() { s } else { s * sl })
                    .collect();
                self.acc(*a, |dst| add_into(dst, &d));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.nodes[gamma.0].value.len();
                let rows = xhat.len() / d;
                let gam = self.nodes[gamma.0].value.clone();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for k in 0..d {
                            dg[k] += g[r * d + k] * xhat[r * d + k];
                            db[k] += g[r * d + k];
                        }
                    }
                    self.acc(*gamma, |dst| add_into(dst, &dg));
                    self.acc(*beta, |dst| add_into(dst, &db));
                }
                if self.wants(*x) {
                    let dn = T::from_usize_lossy(d);
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for k in 0..d {
                            let dh = g[r * d + k] * gam[k];
                            s1 += dh;
                            s2 += dh * xhat[r * d + k];
                        }
                        for k in 0..d {
                            let dh = g[r * d + k] * gam[k];
                            dx[r * d + k] = inv_std[r] / dn * (dn * dh - s1 - xhat[r * d + k] * s2);
                        }
                    }
                    self.acc(*x, |dst| add_into(dst, &dx));
                }
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let b = labels.len();
                let k = probs.len() / b;
                let scale = g[0] / T::from_usize_lossy(b);
                let mut d = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    d[r * k + l] -= T::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.acc(*logits, |dst| add_into(dst, &d));
            }
            Op::Sum { a } => {
                let s = g[0];
                self.acc(*a, |dst| dst.iter_mut().for_each(|d| *d += s));
            }
            Op::Column { a, col } => {
                let n = self.nodes[a.0].shape[1];
                let col = *col;
                self.acc(*a, |dst| {
                    for (i, &s) in g.iter().enumerate() {
                        dst[i * n + col] += s;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.len();
                    let slice = &g[offset..offset + len];
                    self.acc(*p, |dst| add_into(dst, slice));
                    offset += len;
                }
            }
            Op::Reshape { a } => {
                self.acc(*a, |dst| add_into(dst, g));
            }
            Op::GatherRows { a, index } => {
                let n = self.nodes[a.0].shape[1];
                self.acc(*a, |dst| {
                    for (r, &i) in index.iter().enumerate() {
                        for k in 0..n {
                            dst[i * n + k] += g[r * n + k];
                        }
                    }
                });
            }
            Op::GraphMix { adj, x, nodes } => {
                let c = *nodes;
                let h = self.nodes[x.0].shape[1];
                let rows = self.nodes[x.0].shape[0];
                if self.wants(*x) {
                    let av = &self.nodes[adj.0].value;
                    let mut dx = vec![T::zero(); rows * h];
                    for b in 0..rows / c {
                        let base = b * c;
                        for i in 0..c {
                            for j in 0..c {
                                let w = av[i * c + j];
                                if w == T::zero() {
                                    continue;
                                }
                                for k in 0..h {
                                    dx[(base + i) * h + k] += w * g[(base + j) * h + k];
                                }
                            }
                        }
                    }
                    self.acc(*x, |dst| add_into(dst, &dx));
                }
                if self.wants(*adj) {
                    let xv = &self.nodes[x.0].value;
                    let mut da = vec![T::zero(); c * c];
                    for b in 0..rows / c {
                        let base = b * c;
                        for i in 0..c {
                            for j in 0..c {
                                let mut s = T::zero();
                                for k in 0..h {
                                    s += xv[(base + i) * h + k] * g[(base + j) * h + k];
                                }
                                da[i * c + j] += s;
                            }
                        }
                    }
                    self.acc(*adj, |dst| add_into(dst, &da));
                }
            }
            Op::GroupMean { a, group } => {
                let h = self.nodes[a.0].shape[1];
                let grp = *group;
                let inv = T::one() / T::from_usize_lossy(grp);
                self.acc(*a, |dst| {
                    for (r, chunk) in dst.chunks_mut(h).enumerate() {
                        let gr = r / grp;
                        for (k, d) in chunk.iter_mut().enumerate() {
                            *d += g[gr * h + k] * inv;
                        }
                    }
                });
            }
            Op::AbsCorrcoef { a, unit, norms, sign } => {
                let rows = norms.len();
                let d = unit.len() / rows;
                let dn = T::from_usize_lossy(d);
                let mut df = vec![T::zero(); rows * d];
                for i in 0..rows {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    // dL/dU_i = Σ_j (G_ij s_ij + G_ji s_ji) U_j
                    let mut du = vec![T::zero(); d];
                    for j in 0..rows {
                        if norms[j] == T::zero() {
                            continue;
                        }
                        let w = g[i * rows + j] * sign[i * rows + j] + g[j * rows + i] * sign[j * rows + i];
                        if w == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            du[k] += w * unit[j * d + k];
                        }
                    }
                    let proj: T = (0..d).map(|k| unit[i * d + k] * du[k]).sum();
                    let dz: Vec<T> = (0..d).map(|k| (du[k] - unit[i * d + k] * proj) / norms[i]).collect();
                    let mean = dz.iter().copied().sum::<T>() / dn;
                    for k in 0..d {
                        df[i * d + k] = dz[k] - mean;
                    }
                }
                self.acc(*a, |dst| add_into(dst, &df));
            }
            Op::NormalizeAdjacency {
                a,
                tilde,
                row_scale,
                col_scale,
                diag_pass,
            } => {
                let n = row_scale.len();
                let mut row_term = vec![T::zero(); n];
                let mut col_term = vec![T::zero(); n];
                for i in 0..n {
                    for j in 0..n {
                        let gt = g[i * n + j] * tilde[i * n + j];
                        row_term[i] += gt * col_scale[j];
                        col_term[j] += gt * row_scale[i];
                    }
                }
                let half = c::<T>(0.5);
                let mut da = vec![T::zero(); n * n];
                for k in 0..n {
                    for l in 0..n {
                        if k == l && !diag_pass[k] {
                            continue;
                        }
                        let rk = row_scale[k];
                        let cl = col_scale[l];
                        da[k * n + l] = g[k * n + l] * rk * cl
                            - half * rk * rk * rk * row_term[k]
                            - half * cl * cl * cl * col_term[l];
                    }
                }
                self.acc(*a, |dst| add_into(dst, &da));
            }
        }
        self.nodes[idx].op = op;
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

/// Self-loop augmentation and degree scales shared by the tape op and the
/// value-level normalization: `Ã_ii = max(A_ii, 1)`, row scale `(Σ_j Ã_ij)^{-1/2}`,
/// column scale `(Σ_i Ã_ij)^{-1/2}`.
pub(crate) fn normalize_parts<T: Scalar>(a: &[T], n: usize) -> (Vec<T>, Vec<T>, Vec<T>, Vec<bool>) {
    let mut tilde = a.to_vec();
    let mut diag_pass = vec![false; n];
    for i in 0..n {
        let d = &mut tilde[i * n + i];
        if *d > T::one() {
            diag_pass[i] = true;
        } else {
            *d = T::one();
        }
    }
    let mut row = vec![T::zero(); n];
    let mut col = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            row[i] += tilde[i * n + j];
            col[j] += tilde[i * n + j];
        }
    }
    let row_scale = row.iter().map(|&s| T::one() / s.sqrt()).collect();
    let col_scale = col.iter().map(|&s| T::one() / s.sqrt()).collect();
    (tilde, row_scale, col_scale, diag_pass)
}
