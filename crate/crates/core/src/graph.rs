//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a define-by-run tape: every operation records its inputs
//! and cached forward data, and [`Graph::backward`] replays the records in
//! reverse creation order. Graphs are rebuilt for every forward pass, which
//! keeps mixed-task batch composition flexible (head usage may change from
//! step to step).
//!
//! All math is double precision and strictly sequential, so identical
//! inputs produce bit-identical values and gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node {
    value: Tensor,
    /// Lazily allocated by `backward`; same shape as `value`.
    grad: Option<Vec<f64>>,
    op: Op,
}

enum Op {
    Leaf,
    /// C = A·B with A: m×k, B: k×n.
    Matmul { a: Var, b: Var },
    /// Row-broadcast bias add: out[r] = x[r] + bias.
    AddRow { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Relu { x: Var },
    /// Per-sample softmax cross-entropy; caches row-wise probabilities.
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    /// Squared L2 distance between two equal-length buffers; scalar output.
    L2Sq { u: Var, v: Var },
    /// Rows scaled to unit L2 norm; caches 1/norm per row (0 for zero rows).
    RowNormalize { x: Var, inv_norms: Vec<f64> },
    /// Identity forward; backward multiplies by `factor`. Setting a negative
    /// factor at a branch point reverses the gradient sign on that branch.
    GradScale { x: Var, factor: f64 },
    GatherRows { x: Var, rows: Vec<usize> },
    /// out = c·x for a compile-time constant c.
    Scale { x: Var, c: f64 },
    /// out = x + c elementwise; gradient passes through unchanged.
    Offset { x: Var },
    /// Elementwise product with a constant weight vector (mask application).
    MulConst { x: Var, weights: Vec<f64> },
    Sum { x: Var },
}

/// Define-by-run computation tape.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not belong to this graph (size {})",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// Registers an input (parameter or data) node.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.clone(), Op::Leaf)
    }

    /// Alias of [`Graph::leaf`] for values that never need gradients.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    /// Forward values of every node in creation order, for diagnostics
    /// (e.g. detecting activations too close to a ReLU kink for finite
    /// differences to be valid).
    pub fn node_values(&self) -> impl Iterator<Item = &Tensor> {
        self.nodes.iter().map(|n| &n.value)
    }

    /// Gradient filled by the latest `backward`, if this node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = av.data()[i * k + kk];
                let brow = &bv.data()[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul { a, b }))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let cols = xv.cols();
        if bv.len() != cols {
            return Err(Error::shape("bias add", xv.shape(), bv.shape()));
        }
        let rows = xv.rows();
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] += bv.data()[c];
            }
        }
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), out)?,
            Op::AddRow { x, bias },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(av.shape().to_vec(), out)?, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape("sub", av.shape(), bv.shape()));
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Tensor::new(av.shape().to_vec(), out)?, Op::Sub { a, b }))
    }

    /// Elementwise max(0, x); the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("relu shape"), Op::Relu { x })
    }

    /// Numerically stable per-sample softmax cross-entropy.
    ///
    /// Returns the unreduced length-b loss vector so a mask can select which
    /// samples count; reduction is the caller's job.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let lv = &self.nodes[logits.0].value;
        if lv.shape().len() != 2 {
            return Err(Error::shape("softmax_xent logits", lv.shape(), &[0, 0]));
        }
        let (b, classes) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != b {
            return Err(Error::shape("softmax_xent targets", &[b], &[targets.len()]));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::IndexOutOfRange {
                    what: format!("target class for sample {i}"),
                    index: t,
                    size: classes,
                });
            }
        }
        let mut probs = vec![0.0; b * classes];
        let mut losses = vec![0.0; b];
        for i in 0..b {
            let row = &lv.data()[i * classes..(i + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &l in row {
                denom += (l - max).exp();
            }
            let log_sum = max + denom.ln();
            for c in 0..classes {
                probs[i * classes + c] = (row[c] - log_sum).exp();
            }
            losses[i] = log_sum - row[targets[i]];
        }
        Ok(self.push(
            Tensor::vector(losses),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Squared L2 distance Σ(u_i − v_i)²; scalar output.
    pub fn l2sq(&mut self, u: Var, v: Var) -> Result<Var> {
        self.check(u)?;
        self.check(v)?;
        let (uv, vv) = (&self.nodes[u.0].value, &self.nodes[v.0].value);
        if uv.len() != vv.len() {
            return Err(Error::shape("l2sq", uv.shape(), vv.shape()));
        }
        let mut acc = 0.0;
        for (x, y) in uv.data().iter().zip(vv.data()) {
            let d = x - y;
            acc += d * d;
        }
        Ok(self.push(Tensor::scalar(acc), Op::L2Sq { u, v }))
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; rows * cols];
        let mut inv_norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if norm > 1e-12 { 1.0 / norm } else { 0.0 };
            inv_norms[r] = inv;
            for c in 0..cols {
                out[r * cols + c] = row[c] * inv;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out).expect("row_normalize shape"),
            Op::RowNormalize { x, inv_norms },
        )
    }

    /// Identity forward, gradient multiplied by `factor` on the way back.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.push(value, Op::GradScale { x, factor })
    }

    /// Selects rows of a 2-d tensor; duplicate indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.0].value;
        let (n, cols) = (xv.rows(), xv.cols());
        for &r in rows {
            if r >= n {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows row".into(),
                    index: r,
                    size: n,
                });
            }
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv.data()[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            Tensor::matrix(rows.len(), cols, out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("scale shape"), Op::Scale { x, c })
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f64> = xv.data().iter().map(|v| v + c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out).expect("offset shape"), Op::Offset { x })
    }

    /// Elementwise product with a constant weight vector.
    pub fn mul_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        self.check(x)?;
        let xv = &self.nodes[x.0].value;
        if xv.len() != weights.len() {
            return Err(Error::shape("mul_const", xv.shape(), &[weights.len()]));
        }
        let out: Vec<f64> = xv.data().iter().zip(weights).map(|(v, w)| v * w).collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MulConst {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.nodes[x.0].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean of all elements; scalar output (sum divided by element count).
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn grad_slot(&mut self, v: Var) -> &mut Vec<f64> {
        let len = self.nodes[v.0].value.len();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Reverse sweep from a scalar seed: fills the gradient of every node the
    /// seed depends on. Nodes the seed does not reach keep `grad == None`
    /// (read as zero). Replaces any gradients from a previous sweep.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        self.check(seed)?;
        if !self.nodes[seed.0].value.is_scalar() {
            return Err(Error::Graph(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed.0].value.shape()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[seed.0].grad = Some(vec![1.0]);

        for id in (0..=seed.0).rev() {
            let go = match &self.nodes[id].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Inputs are strictly older than the node, so reading cached
            // values before writing input grads never aliases.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    {
                        let ga = self.grad_slot(a);
                        for i in 0..m {
                            for kk in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += go[i * n + j] * bv.data()[kk * n + j];
                                }
                                ga[i * k + kk] += acc;
                            }
                        }
                    }
                    {
                        let gb = self.grad_slot(b);
                        for kk in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av.data()[i * k + kk] * go[i * n + j];
                                }
                                gb[kk * n + j] += acc;
                            }
                        }
                    }
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let cols = self.nodes[bias.0].value.len();
                    let rows = go.len() / cols;
                    {
                        let gx = self.grad_slot(x);
                        for (g, u) in gx.iter_mut().zip(&go) {
                            *g += u;
                        }
                    }
                    {
                        let gb = self.grad_slot(bias);
                        for r in 0..rows {
                            for c in 0..cols {
                                gb[c] += go[r * cols + c];
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (g, u) in self.grad_slot(a).iter_mut().zip(&go) {
                        *g += u;
                    }
                    for (g, u) in self.grad_slot(b).iter_mut().zip(&go) {
                        *g += u;
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    for (g, u) in self.grad_slot(a).iter_mut().zip(&go) {
                        *g += u;
                    }
                    for (g, u) in self.grad_slot(b).iter_mut().zip(&go) {
                        *g -= u;
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gx = self.grad_slot(x);
                    for i in 0..go.len() {
                        if xv[i] > 0.0 {
                            gx[i] += go[i];
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    probs,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let classes = probs.len() / targets.len();
                    let gl = self.grad_slot(logits);
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = go[i];
                        for c in 0..classes {
                            let indicator = if c == t { 1.0 } else { 0.0 };
                            gl[i * classes + c] += gi * (probs[i * classes + c] - indicator);
                        }
                    }
                }
                Op::L2Sq { u, v } => {
                    let (u, v) = (*u, *v);
                    let uv = self.nodes[u.0].value.data().to_vec();
                    let vv = self.nodes[v.0].value.data().to_vec();
                    let g = go[0];
                    {
                        let gu = self.grad_slot(u);
                        for i in 0..uv.len() {
                            gu[i] += g * 2.0 * (uv[i] - vv[i]);
                        }
                    }
                    {
                        let gv = self.grad_slot(v);
                        for i in 0..uv.len() {
                            gv[i] -= g * 2.0 * (uv[i] - vv[i]);
                        }
                    }
                }
                Op::RowNormalize { x, inv_norms } => {
                    let x = *x;
                    let inv_norms = inv_norms.clone();
                    let yv = self.nodes[id].value.data().to_vec();
                    let cols = yv.len() / inv_norms.len();
                    let gx = self.grad_slot(x);
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        let y = &yv[r * cols..(r + 1) * cols];
                        let g = &go[r * cols..(r + 1) * cols];
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += inv * (g[c] - y[c] * dot);
                        }
                    }
                }
                Op::GradScale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    let gx = self.grad_slot(x);
                    for i in 0..go.len() {
                        gx[i] += factor * go[i];
                    }
                }
                Op::GatherRows { x, rows } => {
                    let x = *x;
                    let rows = rows.clone();
                    let cols = go.len() / rows.len();
                    let gx = self.grad_slot(x);
                    for (out_r, &src_r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            gx[src_r * cols + c] += go[out_r * cols + c];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let gx = self.grad_slot(x);
                    for i in 0..go.len() {
                        gx[i] += c * go[i];
                    }
                }
                Op::Offset { x } => {
                    let x = *x;
                    let gx = self.grad_slot(x);
                    for i in 0..go.len() {
                        gx[i] += go[i];
                    }
                }
                Op::MulConst { x, weights } => {
                    let x = *x;
                    let weights = weights.clone();
                    let gx = self.grad_slot(x);
                    for i in 0..go.len() {
                        gx[i] += weights[i] * go[i];
                    }
                }
                Op::Sum { x } => {
                    let x = *x;
                    let g = go[0];
                    let gx = self.grad_slot(x);
                    for v in gx.iter_mut() {
                        *v += g;
                    }
                }
            }
        }
        Ok(())
    }
}
