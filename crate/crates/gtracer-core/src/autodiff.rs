//! Minimal reverse-mode automatic differentiation over flat parameter vectors.
//!
//! A [`Tape`] records a small set of primitive operations (leaf bindings,
//! add, mul, matmul, relu/tanh, fused log-sum-exp cross-entropy, reductions)
//! eagerly during the forward pass; a single reverse sweep visits each node
//! exactly once and accumulates adjoints into the flat gradient. Evaluation
//! is sequential and deterministic: identical `(w, batch)` produce identical
//! bits.
//!
//! Hessian-vector products are central finite differences of exact
//! gradients, `(∇L(w+εv) − ∇L(w−εv)) / (2ε)`, exact in the limit for
//! quadratics and two gradient passes per product.

use crate::error::{Error, Result};
use crate::models::{DataBatch, Model};

/// Flat real vector of model parameters; the coordinate system shared by all
/// optimizers and diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector { values }
    }

    pub fn zeros(p: usize) -> Self {
        ParamVector { values: vec![0.0; p] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector { values }
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

pub(crate) fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Identifier of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param { offset: usize },
    Constant,
    Add(NodeId, NodeId),
    /// `(n×m) + (1×m)` row broadcast (bias addition).
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits`, computed through a max-shifted log-sum-exp.
    CrossEntropyMean { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Append-only record of a scalar-loss computation.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { op, rows, cols, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    /// Bind a leaf to `w[offset .. offset + rows*cols]`, viewed as row-major
    /// `(rows, cols)`.
    pub fn bind_params(
        &mut self,
        w: &ParamVector,
        offset: usize,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let end = offset + rows * cols;
        if end > w.len() {
            return Err(Error::Shape(format!(
                "param slice {offset}..{end} out of range for p={}",
                w.len()
            )));
        }
        let value = w.as_slice()[offset..end].to_vec();
        Ok(self.push(Op::Param { offset }, rows, cols, value))
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "constant data length {} != {rows}x{cols}",
                data.len()
            )));
        }
        Ok(self.push(Op::Constant, rows, cols, data))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Constant, 1, 1, vec![v])
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: &str) -> Result<(usize, usize)> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(Error::Shape(format!(
                "{op}: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        Ok((ra, ca))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "add")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), r, c, v))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != c {
            return Err(Error::Shape(format!("add_row: {r}x{c} + {rr}x{rc}")));
        }
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            for j in 0..c {
                v[i * c + j] += self.nodes[row.0].value[j];
            }
        }
        Ok(self.push(Op::AddRow(a, row), r, c, v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "sub")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), r, c, v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.binary_same_shape(a, b, "mul")?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), r, c, v))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| k * x).collect();
        self.push(Op::Scale(a, k), r, c, v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(a);
        let (kb, m) = self.shape(b);
        if k != kb {
            return Err(Error::Shape(format!("matmul: {n}x{k} * {kb}x{m}")));
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut v = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let ail = va[i * k + l];
                let row = &vb[l * m..(l + 1) * m];
                let out = &mut v[i * m..(i + 1) * m];
                for j in 0..m {
                    out[j] += ail * row[j];
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), n, m, v))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), r, c, v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), r, c, v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![v])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let vals = &self.nodes[a.0].value;
        let v = vals.iter().sum::<f64>() / vals.len() as f64;
        self.push(Op::Mean(a), 1, 1, vec![v])
    }

    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (n, classes) = self.shape(logits);
        if labels.len() != n {
            return Err(Error::Length { expected: n, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes });
        }
        let v = self.nodes[logits.0].value.clone();
        let mut total = 0.0;
        for i in 0..n {
            let row = &v[i * classes..(i + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[labels[i]];
        }
        let value = total / n as f64;
        Ok(self.push(
            Op::CrossEntropyMean { logits, labels: labels.to_vec() },
            1,
            1,
            vec![value],
        ))
    }

    /// Reverse sweep from the scalar node `loss`, accumulating into a
    /// gradient of length `dim`.
    pub fn backward(&self, loss: NodeId, dim: usize) -> Result<Vec<f64>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Shape(format!("backward target is {r}x{c}, not scalar")));
        }
        if !self.scalar_value(loss).is_finite() {
            // Name the first non-finite node for diagnosis.
            for (i, node) in self.nodes.iter().enumerate() {
                if node.value.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteLoss { node: i, op: node.op.name() });
                }
            }
            return Err(Error::NonFiniteLoss { node: loss.0, op: self.nodes[loss.0].op.name() });
        }

        let mut adj: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.rows * n.cols])
            .collect();
        adj[loss.0][0] = 1.0;
        let mut grad = vec![0.0; dim];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let d = std::mem::take(&mut adj[idx]);
            if d.iter().all(|&x| x == 0.0) {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param { offset } => {
                    for (k, dk) in d.iter().enumerate() {
                        grad[offset + k] += dk;
                    }
                }
                Op::Add(a, b) => {
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += dk;
                    }
                    for (k, dk) in d.iter().enumerate() {
                        adj[b.0][k] += dk;
                    }
                }
                Op::AddRow(a, row) => {
                    let c = node.cols;
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += dk;
                        adj[row.0][k % c] += dk;
                    }
                }
                Op::Sub(a, b) => {
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += dk;
                    }
                    for (k, dk) in d.iter().enumerate() {
                        adj[b.0][k] -= dk;
                    }
                }
                Op::Mul(a, b) => {
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += dk * vb[k];
                    }
                    for (k, dk) in d.iter().enumerate() {
                        adj[b.0][k] += dk * va[k];
                    }
                }
                Op::Scale(a, kf) => {
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += kf * dk;
                    }
                }
                Op::MatMul(a, b) => {
                    let (n, kk) = self.shape(*a);
                    let (_, m) = self.shape(*b);
                    let va = self.nodes[a.0].value.clone();
                    let vb = self.nodes[b.0].value.clone();
                    // dA += dC * B^T
                    for i in 0..n {
                        for l in 0..kk {
                            let mut s = 0.0;
                            for j in 0..m {
                                s += d[i * m + j] * vb[l * m + j];
                            }
                            adj[a.0][i * kk + l] += s;
                        }
                    }
                    // dB += A^T * dC
                    for l in 0..kk {
                        for j in 0..m {
                            let mut s = 0.0;
                            for i in 0..n {
                                s += va[i * kk + l] * d[i * m + j];
                            }
                            adj[b.0][l * m + j] += s;
                        }
                    }
                }
                Op::Relu(a) => {
                    let va = self.nodes[a.0].value.clone();
                    for (k, dk) in d.iter().enumerate() {
                        if va[k] > 0.0 {
                            adj[a.0][k] += dk;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let vy = node.value.clone();
                    for (k, dk) in d.iter().enumerate() {
                        adj[a.0][k] += dk * (1.0 - vy[k] * vy[k]);
                    }
                }
                Op::Sum(a) => {
                    let d0 = d[0];
                    for x in adj[a.0].iter_mut() {
                        *x += d0;
                    }
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.len() as f64;
                    let d0 = d[0] / len;
                    for x in adj[a.0].iter_mut() {
                        *x += d0;
                    }
                }
                Op::CrossEntropyMean { logits, labels } => {
                    let (n, classes) = self.shape(*logits);
                    let v = self.nodes[logits.0].value.clone();
                    let d0 = d[0] / n as f64;
                    for i in 0..n {
                        let row = &v[i * classes..(i + 1) * classes];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
                        for j in 0..classes {
                            let p = (row[j] - m).exp() / denom;
                            let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                            adj[logits.0][i * classes + j] += d0 * (p - indicator);
                        }
                    }
                }
            }
        }
        Ok(grad)
    }
}

/// Mean batch loss (forward pass only).
pub fn loss<M: Model + ?Sized>(model: &M, w: &ParamVector, batch: &DataBatch) -> Result<f64> {
    let mut tape = Tape::new();
    let out = model.trace_loss(&mut tape, w, batch)?;
    Ok(tape.scalar_value(out))
}

/// Mean batch loss and its exact reverse-mode gradient.
pub fn loss_and_gradient<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let out = model.trace_loss(&mut tape, w, batch)?;
    let grad = tape.backward(out, model.dim())?;
    Ok((tape.scalar_value(out), grad))
}

/// Exact reverse-mode gradient of the mean batch loss.
pub fn gradient<M: Model + ?Sized>(
    model: &M,
    w: &ParamVector,
    batch: &DataBatch,
) -> Result<Vec<f64>> {
    loss_and_gradient(model, w, batch).map(|(_, g)| g)
}

/// Default finite-difference step, balancing truncation against round-off in
/// 64-bit: `1e-4 * (1 + ||w||)`.
pub fn default_fd_step(w: &ParamVector) -> f64 {
    1e-4 * (1.0 + w.l2_norm())
}

/// A Hessian-vector product query at `point` along `direction`.
#[derive(Debug, Clone)]
pub struct HvpRequest {
    pub point: ParamVector,
    pub direction: Vec<f64>,
    pub fd_step: f64,
}

impl HvpRequest {
    pub fn new(point: ParamVector, direction: Vec<f64>) -> Result<Self> {
        let fd_step = default_fd_step(&point);
        Self::with_step(point, direction, fd_step)
    }

    pub fn with_step(point: ParamVector, direction: Vec<f64>, fd_step: f64) -> Result<Self> {
        if direction.len() != point.len() {
            return Err(Error::Length { expected: point.len(), got: direction.len() });
        }
        if !(fd_step > 0.0) {
            return Err(Error::invalid(format!("fd_step must be positive, got {fd_step}")));
        }
        if direction.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("hvp direction has non-finite entries"));
        }
        Ok(HvpRequest { point, direction, fd_step })
    }
}

/// Central-difference Hessian-vector product
/// `(∇L(w+εv) − ∇L(w−εv)) / (2ε)` with `ε = fd_step / max(||v||, tiny)`.
///
/// `v = 0` returns the zero vector exactly.
pub fn hvp<M: Model + ?Sized>(
    model: &M,
    req: &HvpRequest,
    batch: &DataBatch,
) -> Result<Vec<f64>> {
    let p = req.point.len();
    let vnorm = l2(&req.direction);
    if vnorm == 0.0 {
        return Ok(vec![0.0; p]);
    }
    let eps = req.fd_step / vnorm.max(f64::MIN_POSITIVE);
    let mut w_plus = req.point.clone();
    let mut w_minus = req.point.clone();
    for i in 0..p {
        w_plus.as_mut_slice()[i] += eps * req.direction[i];
        w_minus.as_mut_slice()[i] -= eps * req.direction[i];
    }
    let g_plus = gradient(model, &w_plus, batch)?;
    let g_minus = gradient(model, &w_minus, batch)?;
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(gp, gm)| (gp - gm) / (2.0 * eps))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{DataBatch, MlpModel, Activation, QuadraticModel};
    use approx::assert_relative_eq;

    fn dummy_batch() -> DataBatch {
        DataBatch::classification(vec![0.0], 1, vec![0], 1).unwrap()
    }

    #[test]
    fn quadratic_gradient_matches_analytic() {
        // L = 1/2 w^T diag(1,2) w, grad at (1,1) is (1,2)
        let model = QuadraticModel::from_diag(&[1.0, 2.0]);
        let w = ParamVector::new(vec![1.0, 1.0]);
        let g = gradient(&model, &w, &dummy_batch()).unwrap();
        assert_relative_eq!(g[0], 1.0, max_relative = 1e-12);
        assert_relative_eq!(g[1], 2.0, max_relative = 1e-12);
    }

    #[test]
    fn gradient_zero_at_stationary_point() {
        let model = QuadraticModel::from_diag(&[1.0, 1.0]);
        let w = ParamVector::zeros(2);
        let g = gradient(&model, &w, &dummy_batch()).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn logistic_gradient_matches_central_differences() {
        // Single-sample logistic regression: 1 linear layer + cross-entropy.
        let model = MlpModel::new(vec![3, 2], Activation::Relu).unwrap();
        let w = model.init_params(11);
        let batch = DataBatch::classification(vec![0.3, -1.2, 0.7], 3, vec![1], 2).unwrap();
        let g = gradient(&model, &w, &batch).unwrap();
        let h = 1e-6;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp.as_mut_slice()[i] += h;
            let mut wm = w.clone();
            wm.as_mut_slice()[i] -= h;
            let fd = (loss(&model, &wp, &batch).unwrap() - loss(&model, &wm, &batch).unwrap())
                / (2.0 * h);
            if fd.abs() > 1e-10 {
                assert_relative_eq!(g[i], fd, max_relative = 1e-6);
            } else {
                assert!((g[i] - fd).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn hvp_matches_analytic_on_quadratic() {
        let model = QuadraticModel::from_diag(&[1.0, 2.0]);
        let w = ParamVector::new(vec![0.3, -0.4]);
        let req = HvpRequest::new(w, vec![1.0, 2.0]).unwrap();
        let hv = hvp(&model, &req, &dummy_batch()).unwrap();
        assert_relative_eq!(hv[0], 1.0, max_relative = 1e-8);
        assert_relative_eq!(hv[1], 4.0, max_relative = 1e-8);
    }

    #[test]
    fn hvp_zero_direction_is_exact_zero() {
        let model = QuadraticModel::from_diag(&[1.0, 2.0]);
        let req = HvpRequest::new(ParamVector::new(vec![1.0, 1.0]), vec![0.0, 0.0]).unwrap();
        let hv = hvp(&model, &req, &dummy_batch()).unwrap();
        assert_eq!(hv, vec![0.0, 0.0]);
    }

    #[test]
    fn hvp_agrees_with_scalar_second_difference_on_mlp() {
        // v^T H v via double central difference of the loss along v.
        let model = MlpModel::new(vec![2, 6, 2], Activation::Tanh).unwrap();
        let w = model.init_params(3);
        let batch = DataBatch::classification(
            vec![0.5, -0.2, -1.0, 0.8, 0.1, 0.4],
            2,
            vec![0, 1, 0],
            2,
        )
        .unwrap();
        let mut rng = crate::rng::stream(5, "dir", 0);
        use rand::Rng;
        let v: Vec<f64> = (0..w.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let req = HvpRequest::new(w.clone(), v.clone()).unwrap();
        let hv = hvp(&model, &req, &batch).unwrap();
        let vhv = dot(&v, &hv);

        let vnorm = l2(&v);
        let h = 1e-3 / vnorm;
        let shift = |s: f64| {
            let mut ws = w.clone();
            for i in 0..ws.len() {
                ws.as_mut_slice()[i] += s * v[i];
            }
            loss(&model, &ws, &batch).unwrap()
        };
        let second = (shift(h) - 2.0 * shift(0.0) + shift(-h)) / (h * h);
        assert_relative_eq!(vhv, second, max_relative = 1e-3);
    }

    #[test]
    fn hvp_linear_in_direction_on_quadratic() {
        let model = QuadraticModel::from_diag(&[2.0, 0.5, 1.5]);
        let w = ParamVector::new(vec![0.1, 0.2, -0.3]);
        let v = vec![0.4, -1.0, 2.0];
        let alpha = 3.7;
        let hv = hvp(
            &model,
            &HvpRequest::new(w.clone(), v.clone()).unwrap(),
            &dummy_batch(),
        )
        .unwrap();
        let av: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let hav = hvp(&model, &HvpRequest::new(w, av.clone()).unwrap(), &dummy_batch()).unwrap();
        let diff = l2(&hav
            .iter()
            .zip(&hv)
            .map(|(a, b)| a - alpha * b)
            .collect::<Vec<_>>());
        assert!(diff <= 1e-6 * l2(&av), "linearity violated: {diff}");
    }

    #[test]
    fn forward_is_deterministic() {
        let model = MlpModel::new(vec![2, 8, 2], Activation::Relu).unwrap();
        let w = model.init_params(9);
        let batch =
            DataBatch::classification(vec![0.1, 0.9, -0.4, 0.2], 2, vec![0, 1], 2).unwrap();
        let (l1, g1) = loss_and_gradient(&model, &w, &batch).unwrap();
        let (l2_, g2) = loss_and_gradient(&model, &w, &batch).unwrap();
        assert_eq!(l1.to_bits(), l2_.to_bits());
        let same = g1
            .iter()
            .zip(&g2)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same);
    }

    #[test]
    fn non_finite_loss_names_first_bad_node() {
        let model = QuadraticModel::from_diag(&[1e308, 1e308]);
        let w = ParamVector::new(vec![1e60, 1e60]);
        let err = gradient(&model, &w, &dummy_batch()).unwrap_err();
        match err {
            Error::NonFiniteLoss { op, .. } => {
                assert!(!op.is_empty());
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }
}
