//! Small differentiable models and losses: analytic quadratics, and MLP
//! classifiers/regressors (relu or tanh) with mean cross-entropy or mean
//! squared error. Losses are batch means, so penalty strengths are
//! batch-size-insensitive to first order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::autodiff::{NodeId, ParamVector, Tape};
use crate::error::{Error, Result};
use crate::rng;

/// Labeled or real-valued targets of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, n_classes: usize },
    Values { data: Vec<f64>, dim: usize },
}

/// A batch of `n` examples with `d`-dimensional inputs (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DataBatch {
    inputs: Vec<f64>,
    n: usize,
    d: usize,
    targets: Targets,
}

impl DataBatch {
    pub fn classification(
        inputs: Vec<f64>,
        d: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = Self::check_inputs(&inputs, d)?;
        if labels.len() != n {
            return Err(Error::Length { expected: n, got: labels.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: n_classes });
        }
        Ok(DataBatch { inputs, n, d, targets: Targets::Classes { labels, n_classes } })
    }

    pub fn regression(inputs: Vec<f64>, d: usize, data: Vec<f64>, dim: usize) -> Result<Self> {
        let n = Self::check_inputs(&inputs, d)?;
        if data.len() != n * dim {
            return Err(Error::Length { expected: n * dim, got: data.len() });
        }
        Ok(DataBatch { inputs, n, d, targets: Targets::Values { data, dim } })
    }

    fn check_inputs(inputs: &[f64], d: usize) -> Result<usize> {
        if d == 0 || inputs.is_empty() || inputs.len() % d != 0 {
            return Err(Error::Shape(format!(
                "inputs of length {} not divisible into rows of {d}",
                inputs.len()
            )));
        }
        Ok(inputs.len() / d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    pub fn labels(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes { labels, .. } => Some(labels),
            Targets::Values { .. } => None,
        }
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.targets {
            Targets::Classes { n_classes, .. } => Some(*n_classes),
            Targets::Values { .. } => None,
        }
    }

    /// Sub-batch at `indices` (in order), used for shuffled minibatches and
    /// per-example gradients.
    pub fn select(&self, indices: &[usize]) -> Result<DataBatch> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch selection"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n) {
            return Err(Error::invalid(format!("index {bad} out of range for n={}", self.n)));
        }
        let mut inputs = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            inputs.extend_from_slice(&self.inputs[i * self.d..(i + 1) * self.d]);
        }
        let targets = match &self.targets {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: indices.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
            Targets::Values { data, dim } => {
                let mut out = Vec::with_capacity(indices.len() * dim);
                for &i in indices {
                    out.extend_from_slice(&data[i * dim..(i + 1) * dim]);
                }
                Targets::Values { data: out, dim: *dim }
            }
        };
        Ok(DataBatch { inputs, n: indices.len(), d: self.d, targets })
    }

    /// Replace the label vector (same length/classes).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<DataBatch> {
        let n_classes = self
            .n_classes()
            .ok_or_else(|| Error::invalid("with_labels on a regression batch"))?;
        DataBatch::classification(self.inputs.clone(), self.d, labels, n_classes)
    }
}

/// A differentiable scalar-loss model over a flat parameter vector.
pub trait Model {
    /// Number of parameters `p`.
    fn dim(&self) -> usize;

    /// Record the mean batch loss onto `tape`, returning the scalar node.
    fn trace_loss(&self, tape: &mut Tape, w: &ParamVector, batch: &DataBatch) -> Result<NodeId>;

    /// Raw model outputs for `n` rows of inputs, if the model makes
    /// predictions (used for accuracy metrics).
    fn predict(&self, _w: &ParamVector, _inputs: &[f64], _n: usize) -> Option<Vec<f64>> {
        None
    }
}

/// `L(w) = 1/2 w^T A w − b^T w + c` with symmetric positive-definite `A`.
///
/// Gradient `Aw − b` and Hessian `A` are available in closed form, which
/// makes this the oracle model for every finite-difference check.
#[derive(Debug, Clone)]
pub struct QuadraticModel {
    a: Vec<f64>, // p x p, row-major
    b: Vec<f64>,
    c: f64,
    p: usize,
}

impl QuadraticModel {
    pub fn new(a: Vec<f64>, b: Vec<f64>, c: f64) -> Result<Self> {
        let p = b.len();
        if a.len() != p * p {
            return Err(Error::Shape(format!("A has {} entries, expected {p}x{p}", a.len())));
        }
        for i in 0..p {
            for j in (i + 1)..p {
                if a[i * p + j] != a[j * p + i] {
                    return Err(Error::invalid(format!(
                        "A not symmetric at ({i},{j}): {} vs {}",
                        a[i * p + j],
                        a[j * p + i]
                    )));
                }
            }
        }
        Ok(QuadraticModel { a, b, c, p })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let p = diag.len();
        let mut a = vec![0.0; p * p];
        for (i, &d) in diag.iter().enumerate() {
            a[i * p + i] = d;
        }
        QuadraticModel { a, b: vec![0.0; p], c: 0.0, p }
    }

    pub fn with_linear(mut self, b: Vec<f64>) -> Result<Self> {
        if b.len() != self.p {
            return Err(Error::Length { expected: self.p, got: b.len() });
        }
        self.b = b;
        Ok(self)
    }

    pub fn with_constant(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    /// Random symmetric PD matrix with eigenvalues uniform in `eig_range`,
    /// via the QR factor of a Gaussian matrix.
    pub fn random_pd(p: usize, seed: u64, eig_range: (f64, f64)) -> Self {
        let mut r = rng::stream(seed, "random_pd", 0);
        let gauss = DMatrix::from_fn(p, p, |_, _| {
            let u: f64 = r.gen_range(-1.0..1.0);
            u
        });
        let q = gauss.qr().q();
        let eigs: Vec<f64> = (0..p).map(|_| r.gen_range(eig_range.0..eig_range.1)).collect();
        let lam = DMatrix::from_diagonal(&DVector::from_vec(eigs));
        let a_mat = &q * lam * q.transpose();
        // Symmetrize exactly against round-off.
        let mut a = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                a[i * p + j] = 0.5 * (a_mat[(i, j)] + a_mat[(j, i)]);
            }
        }
        QuadraticModel { a, b: vec![0.0; p], c: 0.0, p }
    }

    pub fn hessian(&self) -> &[f64] {
        &self.a
    }

    pub fn linear(&self) -> &[f64] {
        &self.b
    }

    pub fn constant(&self) -> f64 {
        self.c
    }

    pub fn analytic_gradient(&self, w: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p];
        for i in 0..self.p {
            let mut s = 0.0;
            for j in 0..self.p {
                s += self.a[i * self.p + j] * w[j];
            }
            g[i] = s - self.b[i];
        }
        g
    }

    pub fn hessian_vector(&self, v: &[f64]) -> Vec<f64> {
        let mut hv = vec![0.0; self.p];
        for i in 0..self.p {
            let mut s = 0.0;
            for j in 0..self.p {
                s += self.a[i * self.p + j] * v[j];
            }
            hv[i] = s;
        }
        hv
    }

    /// `w* = A^{-1} b`.
    pub fn minimizer(&self) -> Result<Vec<f64>> {
        let a = DMatrix::from_row_slice(self.p, self.p, &self.a);
        let b = DVector::from_column_slice(&self.b);
        a.lu()
            .solve(&b)
            .map(|x| x.as_slice().to_vec())
            .ok_or_else(|| Error::invalid("singular quadratic Hessian"))
    }
}

impl Model for QuadraticModel {
    fn dim(&self) -> usize {
        self.p
    }

    fn trace_loss(&self, tape: &mut Tape, w: &ParamVector, _batch: &DataBatch) -> Result<NodeId> {
        if w.len() != self.p {
            return Err(Error::Length { expected: self.p, got: w.len() });
        }
        let wn = tape.bind_params(w, 0, self.p, 1)?;
        let a = tape.constant(self.a.clone(), self.p, self.p)?;
        let aw = tape.matmul(a, wn)?;
        let waw = tape.mul(wn, aw)?;
        let q = tape.sum(waw);
        let half = tape.scale(q, 0.5);
        let b = tape.constant(self.b.clone(), self.p, 1)?;
        let bw = tape.mul(b, wn)?;
        let bws = tape.sum(bw);
        let lin = tape.sub(half, bws)?;
        let c = tape.scalar(self.c);
        tape.add(lin, c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Fully connected network with `sizes = [d_in, h1, ..., d_out]`; parameters
/// are flattened deterministically as `[W1 (row-major), b1, W2, b2, ...]`.
#[derive(Debug, Clone)]
pub struct MlpModel {
    sizes: Vec<usize>,
    activation: Activation,
}

impl MlpModel {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        Ok(MlpModel { sizes, activation })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|fan| (fan[0] + 1) * fan[1])
            .sum()
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` for layer `l`.
    pub fn layer_offsets(&self, layer: usize) -> (usize, usize, usize, usize) {
        let mut offset = 0;
        for l in 0..layer {
            offset += (self.sizes[l] + 1) * self.sizes[l + 1];
        }
        let fan_in = self.sizes[layer];
        let fan_out = self.sizes[layer + 1];
        (offset, offset + fan_in * fan_out, fan_in, fan_out)
    }

    /// Glorot-uniform weights (`±sqrt(6/(fan_in+fan_out))`), zero biases,
    /// drawn from the `(seed, "init")` stream.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut out = vec![0.0; self.param_count()];
        let mut r = rng::stream(seed, "init", 0);
        for l in 0..self.n_layers() {
            let (w_off, _b_off, fan_in, fan_out) = self.layer_offsets(l);
            let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for k in 0..fan_in * fan_out {
                out[w_off + k] = r.gen_range(-lim..lim);
            }
        }
        ParamVector::new(out)
    }

    /// Split `w` into per-layer `(weights, bias)` pairs.
    pub fn unflatten(&self, w: &ParamVector) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        if w.len() != self.param_count() {
            return Err(Error::Length { expected: self.param_count(), got: w.len() });
        }
        let mut out = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            out.push((
                w.as_slice()[w_off..w_off + fan_in * fan_out].to_vec(),
                w.as_slice()[b_off..b_off + fan_out].to_vec(),
            ));
        }
        Ok(out)
    }

    /// Inverse of [`MlpModel::unflatten`].
    pub fn flatten(&self, layers: &[(Vec<f64>, Vec<f64>)]) -> Result<ParamVector> {
        if layers.len() != self.n_layers() {
            return Err(Error::Length { expected: self.n_layers(), got: layers.len() });
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (l, (wl, bl)) in layers.iter().enumerate() {
            let (_, _, fan_in, fan_out) = self.layer_offsets(l);
            if wl.len() != fan_in * fan_out || bl.len() != fan_out {
                return Err(Error::Shape(format!("layer {l} has wrong shapes")));
            }
            out.extend_from_slice(wl);
            out.extend_from_slice(bl);
        }
        Ok(ParamVector::new(out))
    }

    /// Plain forward pass (no tape); returns row-major `n x d_out` outputs.
    pub fn forward(&self, w: &ParamVector, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        if inputs.len() != n * self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs length {} != {n}x{}",
                inputs.len(),
                self.input_dim()
            )));
        }
        let mut h = inputs.to_vec();
        let mut width = self.input_dim();
        for l in 0..self.n_layers() {
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            let wl = &w.as_slice()[w_off..w_off + fan_in * fan_out];
            let bl = &w.as_slice()[b_off..b_off + fan_out];
            let mut z = vec![0.0; n * fan_out];
            for i in 0..n {
                for k in 0..fan_in {
                    let hik = h[i * width + k];
                    let row = &wl[k * fan_out..(k + 1) * fan_out];
                    let out = &mut z[i * fan_out..(i + 1) * fan_out];
                    for j in 0..fan_out {
                        out[j] += hik * row[j];
                    }
                }
                for j in 0..fan_out {
                    z[i * fan_out + j] += bl[j];
                }
            }
            if l + 1 < self.n_layers() {
                for x in z.iter_mut() {
                    *x = match self.activation {
                        Activation::Relu => x.max(0.0),
                        Activation::Tanh => x.tanh(),
                    };
                }
            }
            h = z;
            width = fan_out;
        }
        Ok(h)
    }

    /// Layer-pair rescaling `(W_l, b_l, W_{l+1}) -> (αW_l, αb_l, α^{-1}W_{l+1})`.
    ///
    /// For relu networks the forward map is unchanged while gradients and
    /// squared-gradient statistics are not; tanh does not have the required
    /// positive homogeneity and is rejected.
    pub fn rescale_diagonal(
        &self,
        w: &ParamVector,
        layer: usize,
        alpha: f64,
    ) -> Result<ParamVector> {
        if self.activation != Activation::Relu {
            return Err(Error::invalid(
                "rescale_diagonal requires relu (positive homogeneity)",
            ));
        }
        if !(alpha > 0.0) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        if layer + 1 >= self.n_layers() {
            return Err(Error::invalid(format!(
                "layer {layer} has no successor (n_layers = {})",
                self.n_layers()
            )));
        }
        let mut out = w.clone();
        let s = out.as_mut_slice();
        let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(layer);
        for x in &mut s[w_off..w_off + fan_in * fan_out] {
            *x *= alpha;
        }
        for x in &mut s[b_off..b_off + fan_out] {
            *x *= alpha;
        }
        let (w2_off, _, fan_in2, fan_out2) = self.layer_offsets(layer + 1);
        for x in &mut s[w2_off..w2_off + fan_in2 * fan_out2] {
            *x /= alpha;
        }
        Ok(out)
    }
}

impl Model for MlpModel {
    fn dim(&self) -> usize {
        self.param_count()
    }

    fn trace_loss(&self, tape: &mut Tape, w: &ParamVector, batch: &DataBatch) -> Result<NodeId> {
        if batch.input_dim() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch input dim {} != model input dim {}",
                batch.input_dim(),
                self.input_dim()
            )));
        }
        let n = batch.n();
        let mut h = tape.constant(batch.inputs().to_vec(), n, self.input_dim())?;
        for l in 0..self.n_layers() {
            let (w_off, b_off, fan_in, fan_out) = self.layer_offsets(l);
            let wl = tape.bind_params(w, w_off, fan_in, fan_out)?;
            let bl = tape.bind_params(w, b_off, 1, fan_out)?;
            let z = tape.matmul(h, wl)?;
            let zb = tape.add_row(z, bl)?;
            h = if l + 1 < self.n_layers() {
                match self.activation {
                    Activation::Relu => tape.relu(zb),
                    Activation::Tanh => tape.tanh(zb),
                }
            } else {
                zb
            };
        }
        match batch.targets() {
            Targets::Classes { labels, .. } => tape.cross_entropy_mean(h, labels),
            Targets::Values { data, dim } => {
                if *dim != self.output_dim() {
                    return Err(Error::Shape(format!(
                        "target dim {dim} != model output dim {}",
                        self.output_dim()
                    )));
                }
                let y = tape.constant(data.clone(), n, *dim)?;
                let diff = tape.sub(h, y)?;
                let sq = tape.mul(diff, diff)?;
                let total = tape.sum(sq);
                Ok(tape.scale(total, 1.0 / n as f64))
            }
        }
    }

    fn predict(&self, w: &ParamVector, inputs: &[f64], n: usize) -> Option<Vec<f64>> {
        self.forward(w, inputs, n).ok()
    }
}

/// Fraction of rows whose argmax output matches the label.
pub fn accuracy(model: &dyn Model, w: &ParamVector, batch: &DataBatch) -> Option<f64> {
    let labels = batch.labels()?;
    let out = model.predict(w, batch.inputs(), batch.n())?;
    let k = out.len() / batch.n();
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &out[i * k..(i + 1) * k];
        let pred = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(j, _)| j)
            .unwrap_or(0);
        if pred == label {
            correct += 1;
        }
    }
    Some(correct as f64 / batch.n() as f64)
}
