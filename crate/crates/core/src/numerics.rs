//! Minimal dense-tensor kernel: row-major f64 matrices, manual forward and
//! backward passes for stacks of linear layers with ReLU activations and a
//! softmax cross-entropy head, plain mini-batch SGD, and a finite-difference
//! gradient checker.
//!
//! Everything here is a pure function of its inputs: same inputs, bit
//! identical outputs. No global state, no hidden randomness (the gradient
//! checker takes an explicit seed for coordinate sampling).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::dim(format!(
                    "ragged rows: expected width {c}, got {}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { rows: r, cols: c, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One dense layer: `weight` stored out-by-in, one bias per output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::dim(format!(
                "bias length {} does not match {} layer outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(DenseLayer { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

/// A stack of dense layers. ReLU follows every layer except the last, whose
/// raw outputs are the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<DenseLayer>,
}

impl DenseNet {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Forward pass keeping every post-activation, for backprop.
    /// `activations[0]` is the input; `activations[i]` for `0 < i < L` is
    /// the ReLU output of layer `i-1`; `logits` is the raw last-layer output.
    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        if self.layers.is_empty() {
            return Err(Error::dim("empty layer stack".to_string()));
        }
        let mut activations = Vec::with_capacity(self.layers.len());
        activations.push(x.clone());
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = linear_forward(activations.last().unwrap(), &layer.weight, &layer.bias)?;
            activations.push(relu_forward(&z));
        }
        let last = self.layers.last().unwrap();
        let logits = linear_forward(activations.last().unwrap(), &last.weight, &last.bias)?;
        Ok(ForwardTrace { activations, logits })
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.logits)
    }
}

/// Saved activations from a forward pass.
pub struct ForwardTrace {
    pub activations: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// The representation feeding the final layer (the input itself for a
    /// single-layer net).
    pub fn representation(&self) -> &Matrix {
        self.activations.last().unwrap()
    }
}

/// A mini-batch: one input row per sample plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Matrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::dim(format!(
                "batch has {} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Per-layer gradients, shape-congruent with the net they differentiate.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

/// Gradient of one layer's weight matrix and bias vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl GradientSet {
    /// Checks shape congruence against `net`.
    pub fn congruent(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self
                .layers
                .iter()
                .zip(&net.layers)
                .all(|(g, l)| g.weight.same_shape(&l.weight) && g.bias.len() == l.bias.len())
    }
}

/// Optional pull of the representation toward per-sample target vectors,
/// with strength `lambda`. Adds `lambda * mean_i ||rep_i - target_i||^2`
/// to the loss; samples with no target contribute nothing.
pub struct RepTargets {
    pub lambda: f64,
    pub targets: Vec<Option<Vec<f64>>>,
}

/// `x (B x in) * W^T (in x out) + b`, broadcast per row.
pub fn linear_forward(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols() != weight.cols() {
        return Err(Error::dim(format!(
            "input width {} vs layer fan-in {}",
            x.cols(),
            weight.cols()
        )));
    }
    if bias.len() != weight.rows() {
        return Err(Error::dim(format!(
            "bias length {} vs layer fan-out {}",
            bias.len(),
            weight.rows()
        )));
    }
    let mut out = Matrix::zeros(x.rows(), weight.rows());
    for i in 0..x.rows() {
        let xi = x.row(i);
        let oi = out.row_mut(i);
        for (o, (wrow, b)) in oi.iter_mut().zip(weight.data().chunks(weight.cols()).zip(bias)) {
            let mut acc = *b;
            for (xv, wv) in xi.iter().zip(wrow) {
                acc += xv * wv;
            }
            *o = acc;
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu_forward(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Mean softmax cross-entropy over the batch, log-sum-exp stabilized, and
/// its gradient w.r.t. the logits: `(softmax - onehot) / B`.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::dim(format!(
            "{} logit rows vs {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let num_classes = logits.cols();
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::index(format!(
                "label {y} at row {i} with only {num_classes} classes"
            )));
        }
    }
    let batch = logits.rows() as f64;
    let mut dlogits = Matrix::zeros(logits.rows(), num_classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[y];
        let drow = dlogits.row_mut(i);
        for (j, (d, v)) in drow.iter_mut().zip(row).enumerate() {
            let p = (v - max).exp() / sum_exp;
            *d = (p - if j == y { 1.0 } else { 0.0 }) / batch;
        }
    }
    Ok((loss / batch, dlogits))
}

/// Mean batch loss only (used by the finite-difference checker).
pub fn batch_loss(net: &DenseNet, batch: &Batch, targets: Option<&RepTargets>) -> Result<f64> {
    let trace = net.forward_trace(&batch.inputs)?;
    let (mut loss, _) = softmax_xent(&trace.logits, &batch.labels)?;
    if let Some(t) = targets {
        if t.lambda > 0.0 {
            loss += rep_penalty_loss(trace.representation(), t)?;
        }
    }
    Ok(loss)
}

fn rep_penalty_loss(rep: &Matrix, targets: &RepTargets) -> Result<f64> {
    if targets.targets.len() != rep.rows() {
        return Err(Error::dim(format!(
            "{} rep targets vs batch of {}",
            targets.targets.len(),
            rep.rows()
        )));
    }
    let batch = rep.rows() as f64;
    let mut acc = 0.0;
    for (i, target) in targets.targets.iter().enumerate() {
        if let Some(t) = target {
            if t.len() != rep.cols() {
                return Err(Error::dim(format!(
                    "target width {} vs representation width {}",
                    t.len(),
                    rep.cols()
                )));
            }
            for (r, tv) in rep.row(i).iter().zip(t) {
                let d = r - tv;
                acc += d * d;
            }
        }
    }
    Ok(targets.lambda * acc / batch)
}

/// Exact analytic gradients of the mean batch loss w.r.t. every parameter.
pub fn backward(net: &DenseNet, batch: &Batch) -> Result<(f64, GradientSet)> {
    backward_with_targets(net, batch, None)
}

/// As [`backward`], with an optional representation penalty (used for
/// prototype-regularized training).
pub fn backward_with_targets(
    net: &DenseNet,
    batch: &Batch,
    targets: Option<&RepTargets>,
) -> Result<(f64, GradientSet)> {
    let trace = net.forward_trace(&batch.inputs)?;
    let (mut loss, dlogits) = softmax_xent(&trace.logits, &batch.labels)?;

    let num_layers = net.layers.len();
    let mut grads: Vec<Option<LayerGrad>> = (0..num_layers).map(|_| None).collect();

    // dz for the layer currently being processed, starting at the head.
    let mut dz = dlogits;
    for l in (0..num_layers).rev() {
        let layer = &net.layers[l];
        let input = &trace.activations[l];

        // dW = dz^T * input; db = column sums of dz.
        let mut dw = Matrix::zeros(layer.out_dim(), layer.in_dim());
        let mut db = vec![0.0; layer.out_dim()];
        for b in 0..dz.rows() {
            let dzb = dz.row(b);
            let xb = input.row(b);
            for (o, &dzo) in dzb.iter().enumerate() {
                db[o] += dzo;
                let wrow = dw.row_mut(o);
                for (w, &xv) in wrow.iter_mut().zip(xb) {
                    *w += dzo * xv;
                }
            }
        }
        grads[l] = Some(LayerGrad { weight: dw, bias: db });

        if l == 0 {
            break;
        }

        // da = dz * W, then the ReLU mask of the producing layer.
        let mut da = Matrix::zeros(dz.rows(), layer.in_dim());
        for b in 0..dz.rows() {
            let dzb = dz.row(b);
            let dab = da.row_mut(b);
            for (o, &dzo) in dzb.iter().enumerate() {
                let wrow = layer.weight.row(o);
                for (d, &wv) in dab.iter_mut().zip(wrow) {
                    *d += dzo * wv;
                }
            }
        }

        // Representation penalty enters where the head's input is produced.
        if l == num_layers - 1 {
            if let Some(t) = targets {
                if t.lambda > 0.0 {
                    loss += rep_penalty_loss(trace.representation(), t)?;
                    let scale = 2.0 * t.lambda / batch.len() as f64;
                    let rep = trace.representation();
                    for (i, target) in t.targets.iter().enumerate() {
                        if let Some(tv) = target {
                            let dai = da.row_mut(i);
                            for ((d, r), tvv) in dai.iter_mut().zip(rep.row(i)).zip(tv) {
                                *d += scale * (r - tvv);
                            }
                        }
                    }
                }
            }
        }

        // ReLU derivative: 1 where the activation is positive, else 0.
        let act = &trace.activations[l];
        for b in 0..da.rows() {
            let ab = act.row(b);
            let dab = da.row_mut(b);
            for (d, &a) in dab.iter_mut().zip(ab) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        dz = da;
    }

    let layers = grads.into_iter().map(Option::unwrap).collect();
    Ok((loss, GradientSet { layers }))
}

/// One SGD step: `p <- p - eta * g` for every parameter.
pub fn sgd_step(net: &mut DenseNet, grads: &GradientSet, eta: f64) -> Result<()> {
    if !grads.congruent(net) {
        return Err(Error::dim("gradient shapes do not match the net".to_string()));
    }
    for (layer, grad) in net.layers.iter_mut().zip(&grads.layers) {
        for (w, g) in layer.weight.data_mut().iter_mut().zip(grad.weight.data()) {
            *w -= eta * g;
        }
        for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
            *b -= eta * g;
        }
    }
    Ok(())
}

/// One sampled coordinate of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub layer: usize,
    pub is_bias: bool,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients against central finite differences at
/// `n_coords` randomly sampled parameter coordinates. An empty sample
/// passes vacuously.
pub fn finite_diff_check(
    net: &DenseNet,
    batch: &Batch,
    n_coords: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, grads) = backward(net, batch)?;
    finite_diff_check_grads(net, batch, &grads, n_coords, epsilon, tolerance, seed)
}

/// As [`finite_diff_check`] but taking the analytic gradients to verify,
/// so a corrupted gradient can be detected.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check_grads(
    net: &DenseNet,
    batch: &Batch,
    grads: &GradientSet,
    n_coords: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if epsilon <= 0.0 {
        return Err(Error::config("epsilon", "must be > 0"));
    }
    if !grads.congruent(net) {
        return Err(Error::dim("gradient shapes do not match the net".to_string()));
    }

    let total: usize = net.layers.iter().map(DenseLayer::param_count).sum();
    let n = n_coords.min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, total, n).into_iter().collect();
    picked.sort_unstable();

    let mut entries = Vec::with_capacity(n);
    let mut max_rel_err: f64 = 0.0;
    let mut scratch = net.clone();
    for flat in picked {
        let coord = locate(net, flat);
        let analytic = match coord {
            (l, false, r, c) => grads.layers[l].weight.get(r, c),
            (l, true, _, c) => grads.layers[l].bias[c],
        };
        let numeric = central_difference(&mut scratch, batch, coord, epsilon)?;
        let rel_err = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
        max_rel_err = max_rel_err.max(rel_err);
        let (layer, is_bias, row, col) = coord;
        entries.push(GradCheckEntry { layer, is_bias, row, col, analytic, numeric, rel_err });
    }
    Ok(GradCheckReport { entries, max_rel_err, tolerance, passed: max_rel_err < tolerance })
}

/// Maps a flat coordinate index to (layer, is_bias, row, col).
fn locate(net: &DenseNet, mut flat: usize) -> (usize, bool, usize, usize) {
    for (l, layer) in net.layers.iter().enumerate() {
        let w = layer.weight.rows() * layer.weight.cols();
        if flat < w {
            return (l, false, flat / layer.weight.cols(), flat % layer.weight.cols());
        }
        flat -= w;
        if flat < layer.bias.len() {
            return (l, true, 0, flat);
        }
        flat -= layer.bias.len();
    }
    unreachable!("flat coordinate out of range");
}

fn central_difference(
    scratch: &mut DenseNet,
    batch: &Batch,
    coord: (usize, bool, usize, usize),
    epsilon: f64,
) -> Result<f64> {
    let read = |net: &DenseNet| match coord {
        (l, false, r, c) => net.layers[l].weight.get(r, c),
        (l, true, _, c) => net.layers[l].bias[c],
    };
    let write = |net: &mut DenseNet, v: f64| match coord {
        (l, false, r, c) => net.layers[l].weight.set(r, c, v),
        (l, true, _, c) => net.layers[l].bias[c] = v,
    };
    let orig = read(scratch);
    write(scratch, orig + epsilon);
    let plus = batch_loss(scratch, batch, None)?;
    write(scratch, orig - epsilon);
    let minus = batch_loss(scratch, batch, None)?;
    write(scratch, orig);
    Ok((plus - minus) / (2.0 * epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn random_net(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseNet {
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weight: random_matrix(w[1], w[0], rng),
                bias: (0..w[1]).map(|_| rng.random_range(-0.5..0.5)).collect(),
            })
            .collect();
        DenseNet { layers }
    }

    fn random_batch(n: usize, d_in: usize, classes: usize, rng: &mut ChaCha8Rng) -> Batch {
        Batch::new(
            random_matrix(n, d_in, rng),
            (0..n).map(|_| rng.random_range(0..classes)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_forward_identity() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = linear_forward(&x, &w, &[0.0, 0.0]).unwrap();
        assert_eq!(out.row(0), &[1.0, 2.0]);
    }

    #[test]
    fn linear_forward_arithmetic() {
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        let out = linear_forward(&x, &w, &[1.0]).unwrap();
        assert_eq!(out.get(0, 0), 6.0);
    }

    #[test]
    fn linear_forward_matches_scalar_oracle() {
        let mut r = rng(11);
        let x = random_matrix(3, 4, &mut r);
        let w = random_matrix(5, 4, &mut r);
        let b: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let out = linear_forward(&x, &w, &b).unwrap();
        // Independent scalar re-computation.
        for i in 0..3 {
            for (o, bo) in b.iter().enumerate() {
                let mut acc = *bo;
                for j in 0..4 {
                    acc += x.get(i, j) * w.get(o, j);
                }
                assert!((out.get(i, o) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_forward_shape_mismatch() {
        let x = Matrix::zeros(1, 3);
        let w = Matrix::zeros(2, 4);
        assert!(matches!(linear_forward(&x, &w, &[0.0, 0.0]), Err(Error::Dim(_))));
    }

    #[test]
    fn relu_sign_cases() {
        let x = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(relu_forward(&x).row(0), &[0.0, 0.0, 2.0]);
        let pos = Matrix::from_rows(&[vec![0.5, 3.0]]).unwrap();
        assert_eq!(relu_forward(&pos), pos);
        let neg = Matrix::from_rows(&[vec![-0.5, -3.0]]).unwrap();
        assert_eq!(relu_forward(&neg), Matrix::zeros(1, 2));
    }

    #[test]
    fn softmax_uniform_logits() {
        for s in [2usize, 5, 10] {
            let logits = Matrix::zeros(1, s);
            let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
            assert!((loss - (s as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_saturated_logits_do_not_overflow() {
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let (loss, d) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.is_finite());
        assert!(loss < 1e-10);
        assert!(d.is_finite());
        // Magnitudes up to 1e4 stay finite too.
        let big = Matrix::from_rows(&[vec![1e4, -1e4, 0.0]]).unwrap();
        let (loss, d) = softmax_xent(&big, &[1]).unwrap();
        assert!(loss.is_finite() && d.is_finite());
    }

    #[test]
    fn softmax_label_out_of_range() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(softmax_xent(&logits, &[3]), Err(Error::Index(_))));
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut r = rng(5);
        let logits = random_matrix(4, 3, &mut r);
        let labels = vec![0, 2, 1, 2];
        let (_, d) = softmax_xent(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..4 {
            for j in 0..3 {
                let mut plus = logits.clone();
                plus.set(i, j, logits.get(i, j) + eps);
                let mut minus = logits.clone();
                minus.set(i, j, logits.get(i, j) - eps);
                let (lp, _) = softmax_xent(&plus, &labels).unwrap();
                let (lm, _) = softmax_xent(&minus, &labels).unwrap();
                let numeric = (lp - lm) / (2.0 * eps);
                let analytic = d.get(i, j);
                let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
                assert!(rel < 1e-6, "rel err {rel} at ({i},{j})");
            }
        }
    }

    #[test]
    fn logistic_gradient_closed_form() {
        // Single linear layer on one sample: dW = (p - onehot) outer x.
        let mut r = rng(9);
        let net = random_net(&[4, 3], &mut r);
        let x = random_matrix(1, 4, &mut r);
        let batch = Batch::new(x.clone(), vec![1]).unwrap();
        let (_, grads) = backward(&net, &batch).unwrap();

        let logits = net.logits(&x).unwrap();
        let row = logits.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        for (o, logit) in row.iter().enumerate() {
            let p = (logit - max).exp() / z;
            let delta = p - if o == 1 { 1.0 } else { 0.0 };
            for j in 0..4 {
                let expected = delta * x.get(0, j);
                assert!((grads.layers[0].weight.get(o, j) - expected).abs() < 1e-12);
            }
            assert!((grads.layers[0].bias[o] - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng(21);
        let net = random_net(&[6, 8, 5, 4], &mut r);
        let batch = random_batch(7, 6, 4, &mut r);
        let report = finite_diff_check(&net, &batch, 20, 1e-5, 1e-4, 33).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert_eq!(report.entries.len(), 20);
    }

    #[test]
    fn duplicated_batch_same_gradients() {
        let mut r = rng(31);
        let net = random_net(&[5, 6, 3], &mut r);
        let batch = random_batch(4, 5, 3, &mut r);
        let mut doubled_inputs = Vec::new();
        let mut doubled_labels = Vec::new();
        for i in 0..batch.len() {
            doubled_inputs.push(batch.inputs.row(i).to_vec());
            doubled_labels.push(batch.labels[i]);
        }
        for i in 0..batch.len() {
            doubled_inputs.push(batch.inputs.row(i).to_vec());
            doubled_labels.push(batch.labels[i]);
        }
        let doubled =
            Batch::new(Matrix::from_rows(&doubled_inputs).unwrap(), doubled_labels).unwrap();
        let (loss_a, grads_a) = backward(&net, &batch).unwrap();
        let (loss_b, grads_b) = backward(&net, &doubled).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-12);
        for (ga, gb) in grads_a.layers.iter().zip(&grads_b.layers) {
            for (a, b) in ga.weight.data().iter().zip(gb.weight.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_zero_eta_is_identity() {
        let mut r = rng(41);
        let mut net = random_net(&[3, 4, 2], &mut r);
        let before = net.clone();
        let batch = random_batch(5, 3, 2, &mut r);
        let (_, grads) = backward(&net, &batch).unwrap();
        sgd_step(&mut net, &grads, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn sgd_arithmetic() {
        let mut net = DenseNet {
            layers: vec![DenseLayer {
                weight: Matrix::from_rows(&[vec![1.0]]).unwrap(),
                bias: vec![0.0],
            }],
        };
        let grads = GradientSet {
            layers: vec![LayerGrad {
                weight: Matrix::from_rows(&[vec![2.0]]).unwrap(),
                bias: vec![0.0],
            }],
        };
        sgd_step(&mut net, &grads, 0.5).unwrap();
        assert_eq!(net.layers[0].weight.get(0, 0), 0.0);
    }

    #[test]
    fn training_replays_bit_exact() {
        let run = || {
            let mut r = rng(77);
            let mut net = random_net(&[4, 6, 3], &mut r);
            for _ in 0..5 {
                let batch = random_batch(8, 4, 3, &mut r);
                let (_, grads) = backward(&net, &batch).unwrap();
                sgd_step(&mut net, &grads, 0.01).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn finite_diff_detects_corrupted_gradient() {
        let mut r = rng(51);
        let net = random_net(&[4, 5, 3], &mut r);
        let batch = random_batch(6, 4, 3, &mut r);
        let (_, mut grads) = backward(&net, &batch).unwrap();
        let v = grads.layers[0].weight.get(0, 0);
        grads.layers[0].weight.set(0, 0, v + 1.0);
        let total = net.param_count();
        let report =
            finite_diff_check_grads(&net, &batch, &grads, total, 1e-5, 1e-4, 1).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn finite_diff_empty_sample_is_vacuous_pass() {
        let mut r = rng(61);
        let net = random_net(&[3, 2], &mut r);
        let batch = random_batch(2, 3, 2, &mut r);
        let report = finite_diff_check(&net, &batch, 0, 1e-5, 1e-4, 1).unwrap();
        assert!(report.passed);
        assert!(report.entries.is_empty());
        assert_eq!(report.max_rel_err, 0.0);
    }

    #[test]
    fn rep_targets_gradient_matches_finite_differences() {
        let mut r = rng(71);
        let net = random_net(&[5, 7, 4], &mut r);
        let batch = random_batch(6, 5, 4, &mut r);
        let targets = RepTargets {
            lambda: 0.7,
            targets: (0..6)
                .map(|i| {
                    if i % 3 == 0 {
                        None
                    } else {
                        Some((0..7).map(|_| r.random_range(-1.0..1.0)).collect())
                    }
                })
                .collect(),
        };
        let (_, grads) = backward_with_targets(&net, &batch, Some(&targets)).unwrap();
        // Finite differences on the penalized loss at every coordinate.
        let mut scratch = net.clone();
        let total = net.param_count();
        for flat in 0..total {
            let coord = locate(&net, flat);
            let analytic = match coord {
                (l, false, rr, c) => grads.layers[l].weight.get(rr, c),
                (l, true, _, c) => grads.layers[l].bias[c],
            };
            let read = |n: &DenseNet| match coord {
                (l, false, rr, c) => n.layers[l].weight.get(rr, c),
                (l, true, _, c) => n.layers[l].bias[c],
            };
            let orig = read(&scratch);
            let eps = 1e-5;
            match coord {
                (l, false, rr, c) => scratch.layers[l].weight.set(rr, c, orig + eps),
                (l, true, _, c) => scratch.layers[l].bias[c] = orig + eps,
            }
            let plus = batch_loss(&scratch, &batch, Some(&targets)).unwrap();
            match coord {
                (l, false, rr, c) => scratch.layers[l].weight.set(rr, c, orig - eps),
                (l, true, _, c) => scratch.layers[l].bias[c] = orig - eps,
            }
            let minus = batch_loss(&scratch, &batch, Some(&targets)).unwrap();
            match coord {
                (l, false, rr, c) => scratch.layers[l].weight.set(rr, c, orig),
                (l, true, _, c) => scratch.layers[l].bias[c] = orig,
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            assert!(rel < 1e-4, "rel err {rel} at {coord:?}");
        }
    }

    #[test]
    fn kernel_ops_are_deterministic() {
        let mut r = rng(81);
        let x = random_matrix(4, 4, &mut r);
        let w = random_matrix(3, 4, &mut r);
        let b: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = linear_forward(&x, &w, &b).unwrap();
        let bb = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(a, bb);
        assert_eq!(relu_forward(&a), relu_forward(&a));
    }
}
