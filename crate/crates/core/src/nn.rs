//! Dense multilayer perceptrons with explicit forward traces, backprop,
//! plain SGD, the Huber loss, and a central-difference gradient checker.
//!
//! Every model in the system (client encoders and the server head) is an
//! [`MlpModel`]; the server's `input_gradient` is what gets sliced and sent
//! back down to clients.

use std::fmt::Write as _;

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("layer sizes must all be ≥ 1 and at least two are required, got {0:?}")]
    BadSpec(Vec<usize>),
    #[error("expected input width {expected}, got {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("forward trace does not match this model or gradient shape")]
    TraceMismatch,
    #[error("gradient bundle does not match model shapes")]
    GradientShape,
    #[error("non-finite gradient in layer {0}")]
    NonFiniteGradient(usize),
    #[error("huber delta must be > 0, got {0}")]
    BadDelta(f64),
    #[error("prediction length {pred} differs from target length {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("learning rate must be finite and ≥ 0, got {0}")]
    BadLearningRate(f64),
    #[error("model text line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

/// Layer widths from input to output. Hidden layers use `hidden_activation`,
/// the output layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub hidden_activation: Activation,
}

impl MlpSpec {
    pub fn relu(sizes: Vec<usize>) -> Self {
        Self {
            sizes,
            hidden_activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// out × in
    pub weights: Matrix,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layers: Vec<Layer>,
}

/// Inputs and pre-activations of every layer for one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<LayerGradient>,
    /// dL/d(input), batch × input_dim
    pub input_gradient: Matrix,
}

impl GradientBundle {
    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.as_slice().iter().all(|&v| v == 0.0) && l.biases.iter().all(|&v| v == 0.0)
        }) && self.input_gradient.as_slice().iter().all(|&v| v == 0.0)
    }
}

pub fn init_model(spec: &MlpSpec, seed: u64) -> Result<MlpModel> {
    let mut rng = SimRng::seed_from_u64(seed);
    init_model_with(spec, &mut rng)
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases.
pub fn init_model_with<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Result<MlpModel> {
    if spec.sizes.len() < 2 || spec.sizes.contains(&0) {
        return Err(NnError::BadSpec(spec.sizes.clone()));
    }
    let n = spec.sizes.len() - 1;
    let layers = spec
        .sizes
        .windows(2)
        .enumerate()
        .map(|(t, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            Layer {
                weights: Matrix::from_vec(fan_out, fan_in, data),
                biases: vec![0.0; fan_out],
                activation: if t + 1 == n {
                    Activation::Identity
                } else {
                    spec.hidden_activation
                },
            }
        })
        .collect();
    Ok(MlpModel { layers })
}

impl MlpModel {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(NnError::BadSpec(vec![]));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::ShapeMismatch {
                    expected: pair[0].out_dim(),
                    found: pair[1].in_dim(),
                });
            }
        }
        for l in &layers {
            if l.biases.len() != l.out_dim() || l.in_dim() == 0 || l.out_dim() == 0 {
                return Err(NnError::BadSpec(vec![l.in_dim(), l.out_dim()]));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.biases.len())
            .sum()
    }

    /// Parameter storage in bytes (f64).
    pub fn memory_bytes(&self) -> usize {
        self.num_params() * std::mem::size_of::<f64>()
    }

    /// All parameters, layer by layer, weights row-major then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.biases);
        }
        out
    }

    fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            if index < nw {
                return &mut l.weights.as_mut_slice()[index];
            }
            index -= nw;
            if index < l.biases.len() {
                return &mut l.biases[index];
            }
            index -= l.biases.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.biases.iter().all(|b| b.is_finite()))
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut a = batch.clone();
        for l in &self.layers {
            let mut z = a.matmul_transposed(&l.weights);
            add_bias_and_activate(&mut z, l);
            a = z;
        }
        Ok(a)
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut a = batch.clone();
        for l in &self.layers {
            let mut z = a.matmul_transposed(&l.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&l.biases) {
                    *v += b;
                }
            }
            let mut next = z.clone();
            if l.activation != Activation::Identity {
                for v in next.as_mut_slice() {
                    *v = l.activation.apply(*v);
                }
            }
            inputs.push(std::mem::replace(&mut a, next));
            pre_activations.push(z);
        }
        Ok((
            a,
            ForwardTrace {
                inputs,
                pre_activations,
            },
        ))
    }

    pub fn backward(&self, trace: &ForwardTrace, output_gradient: &Matrix) -> Result<GradientBundle> {
        if trace.inputs.len() != self.layers.len() {
            return Err(NnError::TraceMismatch);
        }
        let batch = trace.batch_size();
        for (l, (inp, pre)) in self
            .layers
            .iter()
            .zip(trace.inputs.iter().zip(&trace.pre_activations))
        {
            if inp.shape() != (batch, l.in_dim()) || pre.shape() != (batch, l.out_dim()) {
                return Err(NnError::TraceMismatch);
            }
        }
        if output_gradient.shape() != (batch, self.output_dim()) {
            return Err(NnError::TraceMismatch);
        }

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = output_gradient.clone();
        for (t, l) in self.layers.iter().enumerate().rev() {
            if l.activation != Activation::Identity {
                for (d, &z) in delta
                    .as_mut_slice()
                    .iter_mut()
                    .zip(trace.pre_activations[t].as_slice())
                {
                    *d *= l.activation.derivative(z);
                }
            }
            let weights = delta.transpose_matmul(&trace.inputs[t]);
            let mut biases = vec![0.0; l.out_dim()];
            for r in 0..batch {
                for (b, d) in biases.iter_mut().zip(delta.row(r)) {
                    *b += d;
                }
            }
            let upstream = delta.matmul(&l.weights);
            grads.push(LayerGradient { weights, biases });
            delta = upstream;
        }
        grads.reverse();
        Ok(GradientBundle {
            layers: grads,
            input_gradient: delta,
        })
    }

    /// `θ ← θ − lr·g`. Rejects non-finite gradients before touching any parameter.
    pub fn sgd_step(&mut self, grads: &GradientBundle, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(NnError::BadLearningRate(lr));
        }
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::GradientShape);
        }
        for (t, (l, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if g.weights.shape() != l.weights.shape() || g.biases.len() != l.biases.len() {
                return Err(NnError::GradientShape);
            }
            if !g.weights.is_finite() || g.biases.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(t));
            }
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                *w -= lr * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.input_dim(),
                found: batch.cols(),
            });
        }
        Ok(())
    }

    /// Line-oriented text dump:
    ///
    /// ```text
    /// relvfl-mlp 1
    /// layers <count>
    /// layer <out> <in> <relu|identity>
    /// w <in values>        (one line per output row)
    /// b <out values>
    /// ```
    ///
    /// Numbers use Rust's shortest round-trip `f64` formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "relvfl-mlp 1").unwrap();
        writeln!(s, "layers {}", self.layers.len()).unwrap();
        for l in &self.layers {
            writeln!(s, "layer {} {} {}", l.out_dim(), l.in_dim(), l.activation.name()).unwrap();
            for r in 0..l.out_dim() {
                s.push('w');
                for v in l.weights.row(r) {
                    write!(s, " {v:?}").unwrap();
                }
                s.push('\n');
            }
            s.push('b');
            for v in &l.biases {
                write!(s, " {v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: &str| NnError::Parse {
            line,
            msg: msg.to_owned(),
        };
        let mut next = |what: &str| lines.next().ok_or_else(|| err(0, &format!("missing {what}")));

        let (n, head) = next("header")?;
        if head.trim() != "relvfl-mlp 1" {
            return Err(err(n, "unknown header or version"));
        }
        let (n, count) = next("layer count")?;
        let count: usize = count
            .strip_prefix("layers ")
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| err(n, "bad layer count"))?;
        let mut layers = Vec::with_capacity(count);
        for _ in 0..count {
            let (n, line) = next("layer")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "layer" {
                return Err(err(n, "bad layer line"));
            }
            let out: usize = parts[1].parse().map_err(|_| err(n, "bad out dim"))?;
            let inp: usize = parts[2].parse().map_err(|_| err(n, "bad in dim"))?;
            let activation = match parts[3] {
                "relu" => Activation::Relu,
                "identity" => Activation::Identity,
                _ => return Err(err(n, "unknown activation")),
            };
            let mut data = Vec::with_capacity(out * inp);
            for _ in 0..out {
                let (n, row) = next("weight row")?;
                let vals = parse_values(row, 'w', inp).ok_or_else(|| err(n, "bad weight row"))?;
                data.extend(vals);
            }
            let (n, row) = next("bias row")?;
            let biases = parse_values(row, 'b', out).ok_or_else(|| err(n, "bad bias row"))?;
            layers.push(Layer {
                weights: Matrix::from_vec(out, inp, data),
                biases,
                activation,
            });
        }
        Self::from_layers(layers)
    }
}

fn parse_values(line: &str, tag: char, expected: usize) -> Option<Vec<f64>> {
    let rest = line.strip_prefix(tag)?;
    let vals: Vec<f64> = rest
        .split_whitespace()
        .map(|t| t.parse::<f64>().ok())
        .collect::<Option<_>>()?;
    (vals.len() == expected).then_some(vals)
}

fn add_bias_and_activate(z: &mut Matrix, l: &Layer) {
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&l.biases) {
            *v = l.activation.apply(*v + b);
        }
    }
}

/// Mean Huber loss and its gradient with respect to `pred`.
pub fn huber(pred: &[f64], target: &[f64], delta: f64) -> Result<(f64, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(NnError::BadDelta(delta));
    }
    if pred.len() != target.len() {
        return Err(NnError::LengthMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let r = p - t;
            if r.abs() <= delta {
                loss += 0.5 * r * r;
                r / n
            } else {
                loss += delta * (r.abs() - 0.5 * delta);
                delta * r.signum() / n
            }
        })
        .collect();
    Ok((loss / n, grad))
}

/// Huber loss of the model's output on a batch, without gradients.
pub fn batch_loss(model: &MlpModel, batch: &Matrix, targets: &[f64], delta: f64) -> Result<f64> {
    let out = model.predict(batch)?;
    Ok(huber(out.as_slice(), targets, delta)?.0)
}

/// Analytic gradient of mean Huber loss through the model, flattened like
/// [`MlpModel::parameters`].
pub fn loss_gradient(
    model: &MlpModel,
    batch: &Matrix,
    targets: &[f64],
    delta: f64,
) -> Result<(f64, GradientBundle)> {
    let (out, trace) = model.forward(batch)?;
    let (loss, g) = huber(out.as_slice(), targets, delta)?;
    let g = Matrix::from_vec(out.rows(), out.cols(), g);
    Ok((loss, model.backward(&trace, &g)?))
}

pub fn flatten_gradients(grads: &GradientBundle) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &grads.layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.biases);
    }
    out
}

const FD_STEP: f64 = 1e-5;
const GRAD_FLOOR: f64 = 1e-8;

/// Maximum relative error `|a − n| / (|a| + |n|)` between backprop and central
/// differences (step 1e-5) over parameters where `|a| + |n| > 1e-8`.
pub fn grad_check(model: &MlpModel, batch: &Matrix, targets: &[f64], delta: f64) -> Result<f64> {
    grad_check_impl(model, batch, targets, delta, false)
}

/// Same as [`grad_check`] with the analytic gradient negated; used to show the
/// checker detects a broken backward pass.
pub fn grad_check_sign_flipped(
    model: &MlpModel,
    batch: &Matrix,
    targets: &[f64],
    delta: f64,
) -> Result<f64> {
    grad_check_impl(model, batch, targets, delta, true)
}

fn grad_check_impl(
    model: &MlpModel,
    batch: &Matrix,
    targets: &[f64],
    delta: f64,
    flip: bool,
) -> Result<f64> {
    let (_, grads) = loss_gradient(model, batch, targets, delta)?;
    let analytic = flatten_gradients(&grads);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let a = if flip { -a } else { a };
        let orig = *probe.parameter_mut(i);
        *probe.parameter_mut(i) = orig + FD_STEP;
        let up = batch_loss(&probe, batch, targets, delta)?;
        *probe.parameter_mut(i) = orig - FD_STEP;
        let down = batch_loss(&probe, batch, targets, delta)?;
        *probe.parameter_mut(i) = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let scale = a.abs() + numeric.abs();
        if scale > GRAD_FLOOR {
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = SimRng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    /// Straight-line reference forward pass written independently of `forward`.
    fn naive_forward(model: &MlpModel, x: &Matrix) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).to_vec()).collect();
        for l in model.layers() {
            rows = rows
                .iter()
                .map(|a| {
                    (0..l.out_dim())
                        .map(|o| {
                            let mut s = l.biases[o];
                            for i in 0..l.in_dim() {
                                s += l.weights[(o, i)] * a[i];
                            }
                            match l.activation {
                                Activation::Relu => {
                                    if s > 0.0 {
                                        s
                                    } else {
                                        0.0
                                    }
                                }
                                Activation::Identity => s,
                            }
                        })
                        .collect()
                })
                .collect();
        }
        rows
    }

    #[test]
    fn init_shapes_and_determinism() {
        let spec = MlpSpec::relu(vec![3, 4, 2]);
        let m = init_model(&spec, 11).unwrap();
        assert_eq!(m.layers()[0].weights.shape(), (4, 3));
        assert_eq!(m.layers()[1].weights.shape(), (2, 4));
        assert_eq!(m.layers()[0].biases.len(), 4);
        assert_eq!(m.layers()[1].biases.len(), 2);
        assert_eq!(m.layers()[0].activation, Activation::Relu);
        assert_eq!(m.layers()[1].activation, Activation::Identity);
        assert_eq!(m, init_model(&spec, 11).unwrap());
        let bound = 1.0 / 3f64.sqrt();
        assert!(m.layers()[0].weights.as_slice().iter().all(|w| w.abs() < bound));
        assert!(init_model(&MlpSpec::relu(vec![3, 0, 2]), 1).is_err());
        assert!(init_model(&MlpSpec::relu(vec![3]), 1).is_err());
    }

    #[test]
    fn identity_and_zero_layers() {
        let id = MlpModel::from_layers(vec![Layer {
            weights: Matrix::identity(3),
            biases: vec![0.0; 3],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = random_batch(4, 3, 1);
        assert_eq!(id.forward(&x).unwrap().0, x);

        let zero = MlpModel::from_layers(vec![Layer {
            weights: Matrix::zeros(2, 3),
            biases: vec![0.0; 2],
            activation: Activation::Relu,
        }])
        .unwrap();
        assert!(zero.forward(&x).unwrap().0.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(
            zero.forward(&Matrix::zeros(1, 2)),
            Err(NnError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let m = init_model(&MlpSpec::relu(vec![5, 7, 3]), 4).unwrap();
        let x = random_batch(6, 5, 9);
        let (out, _) = m.forward(&x).unwrap();
        let reference = naive_forward(&m, &x);
        for r in 0..6 {
            for c in 0..3 {
                assert!((out[(r, c)] - reference[r][c]).abs() < 1e-12);
            }
        }
        assert_eq!(m.predict(&x).unwrap(), out);
    }

    #[test]
    fn backward_zero_gradient() {
        let m = init_model(&MlpSpec::relu(vec![4, 5, 2]), 2).unwrap();
        let x = random_batch(3, 4, 2);
        let (_, trace) = m.forward(&x).unwrap();
        let g = m.backward(&trace, &Matrix::zeros(3, 2)).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn backward_single_linear_layer_hand_values() {
        // L = sum(output) for y = W x + b on a 2×2 layer
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let m = MlpModel::from_layers(vec![Layer {
            weights: w,
            biases: vec![0.5, -0.5],
            activation: Activation::Identity,
        }])
        .unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -1.0], vec![2.0, 3.0]]);
        let (_, trace) = m.forward(&x).unwrap();
        let ones = Matrix::from_vec(2, 2, vec![1.0; 4]);
        let g = m.backward(&trace, &ones).unwrap();
        // dW[o][i] = Σ_batch x[i]: column sums (3, 2) for each output row
        assert_eq!(g.layers[0].weights.as_slice(), &[3.0, 2.0, 3.0, 2.0]);
        assert_eq!(g.layers[0].biases, vec![2.0, 2.0]);
        // input gradient = Wᵀ·1 = (4, 6) per sample
        assert_eq!(g.input_gradient.as_slice(), &[4.0, 6.0, 4.0, 6.0]);
    }

    #[test]
    fn stale_trace_rejected() {
        let a = init_model(&MlpSpec::relu(vec![3, 4, 1]), 1).unwrap();
        let b = init_model(&MlpSpec::relu(vec![3, 5, 1]), 1).unwrap();
        let (_, trace) = a.forward(&random_batch(2, 3, 1)).unwrap();
        assert_eq!(
            b.backward(&trace, &Matrix::zeros(2, 1)),
            Err(NnError::TraceMismatch)
        );
        assert_eq!(
            a.backward(&trace, &Matrix::zeros(3, 1)),
            Err(NnError::TraceMismatch)
        );
    }

    fn scalar_model(w: f64) -> MlpModel {
        MlpModel::from_layers(vec![Layer {
            weights: Matrix::from_vec(1, 1, vec![w]),
            biases: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    fn scalar_grad(g: f64) -> GradientBundle {
        GradientBundle {
            layers: vec![LayerGradient {
                weights: Matrix::from_vec(1, 1, vec![g]),
                biases: vec![0.0],
            }],
            input_gradient: Matrix::zeros(1, 1),
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let mut m = scalar_model(1.0);
        m.sgd_step(&scalar_grad(2.0), 0.1).unwrap();
        assert!((m.layers()[0].weights[(0, 0)] - 0.8).abs() < 1e-15);

        let before = m.clone();
        m.sgd_step(&scalar_grad(5.0), 0.0).unwrap();
        assert_eq!(m, before);

        let mut twice = scalar_model(1.0);
        twice.sgd_step(&scalar_grad(0.5), 0.1).unwrap();
        twice.sgd_step(&scalar_grad(0.25), 0.1).unwrap();
        let mut once = scalar_model(1.0);
        once.sgd_step(&scalar_grad(0.75), 0.1).unwrap();
        assert!((twice.layers()[0].weights[(0, 0)] - once.layers()[0].weights[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_without_mutation() {
        let mut m = scalar_model(1.0);
        let before = m.clone();
        assert_eq!(
            m.sgd_step(&scalar_grad(f64::NAN), 0.1),
            Err(NnError::NonFiniteGradient(0))
        );
        assert_eq!(m, before);
    }

    #[test]
    fn huber_branches() {
        let (l, g) = huber(&[1.0], &[1.0], 1.0).unwrap();
        assert_eq!((l, g[0]), (0.0, 0.0));
        let (l, g) = huber(&[0.5], &[0.0], 1.0).unwrap();
        assert!((l - 0.125).abs() < 1e-12 && (g[0] - 0.5).abs() < 1e-12);
        let (l, g) = huber(&[2.0], &[0.0], 1.0).unwrap();
        assert!((l - 1.5).abs() < 1e-12 && (g[0] - 1.0).abs() < 1e-12);
        let (_, g) = huber(&[-2.0], &[0.0], 1.0).unwrap();
        assert_eq!(g[0], -1.0);
        assert_eq!(huber(&[0.0], &[0.0], 0.0), Err(NnError::BadDelta(0.0)));
        assert!(huber(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn huber_mean_reduction() {
        let (l, g) = huber(&[0.5, 2.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((l - (0.125 + 1.5) / 2.0).abs() < 1e-12);
        assert_eq!(g, vec![0.25, 0.5]);
    }

    #[test]
    fn huber_gradient_continuous_at_delta() {
        for delta in [0.3, 1.0, 2.5] {
            let eps = 1e-9;
            let lo = huber(&[delta * (1.0 - eps)], &[0.0], delta).unwrap();
            let hi = huber(&[delta * (1.0 + eps)], &[0.0], delta).unwrap();
            // the quadratic side moves by δ·ε over the probe interval; the
            // one-sided limits themselves coincide at δ
            assert!((lo.1[0] - hi.1[0]).abs() <= delta * eps + 1e-12);
            assert_eq!(hi.1[0], delta);
            let at = huber(&[delta], &[0.0], delta).unwrap();
            assert!((at.1[0] - hi.1[0]).abs() < 1e-12);
            assert!((lo.0 - hi.0).abs() <= 2.0 * delta * delta * eps + 1e-12);
        }
    }

    #[test]
    fn grad_check_linear_scalar() {
        let m = scalar_model(0.7);
        let x = Matrix::from_vec(3, 1, vec![0.2, -0.4, 0.9]);
        let err = grad_check(&m, &x, &[0.1, 0.5, -0.3], 1.0).unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_relu_stack() {
        let m = init_model(&MlpSpec::relu(vec![5, 8, 4, 1]), 21).unwrap();
        let x = random_batch(16, 5, 22);
        let t: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let err = grad_check(&m, &x, &t, 1.0).unwrap();
        assert!(err < 1e-4, "{err}");
        let flipped = grad_check_sign_flipped(&m, &x, &t, 1.0).unwrap();
        assert!(flipped > 1e-1, "{flipped}");
    }

    #[test]
    fn small_sgd_step_reduces_loss() {
        for seed in 0..10 {
            let m = init_model(&MlpSpec::relu(vec![4, 6, 1]), seed).unwrap();
            let x = random_batch(12, 4, seed + 100);
            let t: Vec<f64> = (0..12).map(|i| i as f64 / 6.0 - 1.0).collect();
            let (before, g) = loss_gradient(&m, &x, &t, 1.0).unwrap();
            let mut stepped = m.clone();
            stepped.sgd_step(&g, 1e-4).unwrap();
            let after = batch_loss(&stepped, &x, &t, 1.0).unwrap();
            assert!(after < before, "seed {seed}: {after} !< {before}");
        }
    }

    #[test]
    fn text_dump_rejects_garbage() {
        assert!(MlpModel::from_text("nope").is_err());
        let m = init_model(&MlpSpec::relu(vec![2, 3, 1]), 5).unwrap();
        let text = m.to_text();
        let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
        assert!(MlpModel::from_text(&truncated).is_err());
    }

    proptest! {
        #[test]
        fn text_dump_round_trips(sizes in proptest::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let m = init_model(&MlpSpec::relu(sizes), seed).unwrap();
            let back = MlpModel::from_text(&m.to_text()).unwrap();
            prop_assert_eq!(back, m);
        }

        #[test]
        fn forward_is_pure(seed in any::<u64>()) {
            let m = init_model(&MlpSpec::relu(vec![3, 4, 2]), seed).unwrap();
            let x = random_batch(5, 3, seed ^ 1);
            let snapshot = m.clone();
            let a = m.forward(&x).unwrap().0;
            let b = m.forward(&x).unwrap().0;
            prop_assert_eq!(a, b);
            prop_assert_eq!(m, snapshot);
        }
    }
}
