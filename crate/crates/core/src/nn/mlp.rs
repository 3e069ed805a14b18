use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::matrix::{gemm, Matrix, Trans};
use crate::rng::seeded;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu => {
                if v > 0.0 {
                    v
                } else {
                    LEAKY_RELU_SLOPE * v
                }
            }
        }
    }

    /// Derivative expressed through the activation's output (sign-preserving
    /// for both kinds).
    #[inline]
    fn slope_at_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if out > 0.0 {
                    1.0
                } else {
                    LEAKY_RELU_SLOPE
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_widths: Vec<usize>,
        output_dim: usize,
        activation: Activation,
    ) -> Result<Self> {
        let spec = Self {
            input_dim,
            hidden_widths,
            output_dim,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("MLP input and output widths must be >= 1"));
        }
        if self.hidden_widths.is_empty() {
            return Err(Error::config("MLP needs at least one hidden layer"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("MLP hidden widths must be >= 1"));
        }
        Ok(())
    }

    /// `(in, out)` of every affine layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_widths.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_widths);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Σ (in·out + out) over layers.
    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Dense feedforward network. Layer `i` computes `a · W_i + b_i` with
/// `W_i` stored `in_i x out_i`; hidden layers are followed by the activation,
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRecord", into = "MlpRecord")]
pub struct MlpModel {
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Serialized layout: flattened row-major weights per layer.
#[derive(Serialize, Deserialize)]
struct MlpRecord {
    spec: MlpSpec,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<MlpModel> for MlpRecord {
    fn from(m: MlpModel) -> Self {
        Self {
            spec: m.spec,
            weights: m.weights.into_iter().map(Matrix::into_data).collect(),
            biases: m.biases,
        }
    }
}

impl TryFrom<MlpRecord> for MlpModel {
    type Error = Error;

    fn try_from(r: MlpRecord) -> Result<Self> {
        r.spec.validate()?;
        let shapes = r.spec.layer_shapes();
        check_dim("model file layers", shapes.len(), r.weights.len())?;
        let weights = shapes
            .iter()
            .zip(r.weights)
            .map(|(&(i, o), w)| Matrix::from_vec(i, o, w))
            .collect::<Result<Vec<_>>>()?;
        MlpModel::from_parts(r.spec, weights, r.biases)
    }
}

/// Parameter-shaped gradient (or any other parameter-shaped quantity).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Layer inputs retained by [`MlpModel::forward_cached`] for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `layer_inputs[i]` is the input of affine layer `i`.
    layer_inputs: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn into_output(self) -> Matrix {
        self.output
    }
}

impl MlpModel {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero biases.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_shapes() {
            let std = (2.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    n * std
                })
                .collect();
            weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    /// All-zero parameters.
    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let (weights, biases) = spec
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| (Matrix::zeros(i, o), vec![0.0; o]))
            .unzip();
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn from_parts(spec: MlpSpec, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.layer_shapes();
        check_dim("MlpModel layers", shapes.len(), weights.len())?;
        check_dim("MlpModel biases", shapes.len(), biases.len())?;
        for ((i, o), (w, b)) in shapes.iter().zip(weights.iter().zip(&biases)) {
            check_dim("MlpModel weight rows", *i, w.rows())?;
            check_dim("MlpModel weight cols", *o, w.cols())?;
            check_dim("MlpModel bias", *o, b.len())?;
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data().len()).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Mutable views of every parameter tensor, in a fixed order matching
    /// [`Gradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    fn affine(&self, layer: usize, input: &Matrix) -> Matrix {
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        let mut out = Matrix::zeros(input.rows(), w.cols());
        gemm(1.0, input, Trans::No, w, Trans::No, 0.0, &mut out);
        if out.cols() > 0 {
            for row in out.data_mut().chunks_exact_mut(w.cols()) {
                for (v, bias) in row.iter_mut().zip(b) {
                    *v += bias;
                }
            }
        }
        out
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        check_dim("mlp_forward input width", self.spec.input_dim, batch.cols())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.output)
    }

    /// Forward pass keeping every layer input for [`MlpModel::backward`].
    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        self.check_input(batch)?;
        let last = self.weights.len() - 1;
        let act = self.spec.activation;
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut current = batch.clone();
        for layer in 0..=last {
            let mut out = self.affine(layer, &current);
            if layer < last {
                for v in out.data_mut() {
                    *v = act.apply(*v);
                }
            }
            out.ensure_finite(|| format!("MLP activations of layer {layer}"))?;
            layer_inputs.push(current);
            current = out;
        }
        Ok(ForwardCache {
            layer_inputs,
            output: current,
        })
    }

    /// Reverse pass. Returns the gradient w.r.t. the batch input when
    /// `want_input_grad` is set, plus parameter gradients.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &Matrix,
        want_input_grad: bool,
    ) -> Result<(Option<Matrix>, Gradients)> {
        check_dim("mlp backward rows", cache.output.rows(), grad_output.rows())?;
        check_dim("mlp backward cols", self.spec.output_dim, grad_output.cols())?;
        let act = self.spec.activation;
        let n_layers = self.weights.len();
        let mut grad_w = Vec::with_capacity(n_layers);
        let mut grad_b = Vec::with_capacity(n_layers);
        let mut g = grad_output.clone();
        let mut input_grad = None;
        for layer in (0..n_layers).rev() {
            let a = &cache.layer_inputs[layer];
            let w = &self.weights[layer];
            let mut gw = Matrix::zeros(w.rows(), w.cols());
            gemm(1.0, a, Trans::Yes, &g, Trans::No, 0.0, &mut gw);
            let mut gb = vec![0.0; w.cols()];
            for row in g.row_iter() {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            grad_w.push(gw);
            grad_b.push(gb);

            if layer > 0 || want_input_grad {
                let mut prev = Matrix::zeros(g.rows(), w.rows());
                gemm(1.0, &g, Trans::No, w, Trans::Yes, 0.0, &mut prev);
                if layer > 0 {
                    for (d, &out) in prev.data_mut().iter_mut().zip(a.data()) {
                        *d *= act.slope_at_output(out);
                    }
                    g = prev;
                } else {
                    input_grad = Some(prev);
                }
            }
        }
        grad_w.reverse();
        grad_b.reverse();
        Ok((
            input_grad,
            Gradients {
                weights: grad_w,
                biases: grad_b,
            },
        ))
    }

    /// Mean over the batch of the squared L2 residual norm, and its gradient.
    pub fn loss_and_grad(&self, batch: &Matrix, targets: &Matrix) -> Result<(f64, Gradients)> {
        check_dim("loss targets width", self.spec.output_dim, targets.cols())?;
        check_dim("loss targets rows", batch.rows(), targets.rows())?;
        let cache = self.forward_cached(batch)?;
        let (loss, grad_out) = mse_rows(cache.output(), targets)?;
        let (_, grads) = self.backward(&cache, &grad_out, false)?;
        Ok((loss, grads))
    }
}

/// `mean_i ||pred_i - target_i||^2` and its gradient w.r.t. `pred`.
pub fn mse_rows(pred: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    pred.check_same_shape("mse_rows", targets)?;
    let n = pred.rows().max(1) as f64;
    let residual = pred.sub(targets)?;
    let loss = residual.data().iter().map(|r| r * r).sum::<f64>() / n;
    if !loss.is_finite() {
        return Err(Error::numeric("mean squared loss"));
    }
    Ok((loss, residual.scale(2.0 / n)))
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.weights.len() * 2);
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .into_iter()
            .flat_map(|s| s.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(input: usize, hidden: &[usize], output: usize, act: Activation) -> MlpSpec {
        MlpSpec::new(input, hidden.to_vec(), output, act).unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let m = MlpModel::zeros(spec(3, &[4], 2, Activation::Relu)).unwrap();
        let x = Matrix::from_fn(5, 3, |r, c| r as f64 - c as f64);
        assert_eq!(m.forward(&x).unwrap(), Matrix::zeros(5, 2));
    }

    #[test]
    fn identity_affine_layer_is_identity() {
        let s = spec(2, &[2], 2, Activation::LeakyRelu);
        let m = MlpModel::from_parts(
            s,
            vec![Matrix::identity(2), Matrix::identity(2)],
            vec![vec![0.0; 2], vec![0.0; 2]],
        )
        .unwrap();
        let x = Matrix::from_vec(1, 2, vec![0.3, -0.7]).unwrap();
        assert_eq!(m.affine(0, &x).data(), &[0.3, -0.7]);
        // through the activation the negative coordinate is damped by the slope
        let y = m.forward(&x).unwrap();
        assert_eq!(y.get(0, 0), 0.3);
        assert!((y.get(0, 1) - (-0.007)).abs() < 1e-15);
    }

    #[test]
    fn leaky_relu_negative_branch() {
        let s = spec(1, &[1], 1, Activation::LeakyRelu);
        let one = Matrix::filled(1, 1, 1.0);
        let m = MlpModel::from_parts(s, vec![one.clone(), one], vec![vec![0.0], vec![0.0]]).unwrap();
        let y = m.forward(&Matrix::filled(1, 1, -1.0)).unwrap();
        assert!((y.get(0, 0) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let m = MlpModel::zeros(spec(3, &[4], 2, Activation::Relu)).unwrap();
        assert!(matches!(
            m.forward(&Matrix::zeros(1, 2)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn perfect_targets_give_zero_loss_and_gradient() {
        let m = MlpModel::init(spec(3, &[5, 4], 2, Activation::LeakyRelu), 3).unwrap();
        let x = Matrix::from_fn(6, 3, |r, c| (r as f64 * 0.7 - c as f64 * 0.4).sin());
        let y = m.forward(&x).unwrap();
        let (loss, g) = m.loss_and_grad(&x, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let s = spec(1, &[1], 1, Activation::Relu);
        let big = Matrix::filled(1, 1, f64::MAX);
        let m = MlpModel::from_parts(s, vec![big.clone(), big], vec![vec![0.0], vec![0.0]]).unwrap();
        let err = m.forward(&Matrix::filled(1, 1, 10.0)).unwrap_err();
        assert!(err.to_string().contains("layer 0"), "{err}");
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(0, vec![2], 1, Activation::Relu).is_err());
        assert!(MlpSpec::new(1, vec![], 1, Activation::Relu).is_err());
        assert!(MlpSpec::new(1, vec![0], 1, Activation::Relu).is_err());
    }

    #[test]
    fn param_count_formula() {
        let s = spec(16, &[256, 256, 256], 15, Activation::LeakyRelu);
        let expected = 16 * 256 + 256 + 2 * (256 * 256 + 256) + 256 * 15 + 15;
        assert_eq!(s.param_count(), expected);
        assert_eq!(MlpModel::init(s, 0).unwrap().param_count(), expected);
    }
}
