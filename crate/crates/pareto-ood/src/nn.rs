//! Dense feedforward networks with reverse-mode gradients.
//!
//! The model family is deliberately fixed: an MLP with per-hidden-layer
//! activations, a linear output layer, and a flat `Vec<f64>` parameter
//! vector. The last layer plays the role of the classifier `w`, everything
//! before it the featurizer `phi`. All math is 64-bit; the downstream
//! balancing step works with objective weights spanning twelve orders of
//! magnitude and would lose the signal in single precision.
//!
//! Gradients are computed by explicit backpropagation seeded with
//! per-sample output sensitivities, which lets the objective layer reuse
//! the same machinery for losses whose seeds are not plain residuals
//! (penalty gradients need `d/dtheta [l'(f) * f]`).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Logistic,
}

impl LossKind {
    /// Per-sample loss l(yhat, y).
    pub fn loss(self, yhat: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => 0.5 * (yhat - y) * (yhat - y),
            // log(1 + exp(-yhat*y)) evaluated stably.
            LossKind::Logistic => {
                let z = yhat * y;
                (-z).max(0.0) + (-z.abs()).exp().ln_1p()
            }
        }
    }

    /// dl/dyhat.
    pub fn dloss(self, yhat: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => yhat - y,
            LossKind::Logistic => {
                let z = yhat * y;
                -y * sigmoid(-z)
            }
        }
    }

    /// d2l/dyhat2 (needed by the penalty gradient chain).
    pub fn d2loss(self, yhat: f64, y: f64) -> f64 {
        match self {
            LossKind::Mse => 1.0,
            LossKind::Logistic => {
                let z = yhat * y;
                sigmoid(z) * sigmoid(-z)
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which slice of the parameter vector an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradScope {
    Full,
    /// Only the output layer's parameters; the cheap proxy for whole-network
    /// gradients when solving for objective weights.
    ClassifierOnly,
    /// Featurizer untouched after pretraining; gradient-wise identical to
    /// `ClassifierOnly` for this fixed topology.
    FeaturizerFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradRequest {
    pub scope: GradScope,
    pub loss_kind: LossKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSpan {
    weight: usize,
    bias: usize,
    end: usize,
    in_dim: usize,
    out_dim: usize,
}

/// A dense MLP with a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseNet {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
    params: Vec<f64>,
}

/// Per-layer post-activation outputs from a cached forward pass.
pub struct ForwardCache {
    /// `outputs[l]` is the output of layer `l` (post-activation), n x dims[l+1].
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn predictions(&self) -> &Matrix {
        self.outputs.last().expect("at least one layer")
    }
}

impl DenseNet {
    /// Seeded uniform(-s, s) initialization with s = 1/sqrt(fan_in).
    pub fn seeded(layer_dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        let mut net = DenseNet::with_params(
            layer_dims,
            activations,
            vec![0.0; param_count(layer_dims)?],
        )?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for span in net.layer_spans() {
            let s = 1.0 / (span.in_dim as f64).sqrt();
            for p in &mut net.params[span.weight..span.end] {
                *p = rng.random_range(-s..s);
            }
        }
        Ok(net)
    }

    pub fn with_params(
        layer_dims: &[usize],
        activations: &[Activation],
        params: Vec<f64>,
    ) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::InvalidSpec(
                "layer_dims needs an input and an output width".into(),
            ));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidSpec("zero-width layer".into()));
        }
        let hidden = layer_dims.len() - 2;
        if activations.len() != hidden {
            return Err(Error::InvalidSpec(format!(
                "expected {hidden} hidden activations, got {}",
                activations.len()
            )));
        }
        let expected = param_count(layer_dims)?;
        if params.len() != expected {
            return Err(Error::Shape {
                context: "DenseNet::with_params",
                expected: format!("{expected} parameters"),
                got: format!("{}", params.len()),
            });
        }
        Ok(DenseNet {
            layer_dims: layer_dims.to_vec(),
            activations: activations.to_vec(),
            params,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_spans(&self) -> Vec<LayerSpan> {
        let mut spans = Vec::with_capacity(self.layer_dims.len() - 1);
        let mut off = 0;
        for l in 0..self.layer_dims.len() - 1 {
            let in_dim = self.layer_dims[l];
            let out_dim = self.layer_dims[l + 1];
            let weight = off;
            let bias = off + in_dim * out_dim;
            let end = bias + out_dim;
            spans.push(LayerSpan {
                weight,
                bias,
                end,
                in_dim,
                out_dim,
            });
            off = end;
        }
        spans
    }

    /// Parameter index range an optimizer with the given scope may update.
    pub fn scope_range(&self, scope: GradScope) -> std::ops::Range<usize> {
        match scope {
            GradScope::Full => 0..self.params.len(),
            GradScope::ClassifierOnly | GradScope::FeaturizerFrozen => {
                let span = *self.layer_spans().last().unwrap();
                span.weight..span.end
            }
        }
    }

    fn activation_of(&self, layer: usize) -> Activation {
        // Hidden layers carry their configured activation; the output layer
        // is linear.
        if layer < self.activations.len() {
            self.activations[layer]
        } else {
            Activation::Identity
        }
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(self
            .forward_cached(inputs)?
            .outputs
            .pop()
            .expect("at least one layer"))
    }

    /// Scalar predictions for a batch; requires a width-1 output layer.
    pub fn predict_scalar(&self, inputs: &Matrix) -> Result<Vec<f64>> {
        if self.output_dim() != 1 {
            return Err(Error::Shape {
                context: "predict_scalar",
                expected: "output width 1".into(),
                got: format!("{}", self.output_dim()),
            });
        }
        Ok(self.forward(inputs)?.data().to_vec())
    }

    pub fn forward_cached(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Shape {
                context: "forward",
                expected: format!("input width {}", self.input_dim()),
                got: format!("{}", inputs.cols()),
            });
        }
        let n = inputs.rows();
        let spans = self.layer_spans();
        let mut outputs: Vec<Matrix> = Vec::with_capacity(spans.len());
        for (l, span) in spans.iter().enumerate() {
            let act = self.activation_of(l);
            let w = &self.params[span.weight..span.bias];
            let b = &self.params[span.bias..span.end];
            let mut out = Matrix::zeros(n, span.out_dim);
            {
                let prev: &Matrix = if l == 0 { inputs } else { &outputs[l - 1] };
                for i in 0..n {
                    let x = prev.row(i);
                    let o = out.row_mut(i);
                    for (j, oj) in o.iter_mut().enumerate() {
                        let wrow = &w[j * span.in_dim..(j + 1) * span.in_dim];
                        let mut z = b[j];
                        for (wv, xv) in wrow.iter().zip(x) {
                            z += wv * xv;
                        }
                        *oj = act.apply(z);
                    }
                }
            }
            outputs.push(out);
        }
        Ok(ForwardCache { outputs })
    }

    /// Backpropagates per-sample output seeds (n x out_dim, row-major in
    /// `seed`) to a parameter gradient over the requested scope.
    ///
    /// The scoped gradient is bit-identical to the corresponding slice of
    /// the full gradient: the output layer is processed first either way.
    pub fn backprop_scoped(
        &self,
        inputs: &Matrix,
        cache: &ForwardCache,
        seed: &Matrix,
        scope: GradScope,
    ) -> Result<Vec<f64>> {
        let n = inputs.rows();
        if seed.rows() != n || seed.cols() != self.output_dim() {
            return Err(Error::Shape {
                context: "backprop seed",
                expected: format!("{n} x {}", self.output_dim()),
                got: format!("{} x {}", seed.rows(), seed.cols()),
            });
        }
        let spans = self.layer_spans();
        let classifier_only = !matches!(scope, GradScope::Full);
        let mut grad = vec![
            0.0;
            if classifier_only {
                let s = spans.last().unwrap();
                s.end - s.weight
            } else {
                self.params.len()
            }
        ];

        let mut delta = seed.clone();
        for (l, span) in spans.iter().enumerate().rev() {
            let act = self.activation_of(l);
            let layer_out = &cache.outputs[l];
            let layer_in: &Matrix = if l == 0 { inputs } else { &cache.outputs[l - 1] };
            // dL/dz = delta (x) act'(y)
            let mut dz = Matrix::zeros(n, span.out_dim);
            for i in 0..n {
                for j in 0..span.out_dim {
                    dz.set(
                        i,
                        j,
                        delta.get(i, j) * act.derivative_from_output(layer_out.get(i, j)),
                    );
                }
            }
            let grad_base = if classifier_only { 0 } else { span.weight };
            if !classifier_only || l == spans.len() - 1 {
                for i in 0..n {
                    let x = layer_in.row(i);
                    for j in 0..span.out_dim {
                        let d = dz.get(i, j);
                        if d == 0.0 {
                            continue;
                        }
                        let wslice =
                            &mut grad[grad_base + j * span.in_dim..grad_base + (j + 1) * span.in_dim];
                        for (g, xv) in wslice.iter_mut().zip(x) {
                            *g += d * xv;
                        }
                        grad[grad_base + span.in_dim * span.out_dim + j] += d;
                    }
                }
            }
            if classifier_only && l == spans.len() - 1 {
                break;
            }
            if l == 0 {
                break;
            }
            // dL/dx = dz W
            let w = &self.params[span.weight..span.bias];
            let mut dx = Matrix::zeros(n, span.in_dim);
            for i in 0..n {
                for j in 0..span.out_dim {
                    let d = dz.get(i, j);
                    if d == 0.0 {
                        continue;
                    }
                    let wrow = &w[j * span.in_dim..(j + 1) * span.in_dim];
                    let row = dx.row_mut(i);
                    for (r, wv) in row.iter_mut().zip(wrow) {
                        *r += d * wv;
                    }
                }
            }
            delta = dx;
        }
        Ok(grad)
    }

    /// Mean loss over the batch and its gradient over the requested scope.
    pub fn loss_and_grad(
        &self,
        inputs: &Matrix,
        targets: &[f64],
        req: GradRequest,
    ) -> Result<(f64, Vec<f64>)> {
        let n = inputs.rows();
        if n == 0 {
            return Err(Error::EmptyBatch("loss_and_grad"));
        }
        if targets.len() != n {
            return Err(Error::Shape {
                context: "loss_and_grad targets",
                expected: format!("{n}"),
                got: format!("{}", targets.len()),
            });
        }
        if self.output_dim() != 1 {
            return Err(Error::Shape {
                context: "loss_and_grad",
                expected: "output width 1".into(),
                got: format!("{}", self.output_dim()),
            });
        }
        if inputs.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite inputs".into()));
        }
        if req.loss_kind == LossKind::Logistic
            && targets.iter().any(|&y| y != 1.0 && y != -1.0)
        {
            return Err(Error::InvalidSpec(
                "logistic targets must be encoded +-1".into(),
            ));
        }
        let cache = self.forward_cached(inputs)?;
        let preds = cache.predictions();
        let mut loss = 0.0;
        let mut seed = Matrix::zeros(n, 1);
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let yhat = preds.get(i, 0);
            let y = targets[i];
            loss += req.loss_kind.loss(yhat, y);
            seed.set(i, 0, req.loss_kind.dloss(yhat, y) * inv_n);
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                param_norm: crate::linalg::norm2(&self.params),
            });
        }
        let grad = self.backprop_scoped(inputs, &cache, &seed, req.scope)?;
        Ok((loss, grad))
    }
}

fn param_count(layer_dims: &[usize]) -> Result<usize> {
    if layer_dims.len() < 2 {
        return Err(Error::InvalidSpec("need at least two layer dims".into()));
    }
    Ok(layer_dims
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum())
}
