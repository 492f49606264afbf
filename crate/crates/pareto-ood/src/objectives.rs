//! Per-environment losses and the OOD penalties.
//!
//! Three objectives make up the loss vector consumed by the balancing
//! optimizer:
//!
//! * `L_erm`: unweighted mean of per-environment mean losses.
//! * `L_irm`: sum over environments of the squared scalar-classifier
//!   gradient `(d/dw mean l(w f(x), y) at w = 1)^2`, the standard penalty
//!   with the dummy classifier fixed at 1.0. A split variant halves each
//!   batch and multiplies the per-half gradient means, which is unbiased
//!   for the (shifted) population penalty but can go negative; the
//!   `neg_fix` heuristics restore nonnegativity.
//! * `L_vrex`: population variance (1/n normalization) of the
//!   per-environment mean losses.
//!
//! Gradients are exact derivatives of the reported values, including the
//! chain rule through the variance and through the neg-fix adjustment, so
//! every row of the assembled gradient matrix is finite-difference
//! checkable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm2, Matrix};
use crate::nn::{DenseNet, GradRequest, LossKind};

/// Samples drawn from one environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvBatch {
    pub env_id: usize,
    pub inputs: Matrix,
    pub targets: Vec<f64>,
}

impl EnvBatch {
    pub fn new(env_id: usize, inputs: Matrix, targets: Vec<f64>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::EmptyBatch("EnvBatch"));
        }
        if inputs.rows() != targets.len() {
            return Err(Error::Shape {
                context: "EnvBatch",
                expected: format!("{} targets", inputs.rows()),
                got: format!("{}", targets.len()),
            });
        }
        Ok(EnvBatch {
            env_id,
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    /// Sub-batch at the given row indices.
    pub fn select(&self, idx: &[usize]) -> EnvBatch {
        EnvBatch {
            env_id: self.env_id,
            inputs: self.inputs.select_rows(idx),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Ordered objective values (L_erm, L_irm, L_vrex, ...); length k = m + 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LossVector(Vec<f64>);

impl LossVector {
    pub fn new(values: Vec<f64>) -> Self {
        LossVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rows are per-objective gradients over the scoped parameters.
pub type GradMatrix = Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Square of the full-batch gradient mean. Matches the population
    /// penalty only in the large-batch limit; biased upward on minibatches.
    PopulationStyleBiased,
    /// Product of the two half-batch gradient means.
    UnbiasedSplit,
}

/// How negative split estimates are made usable as nonnegative losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegFix {
    /// Shift every half-batch mean by +C. The product then estimates the
    /// shifted population penalty (g + C)^2 without bias.
    AddConstant(f64),
    /// Multiply negative half-batch means by -C, guaranteeing a
    /// nonnegative product at the price of a biased magnitude.
    ScaleNegatives(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub mode: EstimatorMode,
    pub neg_fix: NegFix,
}

impl EstimatorConfig {
    pub fn population_style() -> Self {
        EstimatorConfig {
            mode: EstimatorMode::PopulationStyleBiased,
            neg_fix: NegFix::ScaleNegatives(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = match self.neg_fix {
            NegFix::AddConstant(c) | NegFix::ScaleNegatives(c) => c,
        };
        if !(c > 0.0) {
            return Err(Error::InvalidSpec("neg_fix constant must be positive".into()));
        }
        Ok(())
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig::population_style()
    }
}

impl NegFix {
    fn apply(&self, m: f64) -> f64 {
        match *self {
            NegFix::AddConstant(c) => m + c,
            NegFix::ScaleNegatives(c) => {
                if m < 0.0 {
                    -c * m
                } else {
                    m
                }
            }
        }
    }

    fn derivative(&self, m: f64) -> f64 {
        match *self {
            NegFix::AddConstant(_) => 1.0,
            NegFix::ScaleNegatives(c) => {
                if m < 0.0 {
                    -c
                } else {
                    1.0
                }
            }
        }
    }
}

/// Unweighted mean of per-environment mean losses.
pub fn erm_loss(batches: &[EnvBatch], net: &DenseNet, loss_kind: LossKind) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::EmptyBatch("erm_loss"));
    }
    let mut total = 0.0;
    for batch in batches {
        total += env_mean_loss(batch, net, loss_kind)?;
    }
    Ok(total / batches.len() as f64)
}

fn env_mean_loss(batch: &EnvBatch, net: &DenseNet, loss_kind: LossKind) -> Result<f64> {
    let preds = net.predict_scalar(&batch.inputs)?;
    if preds.is_empty() {
        return Err(Error::EmptyBatch("env_mean_loss"));
    }
    let mut loss = 0.0;
    for (p, y) in preds.iter().zip(&batch.targets) {
        loss += loss_kind.loss(*p, *y);
    }
    let loss = loss / preds.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            param_norm: norm2(net.params()),
        });
    }
    Ok(loss)
}

/// Per-environment scalar-classifier gradient: mean of l'(f, y) * f.
fn classifier_grad_mean(preds: &[f64], targets: &[f64], loss_kind: LossKind) -> f64 {
    let mut acc = 0.0;
    for (&f, &y) in preds.iter().zip(targets) {
        acc += loss_kind.dloss(f, y) * f;
    }
    acc / preds.len() as f64
}

/// Sum over environments of the (possibly split and adjusted) squared
/// scalar-classifier gradient.
pub fn irmv1_penalty(
    batches: &[EnvBatch],
    net: &DenseNet,
    loss_kind: LossKind,
    cfg: &EstimatorConfig,
) -> Result<f64> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::EmptyBatch("irmv1_penalty"));
    }
    let mut total = 0.0;
    for batch in batches {
        let preds = net.predict_scalar(&batch.inputs)?;
        total += match cfg.mode {
            EstimatorMode::PopulationStyleBiased => {
                let g = classifier_grad_mean(&preds, &batch.targets, loss_kind);
                g * g
            }
            EstimatorMode::UnbiasedSplit => {
                let (h1, h2) = split_halves(batch.len())?;
                let m1 = classifier_grad_mean(&preds[h1.clone()], &batch.targets[h1], loss_kind);
                let m2 = classifier_grad_mean(&preds[h2.clone()], &batch.targets[h2], loss_kind);
                let pen = cfg.neg_fix.apply(m1) * cfg.neg_fix.apply(m2);
                if pen < 0.0 {
                    return Err(Error::InvalidSpec(
                        "add_constant shift too small: adjusted penalty is negative".into(),
                    ));
                }
                pen
            }
        };
    }
    if !total.is_finite() {
        return Err(Error::NonFiniteLoss {
            param_norm: norm2(net.params()),
        });
    }
    Ok(total)
}

fn split_halves(n: usize) -> Result<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    if n < 2 {
        return Err(Error::InvalidSpec(
            "unbiased_split needs at least two samples per environment".into(),
        ));
    }
    let mid = n / 2;
    Ok((0..mid, mid..n))
}

/// Population variance (divide by the environment count) of the
/// per-environment mean losses.
pub fn vrex_penalty(batches: &[EnvBatch], net: &DenseNet, loss_kind: LossKind) -> Result<f64> {
    if batches.len() < 2 {
        return Err(Error::InvalidSpec(
            "vrex_penalty needs at least two environments".into(),
        ));
    }
    let losses: Vec<f64> = batches
        .iter()
        .map(|b| env_mean_loss(b, net, loss_kind))
        .collect::<Result<_>>()?;
    Ok(variance(&losses))
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Assembles the (L_erm, L_irm, L_vrex) loss vector and its gradient
/// matrix over the scoped parameters.
pub fn assemble(
    batches: &[EnvBatch],
    net: &DenseNet,
    cfg: &EstimatorConfig,
    req: GradRequest,
) -> Result<(LossVector, GradMatrix)> {
    cfg.validate()?;
    if batches.len() < 2 {
        return Err(Error::InvalidSpec(
            "assemble needs at least two environments".into(),
        ));
    }
    let d = net.scope_range(req.scope).len();
    let n_env = batches.len() as f64;

    let mut env_losses = Vec::with_capacity(batches.len());
    let mut env_loss_grads: Vec<Vec<f64>> = Vec::with_capacity(batches.len());
    let mut irm_total = 0.0;
    let mut irm_grad = vec![0.0; d];

    for batch in batches {
        let n = batch.len();
        if n == 0 {
            return Err(Error::EmptyBatch("assemble"));
        }
        let cache = net.forward_cached(&batch.inputs)?;
        let preds: Vec<f64> = cache.predictions().data().to_vec();
        let inv_n = 1.0 / n as f64;

        // Mean loss and its gradient.
        let mut loss = 0.0;
        let mut seed = Matrix::zeros(n, 1);
        for i in 0..n {
            loss += req.loss_kind.loss(preds[i], batch.targets[i]);
            seed.set(i, 0, req.loss_kind.dloss(preds[i], batch.targets[i]) * inv_n);
        }
        loss *= inv_n;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                param_norm: norm2(net.params()),
            });
        }
        let g = net.backprop_scoped(&batch.inputs, &cache, &seed, req.scope)?;
        env_losses.push(loss);
        env_loss_grads.push(g);

        // Scalar-classifier penalty and its gradient. The per-sample seed
        // for d/dtheta of mean[l'(f) f] is (l''(f) f + l'(f)) / n.
        match cfg.mode {
            EstimatorMode::PopulationStyleBiased => {
                let gm = classifier_grad_mean(&preds, &batch.targets, req.loss_kind);
                let mut pen_seed = Matrix::zeros(n, 1);
                for i in 0..n {
                    let f = preds[i];
                    let y = batch.targets[i];
                    let dt = req.loss_kind.d2loss(f, y) * f + req.loss_kind.dloss(f, y);
                    pen_seed.set(i, 0, dt * inv_n);
                }
                let dgm = net.backprop_scoped(&batch.inputs, &cache, &pen_seed, req.scope)?;
                irm_total += gm * gm;
                for (acc, dg) in irm_grad.iter_mut().zip(&dgm) {
                    *acc += 2.0 * gm * dg;
                }
            }
            EstimatorMode::UnbiasedSplit => {
                let (h1, h2) = split_halves(n)?;
                let mut means = [0.0; 2];
                let mut mean_grads: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
                for (half_idx, half) in [h1, h2].into_iter().enumerate() {
                    let len = half.len() as f64;
                    let mut pen_seed = Matrix::zeros(n, 1);
                    let mut acc = 0.0;
                    for i in half {
                        let f = preds[i];
                        let y = batch.targets[i];
                        acc += req.loss_kind.dloss(f, y) * f;
                        let dt = req.loss_kind.d2loss(f, y) * f + req.loss_kind.dloss(f, y);
                        pen_seed.set(i, 0, dt / len);
                    }
                    means[half_idx] = acc / len;
                    mean_grads[half_idx] =
                        net.backprop_scoped(&batch.inputs, &cache, &pen_seed, req.scope)?;
                }
                let a1 = cfg.neg_fix.apply(means[0]);
                let a2 = cfg.neg_fix.apply(means[1]);
                let d1 = cfg.neg_fix.derivative(means[0]);
                let d2 = cfg.neg_fix.derivative(means[1]);
                let pen = a1 * a2;
                if pen < 0.0 {
                    return Err(Error::InvalidSpec(
                        "add_constant shift too small: adjusted penalty is negative".into(),
                    ));
                }
                irm_total += pen;
                for j in 0..d {
                    irm_grad[j] += d1 * mean_grads[0][j] * a2 + a1 * d2 * mean_grads[1][j];
                }
            }
        }
    }

    let erm = env_losses.iter().sum::<f64>() / n_env;
    let mut erm_grad = vec![0.0; d];
    for g in &env_loss_grads {
        for (acc, v) in erm_grad.iter_mut().zip(g) {
            *acc += v / n_env;
        }
    }

    let mean_loss = erm;
    let vrex = env_losses
        .iter()
        .map(|l| (l - mean_loss) * (l - mean_loss))
        .sum::<f64>()
        / n_env;
    // Exact variance gradient: (2/n) sum_e (L_e - Lbar) grad L_e. The
    // grad-Lbar term cancels because the centered losses sum to zero.
    let mut vrex_grad = vec![0.0; d];
    for (l, g) in env_losses.iter().zip(&env_loss_grads) {
        let w = 2.0 * (l - mean_loss) / n_env;
        for (acc, v) in vrex_grad.iter_mut().zip(g) {
            *acc += w * v;
        }
    }

    let losses = LossVector::new(vec![erm, irm_total, vrex]);
    let mut grads = Matrix::zeros(3, d);
    grads.row_mut(0).copy_from_slice(&erm_grad);
    grads.row_mut(1).copy_from_slice(&irm_grad);
    grads.row_mut(2).copy_from_slice(&vrex_grad);
    Ok((losses, grads))
}

/// Cosine similarity between two gradient vectors; diagnostic only.
pub fn grad_cosine(g1: &[f64], g2: &[f64]) -> Result<f64> {
    let (n1, n2) = (norm2(g1), norm2(g2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(g1, g2) / (n1 * n2)).clamp(-1.0, 1.0))
}
