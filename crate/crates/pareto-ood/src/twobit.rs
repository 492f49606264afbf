//! Closed-form population analysis of two-bit environments.
//!
//! An environment (alpha, beta) draws y ~ Rad(0.5), x1 = y Rad(alpha),
//! x2 = y Rad(beta): x1 is the invariant feature (alpha shared across
//! environments), x2 the spurious one. Restricting to odd predictors
//! f(-x) = -f(x) leaves two free values a = f(1,1) and b = f(1,-1), and
//! every population quantity reduces to a four-atom sum conditioned on
//! y = +1 with atom probabilities
//!
//! ```text
//!   f = a  w.p. (1-alpha)(1-beta)      f = b   w.p. (1-alpha) beta
//!   f = -b w.p. alpha (1-beta)         f = -a  w.p. alpha beta
//! ```
//!
//! The module provides exact losses, scalar-classifier constraint
//! residuals, root solving for the constraint systems (grid scan plus
//! damped Gauss-Newton refinement), brute-force Pareto scans over the
//! (a, b) square, and the population counterpart of the objective
//! assembly used by the sampled trainer.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{sigmoid, LossKind};
use crate::objectives::LossVector;

/// Residuals below this are indistinguishable from the evaluation noise of
/// the closed forms (a few ulps of O(1) intermediates) and are treated as
/// exact zeros when building penalty columns for front scans.
pub const RESIDUAL_NOISE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OddPredictor {
    /// f(1, 1); odd symmetry fixes f(-1,-1) = -a.
    pub a: f64,
    /// f(1, -1); odd symmetry fixes f(-1,1) = -b.
    pub b: f64,
}

impl OddPredictor {
    pub fn new(a: f64, b: f64) -> Self {
        OddPredictor { a, b }
    }

    /// Coefficient on x1 when the predictor is written w1 x1 + w2 x2.
    pub fn x1_coefficient(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    /// Coefficient on x2.
    pub fn x2_coefficient(&self) -> f64 {
        0.5 * (self.a - self.b)
    }
}

/// A shared-alpha family of environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBitEnvSet {
    pub alpha: f64,
    pub betas: Vec<f64>,
}

impl TwoBitEnvSet {
    pub fn new(alpha: f64, betas: Vec<f64>) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
            return Err(Error::InvalidSpec(format!(
                "alpha must lie in (0,1), got {alpha}"
            )));
        }
        if betas.is_empty() {
            return Err(Error::InvalidSpec("need at least one beta".into()));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSpec("betas must lie in (0,1)".into()));
        }
        Ok(TwoBitEnvSet { alpha, betas })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }
}

/// The nonzero invariant predictor for the given loss: a = b = 1 - 2 alpha
/// under mse, a = b = ln((1-alpha)/alpha) under the logistic loss.
pub fn invariant_predictor(alpha: f64, loss_kind: LossKind) -> OddPredictor {
    let c = match loss_kind {
        LossKind::Mse => 1.0 - 2.0 * alpha,
        LossKind::Logistic => ((1.0 - alpha) / alpha).ln(),
    };
    OddPredictor::new(c, c)
}

/// Exact (E[f^2], E[f Y]) in environment (alpha, beta).
pub fn moments(pred: OddPredictor, alpha: f64, beta: f64) -> (f64, f64) {
    let (a, b) = (pred.a, pred.b);
    let ef2 = (1.0 - alpha) * a * a + alpha * b * b + beta * (1.0 - 2.0 * alpha) * (b * b - a * a);
    let efy = (1.0 - alpha) * a - alpha * b - beta * (a - b);
    (ef2, efy)
}

fn atom_probs(alpha: f64, beta: f64) -> [f64; 4] {
    [
        (1.0 - alpha) * (1.0 - beta), // f = a
        (1.0 - alpha) * beta,         // f = b
        alpha * (1.0 - beta),         // f = -b
        alpha * beta,                 // f = -a
    ]
}

/// Population loss of the odd predictor in environment (alpha, beta).
pub fn pop_loss(pred: OddPredictor, alpha: f64, beta: f64, loss_kind: LossKind) -> f64 {
    match loss_kind {
        LossKind::Mse => {
            let (ef2, efy) = moments(pred, alpha, beta);
            0.5 * (ef2 - 2.0 * efy + 1.0)
        }
        LossKind::Logistic => {
            let q = atom_probs(alpha, beta);
            let fs = [pred.a, pred.b, -pred.b, -pred.a];
            q.iter()
                .zip(fs)
                .map(|(&p, f)| p * logistic_loss(f))
                .sum()
        }
    }
}

/// d pop_loss / d(a, b).
pub fn pop_loss_grad(pred: OddPredictor, alpha: f64, beta: f64, loss_kind: LossKind) -> [f64; 2] {
    let (a, b) = (pred.a, pred.b);
    match loss_kind {
        LossKind::Mse => {
            // dEf2/da = 2(1-alpha)a - 2 beta (1-2alpha) a, dEfY/da = (1-alpha) - beta
            let da = 0.5
                * ((2.0 * (1.0 - alpha) * a - 2.0 * beta * (1.0 - 2.0 * alpha) * a)
                    - 2.0 * ((1.0 - alpha) - beta));
            let db = 0.5
                * ((2.0 * alpha * b + 2.0 * beta * (1.0 - 2.0 * alpha) * b)
                    - 2.0 * (-alpha + beta));
            [da, db]
        }
        LossKind::Logistic => {
            let q = atom_probs(alpha, beta);
            // l(z) = ln(1 + e^-z), l'(z) = -sigmoid(-z)
            let da = q[0] * (-sigmoid(-a)) + q[3] * sigmoid(a);
            let db = q[1] * (-sigmoid(-b)) + q[2] * sigmoid(b);
            [da, db]
        }
    }
}

fn logistic_loss(z: f64) -> f64 {
    (-z).max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Scalar-classifier gradient at w = 1 in environment (alpha, beta); zero
/// exactly when the relaxed invariance constraint holds there.
pub fn irms_residual(pred: OddPredictor, alpha: f64, beta: f64, loss_kind: LossKind) -> f64 {
    match loss_kind {
        LossKind::Mse => {
            let (ef2, efy) = moments(pred, alpha, beta);
            ef2 - efy
        }
        LossKind::Logistic => {
            let q = atom_probs(alpha, beta);
            let fs = [pred.a, pred.b, -pred.b, -pred.a];
            // E[l'(f) f] with l'(z) = -sigmoid(-z)
            -q.iter()
                .zip(fs)
                .map(|(&p, f)| p * f * sigmoid(-f))
                .sum::<f64>()
        }
    }
}

/// d irms_residual / d(a, b).
pub fn irms_residual_grad(
    pred: OddPredictor,
    alpha: f64,
    beta: f64,
    loss_kind: LossKind,
) -> [f64; 2] {
    let (a, b) = (pred.a, pred.b);
    match loss_kind {
        LossKind::Mse => [
            2.0 * (1.0 - alpha) * a - 2.0 * beta * (1.0 - 2.0 * alpha) * a
                - ((1.0 - alpha) - beta),
            2.0 * alpha * b + 2.0 * beta * (1.0 - 2.0 * alpha) * b - (-alpha + beta),
        ],
        LossKind::Logistic => {
            let q = atom_probs(alpha, beta);
            // d/dz [z sigmoid(-z)] = sigmoid(-z) - z sigmoid(z) sigmoid(-z)
            let t = |z: f64| sigmoid(-z) - z * sigmoid(z) * sigmoid(-z);
            [
                -(q[0] * t(a) - q[3] * t(-a)),
                -(q[1] * t(b) - q[2] * t(-b)),
            ]
        }
    }
}

/// Population counterpart of the sampled objective assembly: the
/// (L_erm, L_irm, L_vrex) vector over the environment set and its exact
/// gradient rows with respect to (a, b).
pub fn irmx_objective(
    pred: OddPredictor,
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
) -> (LossVector, Matrix) {
    let n = envs.len() as f64;
    let mut losses = Vec::with_capacity(envs.len());
    let mut loss_grads = Vec::with_capacity(envs.len());
    let mut irm = 0.0;
    let mut irm_grad = [0.0; 2];
    for &beta in &envs.betas {
        losses.push(pop_loss(pred, envs.alpha, beta, loss_kind));
        loss_grads.push(pop_loss_grad(pred, envs.alpha, beta, loss_kind));
        let r = irms_residual(pred, envs.alpha, beta, loss_kind);
        let rg = irms_residual_grad(pred, envs.alpha, beta, loss_kind);
        irm += r * r;
        irm_grad[0] += 2.0 * r * rg[0];
        irm_grad[1] += 2.0 * r * rg[1];
    }
    let erm = losses.iter().sum::<f64>() / n;
    let erm_grad = [
        loss_grads.iter().map(|g| g[0]).sum::<f64>() / n,
        loss_grads.iter().map(|g| g[1]).sum::<f64>() / n,
    ];
    let vrex = losses.iter().map(|l| (l - erm) * (l - erm)).sum::<f64>() / n;
    let mut vrex_grad = [0.0; 2];
    for (l, g) in losses.iter().zip(&loss_grads) {
        let w = 2.0 * (l - erm) / n;
        vrex_grad[0] += w * g[0];
        vrex_grad[1] += w * g[1];
    }
    let mut grads = Matrix::zeros(3, 2);
    grads.row_mut(0).copy_from_slice(&erm_grad);
    grads.row_mut(1).copy_from_slice(&irm_grad);
    grads.row_mut(2).copy_from_slice(&vrex_grad);
    (LossVector::new(vec![erm, irm, vrex]), grads)
}

/// Environment reweighting that makes the predictor stationary, if any:
/// solves sum_e lambda_e grad L_e = 0 with sum lambda_e = 1 for two
/// environments. Negative entries are allowed.
pub fn reweighted_stationarity(
    pred: OddPredictor,
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
) -> Result<Option<[f64; 2]>> {
    if envs.len() != 2 {
        return Err(Error::InvalidSpec(
            "reweighted_stationarity is defined for exactly two environments".into(),
        ));
    }
    let g1 = pop_loss_grad(pred, envs.alpha, envs.betas[0], loss_kind);
    let g2 = pop_loss_grad(pred, envs.alpha, envs.betas[1], loss_kind);
    // lambda g1 + (1 - lambda) g2 = 0  =>  lambda (g1 - g2) = -g2.
    let diff = [g1[0] - g2[0], g1[1] - g2[1]];
    let denom = diff[0] * diff[0] + diff[1] * diff[1];
    let scale = [g1, g2]
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1.0);
    if denom <= 1e-24 * scale * scale {
        // Parallel gradients: stationary for some lambda only if both are
        // (numerically) zero, where any convex weighting works.
        if scale <= 1e-9 || (g1[0].abs().max(g1[1].abs()) <= 1e-12 * scale) {
            return Ok(Some([0.5, 0.5]));
        }
        return Ok(None);
    }
    let lambda = -(g2[0] * diff[0] + g2[1] * diff[1]) / denom;
    let res = [
        lambda * g1[0] + (1.0 - lambda) * g2[0],
        lambda * g1[1] + (1.0 - lambda) * g2[1],
    ];
    if res[0].abs().max(res[1].abs()) <= 1e-9 * scale {
        Ok(Some([lambda, 1.0 - lambda]))
    } else {
        Ok(None)
    }
}

/// Whether alpha falls in the band where the relaxed constraints provably
/// admit a lower-loss impostor under mse (the bound is specific to mse).
pub fn failure_range_check(alpha: f64, loss_kind: LossKind) -> Result<bool> {
    if loss_kind != LossKind::Mse {
        return Err(Error::UnsupportedLossKind("failure_range_check"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "alpha must lie in (0,1), got {alpha}"
        )));
    }
    Ok(alpha < 0.1464 || alpha > 0.8356)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points_per_axis: usize,
    pub min: f64,
    pub max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            points_per_axis: 601,
            min: -3.0,
            max: 3.0,
        }
    }
}

impl GridSpec {
    pub fn coords(&self) -> Vec<f64> {
        let n = self.points_per_axis.max(2);
        let step = (self.max - self.min) / (n - 1) as f64;
        (0..n).map(|i| self.min + i as f64 * step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub predictor: OddPredictor,
    pub residual: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InvariantSets {
    /// Roots of the scalar-classifier constraint system (all environments).
    pub irms: Vec<Root>,
    /// Roots of the equal-loss system (all environment pairs against the first).
    pub equal_loss: Vec<Root>,
    /// Roots of the combined system.
    pub intersection: Vec<Root>,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineSpec {
    pub max_iter: usize,
    pub damping: f64,
    pub accept_residual: f64,
    pub dedup_distance: f64,
}

impl Default for RefineSpec {
    fn default() -> Self {
        RefineSpec {
            max_iter: 50,
            damping: 0.5,
            accept_residual: 1e-10,
            dedup_distance: 1e-6,
        }
    }
}

#[derive(Clone, Copy)]
enum ResidualSystem {
    Irms,
    EqualLoss,
    Both,
}

impl ResidualSystem {
    fn len(self, n_env: usize) -> usize {
        match self {
            ResidualSystem::Irms => n_env,
            ResidualSystem::EqualLoss => n_env - 1,
            ResidualSystem::Both => 2 * n_env - 1,
        }
    }
}

fn eval_system(
    sys: ResidualSystem,
    pred: OddPredictor,
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    out: &mut Vec<f64>,
) {
    out.clear();
    match sys {
        ResidualSystem::Irms => {
            for &beta in &envs.betas {
                out.push(irms_residual(pred, envs.alpha, beta, loss_kind));
            }
        }
        ResidualSystem::EqualLoss => {
            let first = pop_loss(pred, envs.alpha, envs.betas[0], loss_kind);
            for &beta in &envs.betas[1..] {
                out.push(first - pop_loss(pred, envs.alpha, beta, loss_kind));
            }
        }
        ResidualSystem::Both => {
            for &beta in &envs.betas {
                out.push(irms_residual(pred, envs.alpha, beta, loss_kind));
            }
            let first = pop_loss(pred, envs.alpha, envs.betas[0], loss_kind);
            for &beta in &envs.betas[1..] {
                out.push(first - pop_loss(pred, envs.alpha, beta, loss_kind));
            }
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
}

/// Damped Gauss-Newton on the residual system from one start; numerical
/// Jacobian, damping 0.5 whenever the step increases the residual norm.
fn refine(
    sys: ResidualSystem,
    start: OddPredictor,
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    spec: &RefineSpec,
) -> Option<Root> {
    let m = sys.len(envs.len());
    let mut x = [start.a, start.b];
    let mut res = Vec::with_capacity(m);
    let mut res_try = Vec::with_capacity(m);
    let mut jac = vec![[0.0f64; 2]; m];
    eval_system(sys, OddPredictor::new(x[0], x[1]), envs, loss_kind, &mut res);
    let mut best = inf_norm(&res);
    for _ in 0..spec.max_iter {
        if best < 1e-14 {
            break;
        }
        // Forward-difference Jacobian.
        for j in 0..2 {
            let h = 1e-7 * x[j].abs().max(1.0);
            let mut xp = x;
            xp[j] += h;
            eval_system(
                sys,
                OddPredictor::new(xp[0], xp[1]),
                envs,
                loss_kind,
                &mut res_try,
            );
            for i in 0..m {
                jac[i][j] = (res_try[i] - res[i]) / h;
            }
        }
        // Gauss-Newton step from the 2x2 normal equations; fall back to a
        // ridge when the Jacobian is rank deficient (underdetermined
        // systems project to the nearest point on the solution curve).
        let mut jtj = [[0.0f64; 2]; 2];
        let mut jtr = [0.0f64; 2];
        for i in 0..m {
            for p in 0..2 {
                jtr[p] += jac[i][p] * res[i];
                for q in 0..2 {
                    jtj[p][q] += jac[i][p] * jac[i][q];
                }
            }
        }
        let det = jtj[0][0] * jtj[1][1] - jtj[0][1] * jtj[1][0];
        let trace = jtj[0][0] + jtj[1][1];
        let delta = if det.abs() > 1e-14 * trace.abs().max(1e-300) * trace.abs().max(1e-300) {
            [
                (jtj[1][1] * jtr[0] - jtj[0][1] * jtr[1]) / det,
                (jtj[0][0] * jtr[1] - jtj[1][0] * jtr[0]) / det,
            ]
        } else {
            let ridge = 1e-12 * trace.max(1e-300);
            let d = (jtj[0][0] + ridge) * (jtj[1][1] + ridge) - jtj[0][1] * jtj[1][0];
            if d.abs() < 1e-300 {
                return None;
            }
            [
                ((jtj[1][1] + ridge) * jtr[0] - jtj[0][1] * jtr[1]) / d,
                ((jtj[0][0] + ridge) * jtr[1] - jtj[1][0] * jtr[0]) / d,
            ]
        };
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let xt = [x[0] - step * delta[0], x[1] - step * delta[1]];
            eval_system(
                sys,
                OddPredictor::new(xt[0], xt[1]),
                envs,
                loss_kind,
                &mut res_try,
            );
            let norm = inf_norm(&res_try);
            if norm < best {
                x = xt;
                std::mem::swap(&mut res, &mut res_try);
                best = norm;
                improved = true;
                break;
            }
            step *= spec.damping;
        }
        if !improved {
            break;
        }
        if step * (delta[0].abs() + delta[1].abs()) < 1e-15 {
            break;
        }
    }
    if best < spec.accept_residual {
        Some(Root {
            predictor: OddPredictor::new(x[0], x[1]),
            residual: best,
        })
    } else {
        None
    }
}

fn dedup_roots(mut roots: Vec<Root>, distance: f64) -> Vec<Root> {
    use std::collections::HashMap;
    // Keep the lowest-residual representative per neighborhood; report in
    // deterministic (a, b) order.
    roots.sort_by(|p, q| {
        p.residual
            .partial_cmp(&q.residual)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let cell = |v: f64| (v / distance).floor() as i64;
    let mut grid: HashMap<(i64, i64), Vec<(f64, f64)>> = HashMap::new();
    let mut kept: Vec<Root> = Vec::new();
    'outer: for root in roots {
        let (ca, cb) = (cell(root.predictor.a), cell(root.predictor.b));
        for da in -1..=1 {
            for db in -1..=1 {
                if let Some(pts) = grid.get(&(ca + da, cb + db)) {
                    for &(pa, pb) in pts {
                        let dx = pa - root.predictor.a;
                        let dy = pb - root.predictor.b;
                        if (dx * dx + dy * dy).sqrt() <= distance {
                            continue 'outer;
                        }
                    }
                }
            }
        }
        grid.entry((ca, cb))
            .or_default()
            .push((root.predictor.a, root.predictor.b));
        kept.push(root);
    }
    kept.sort_by(|p, q| {
        (p.predictor.a, p.predictor.b)
            .partial_cmp(&(q.predictor.a, q.predictor.b))
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    kept
}

/// Grid scan plus refinement for the invariant-set systems.
pub fn solve_invariant_sets(
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    grid: &GridSpec,
    refine_spec: &RefineSpec,
) -> Result<InvariantSets> {
    if envs.len() < 2 {
        return Err(Error::InvalidSpec(
            "invariant-set solving needs at least two environments".into(),
        ));
    }
    let mut distinct = envs.betas.clone();
    distinct.sort_by(|x, y| x.partial_cmp(y).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidSpec(
            "invariant-set solving needs two distinct betas".into(),
        ));
    }
    let coords = grid.coords();
    let solve = |sys: ResidualSystem| -> Vec<Root> {
        let roots: Vec<Root> = coords
            .par_iter()
            .flat_map_iter(|&a| {
                coords.iter().filter_map(move |&b| {
                    refine(sys, OddPredictor::new(a, b), envs, loss_kind, refine_spec)
                })
            })
            .collect();
        dedup_roots(roots, refine_spec.dedup_distance)
    };
    Ok(InvariantSets {
        irms: solve(ResidualSystem::Irms),
        equal_loss: solve(ResidualSystem::EqualLoss),
        intersection: solve(ResidualSystem::Both),
    })
}

/// Objective tuples a front scan can rank points by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontObjectives {
    /// Per-environment losses (L_1, ..., L_m).
    PerEnv,
    /// (L_erm, L_irm).
    ErmIrm,
    /// Per-environment losses with the variance appended.
    PerEnvVrex,
    /// (L_erm, L_irm, L_vrex).
    ErmIrmVrex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontPoint {
    pub predictor: OddPredictor,
    /// Per-environment population losses.
    pub env_losses: Vec<f64>,
    pub irm: f64,
    pub vrex: f64,
    pub dominated: bool,
}

/// Brute-force domination scan over the (a, b) grid plus any extra points
/// (refined roots, reference predictors). Domination uses exact
/// comparisons on the computed objective tuples.
pub fn pareto_scan(
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    grid: &GridSpec,
    objectives: FrontObjectives,
    extra: &[OddPredictor],
) -> Result<Vec<FrontPoint>> {
    if envs.len() < 2 {
        return Err(Error::InvalidSpec(
            "pareto_scan needs at least two environments".into(),
        ));
    }
    let coords = grid.coords();
    let mut preds: Vec<OddPredictor> = Vec::with_capacity(coords.len() * coords.len() + extra.len());
    for &a in &coords {
        for &b in &coords {
            preds.push(OddPredictor::new(a, b));
        }
    }
    preds.extend_from_slice(extra);

    let points: Vec<FrontPoint> = preds
        .par_iter()
        .map(|&p| {
            let env_losses: Vec<f64> = envs
                .betas
                .iter()
                .map(|&beta| pop_loss(p, envs.alpha, beta, loss_kind))
                .collect();
            let irm: f64 = envs
                .betas
                .iter()
                .map(|&beta| {
                    let r = irms_residual(p, envs.alpha, beta, loss_kind);
                    let r = if r.abs() < RESIDUAL_NOISE_FLOOR { 0.0 } else { r };
                    r * r
                })
                .sum();
            let mean = env_losses.iter().sum::<f64>() / env_losses.len() as f64;
            let vrex = env_losses
                .iter()
                .map(|l| (l - mean) * (l - mean))
                .sum::<f64>()
                / env_losses.len() as f64;
            FrontPoint {
                predictor: p,
                env_losses,
                irm,
                vrex,
                dominated: false,
            }
        })
        .collect();

    let tuples: Vec<Vec<f64>> = points
        .iter()
        .map(|pt| match objectives {
            FrontObjectives::PerEnv => pt.env_losses.clone(),
            FrontObjectives::ErmIrm => {
                let erm = pt.env_losses.iter().sum::<f64>() / pt.env_losses.len() as f64;
                vec![erm, pt.irm]
            }
            FrontObjectives::PerEnvVrex => {
                let mut t = pt.env_losses.clone();
                t.push(pt.vrex);
                t
            }
            FrontObjectives::ErmIrmVrex => {
                let erm = pt.env_losses.iter().sum::<f64>() / pt.env_losses.len() as f64;
                vec![erm, pt.irm, pt.vrex]
            }
        })
        .collect();
    let flags = mark_dominated(&tuples);
    let mut points = points;
    for (pt, flag) in points.iter_mut().zip(flags) {
        pt.dominated = flag;
    }
    Ok(points)
}

fn dominates(p: &[f64], q: &[f64]) -> bool {
    let mut strict = false;
    for (&a, &b) in p.iter().zip(q) {
        if a > b {
            return false;
        }
        if a < b {
            strict = true;
        }
    }
    strict
}

/// Exact pairwise domination flags via a non-dominated archive.
pub fn mark_dominated(tuples: &[Vec<f64>]) -> Vec<bool> {
    let mut archive: Vec<usize> = Vec::new();
    for (i, t) in tuples.iter().enumerate() {
        if archive.iter().any(|&j| dominates(&tuples[j], t)) {
            continue;
        }
        archive.retain(|&j| !dominates(t, &tuples[j]));
        archive.push(i);
    }
    tuples
        .iter()
        .enumerate()
        .map(|(i, t)| archive.iter().any(|&j| j != i && dominates(&tuples[j], t)))
        .collect()
}

/// CSV rows for a front scan: a, b, per-env losses, L_irm, L_vrex, dominated.
pub fn front_to_csv(points: &[FrontPoint]) -> String {
    let n_env = points.first().map_or(0, |p| p.env_losses.len());
    let mut header = String::from("a,b");
    for e in 1..=n_env {
        header.push_str(&format!(",L_e{e}"));
    }
    header.push_str(",L_irm,L_vrex,dominated\n");
    let mut out = header;
    for p in points {
        out.push_str(&format!("{},{}", p.predictor.a, p.predictor.b));
        for l in &p.env_losses {
            out.push_str(&format!(",{l}"));
        }
        out.push_str(&format!(",{},{},{}\n", p.irm, p.vrex, u8::from(p.dominated)));
    }
    out
}

/// CSV rows for invariant-set roots.
pub fn roots_to_csv(sets: &InvariantSets) -> String {
    let mut out = String::from("set,a,b,residual\n");
    for (name, roots) in [
        ("irms", &sets.irms),
        ("equal_loss", &sets.equal_loss),
        ("intersection", &sets.intersection),
    ] {
        for r in roots {
            out.push_str(&format!(
                "{name},{},{},{}\n",
                r.predictor.a, r.predictor.b, r.residual
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_axis_aligned_predictors() {
        // a = b = c is the x1-only predictor: EfY = (1-2alpha) c, Ef2 = c^2.
        let c = 0.7;
        let (ef2, efy) = moments(OddPredictor::new(c, c), 0.1, 0.37);
        assert!((ef2 - c * c).abs() < 1e-15);
        assert!((efy - (1.0 - 2.0 * 0.1) * c).abs() < 1e-15);
        // a = c, b = -c is the x2-only predictor: EfY = (1-2beta) c.
        let (ef2, efy) = moments(OddPredictor::new(c, -c), 0.1, 0.37);
        assert!((ef2 - c * c).abs() < 1e-15);
        assert!((efy - (1.0 - 2.0 * 0.37) * c).abs() < 1e-12);
        // Zero predictor.
        assert_eq!(moments(OddPredictor::new(0.0, 0.0), 0.2, 0.3), (0.0, 0.0));
    }

    #[test]
    fn pop_loss_reference_values() {
        let zero = OddPredictor::new(0.0, 0.0);
        assert!((pop_loss(zero, 0.1, 0.2, LossKind::Mse) - 0.5).abs() < 1e-15);
        assert!(
            (pop_loss(zero, 0.1, 0.2, LossKind::Logistic) - std::f64::consts::LN_2).abs() < 1e-15
        );
        // f_irm at alpha = 0.1 under mse: 0.5 (0.64 - 2*0.64 + 1) = 0.18.
        let f = invariant_predictor(0.1, LossKind::Mse);
        assert!((pop_loss(f, 0.1, 0.4, LossKind::Mse) - 0.18).abs() < 1e-15);
    }

    #[test]
    fn residual_vanishes_on_invariant_predictors() {
        for kind in [LossKind::Mse, LossKind::Logistic] {
            let f = invariant_predictor(0.1, kind);
            for beta in [0.11, 0.4, 0.9] {
                assert!(
                    irms_residual(f, 0.1, beta, kind).abs() < 1e-14,
                    "kind {kind:?} beta {beta}"
                );
            }
            assert_eq!(irms_residual(OddPredictor::new(0.0, 0.0), 0.1, 0.3, kind), 0.0);
        }
    }

    #[test]
    fn x2_predictor_is_invariant_only_in_its_own_env() {
        let beta = 0.3;
        let pred = OddPredictor::new(1.0 - 2.0 * beta, -(1.0 - 2.0 * beta));
        assert!(irms_residual(pred, 0.1, beta, LossKind::Mse).abs() < 1e-15);
        assert!(irms_residual(pred, 0.1, 0.6, LossKind::Mse).abs() > 1e-3);
    }

    #[test]
    fn pop_loss_gradients_match_finite_differences() {
        let h = 1e-6;
        for kind in [LossKind::Mse, LossKind::Logistic] {
            for (a, b, alpha, beta) in [
                (0.3, -0.7, 0.1, 0.25),
                (-1.2, 0.4, 0.3, 0.6),
                (0.8, 0.8, 0.1, 0.11),
            ] {
                let g = pop_loss_grad(OddPredictor::new(a, b), alpha, beta, kind);
                let fd_a = (pop_loss(OddPredictor::new(a + h, b), alpha, beta, kind)
                    - pop_loss(OddPredictor::new(a - h, b), alpha, beta, kind))
                    / (2.0 * h);
                let fd_b = (pop_loss(OddPredictor::new(a, b + h), alpha, beta, kind)
                    - pop_loss(OddPredictor::new(a, b - h), alpha, beta, kind))
                    / (2.0 * h);
                assert!((g[0] - fd_a).abs() < 1e-8, "{kind:?} dL/da");
                assert!((g[1] - fd_b).abs() < 1e-8, "{kind:?} dL/db");
            }
        }
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let h = 1e-6;
        for kind in [LossKind::Mse, LossKind::Logistic] {
            let (a, b, alpha, beta) = (0.45, -0.9, 0.15, 0.35);
            let g = irms_residual_grad(OddPredictor::new(a, b), alpha, beta, kind);
            let fd_a = (irms_residual(OddPredictor::new(a + h, b), alpha, beta, kind)
                - irms_residual(OddPredictor::new(a - h, b), alpha, beta, kind))
                / (2.0 * h);
            let fd_b = (irms_residual(OddPredictor::new(a, b + h), alpha, beta, kind)
                - irms_residual(OddPredictor::new(a, b - h), alpha, beta, kind))
                / (2.0 * h);
            assert!((g[0] - fd_a).abs() < 1e-8);
            assert!((g[1] - fd_b).abs() < 1e-8);
        }
    }

    #[test]
    fn stationarity_reference_cases() {
        let envs = TwoBitEnvSet::new(0.1, vec![0.11, 0.4]).unwrap();
        // The invariant predictor is stationary for some reweighting.
        let f = invariant_predictor(0.1, LossKind::Mse);
        let lambda = reweighted_stationarity(f, &envs, LossKind::Mse)
            .unwrap()
            .expect("invariant predictor admits a reweighting");
        assert!((lambda[0] + lambda[1] - 1.0).abs() < 1e-12);
        // Env 1's own optimum gets lambda = (1, 0).
        let alpha = 0.1;
        let beta = 0.11;
        let a_opt = ((1.0 - alpha) - beta) / ((1.0 - alpha) - beta * (1.0 - 2.0 * alpha));
        let b_opt = (beta - alpha) / (alpha + beta * (1.0 - 2.0 * alpha));
        let lambda = reweighted_stationarity(
            OddPredictor::new(a_opt, b_opt),
            &envs,
            LossKind::Mse,
        )
        .unwrap()
        .expect("per-env optimum is stationary");
        assert!((lambda[0] - 1.0).abs() < 1e-6);
        assert!(lambda[1].abs() < 1e-6);
        // A generic non-stationary point admits none.
        assert!(reweighted_stationarity(
            OddPredictor::new(2.5, -1.3),
            &envs,
            LossKind::Mse
        )
        .unwrap()
        .is_none());
    }

    #[test]
    fn failure_band_reference_points() {
        assert!(failure_range_check(0.1, LossKind::Mse).unwrap());
        assert!(!failure_range_check(0.25, LossKind::Mse).unwrap());
        assert!(failure_range_check(0.9, LossKind::Mse).unwrap());
        assert!(matches!(
            failure_range_check(0.1, LossKind::Logistic),
            Err(Error::UnsupportedLossKind(_))
        ));
    }

    #[test]
    fn domination_flags_are_exact() {
        let tuples = vec![
            vec![1.0, 1.0],
            vec![1.0, 1.0], // duplicates never dominate each other
            vec![0.5, 2.0],
            vec![0.5, 0.5],
            vec![2.0, 0.4],
        ];
        let flags = mark_dominated(&tuples);
        assert_eq!(flags, vec![true, true, true, false, false]);
    }
}
