//! Preference-aware multi-objective balancing.
//!
//! Given k nonnegative objective values `L`, a positive preference vector
//! `p`, and the k x d matrix `G` of per-objective gradients, each step
//! solves a small LP for objective weights `beta` on the simplex and
//! descends along `G^T beta`.
//!
//! The normalized losses `Lhat_i = p_i L_i / sum_j p_j L_j` measure how far
//! the iterate is from the exact-preference condition `p_i L_i = p_j L_j`
//! for all i, j. Their KL divergence to the uniform vector,
//! `mu = sum_i Lhat_i ln(k Lhat_i)`, drives a mode switch:
//!
//! * `mu > tolerance` (balance): maximize alignment with the anchor
//!   `g_b = p (x) (ln(k Lhat) - mu)` lifted into parameter space through
//!   `G^T`, subject to not increasing the worst-divergence objective and
//!   not undoing objectives that already conflict with the anchor.
//! * `mu <= tolerance` (descent): plain non-dominating descent, maximizing
//!   the minimum first-order decrease across objectives.
//!
//! The anchor lives in objective space while the LP compares directions in
//! parameter space, so every comparison goes through the Gram matrix
//! `C = G G^T`; only inner products of gradient rows ever enter the LP.

pub mod simplex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{DenseNet, GradScope};
use crate::objectives::LossVector;
use simplex::{Constraint, Op};

/// Floor applied to weighted losses before taking logs.
pub const LOSS_FLOOR: f64 = 1e-12;

/// Default divergence below which the step switches to pure descent.
pub const DEFAULT_MU_TOLERANCE: f64 = 1e-3;

/// Positive relative weights over the objectives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Preference(Vec<f64>);

impl Preference {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidSpec("empty preference".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidSpec(
                "preference weights must be positive and finite".into(),
            ));
        }
        Ok(Preference(weights))
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

/// Inputs for one weight solve.
pub struct EpoState<'a> {
    pub losses: &'a LossVector,
    pub grads: &'a Matrix,
    pub pref: &'a Preference,
    pub mu_tolerance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpMode {
    Balance,
    Descent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub beta: Vec<f64>,
    pub objective_value: f64,
    pub mode: LpMode,
    /// Set when a balance solve was requested but the LP was infeasible or
    /// degenerate and the step fell back to descent.
    pub fallback: bool,
}

/// `p_i L_i / sum_j p_j L_j`; entries in [0, 1] summing to one.
pub fn normalize_losses(losses: &LossVector, pref: &Preference) -> Result<Vec<f64>> {
    let weighted = weighted_losses(losses, pref)?;
    let sum: f64 = weighted.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateLosses(format!(
            "weighted loss sum {sum} is not positive"
        )));
    }
    Ok(weighted.iter().map(|w| w / sum).collect())
}

fn weighted_losses(losses: &LossVector, pref: &Preference) -> Result<Vec<f64>> {
    if losses.len() != pref.len() {
        return Err(Error::Shape {
            context: "normalize_losses",
            expected: format!("{} losses", pref.len()),
            got: format!("{}", losses.len()),
        });
    }
    Ok(losses
        .as_slice()
        .iter()
        .zip(pref.as_slice())
        .map(|(&l, &p)| p * l)
        .collect())
}

/// KL divergence of the normalized losses to the uniform vector;
/// zero exactly when all weighted losses agree. Uses 0 ln 0 = 0.
pub fn divergence_mu(norm_losses: &[f64]) -> f64 {
    let k = norm_losses.len() as f64;
    let mut mu = 0.0;
    for &l in norm_losses {
        if l > 0.0 {
            mu += l * (k * l).ln();
        }
    }
    // KL is nonnegative; tiny negative residue is rounding noise.
    mu.max(0.0)
}

/// Objective-space adjustment direction `p (x) (ln(k Lhat) - mu)`.
///
/// Exactly the zero vector when the normalized losses are within 1e-12 of
/// uniform, so "anchor is zero" and "exact preference satisfied" coincide.
pub fn anchor_direction(losses: &LossVector, pref: &Preference) -> Result<Vec<f64>> {
    let weighted = weighted_losses(losses, pref)?;
    let sum: f64 = weighted.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateLosses(format!(
            "weighted loss sum {sum} is not positive"
        )));
    }
    let k = weighted.len() as f64;
    let ratios: Vec<f64> = weighted.iter().map(|&w| (k * w) / sum).collect();
    if ratios.iter().all(|r| (r - 1.0).abs() <= 1e-12) {
        return Ok(vec![0.0; weighted.len()]);
    }
    let norm: Vec<f64> = weighted.iter().map(|&w| w / sum).collect();
    let mu = divergence_mu(&norm);
    Ok(pref
        .as_slice()
        .iter()
        .zip(&ratios)
        .map(|(&p, &r)| p * (r.max(LOSS_FLOOR).ln() - mu))
        .collect())
}

/// Solves for the simplex weights combining the gradient rows.
pub fn solve_weights(state: &EpoState) -> Result<LpSolution> {
    let k = state.losses.len();
    if state.grads.rows() != k {
        return Err(Error::Shape {
            context: "solve_weights",
            expected: format!("{k} gradient rows"),
            got: format!("{}", state.grads.rows()),
        });
    }
    if state.grads.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("solve_weights"));
    }

    // The argmax over beta is invariant to a positive rescaling of the
    // Gram matrix; normalizing keeps the tableau conditioned when
    // gradient norms are large. The reported objective value is restored
    // to the raw scale afterwards.
    let (gram, scale) = normalized_gram(state.grads);

    let anchor = match anchor_direction(state.losses, state.pref) {
        Ok(a) => a,
        // All-zero weighted losses: nothing to balance, fall back.
        Err(Error::DegenerateLosses(_)) => {
            let mut sol = solve_descent(&gram, scale)?;
            sol.fallback = true;
            return Ok(sol);
        }
        Err(e) => return Err(e),
    };
    let norm = normalize_losses(state.losses, state.pref)?;
    let mu = divergence_mu(&norm);
    if mu <= state.mu_tolerance {
        return solve_descent(&gram, scale);
    }

    // Anchor lifted to parameter space and re-projected onto gradient rows:
    // cg_j = G_j . (G^T g_b) = (C g_b)_j.
    let cg = mat_vec(&gram, &anchor);
    let weighted = weighted_losses(state.losses, state.pref)?;
    let max_w = weighted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let j_star: Vec<usize> = (0..k)
        .filter(|&j| weighted[j] >= max_w - 1e-12 * max_w.abs().max(1.0))
        .collect();
    let j_bar: Vec<usize> = (0..k).filter(|&j| cg[j] <= 0.0).collect();

    let mut constraints = vec![Constraint::new(vec![1.0; k], Op::Eq, 1.0)];
    for &j in &j_bar {
        if j_star.contains(&j) {
            continue;
        }
        constraints.push(Constraint::new(gram_row(&gram, j, k), Op::Ge, cg[j]));
    }
    for &j in &j_star {
        constraints.push(Constraint::new(gram_row(&gram, j, k), Op::Ge, 0.0));
    }

    match simplex::maximize(&cg, &constraints) {
        Ok(res) => {
            let beta = prefer_uniform(res.x, &cg, &constraints);
            let objective_value = scale * dot_slice(&cg, &beta);
            Ok(LpSolution {
                beta,
                objective_value,
                mode: LpMode::Balance,
                fallback: false,
            })
        }
        Err(Error::InfeasibleLp) => {
            log::warn!("balance LP infeasible; falling back to descent step");
            let mut sol = solve_descent(&gram, scale)?;
            sol.fallback = true;
            Ok(sol)
        }
        Err(e) => Err(e),
    }
}

/// Pure non-dominating descent: maximize the minimum of `(C beta)_j`.
fn solve_descent(gram: &Matrix, scale: f64) -> Result<LpSolution> {
    let all: Vec<usize> = (0..gram.rows()).collect();
    let beta = max_min_alignment(gram, &all)?;
    let beta = prefer_uniform_descent(beta, gram);
    let objective_value = scale * min_alignment(gram, &beta);
    Ok(LpSolution {
        beta,
        objective_value,
        mode: LpMode::Descent,
        fallback: false,
    })
}

/// Weights maximizing the minimum first-order decrease over the listed
/// objectives: `argmax_beta min_{j in group} (C beta)_j` over the simplex.
/// The returned direction descends every group member when the optimum is
/// positive; used to shrink a tied over-weighted group in lockstep when
/// the anchor's components over that group cancel.
pub fn group_descent_weights(grads: &Matrix, group: &[usize]) -> Result<Vec<f64>> {
    if group.is_empty() {
        return Err(Error::InvalidSpec("empty objective group".into()));
    }
    let (gram, _) = normalized_gram(grads);
    max_min_alignment(&gram, group)
}

fn normalized_gram(grads: &Matrix) -> (Matrix, f64) {
    let mut gram = gram_matrix(grads);
    let scale = gram.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale > 0.0 {
        for v in 0..gram.rows() {
            for u in 0..gram.cols() {
                let x = gram.get(v, u) / scale;
                gram.set(v, u, x);
            }
        }
        (gram, scale)
    } else {
        (gram, 1.0)
    }
}

fn max_min_alignment(gram: &Matrix, group: &[usize]) -> Result<Vec<f64>> {
    let k = gram.rows();
    // Variables: beta_1..beta_k, u, v with t = u - v free.
    let nv = k + 2;
    let mut objective = vec![0.0; nv];
    objective[k] = 1.0;
    objective[k + 1] = -1.0;
    let mut constraints = Vec::with_capacity(group.len() + 1);
    let mut simplex_row = vec![0.0; nv];
    simplex_row[..k].fill(1.0);
    constraints.push(Constraint::new(simplex_row, Op::Eq, 1.0));
    for &j in group {
        let mut row = vec![0.0; nv];
        row[..k].copy_from_slice(&gram_row(gram, j, k));
        row[k] = -1.0;
        row[k + 1] = 1.0;
        constraints.push(Constraint::new(row, Op::Ge, 0.0));
    }
    let res = simplex::maximize(&objective, &constraints)?;
    Ok(res.x[..k].to_vec())
}

/// Degenerate optima resolve toward the uniform weights when those achieve
/// the same LP value and satisfy the constraints.
fn prefer_uniform(beta: Vec<f64>, objective: &[f64], constraints: &[Constraint]) -> Vec<f64> {
    let k = beta.len();
    let uniform = vec![1.0 / k as f64; k];
    let tol = 1e-10;
    let obj_beta = dot_slice(objective, &beta);
    let obj_uni = dot_slice(objective, &uniform);
    if obj_uni + tol < obj_beta {
        return beta;
    }
    for con in constraints {
        let lhs = dot_slice(&con.coeffs, &uniform);
        let ok = match con.op {
            Op::Le => lhs <= con.rhs + tol,
            Op::Ge => lhs >= con.rhs - tol,
            Op::Eq => (lhs - con.rhs).abs() <= tol,
        };
        if !ok {
            return beta;
        }
    }
    uniform
}

fn prefer_uniform_descent(beta: Vec<f64>, gram: &Matrix) -> Vec<f64> {
    let k = beta.len();
    let uniform = vec![1.0 / k as f64; k];
    if min_alignment(gram, &uniform) + 1e-10 >= min_alignment(gram, &beta) {
        return uniform;
    }
    beta
}

fn min_alignment(gram: &Matrix, beta: &[f64]) -> f64 {
    let v = mat_vec(gram, beta);
    v.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// One parameter update along the combined direction, restricted to the
/// gradient scope the rows were computed over.
pub fn epo_step(net: &mut DenseNet, state: &EpoState, scope: GradScope, lr: f64) -> Result<LpSolution> {
    if !(lr > 0.0) {
        return Err(Error::InvalidSpec("learning rate must be positive".into()));
    }
    let sol = solve_weights(state)?;
    let direction = combine_direction(state.grads, &sol.beta);
    let range = net.scope_range(scope);
    if direction.len() != range.len() {
        return Err(Error::Shape {
            context: "epo_step",
            expected: format!("direction of length {}", range.len()),
            got: format!("{}", direction.len()),
        });
    }
    let params = net.params_mut();
    for (p, d) in params[range].iter_mut().zip(&direction) {
        *p -= lr * d;
    }
    Ok(sol)
}

/// `G^T beta`: the beta-weighted combination of gradient rows.
pub fn combine_direction(grads: &Matrix, beta: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grads.cols()];
    for (j, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        for (o, g) in out.iter_mut().zip(grads.row(j)) {
            *o += b * g;
        }
    }
    out
}

pub fn gram_matrix(grads: &Matrix) -> Matrix {
    let k = grads.rows();
    let mut gram = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = dot_slice(grads.row(i), grads.row(j));
            gram.set(i, j, v);
            gram.set(j, i, v);
        }
    }
    gram
}

fn gram_row(gram: &Matrix, j: usize, k: usize) -> Vec<f64> {
    (0..k).map(|i| gram.get(j, i)).collect()
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| dot_slice(m.row(i), v)).collect()
}

fn dot_slice(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::LossVector;

    fn pref(p: &[f64]) -> Preference {
        Preference::new(p.to_vec()).unwrap()
    }

    fn losses(l: &[f64]) -> LossVector {
        LossVector::new(l.to_vec())
    }

    #[test]
    fn normalize_uniform_case() {
        let n = normalize_losses(&losses(&[1.0, 1.0, 1.0]), &pref(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(n, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn normalize_point_mass() {
        let n = normalize_losses(&losses(&[2.0, 0.0, 0.0]), &pref(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(n, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_hand_computed_example() {
        // weighted (0.5, 1.0, 1.0), sum 2.5 -> (0.2, 0.4, 0.4)
        let n = normalize_losses(&losses(&[0.5, 0.1, 0.01]), &pref(&[1.0, 10.0, 100.0])).unwrap();
        assert!((n[0] - 0.2).abs() < 1e-15);
        assert!((n[1] - 0.4).abs() < 1e-15);
        assert!((n[2] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let err =
            normalize_losses(&losses(&[0.0, 0.0]), &pref(&[1.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::DegenerateLosses(_)));
    }

    #[test]
    fn mu_zero_at_uniform_and_log_k_at_point_mass() {
        assert_eq!(divergence_mu(&[1.0 / 3.0; 3]), 0.0);
        let mu = divergence_mu(&[1.0, 0.0, 0.0]);
        assert!((mu - 3.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mu_matches_direct_evaluation() {
        // Oracle: direct evaluation of 0.2 ln 0.6 + 0.4 ln 1.2 + 0.4 ln 1.2.
        let expected = 0.2 * 0.6f64.ln() + 0.4 * 1.2f64.ln() + 0.4 * 1.2f64.ln();
        let mu = divergence_mu(&[0.2, 0.4, 0.4]);
        assert!((mu - expected).abs() < 1e-14);
    }

    #[test]
    fn anchor_zero_exactly_at_exact_preference() {
        // p_i L_i equal across i.
        let a = anchor_direction(&losses(&[0.5, 0.05, 0.005]), &pref(&[1.0, 10.0, 100.0])).unwrap();
        assert_eq!(a, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn anchor_signs_follow_over_and_under_weighting() {
        // k = 2, Lhat = (0.9, 0.1): overweighted objective gets a positive
        // anchor weight, the underweighted one negative.
        let a = anchor_direction(&losses(&[0.9, 0.1]), &pref(&[1.0, 1.0])).unwrap();
        assert!(a[0] > 0.0);
        assert!(a[1] < 0.0);
    }

    #[test]
    fn anchor_scales_homogeneously_in_preference() {
        let l = losses(&[0.4, 0.3, 0.3]);
        let a1 = anchor_direction(&l, &pref(&[1.0, 2.0, 3.0])).unwrap();
        let a2 = anchor_direction(&l, &pref(&[10.0, 20.0, 30.0])).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((10.0 * x - y).abs() < 1e-9 * y.abs().max(1.0));
        }
    }

    #[test]
    fn identical_gradient_rows_tie_break_to_uniform() {
        let g = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        let l = losses(&[0.3, 0.2, 0.1]);
        let p = pref(&[1.0, 1.0, 1.0]);
        let state = EpoState { losses: &l, grads: &g, pref: &p, mu_tolerance: 1e-6 };
        let sol = solve_weights(&state).unwrap();
        assert_eq!(sol.mode, LpMode::Balance);
        for b in &sol.beta {
            assert!((b - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn descent_mode_matches_two_objective_min_norm_weights() {
        // Conflicting gradients with mu below tolerance: the max-min LP
        // coincides with the closed-form min-norm combination
        // beta_1 = (g2 - g1).g2 / |g1 - g2|^2 when that lies inside (0, 1).
        let g1 = vec![1.0, 0.2, -0.3];
        let g2 = vec![-0.8, 0.1, 0.5];
        let g = Matrix::from_rows(&[g1.clone(), g2.clone()]).unwrap();
        let l = losses(&[0.5, 0.5]);
        let p = pref(&[1.0, 1.0]);
        let state = EpoState { losses: &l, grads: &g, pref: &p, mu_tolerance: 1e-3 };
        let sol = solve_weights(&state).unwrap();
        assert_eq!(sol.mode, LpMode::Descent);
        let diff: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a - b).collect();
        let expected_b1 =
            (dot_slice(&g2, &g2) - dot_slice(&g1, &g2)) / dot_slice(&diff, &diff);
        assert!(
            (0.0..=1.0).contains(&expected_b1),
            "test instance should have an interior min-norm point"
        );
        assert!((sol.beta[0] - expected_b1).abs() < 1e-6);
    }

    #[test]
    fn nan_gradients_are_rejected() {
        let g = Matrix::from_rows(&[vec![f64::NAN, 1.0], vec![0.0, 1.0]]).unwrap();
        let l = losses(&[0.5, 0.2]);
        let p = pref(&[1.0, 1.0]);
        let state = EpoState { losses: &l, grads: &g, pref: &p, mu_tolerance: 1e-3 };
        assert!(matches!(
            solve_weights(&state),
            Err(Error::NonFiniteGradient(_))
        ));
    }
}
