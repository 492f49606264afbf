//! Dense two-phase simplex for the tiny LPs solved every balancing step.
//!
//! The programs here have at most ~8 variables and ~16 rows, so the tableau
//! is kept dense and reduced costs are recomputed from scratch each
//! iteration rather than maintained incrementally. Bland's rule (lowest
//! eligible index for both the entering and leaving choice) makes cycling
//! impossible on the degenerate instances the balancing step produces when
//! gradient rows coincide.

use crate::error::{Error, Result};

const EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
pub struct Constraint {
    pub coeffs: Vec<f64>,
    pub op: Op,
    pub rhs: f64,
}

impl Constraint {
    pub fn new(coeffs: Vec<f64>, op: Op, rhs: f64) -> Self {
        Constraint { coeffs, op, rhs }
    }
}

#[derive(Debug, Clone)]
pub struct LpResult {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// Maximizes `c . x` subject to `constraints` and `x >= 0`.
pub fn maximize(c: &[f64], constraints: &[Constraint]) -> Result<LpResult> {
    let n = c.len();
    let m = constraints.len();
    for con in constraints {
        debug_assert_eq!(con.coeffs.len(), n);
    }

    // Normalize to nonnegative rhs; the op flips with the sign.
    let normalized: Vec<(Vec<f64>, Op, f64)> = constraints
        .iter()
        .map(|con| {
            let sgn = if con.rhs < 0.0 { -1.0 } else { 1.0 };
            let coeffs: Vec<f64> = con.coeffs.iter().map(|&a| sgn * a).collect();
            let op = match (con.op, con.rhs < 0.0) {
                (Op::Eq, _) => Op::Eq,
                (Op::Le, false) | (Op::Ge, true) => Op::Le,
                (Op::Ge, false) | (Op::Le, true) => Op::Ge,
            };
            (coeffs, op, sgn * con.rhs)
        })
        .collect();

    // Column layout: structural | slack/surplus | artificial | rhs.
    let n_slack = normalized
        .iter()
        .filter(|(_, op, _)| matches!(op, Op::Le | Op::Ge))
        .count();
    let n_art = normalized
        .iter()
        .filter(|(_, op, _)| matches!(op, Op::Ge | Op::Eq))
        .count();
    let art_base = n + n_slack;
    let ncols = art_base + n_art;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut basis: Vec<usize> = Vec::with_capacity(m);
    let mut artificial_cols: Vec<usize> = Vec::with_capacity(n_art);
    let mut slack_idx = n;
    let mut art_idx = art_base;

    for (coeffs, op, rhs) in &normalized {
        let mut row = vec![0.0; ncols + 1];
        row[..n].copy_from_slice(coeffs);
        row[ncols] = *rhs;
        match op {
            Op::Le => {
                row[slack_idx] = 1.0;
                basis.push(slack_idx);
                slack_idx += 1;
            }
            Op::Ge => {
                row[slack_idx] = -1.0;
                slack_idx += 1;
                row[art_idx] = 1.0;
                artificial_cols.push(art_idx);
                basis.push(art_idx);
                art_idx += 1;
            }
            Op::Eq => {
                row[art_idx] = 1.0;
                artificial_cols.push(art_idx);
                basis.push(art_idx);
                art_idx += 1;
            }
        }
        rows.push(row);
    }

    // Phase 1: drive artificials to zero.
    if n_art > 0 {
        let mut cost1 = vec![0.0; ncols];
        for &a in &artificial_cols {
            cost1[a] = -1.0;
        }
        run_simplex(&mut rows, &mut basis, &cost1, ncols)?;
        let phase1: f64 = basis
            .iter()
            .enumerate()
            .filter(|(_, &b)| artificial_cols.contains(&b))
            .map(|(i, _)| rows[i][ncols])
            .sum();
        if phase1 > 1e-7 {
            return Err(Error::InfeasibleLp);
        }
        // Pivot remaining artificials (at value zero) out of the basis.
        for i in 0..basis.len() {
            if artificial_cols.contains(&basis[i]) {
                let pivot_col = (0..art_base).find(|&j| rows[i][j].abs() > EPS);
                match pivot_col {
                    Some(j) => pivot(&mut rows, &mut basis, i, j),
                    None => {
                        // Redundant row; neutralize it.
                        for v in rows[i].iter_mut() {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
    }

    // Phase 2 with artificial columns disabled.
    let mut cost2 = vec![0.0; ncols];
    cost2[..n].copy_from_slice(c);
    let blocked: Vec<bool> = (0..ncols).map(|j| artificial_cols.contains(&j)).collect();
    run_simplex_blocked(&mut rows, &mut basis, &cost2, ncols, &blocked)?;

    let mut x = vec![0.0; n];
    for (i, &b) in basis.iter().enumerate() {
        if b < n {
            x[b] = rows[i][ncols];
        }
    }
    let objective = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    Ok(LpResult { x, objective })
}

fn run_simplex(
    rows: &mut Vec<Vec<f64>>,
    basis: &mut [usize],
    cost: &[f64],
    ncols: usize,
) -> Result<()> {
    let blocked = vec![false; ncols];
    run_simplex_blocked(rows, basis, cost, ncols, &blocked)
}

fn run_simplex_blocked(
    rows: &mut Vec<Vec<f64>>,
    basis: &mut [usize],
    cost: &[f64],
    ncols: usize,
    blocked: &[bool],
) -> Result<()> {
    // Generous cap; Bland's rule terminates long before this at our sizes.
    let max_iter = 10_000;
    for _ in 0..max_iter {
        // Reduced costs r_j = c_j - sum_i c_basis[i] * T[i][j].
        let entering = {
            let mut chosen = None;
            for j in 0..ncols {
                if blocked[j] || basis.contains(&j) {
                    continue;
                }
                let mut r = cost[j];
                for (i, &b) in basis.iter().enumerate() {
                    if cost[b] != 0.0 {
                        r -= cost[b] * rows[i][j];
                    }
                }
                if r > EPS {
                    chosen = Some(j);
                    break; // Bland: lowest index.
                }
            }
            chosen
        };
        let Some(j) = entering else {
            return Ok(());
        };
        // Ratio test; Bland tie-break on the smallest basis index.
        let mut leave: Option<(usize, f64)> = None;
        for (i, row) in rows.iter().enumerate() {
            if row[j] > EPS {
                let ratio = row[ncols] / row[j];
                match leave {
                    None => leave = Some((i, ratio)),
                    Some((li, lr)) => {
                        if ratio < lr - EPS
                            || (ratio < lr + EPS && basis[i] < basis[li])
                        {
                            leave = Some((i, ratio));
                        }
                    }
                }
            }
        }
        let Some((i, _)) = leave else {
            return Err(Error::UnboundedLp);
        };
        pivot(rows, basis, i, j);
    }
    Err(Error::UnboundedLp)
}

fn pivot(rows: &mut [Vec<f64>], basis: &mut [usize], pr: usize, pc: usize) {
    let pv = rows[pr][pc];
    for v in rows[pr].iter_mut() {
        *v /= pv;
    }
    for i in 0..rows.len() {
        if i == pr {
            continue;
        }
        let factor = rows[i][pc];
        if factor == 0.0 {
            continue;
        }
        let (head, tail) = if i < pr {
            let (a, b) = rows.split_at_mut(pr);
            (&mut a[i], &b[0])
        } else {
            let (a, b) = rows.split_at_mut(i);
            (&mut b[0], &a[pr])
        };
        for (hv, tv) in head.iter_mut().zip(tail.iter()) {
            *hv -= factor * tv;
        }
    }
    basis[pr] = pc;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn maximizes_simple_bounded_program() {
        // max x + y, x + y <= 1, x,y >= 0
        let res = maximize(
            &[1.0, 1.0],
            &[Constraint::new(vec![1.0, 1.0], Op::Le, 1.0)],
        )
        .unwrap();
        assert!((res.objective - 1.0).abs() < 1e-9);
    }

    #[test]
    fn handles_equality_and_ge_rows() {
        // max 2x + 3y, x + y = 1, y >= 0.2 -> x = 0, y = 1? No: y <= 1,
        // optimum at y = 1, x = 0, objective 3.
        let res = maximize(
            &[2.0, 3.0],
            &[
                Constraint::new(vec![1.0, 1.0], Op::Eq, 1.0),
                Constraint::new(vec![0.0, 1.0], Op::Ge, 0.2),
            ],
        )
        .unwrap();
        assert!((res.objective - 3.0).abs() < 1e-9);
        assert!((res.x[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn detects_infeasible_program() {
        let err = maximize(
            &[1.0],
            &[
                Constraint::new(vec![1.0], Op::Le, 1.0),
                Constraint::new(vec![1.0], Op::Ge, 2.0),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleLp));
    }

    #[test]
    fn detects_unbounded_program() {
        let err = maximize(&[1.0], &[Constraint::new(vec![-1.0], Op::Le, 1.0)]).unwrap_err();
        assert!(matches!(err, Error::UnboundedLp));
    }

    #[test]
    fn negative_rhs_rows_are_normalized() {
        // max x, -x <= -0.5  (i.e. x >= 0.5), x <= 2
        let res = maximize(
            &[1.0],
            &[
                Constraint::new(vec![-1.0], Op::Le, -0.5),
                Constraint::new(vec![1.0], Op::Le, 2.0),
            ],
        )
        .unwrap();
        assert!((res.objective - 2.0).abs() < 1e-9);
    }
}
