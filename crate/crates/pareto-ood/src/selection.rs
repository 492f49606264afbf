//! Model selection over logged run histories.
//!
//! Within each run, the step with the best preference-weighted loss
//! (past a convergence cutoff) is the run's candidate. Across runs, a
//! validation-accuracy bar at a configurable percentile filters out
//! unreliable candidates, and the survivor with the best score wins.
//!
//! The raw score `s = L . p / sum(p)` is a weighted *loss*: lower is
//! better. One published description of this procedure stores the step
//! with the maximum score, which would systematically pick the worst
//! model under the preferred objectives; the default here minimizes, and
//! `maximize_raw_score` is kept as a config escape hatch for comparisons.

use serde::{Deserialize, Serialize};

use crate::epo::Preference;
use crate::error::{Error, Result};
use crate::objectives::LossVector;
use crate::trainer::RunHistory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreDirection {
    MinimizeWeightedLoss,
    MaximizeRawScore,
}

impl Default for ScoreDirection {
    fn default() -> Self {
        ScoreDirection::MinimizeWeightedLoss
    }
}

fn default_percentile() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub preference: Preference,
    /// Steps strictly before this are ignored as unconverged.
    pub convergence_cutoff: u64,
    /// Validation-accuracy bar position between the worst and best
    /// candidate: bar = min + (max - min) * percentile.
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub score_direction: ScoreDirection,
}

impl SelectionConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.percentile) {
            return Err(Error::InvalidSpec("percentile must lie in [0,1]".into()));
        }
        Ok(())
    }
}

/// A run's best step under the configured score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub run_id: String,
    pub step: u64,
    pub score: f64,
    pub val_acc: f64,
    pub satisfaction: f64,
    /// Filled in by `select`: whether the candidate passed the bar.
    pub survived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub chosen_run: String,
    pub chosen_step: u64,
    pub score: f64,
    pub val_acc: f64,
    pub satisfaction: f64,
    /// Set when no run cleared the bar and the best-validation run was
    /// returned instead.
    pub fallback: bool,
    /// The validation bar that was applied.
    pub validation_bar: f64,
    /// Per-run candidates, sorted by run id.
    pub candidates: Vec<Candidate>,
}

/// Preference-weighted loss sum `L . p / sum(p)`.
pub fn pair_score(losses: &LossVector, pref: &Preference) -> Result<f64> {
    if losses.len() != pref.len() {
        return Err(Error::Shape {
            context: "pair_score",
            expected: format!("{} losses", pref.len()),
            got: format!("{}", losses.len()),
        });
    }
    let total: f64 = pref.as_slice().iter().sum();
    Ok(losses
        .as_slice()
        .iter()
        .zip(pref.as_slice())
        .map(|(&l, &p)| l * p)
        .sum::<f64>()
        / total)
}

/// Normalized distance from the exact-preference condition:
/// `max_{i != j} |p_i L_i - p_j L_j| / sum_j p_j L_j`; zero when all
/// weighted losses agree, and defined as zero when they are all zero.
pub fn pareto_satisfaction(losses: &LossVector, pref: &Preference) -> Result<f64> {
    if losses.len() != pref.len() {
        return Err(Error::Shape {
            context: "pareto_satisfaction",
            expected: format!("{} losses", pref.len()),
            got: format!("{}", losses.len()),
        });
    }
    let weighted: Vec<f64> = losses
        .as_slice()
        .iter()
        .zip(pref.as_slice())
        .map(|(&l, &p)| l * p)
        .collect();
    let sum: f64 = weighted.iter().sum();
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok(max_pairwise_gap(&weighted) / sum)
}

fn max_pairwise_gap(weighted: &[f64]) -> f64 {
    let max = weighted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = weighted.iter().cloned().fold(f64::INFINITY, f64::min);
    max - min
}

/// Membership in the eps-relaxed exact-preference constraint set:
/// `max_{i != j} |p_i L_i - p_j L_j| <= eps` (unnormalized).
pub fn constraint_set_membership(losses: &LossVector, pref: &Preference, eps: f64) -> Result<bool> {
    if losses.len() != pref.len() {
        return Err(Error::Shape {
            context: "constraint_set_membership",
            expected: format!("{} losses", pref.len()),
            got: format!("{}", losses.len()),
        });
    }
    let weighted: Vec<f64> = losses
        .as_slice()
        .iter()
        .zip(pref.as_slice())
        .map(|(&l, &p)| l * p)
        .collect();
    Ok(max_pairwise_gap(&weighted) <= eps)
}

/// The run's best logged step at or past the cutoff, under the score
/// direction; ties resolve to the earliest step.
pub fn best_step(history: &RunHistory, cfg: &SelectionConfig) -> Result<Candidate> {
    cfg.validate()?;
    let mut best: Option<Candidate> = None;
    for record in &history.steps {
        if record.step < cfg.convergence_cutoff {
            continue;
        }
        let val_acc = record.val_acc.ok_or_else(|| {
            Error::InvalidHistory(format!(
                "run {} step {} lacks a validation accuracy",
                history.run_id, record.step
            ))
        })?;
        let score = pair_score(&record.losses, &cfg.preference)?;
        let better = match (&best, cfg.score_direction) {
            (None, _) => true,
            (Some(b), ScoreDirection::MinimizeWeightedLoss) => score < b.score,
            (Some(b), ScoreDirection::MaximizeRawScore) => score > b.score,
        };
        if better {
            best = Some(Candidate {
                run_id: history.run_id.clone(),
                step: record.step,
                score,
                val_acc,
                satisfaction: pareto_satisfaction(&record.losses, &cfg.preference)?,
                survived: false,
            });
        }
    }
    best.ok_or_else(|| {
        Error::InvalidHistory(format!(
            "run {} has no logged steps past the cutoff {}",
            history.run_id, cfg.convergence_cutoff
        ))
    })
}

/// Selects a run/step across histories. Deterministic and order
/// invariant: candidates are ranked on (score, run_id).
pub fn select(histories: &[RunHistory], cfg: &SelectionConfig) -> Result<SelectionResult> {
    cfg.validate()?;
    if histories.is_empty() {
        return Err(Error::InvalidHistory("no histories supplied".into()));
    }
    let mut candidates: Vec<Candidate> = histories
        .iter()
        .map(|h| best_step(h, cfg))
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| a.run_id.cmp(&b.run_id));

    let max_acc = candidates.iter().map(|c| c.val_acc).fold(f64::NEG_INFINITY, f64::max);
    let min_acc = candidates.iter().map(|c| c.val_acc).fold(f64::INFINITY, f64::min);
    let bar = (max_acc - min_acc) * cfg.percentile + min_acc;
    for c in &mut candidates {
        c.survived = c.val_acc >= bar;
    }

    let pick = |pool: &[&Candidate]| -> Option<Candidate> {
        pool.iter()
            .min_by(|a, b| {
                let ord = match cfg.score_direction {
                    ScoreDirection::MinimizeWeightedLoss => a.score.total_cmp(&b.score),
                    ScoreDirection::MaximizeRawScore => b.score.total_cmp(&a.score),
                };
                ord.then_with(|| a.run_id.cmp(&b.run_id))
            })
            .map(|c| (*c).clone())
    };

    let survivors: Vec<&Candidate> = candidates.iter().filter(|c| c.survived).collect();
    let (chosen, fallback) = if survivors.is_empty() {
        // Only reachable with non-finite accuracies; fall back to the
        // best-validation run and flag it.
        let best_val = candidates
            .iter()
            .max_by(|a, b| a.val_acc.total_cmp(&b.val_acc).then_with(|| b.run_id.cmp(&a.run_id)))
            .cloned()
            .expect("non-empty candidates");
        (best_val, true)
    } else {
        (pick(&survivors).expect("non-empty survivors"), false)
    };

    Ok(SelectionResult {
        chosen_run: chosen.run_id.clone(),
        chosen_step: chosen.step,
        score: chosen.score,
        val_acc: chosen.val_acc,
        satisfaction: chosen.satisfaction,
        fallback,
        validation_bar: bar,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{StepRecord, TrainConfig};

    fn pref(p: &[f64]) -> Preference {
        Preference::new(p.to_vec()).unwrap()
    }

    fn losses(l: &[f64]) -> LossVector {
        LossVector::new(l.to_vec())
    }

    fn dummy_config() -> TrainConfig {
        use crate::nn::{Activation, GradScope, LossKind};
        use crate::trainer::{DescentOptimizer, Method, NetSpec};
        TrainConfig {
            net: NetSpec { layer_dims: vec![2, 1], activation: Activation::Identity },
            loss_kind: LossKind::Logistic,
            method: Method::Erm,
            pretrain_epochs: 0,
            balance_epochs: 0,
            lr_descent: 0.1,
            lr_balance: 0.1,
            batch_size: 8,
            grad_scope: GradScope::Full,
            preference: pref(&[1.0, 1.0, 1.0]),
            estimator: Default::default(),
            mu_tolerance: 1e-3,
            optimizer_descent: DescentOptimizer::Sgd,
            seed: 0,
            log_interval: 100,
            log_full_losses: false,
            divergence_threshold: 1e6,
        }
    }

    fn history(run_id: &str, steps: Vec<StepRecord>) -> RunHistory {
        RunHistory {
            schema: crate::trainer::HISTORY_SCHEMA,
            run_id: run_id.into(),
            config: dummy_config(),
            env_spec: serde_json::Value::Null,
            diverged: false,
            error: None,
            steps,
        }
    }

    fn record(step: u64, l: &[f64], val: f64) -> StepRecord {
        StepRecord {
            step,
            losses: losses(l),
            train_acc: 0.9,
            val_acc: Some(val),
            test_acc: Some(0.5),
            beta: None,
            mu: None,
        }
    }

    #[test]
    fn score_reference_values() {
        assert_eq!(
            pair_score(&losses(&[1.0, 1.0, 1.0]), &pref(&[1.0, 1.0, 1.0])).unwrap(),
            1.0
        );
        // Near-point-mass preference recovers the dominant loss.
        let s = pair_score(&losses(&[2.0, 0.0, 0.0]), &pref(&[1.0, 1e-9, 1e-9])).unwrap();
        assert!((s - 2.0).abs() < 1e-8);
        // Hand-computed: p_hat = (1, 10, 100)/111, s = (0.5 + 1 + 1)/111.
        let s = pair_score(&losses(&[0.5, 0.1, 0.01]), &pref(&[1.0, 10.0, 100.0])).unwrap();
        assert!((s - 2.5 / 111.0).abs() < 1e-15);
    }

    #[test]
    fn satisfaction_reference_values() {
        assert_eq!(
            pareto_satisfaction(&losses(&[0.5, 0.05]), &pref(&[1.0, 10.0])).unwrap(),
            0.0
        );
        let s = pareto_satisfaction(&losses(&[1.0, 0.0, 0.0]), &pref(&[1.0, 2.0, 3.0])).unwrap();
        assert!(s > 0.0);
        // (0.2, 0.4, 0.4) with unit preference: gap 0.2 over sum 1.0.
        let s = pareto_satisfaction(&losses(&[0.2, 0.4, 0.4]), &pref(&[1.0, 1.0, 1.0])).unwrap();
        assert!((s - 0.2).abs() < 1e-15);
        assert_eq!(
            pareto_satisfaction(&losses(&[0.0, 0.0]), &pref(&[1.0, 2.0])).unwrap(),
            0.0
        );
    }

    #[test]
    fn scores_are_invariant_to_preference_rescaling() {
        let l = losses(&[0.3, 0.02, 0.007]);
        let p1 = pref(&[1.0, 10.0, 100.0]);
        let p2 = pref(&[7.0, 70.0, 700.0]);
        assert!(
            (pair_score(&l, &p1).unwrap() - pair_score(&l, &p2).unwrap()).abs() < 1e-15
        );
        assert!(
            (pareto_satisfaction(&l, &p1).unwrap() - pareto_satisfaction(&l, &p2).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn membership_reference_cases() {
        let p = pref(&[1.0, 10.0]);
        // Exact-preference point: in the set for any eps.
        assert!(constraint_set_membership(&losses(&[0.5, 0.05]), &p, 0.0).unwrap());
        // Unequal weighted losses fail at eps = 0.
        assert!(!constraint_set_membership(&losses(&[0.5, 0.01]), &p, 0.0).unwrap());
        assert!(constraint_set_membership(&losses(&[0.5, 0.01]), &p, 0.5).unwrap());
    }

    #[test]
    fn single_run_selects_best_post_cutoff_step() {
        let h = history(
            "only",
            vec![
                record(100, &[0.1, 0.0, 0.0], 0.9), // before cutoff
                record(200, &[0.5, 0.1, 0.1], 0.9),
                record(300, &[0.2, 0.05, 0.05], 0.91),
            ],
        );
        let cfg = SelectionConfig {
            preference: pref(&[1.0, 1.0, 1.0]),
            convergence_cutoff: 150,
            percentile: 0.5,
            score_direction: ScoreDirection::MinimizeWeightedLoss,
        };
        let res = select(std::slice::from_ref(&h), &cfg).unwrap();
        assert_eq!(res.chosen_run, "only");
        assert_eq!(res.chosen_step, 300);
        assert!(!res.fallback);
    }

    #[test]
    fn equal_validation_prefers_lower_weighted_loss() {
        let a = history("a", vec![record(200, &[0.1, 0.0, 0.0], 0.9)]);
        let b = history("b", vec![record(200, &[0.5, 0.0, 0.0], 0.9)]);
        let cfg = SelectionConfig {
            preference: pref(&[1.0, 1.0, 1.0]),
            convergence_cutoff: 0,
            percentile: 0.5,
            score_direction: ScoreDirection::MinimizeWeightedLoss,
        };
        let res = select(&[b, a], &cfg).unwrap();
        assert_eq!(res.chosen_run, "a");
    }

    #[test]
    fn selection_is_order_invariant() {
        let runs = vec![
            history("r1", vec![record(100, &[0.4, 0.2, 0.1], 0.85)]),
            history("r2", vec![record(100, &[0.3, 0.1, 0.1], 0.88)]),
            history("r3", vec![record(100, &[0.2, 0.4, 0.4], 0.60)]),
        ];
        let cfg = SelectionConfig {
            preference: pref(&[1.0, 2.0, 4.0]),
            convergence_cutoff: 0,
            percentile: 0.5,
            score_direction: ScoreDirection::MinimizeWeightedLoss,
        };
        let res1 = select(&runs, &cfg).unwrap();
        let mut reversed = runs.clone();
        reversed.reverse();
        let res2 = select(&reversed, &cfg).unwrap();
        assert_eq!(res1, res2);
    }

    #[test]
    fn cross_module_consistency_with_anchor_direction() {
        use crate::epo::anchor_direction;
        let p = pref(&[1.0, 10.0, 100.0]);
        let cases = [
            losses(&[0.5, 0.05, 0.005]),
            losses(&[0.5, 0.06, 0.005]),
            losses(&[0.3, 0.03, 0.003]),
            losses(&[1.0, 0.2, 0.004]),
        ];
        for l in &cases {
            let sat = pareto_satisfaction(l, &p).unwrap();
            let anchor = anchor_direction(l, &p).unwrap();
            let anchor_zero = anchor.iter().all(|&a| a == 0.0);
            assert_eq!(sat < 1e-10, anchor_zero, "losses {:?}", l.as_slice());
        }
    }
}
