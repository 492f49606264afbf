//! Two-phase training with run-history logging.
//!
//! Phase one ("descent") minimizes the plain ERM loss. Phase two
//! ("balance") assembles the (ERM, IRMv1, V-REx) losses and gradients
//! every step and updates parameters either along a fixed linear
//! combination or along the preference-balanced direction from the LP
//! solver. The optimizer state is dropped at the phase boundary; the
//! balance phase always uses SGD with momentum 0.9 so the solved
//! direction is not rescaled per-coordinate by an adaptive optimizer.
//!
//! Histories are persisted as JSON lines: one head record carrying the
//! config (schema is versioned), then one record per logged step.

use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epo::{self, EpoState, LpSolution, Preference};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{Activation, DenseNet, GradRequest, GradScope, LossKind};
use crate::objectives::{assemble, EnvBatch, EstimatorConfig, LossVector};
use crate::twobit::{self, OddPredictor, TwoBitEnvSet};

pub const HISTORY_SCHEMA: u32 = 1;
const BALANCE_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn build(&self, seed: u64) -> Result<DenseNet> {
        let hidden = self.layer_dims.len().saturating_sub(2);
        DenseNet::seeded(&self.layer_dims, &vec![self.activation; hidden], seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Method {
    Erm,
    Linear { lambda_irm: f64, lambda_vrex: f64 },
    Pair,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DescentOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl DescentOptimizer {
    pub fn adam_default() -> Self {
        DescentOptimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

fn default_log_interval() -> usize {
    100
}

fn default_divergence() -> f64 {
    1e6
}

fn default_mu_tolerance() -> f64 {
    epo::DEFAULT_MU_TOLERANCE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub net: NetSpec,
    pub loss_kind: LossKind,
    pub method: Method,
    pub pretrain_epochs: usize,
    pub balance_epochs: usize,
    pub lr_descent: f64,
    pub lr_balance: f64,
    pub batch_size: usize,
    pub grad_scope: GradScope,
    pub preference: Preference,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default = "default_mu_tolerance")]
    pub mu_tolerance: f64,
    pub optimizer_descent: DescentOptimizer,
    pub seed: u64,
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
    /// Log loss vectors evaluated on the full training environments
    /// instead of the step's minibatches (slower, lower variance).
    #[serde(default)]
    pub log_full_losses: bool,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr_descent > 0.0) || !(self.lr_balance > 0.0) {
            return Err(Error::InvalidSpec("learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        if self.log_interval == 0 {
            return Err(Error::InvalidSpec("log_interval must be positive".into()));
        }
        self.estimator.validate()?;
        if self.preference.len() != 3 {
            return Err(Error::InvalidSpec(
                "preference must cover (erm, irm, vrex)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainEnvs {
    pub train: Vec<EnvBatch>,
    pub val: Option<EnvBatch>,
    pub test: Option<EnvBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossVector,
    pub train_acc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub beta: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub schema: u32,
    pub run_id: String,
    pub config: TrainConfig,
    pub env_spec: serde_json::Value,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    pub steps: Vec<StepRecord>,
}

/// Accuracy for sign targets, mean squared error otherwise, plus the mean
/// training loss under the given loss kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub metric: f64,
    pub mean_loss: f64,
}

/// Evaluates the net on one environment. Classification accuracy uses
/// sign(f) with the tie at f = 0 resolved to the positive class;
/// regression batches (any non +-1 target) are scored by plain mse.
pub fn evaluate(net: &DenseNet, env: &EnvBatch, loss_kind: LossKind) -> Result<Evaluation> {
    if env.is_empty() {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let preds = net.predict_scalar(&env.inputs)?;
    let classification = env.targets.iter().all(|&y| y == 1.0 || y == -1.0);
    let mut metric = 0.0;
    let mut loss = 0.0;
    for (&f, &y) in preds.iter().zip(&env.targets) {
        loss += loss_kind.loss(f, y);
        if classification {
            let sign = if f >= 0.0 { 1.0 } else { -1.0 };
            if sign == y {
                metric += 1.0;
            }
        } else {
            metric += (f - y) * (f - y);
        }
    }
    let n = preds.len() as f64;
    Ok(Evaluation { metric: metric / n, mean_loss: loss / n })
}

fn multi_env_metric(net: &DenseNet, envs: &[EnvBatch], loss_kind: LossKind) -> Result<f64> {
    let mut weighted = 0.0;
    let mut total = 0.0;
    for env in envs {
        let e = evaluate(net, env, loss_kind)?;
        weighted += e.metric * env.len() as f64;
        total += env.len() as f64;
    }
    Ok(weighted / total)
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64, state: AdamState },
    Momentum { velocity: Vec<f64> },
}

impl Optimizer {
    fn descent(cfg: DescentOptimizer, dim: usize) -> Self {
        match cfg {
            DescentOptimizer::Sgd => Optimizer::Sgd,
            DescentOptimizer::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                state: AdamState { m: vec![0.0; dim], v: vec![0.0; dim], t: 0 },
            },
        }
    }

    fn momentum(dim: usize) -> Self {
        Optimizer::Momentum { velocity: vec![0.0; dim] }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            Optimizer::Adam { beta1, beta2, eps, state } => {
                state.t += 1;
                let bc1 = 1.0 - beta1.powi(state.t as i32);
                let bc2 = 1.0 - beta2.powi(state.t as i32);
                for i in 0..params.len() {
                    state.m[i] = *beta1 * state.m[i] + (1.0 - *beta1) * grad[i];
                    state.v[i] = *beta2 * state.v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    let mhat = state.m[i] / bc1;
                    let vhat = state.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + *eps);
                }
            }
            Optimizer::Momentum { velocity } => {
                for i in 0..params.len() {
                    velocity[i] = BALANCE_MOMENTUM * velocity[i] + grad[i];
                    params[i] -= lr * velocity[i];
                }
            }
        }
    }
}

fn sample_batches(
    envs: &[EnvBatch],
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<EnvBatch> {
    envs.iter()
        .map(|env| {
            if batch_size >= env.len() {
                env.clone()
            } else {
                let idx: Vec<usize> =
                    (0..batch_size).map(|_| rng.random_range(0..env.len())).collect();
                env.select(&idx)
            }
        })
        .collect()
}

/// Trains one run and logs its history.
pub fn train(config: &TrainConfig, envs: &TrainEnvs) -> Result<(DenseNet, RunHistory)> {
    train_with_id(
        config,
        envs,
        format!("run-seed-{}", config.seed),
        serde_json::Value::Null,
    )
}

pub fn train_with_id(
    config: &TrainConfig,
    envs: &TrainEnvs,
    run_id: String,
    env_spec: serde_json::Value,
) -> Result<(DenseNet, RunHistory)> {
    config.validate()?;
    if envs.train.len() < 2 {
        return Err(Error::InvalidSpec(
            "training needs at least two environments".into(),
        ));
    }
    let mut net = config.net.build(config.seed)?;
    let mut history = RunHistory {
        schema: HISTORY_SCHEMA,
        run_id,
        config: config.clone(),
        env_spec,
        diverged: false,
        error: None,
        steps: Vec::new(),
    };
    let steps_per_epoch = envs
        .train
        .iter()
        .map(|e| e.len().div_ceil(config.batch_size))
        .max()
        .unwrap_or(1);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let req = GradRequest { scope: config.grad_scope, loss_kind: config.loss_kind };
    let full_scope_req = GradRequest { scope: GradScope::Full, loss_kind: config.loss_kind };
    let mut step: u64 = 0;

    // Descent phase: ERM only, full-parameter updates.
    let descent_steps = config.pretrain_epochs * steps_per_epoch;
    let mut opt = Optimizer::descent(config.optimizer_descent, net.num_params());
    for _ in 0..descent_steps {
        step += 1;
        let batches = sample_batches(&envs.train, config.batch_size, &mut rng);
        let n_env = batches.len() as f64;
        let mut grad = vec![0.0; net.num_params()];
        let mut erm = 0.0;
        for batch in &batches {
            let (loss, g) = net.loss_and_grad(&batch.inputs, &batch.targets, full_scope_req)?;
            erm += loss / n_env;
            for (acc, v) in grad.iter_mut().zip(&g) {
                *acc += v / n_env;
            }
        }
        if !erm.is_finite() || erm > config.divergence_threshold {
            history.diverged = true;
            break;
        }
        opt.step(net.params_mut(), &grad, config.lr_descent);
        if step % config.log_interval as u64 == 0 {
            log_step(&mut history, &net, config, envs, &batches, step, None)?;
        }
    }

    // Balance phase: fresh optimizer state, scoped updates.
    if !history.diverged {
        let scope_len = net.scope_range(config.grad_scope).len();
        let mut opt = Optimizer::momentum(scope_len);
        let balance_steps = config.balance_epochs * steps_per_epoch;
        for _ in 0..balance_steps {
            step += 1;
            let batches = sample_batches(&envs.train, config.batch_size, &mut rng);
            let (losses, grads) = assemble(&batches, &net, &config.estimator, req)?;
            if losses.as_slice().iter().any(|l| !l.is_finite())
                || losses.as_slice()[0] > config.divergence_threshold
            {
                history.diverged = true;
                break;
            }
            let mut solution: Option<LpSolution> = None;
            let direction = match config.method {
                Method::Erm => grads.row(0).to_vec(),
                Method::Linear { lambda_irm, lambda_vrex } => {
                    epo::combine_direction(&grads, &[1.0, lambda_irm, lambda_vrex])
                }
                Method::Pair => {
                    let state = EpoState {
                        losses: &losses,
                        grads: &grads,
                        pref: &config.preference,
                        mu_tolerance: config.mu_tolerance,
                    };
                    let sol = epo::solve_weights(&state)?;
                    let dir = epo::combine_direction(&grads, &sol.beta);
                    solution = Some(sol);
                    dir
                }
            };
            let range = net.scope_range(config.grad_scope);
            opt.step(&mut net.params_mut()[range], &direction, config.lr_balance);
            if step % config.log_interval as u64 == 0 {
                log_step(&mut history, &net, config, envs, &batches, step, solution.as_ref())?;
            }
        }
    }

    // Always leave a final record so short runs are selectable.
    if step > 0 && history.steps.last().map(|s| s.step) != Some(step) && !history.diverged {
        let batches = sample_batches(&envs.train, config.batch_size, &mut rng);
        log_step(&mut history, &net, config, envs, &batches, step, None)?;
    }
    Ok((net, history))
}

fn log_step(
    history: &mut RunHistory,
    net: &DenseNet,
    config: &TrainConfig,
    envs: &TrainEnvs,
    step_batches: &[EnvBatch],
    step: u64,
    solution: Option<&LpSolution>,
) -> Result<()> {
    let req = GradRequest { scope: GradScope::ClassifierOnly, loss_kind: config.loss_kind };
    let loss_batches: &[EnvBatch] = if config.log_full_losses { &envs.train } else { step_batches };
    // Only the values are logged; the classifier scope keeps this cheap.
    let (losses, _) = assemble(loss_batches, net, &config.estimator, req)?;
    let mu = match epo::normalize_losses(&losses, &config.preference) {
        Ok(norm) => Some(epo::divergence_mu(&norm)),
        Err(_) => None,
    };
    let record = StepRecord {
        step,
        losses,
        train_acc: multi_env_metric(net, &envs.train, config.loss_kind)?,
        val_acc: envs
            .val
            .as_ref()
            .map(|env| evaluate(net, env, config.loss_kind).map(|e| e.metric))
            .transpose()?,
        test_acc: envs
            .test
            .as_ref()
            .map(|env| evaluate(net, env, config.loss_kind).map(|e| e.metric))
            .transpose()?,
        beta: solution.map(|s| s.beta.clone()),
        mu: solution.and(mu),
    };
    history.steps.push(record);
    Ok(())
}

/// Mean, over a grid of invariant-feature values in `overlap`, of the
/// prediction variance as the spurious coordinate sweeps [-4, 4]. Zero
/// means the regressor ignores x2 throughout the overlap.
pub fn invariance_violation(net: &DenseNet, overlap: (f64, f64)) -> Result<f64> {
    const X1_POINTS: usize = 41;
    const X2_POINTS: usize = 81;
    if net.input_dim() != 2 || net.output_dim() != 1 {
        return Err(Error::Shape {
            context: "invariance_violation",
            expected: "2-input scalar regressor".into(),
            got: format!("{} -> {}", net.input_dim(), net.output_dim()),
        });
    }
    let (lo, hi) = overlap;
    let mut total = 0.0;
    for i in 0..X1_POINTS {
        let x1 = lo + (hi - lo) * i as f64 / (X1_POINTS - 1) as f64;
        let mut rows = Vec::with_capacity(X2_POINTS);
        for j in 0..X2_POINTS {
            let x2 = -4.0 + 8.0 * j as f64 / (X2_POINTS - 1) as f64;
            rows.push(vec![x1, x2]);
        }
        let preds = net.predict_scalar(&Matrix::from_rows(&rows)?)?;
        // A constant sweep has zero variance exactly; skip the two-pass
        // formula whose accumulated mean would leave ~1e-31 residue.
        if preds.iter().any(|p| *p != preds[0]) {
            let mean = preds.iter().sum::<f64>() / preds.len() as f64;
            let var = preds.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>()
                / preds.len() as f64;
            total += var;
        }
    }
    Ok(total / X1_POINTS as f64)
}

#[derive(Debug, Clone)]
pub struct SweepJob {
    pub run_id: String,
    pub config: TrainConfig,
    pub envs: TrainEnvs,
    pub env_spec: serde_json::Value,
}

/// Runs every job, in parallel, share-nothing; failed runs are recorded
/// with their error and the sweep continues. Output order matches input
/// order regardless of scheduling.
pub fn sweep(jobs: Vec<SweepJob>) -> Vec<RunHistory> {
    jobs.into_par_iter()
        .map(|job| {
            match train_with_id(&job.config, &job.envs, job.run_id.clone(), job.env_spec.clone()) {
                Ok((_, history)) => history,
                Err(e) => RunHistory {
                    schema: HISTORY_SCHEMA,
                    run_id: job.run_id,
                    config: job.config,
                    env_spec: job.env_spec,
                    diverged: false,
                    error: Some(e.to_string()),
                    steps: Vec::new(),
                },
            }
        })
        .collect()
}

/// Serializes a history as JSON lines: a head record, then step records.
pub fn write_history_jsonl<W: Write>(history: &RunHistory, writer: &mut W) -> Result<()> {
    #[derive(Serialize)]
    struct Head<'a> {
        schema: u32,
        kind: &'static str,
        run_id: &'a str,
        config: &'a TrainConfig,
        env_spec: &'a serde_json::Value,
        diverged: bool,
        #[serde(skip_serializing_if = "Option::is_none")]
        error: &'a Option<String>,
    }
    let head = Head {
        schema: history.schema,
        kind: "head",
        run_id: &history.run_id,
        config: &history.config,
        env_spec: &history.env_spec,
        diverged: history.diverged,
        error: &history.error,
    };
    writeln!(writer, "{}", serde_json::to_string(&head)?)?;
    for stepr in &history.steps {
        #[derive(Serialize)]
        struct Line<'a> {
            kind: &'static str,
            #[serde(flatten)]
            record: &'a StepRecord,
        }
        writeln!(
            writer,
            "{}",
            serde_json::to_string(&Line { kind: "step", record: stepr })?
        )?;
    }
    Ok(())
}

pub fn read_history_jsonl<R: BufRead>(reader: R) -> Result<RunHistory> {
    #[derive(Deserialize)]
    struct Head {
        schema: u32,
        run_id: String,
        config: TrainConfig,
        env_spec: serde_json::Value,
        diverged: bool,
        #[serde(default)]
        error: Option<String>,
    }
    let mut lines = reader.lines();
    let head_line = lines
        .next()
        .ok_or_else(|| Error::InvalidHistory("empty history file".into()))??;
    let head: Head = serde_json::from_str(&head_line)?;
    if head.schema != HISTORY_SCHEMA {
        return Err(Error::InvalidHistory(format!(
            "unsupported history schema {} (this build reads {HISTORY_SCHEMA})",
            head.schema
        )));
    }
    let mut steps = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        steps.push(serde_json::from_str::<StepRecord>(&line)?);
    }
    Ok(RunHistory {
        schema: head.schema,
        run_id: head.run_id,
        config: head.config,
        env_spec: head.env_spec,
        diverged: head.diverged,
        error: head.error,
        steps,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AnalyticPairConfig {
    pub descent_steps: usize,
    pub descent_lr: f64,
    pub balance_steps: usize,
    pub balance_lr: f64,
    pub mu_tolerance: f64,
    /// Stop as soon as the normalized satisfaction gap falls below this.
    pub target_satisfaction: Option<f64>,
}

impl Default for AnalyticPairConfig {
    fn default() -> Self {
        AnalyticPairConfig {
            descent_steps: 200,
            descent_lr: 0.2,
            balance_steps: 10_000,
            balance_lr: 0.05,
            mu_tolerance: 1e-8,
            target_satisfaction: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AnalyticTrace {
    pub mu: Vec<f64>,
    pub satisfaction: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
}

fn analytic_mu(
    pred: OddPredictor,
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    pref: &Preference,
) -> f64 {
    let (losses, _) = twobit::irmx_objective(pred, envs, loss_kind);
    epo::normalize_losses(&losses, pref)
        .map(|n| epo::divergence_mu(&n))
        .unwrap_or(0.0)
}

/// Preference-balanced training of the closed-form two-bit problem over
/// the two free predictor values. Descent phase is plain gradient descent
/// on the population ERM loss.
///
/// Balance steps follow the solved weights with a backtracking line
/// search: the solved direction satisfies `grad mu = G^T g_b / sum(w)`,
/// so it decreases the divergence for some step size, and halving from
/// `balance_lr` finds one. With preferences spanning ten orders of
/// magnitude the per-objective gradient norms differ by similar factors
/// and any fixed step either stalls the small objectives or overshoots
/// the large one.
pub fn train_pair_analytic(
    envs: &TwoBitEnvSet,
    loss_kind: LossKind,
    pref: &Preference,
    start: OddPredictor,
    cfg: &AnalyticPairConfig,
) -> Result<(OddPredictor, AnalyticTrace)> {
    let mut pred = start;
    for _ in 0..cfg.descent_steps {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for &beta in &envs.betas {
            let g = twobit::pop_loss_grad(pred, envs.alpha, beta, loss_kind);
            ga += g[0] / envs.len() as f64;
            gb += g[1] / envs.len() as f64;
        }
        pred.a -= cfg.descent_lr * ga;
        pred.b -= cfg.descent_lr * gb;
    }
    let mut trace = AnalyticTrace::default();
    for _ in 0..cfg.balance_steps {
        let (losses, grads) = twobit::irmx_objective(pred, envs, loss_kind);
        if losses.as_slice().iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss {
                param_norm: (pred.a * pred.a + pred.b * pred.b).sqrt(),
            });
        }
        let state = EpoState {
            losses: &losses,
            grads: &grads,
            pref,
            mu_tolerance: cfg.mu_tolerance,
        };
        let sol = epo::solve_weights(&state)?;
        let direction = epo::combine_direction(&grads, &sol.beta);
        let sat = crate::selection::pareto_satisfaction(&losses, pref)?;
        let mu = analytic_mu(pred, envs, loss_kind, pref);
        trace.mu.push(mu);
        trace.satisfaction.push(sat);
        trace.beta.push(sol.beta.clone());
        if let Some(target) = cfg.target_satisfaction {
            if sat < target {
                break;
            }
        }
        // Backtracking from balance_lr: the largest halved step that
        // strictly decreases the divergence, reported with its mu.
        let line_search = |direction: &[f64]| -> Option<(OddPredictor, f64)> {
            if direction.iter().all(|&d| d == 0.0) {
                return None;
            }
            let mut eta = cfg.balance_lr;
            for _ in 0..60 {
                let cand =
                    OddPredictor::new(pred.a - eta * direction[0], pred.b - eta * direction[1]);
                let cand_mu = analytic_mu(cand, envs, loss_kind, pref);
                if cand_mu < mu {
                    return Some((cand, cand_mu));
                }
                eta *= 0.5;
            }
            None
        };
        let primary = if sol.mode == crate::epo::LpMode::Balance {
            line_search(&direction)
        } else {
            // Descent mode: no objective may increase; mu is not the
            // merit here.
            let mut eta = cfg.balance_lr;
            let mut found = None;
            for _ in 0..60 {
                let cand =
                    OddPredictor::new(pred.a - eta * direction[0], pred.b - eta * direction[1]);
                let (cand_losses, _) = twobit::irmx_objective(cand, envs, loss_kind);
                let ok = cand_losses
                    .as_slice()
                    .iter()
                    .zip(losses.as_slice())
                    .all(|(new, old)| new <= old);
                if ok {
                    found = Some((cand, analytic_mu(cand, envs, loss_kind, pref)));
                    break;
                }
                eta *= 0.5;
            }
            found
        };
        // The anchor's top components cancel pairwise when the largest
        // weighted losses tie while another stays negligible, and the
        // balance direction then decreases mu only at float resolution.
        // Shrinking the tied group in lockstep is also a divergence
        // decrease; take whichever candidate gets mu lower.
        let weighted: Vec<f64> = losses
            .as_slice()
            .iter()
            .zip(pref.as_slice())
            .map(|(&l, &p)| l * p)
            .collect();
        let max_w = weighted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let group: Vec<usize> = (0..weighted.len())
            .filter(|&j| weighted[j] >= max_w * (1.0 - 1e-3))
            .collect();
        let alternate = epo::group_descent_weights(&grads, &group)
            .ok()
            .and_then(|beta| line_search(&epo::combine_direction(&grads, &beta)));
        pred = match (primary, alternate) {
            (Some((p, mp)), Some((q, mq))) => {
                if mp <= mq {
                    p
                } else {
                    q
                }
            }
            (Some((p, _)), None) => p,
            (None, Some((q, _))) => q,
            // No admissible step remains at float resolution.
            (None, None) => break,
        };
    }
    Ok((pred, trace))
}
