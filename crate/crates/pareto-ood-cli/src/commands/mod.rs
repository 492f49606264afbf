//! Subcommand implementations.

mod training;

use std::process::ExitCode;

use anyhow::Context;
use pareto_ood::nn::LossKind;
use pareto_ood::selection;
use pareto_ood::trainer;
use pareto_ood::twobit::{
    self, front_to_csv, invariant_predictor, pareto_scan, roots_to_csv, solve_invariant_sets,
    FrontObjectives, OddPredictor, RefineSpec,
};

use crate::artifacts::ArtifactWriter;
use crate::config::{SelectCommandConfig, TwobitFrontConfig, TwobitSolveConfig};
use crate::svg::Plot;
use crate::CommonArgs;

pub use training::{sine_demo, sweep, train};

fn load_config<T: serde::de::DeserializeOwned>(args: &CommonArgs) -> anyhow::Result<(T, Vec<u8>)> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config error: this subcommand requires --config"))?;
    let bytes = std::fs::read(path)
        .with_context(|| format!("config error: cannot read {}", path.display()))?;
    let parsed = serde_json::from_slice(&bytes)
        .map_err(|e| anyhow::anyhow!("config error in {}: {e}", path.display()))?;
    Ok((parsed, bytes))
}

pub fn twobit_solve(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (cfg, raw) = load_config::<TwobitSolveConfig>(args)?;
    let envs = cfg.envs.resolve()?;
    let grid = cfg.grid.unwrap_or_default();
    let sets = solve_invariant_sets(&envs, cfg.loss_kind, &grid, &RefineSpec::default())?;
    log::info!(
        "roots: {} constraint, {} equal-loss, {} intersection",
        sets.irms.len(),
        sets.equal_loss.len(),
        sets.intersection.len()
    );
    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    writer.write("roots.csv", roots_to_csv(&sets).as_bytes())?;
    let mut json = serde_json::to_string_pretty(&sets)?;
    json.push('\n');
    writer.write("roots.json", json.as_bytes())?;
    writer.finish("twobit-solve", None, Some(&raw))?;
    println!(
        "intersection roots: {}",
        sets.intersection
            .iter()
            .map(|r| format!("({:.6}, {:.6})", r.predictor.a, r.predictor.b))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(ExitCode::SUCCESS)
}

pub fn twobit_front(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (cfg, raw) = load_config::<TwobitFrontConfig>(args)?;
    let envs = cfg.envs.resolve()?;
    let grid = cfg.grid.unwrap_or_default();
    let f_inv = invariant_predictor(envs.alpha, cfg.loss_kind);
    let mut extra: Vec<OddPredictor> = vec![OddPredictor::new(0.0, 0.0), f_inv];
    if cfg.include_roots {
        let sets = solve_invariant_sets(&envs, cfg.loss_kind, &grid, &RefineSpec::default())?;
        extra.extend(sets.irms.iter().map(|r| r.predictor));
        extra.extend(sets.intersection.iter().map(|r| r.predictor));
    }
    let points = pareto_scan(&envs, cfg.loss_kind, &grid, cfg.objectives, &extra)?;
    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    writer.write("front.csv", front_to_csv(&points).as_bytes())?;

    // Objective-space scatter over the first two tuple coordinates.
    let coords = |p: &twobit::FrontPoint| -> (f64, f64) {
        match cfg.objectives {
            FrontObjectives::PerEnv | FrontObjectives::PerEnvVrex => {
                (p.env_losses[0], p.env_losses[1])
            }
            FrontObjectives::ErmIrm | FrontObjectives::ErmIrmVrex => {
                let erm = p.env_losses.iter().sum::<f64>() / p.env_losses.len() as f64;
                (erm, p.irm)
            }
        }
    };
    let (xs, ys): (Vec<f64>, Vec<f64>) = points.iter().map(&coords).unzip();
    let range = |v: &[f64]| {
        (
            v.iter().cloned().fold(f64::INFINITY, f64::min),
            v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let (x_label, y_label) = match cfg.objectives {
        FrontObjectives::PerEnv | FrontObjectives::PerEnvVrex => ("L_e1", "L_e2"),
        FrontObjectives::ErmIrm | FrontObjectives::ErmIrmVrex => ("L_erm", "L_irm"),
    };
    let mut plot = Plot::new("population losses over the predictor grid", x_label, y_label)
        .with_ranges(range(&xs), range(&ys));
    // Subsample dominated points deterministically to keep the SVG small.
    let dominated: Vec<(f64, f64)> = points.iter().filter(|p| p.dominated).map(&coords).collect();
    let stride = (dominated.len() / 20_000).max(1);
    let sampled: Vec<(f64, f64)> = dominated.iter().step_by(stride).cloned().collect();
    plot.scatter(&sampled, 1.0, "#bbbbbb");
    let front: Vec<(f64, f64)> = points.iter().filter(|p| !p.dominated).map(&coords).collect();
    plot.scatter(&front, 1.6, "#d62728");
    let f_inv_point = points
        .iter()
        .find(|p| p.predictor.a == f_inv.a && p.predictor.b == f_inv.b)
        .expect("invariant predictor is among the scan points");
    let (fx, fy) = coords(f_inv_point);
    let label = if f_inv_point.dominated { "f_inv (dominated)" } else { "f_inv" };
    plot.marker(fx, fy, label, "#1f77b4");
    writer.write("front.svg", plot.render().as_bytes())?;
    writer.finish("twobit-front", None, Some(&raw))?;
    println!(
        "scanned {} points; invariant predictor dominated: {}",
        points.len(),
        f_inv_point.dominated
    );
    Ok(ExitCode::SUCCESS)
}

pub fn select(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (cfg, raw) = load_config::<SelectCommandConfig>(args)?;
    let mut paths: Vec<_> = std::fs::read_dir(&cfg.history_dir)
        .with_context(|| format!("cannot read {}", cfg.history_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        anyhow::bail!("no .jsonl histories in {}", cfg.history_dir.display());
    }
    let histories: Vec<_> = paths
        .iter()
        .map(|p| {
            let file = std::fs::File::open(p)?;
            trainer::read_history_jsonl(std::io::BufReader::new(file))
                .with_context(|| format!("while reading {}", p.display()))
        })
        .collect::<anyhow::Result<_>>()?;
    let sel_cfg = selection::SelectionConfig {
        preference: pareto_ood::epo::Preference::new(cfg.preference.clone())?,
        convergence_cutoff: cfg.convergence_cutoff,
        percentile: cfg.percentile,
        score_direction: cfg.score_direction,
    };
    let result = selection::select(&histories, &sel_cfg)?;
    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    let mut json = serde_json::to_string_pretty(&result)?;
    json.push('\n');
    writer.write("selection.json", json.as_bytes())?;
    writer.finish("select", None, Some(&raw))?;
    println!(
        "selected {} at step {} (score {:.6e}, val acc {:.4})",
        result.chosen_run, result.chosen_step, result.score, result.val_acc
    );
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    use pareto_ood::linalg::Matrix;
    use pareto_ood::nn::{Activation, DenseNet, GradRequest, GradScope};
    use pareto_ood::objectives::{assemble, EnvBatch, EstimatorConfig};
    use rand::Rng;
    use rand::SeedableRng;

    const STEP: f64 = 1e-5;
    let mixed = |g: f64, fd: f64| (g - fd).abs() / g.abs().max(fd.abs()).max(1.0);
    let central = |net: &DenseNet, f: &dyn Fn(&DenseNet) -> f64| -> Vec<f64> {
        (0..net.num_params())
            .map(|i| {
                let mut plus = net.clone();
                plus.params_mut()[i] += STEP;
                let mut minus = net.clone();
                minus.params_mut()[i] -= STEP;
                (f(&plus) - f(&minus)) / (2.0 * STEP)
            })
            .collect()
    };
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(args.seed.unwrap_or(0));
    let mut worst_net: f64 = 0.0;
    let sizes: Vec<(Vec<usize>, Vec<Activation>)> = vec![
        (vec![3, 1], vec![]),
        (vec![4, 8, 1], vec![Activation::Tanh]),
        (vec![5, 16, 1], vec![Activation::Relu]),
        (vec![3, 8, 8, 1], vec![Activation::Tanh, Activation::Tanh]),
    ];
    for (dims, acts) in &sizes {
        for loss_kind in [LossKind::Mse, LossKind::Logistic] {
            let net = DenseNet::seeded(dims, acts, 17)?;
            let rows: Vec<Vec<f64>> = (0..6)
                .map(|_| (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let targets: Vec<f64> =
                (0..6).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            let inputs = Matrix::from_rows(&rows)?;
            let req = GradRequest { scope: GradScope::Full, loss_kind };
            let (_, grad) = net.loss_and_grad(&inputs, &targets, req)?;
            let fd = central(&net, &|m| m.loss_and_grad(&inputs, &targets, req).unwrap().0);
            for (g, f) in grad.iter().zip(&fd) {
                worst_net = worst_net.max(mixed(*g, *f));
            }
        }
    }

    let mut worst_pen: f64 = 0.0;
    let net = DenseNet::seeded(&[3, 6, 1], &[Activation::Tanh], 23)?;
    let envs: Vec<EnvBatch> = (0..2)
        .map(|e| {
            let rows: Vec<Vec<f64>> =
                (0..8).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let targets: Vec<f64> =
                (0..8).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
            EnvBatch::new(e, Matrix::from_rows(&rows).unwrap(), targets).unwrap()
        })
        .collect();
    for loss_kind in [LossKind::Mse, LossKind::Logistic] {
        let cfg = EstimatorConfig::default();
        let req = GradRequest { scope: GradScope::Full, loss_kind };
        let (_, grads) = assemble(&envs, &net, &cfg, req)?;
        for row in 0..3 {
            let fd = central(&net, &|m| {
                assemble(&envs, m, &cfg, req).unwrap().0.as_slice()[row]
            });
            for (g, f) in grads.row(row).iter().zip(&fd) {
                worst_pen = worst_pen.max(mixed(*g, *f));
            }
        }
    }

    let pass = worst_net < 1e-5 && worst_pen < 1e-4;
    println!("network gradients: max relative error {worst_net:.3e} (threshold 1e-5)");
    println!("penalty gradients: max relative error {worst_pen:.3e} (threshold 1e-4)");
    println!("gradcheck: {}", if pass { "PASS" } else { "FAIL" });
    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    let report = serde_json::json!({
        "max_relative_error_network": worst_net,
        "max_relative_error_penalties": worst_pen,
        "pass": pass,
    });
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    writer.write("gradcheck.json", body.as_bytes())?;
    writer.finish("gradcheck", args.seed, None)?;
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Loss curves and accuracy curves for one history.
pub(crate) fn history_plots(history: &trainer::RunHistory) -> (String, String) {
    let steps: Vec<f64> = history.steps.iter().map(|s| s.step as f64).collect();
    let series = |idx: usize| -> Vec<(f64, f64)> {
        history
            .steps
            .iter()
            .zip(&steps)
            .map(|(s, &x)| (x, s.losses.as_slice()[idx].max(1e-16).log10()))
            .collect()
    };
    let x_range = (
        steps.first().copied().unwrap_or(0.0),
        steps.last().copied().unwrap_or(1.0),
    );
    let all: Vec<f64> = (0..3).flat_map(|i| series(i).into_iter().map(|p| p.1)).collect();
    let y_range = (
        all.iter().cloned().fold(f64::INFINITY, f64::min),
        all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let mut losses = Plot::new("objective values per logged step", "step", "log10 loss")
        .with_ranges(x_range, y_range);
    losses.polyline(&series(0), "#1f77b4", 1.5); // erm
    losses.polyline(&series(1), "#d62728", 1.5); // irm penalty
    losses.polyline(&series(2), "#2ca02c", 1.5); // vrex penalty

    let acc = |f: &dyn Fn(&trainer::StepRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        history
            .steps
            .iter()
            .zip(&steps)
            .filter_map(|(s, &x)| f(s).map(|v| (x, v)))
            .collect()
    };
    let mut accuracy = Plot::new("metrics per logged step", "step", "metric")
        .with_ranges(x_range, (0.0, 1.0));
    accuracy.polyline(&acc(&|s| Some(s.train_acc)), "#1f77b4", 1.5);
    accuracy.polyline(&acc(&|s| s.val_acc), "#ff7f0e", 1.5);
    accuracy.polyline(&acc(&|s| s.test_acc), "#2ca02c", 1.5);
    (losses.render(), accuracy.render())
}
