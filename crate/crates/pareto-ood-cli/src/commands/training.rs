//! Training-family subcommands: single runs, sweeps, and the sine demo.

use std::fmt::Write as _;
use std::process::ExitCode;

use pareto_ood::trainer::{
    self, invariance_violation, train_with_id, Method, RunHistory, SweepJob,
};

use super::{history_plots, load_config};
use crate::artifacts::ArtifactWriter;
use crate::config::{SineDemoConfig, SweepConfig, TrainCommandConfig};
use crate::svg::Plot;
use crate::CommonArgs;

fn history_bytes(history: &RunHistory) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    trainer::write_history_jsonl(history, &mut buf)?;
    Ok(buf)
}

pub fn train(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (mut cfg, raw) = load_config::<TrainCommandConfig>(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let envs = cfg.data.build(cfg.train.seed)?;
    let run_id = format!("train-seed-{}", cfg.train.seed);
    let (_, history) = train_with_id(&cfg.train, &envs, run_id, cfg.data.to_value())?;
    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    writer.write("history.jsonl", &history_bytes(&history)?)?;
    let (losses_svg, accuracy_svg) = history_plots(&history);
    writer.write("losses.svg", losses_svg.as_bytes())?;
    writer.write("accuracy.svg", accuracy_svg.as_bytes())?;
    writer.finish("train", Some(cfg.train.seed), Some(&raw))?;
    if let Some(last) = history.steps.last() {
        println!(
            "finished at step {}: train {:.4}, val {}, test {}{}",
            last.step,
            last.train_acc,
            last.val_acc.map_or("-".into(), |v| format!("{v:.4}")),
            last.test_acc.map_or("-".into(), |v| format!("{v:.4}")),
            if history.diverged { " (diverged)" } else { "" }
        );
    }
    Ok(ExitCode::SUCCESS)
}

pub fn sweep(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (cfg, raw) = load_config::<SweepConfig>(args)?;
    let axes = cfg.axes.clone().unwrap_or(crate::config::SweepAxes {
        lambda_irm: None,
        lambda_vrex: None,
        pretrain_epochs: None,
        seeds: None,
    });
    let seeds = axes.seeds.unwrap_or_else(|| vec![cfg.base.seed]);
    let pretrains = axes
        .pretrain_epochs
        .unwrap_or_else(|| vec![cfg.base.pretrain_epochs]);
    // Lambda axes switch the method to a fixed linear weighting; without
    // them the base method is swept as-is.
    let lambdas: Vec<Option<(f64, f64)>> = match (axes.lambda_irm, axes.lambda_vrex) {
        (None, None) => vec![None],
        (irm, vrex) => {
            let irm = irm.unwrap_or_else(|| vec![0.0]);
            let vrex = vrex.unwrap_or_else(|| vec![0.0]);
            irm.iter()
                .flat_map(|&i| vrex.iter().map(move |&v| Some((i, v))))
                .collect()
        }
    };

    let mut jobs = Vec::new();
    for &seed in &seeds {
        for &pretrain in &pretrains {
            for lambda in &lambdas {
                let mut config = cfg.base.clone();
                config.seed = seed;
                config.pretrain_epochs = pretrain;
                if let Some((li, lv)) = lambda {
                    config.method = Method::Linear { lambda_irm: *li, lambda_vrex: *lv };
                }
                let envs = cfg.data.build(seed)?;
                let run_id = format!("run-{:04}", jobs.len());
                jobs.push(SweepJob {
                    run_id,
                    config,
                    envs,
                    env_spec: cfg.data.to_value(),
                });
            }
        }
    }
    log::info!("sweeping {} runs", jobs.len());
    let summaries: Vec<(String, Method, usize, u64)> = jobs
        .iter()
        .map(|j| (j.run_id.clone(), j.config.method, j.config.pretrain_epochs, j.config.seed))
        .collect();
    let histories = trainer::sweep(jobs);

    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    let mut summary = String::from(
        "run_id,method,lambda_irm,lambda_vrex,pretrain_epochs,seed,diverged,final_train_acc,final_val_acc,final_test_acc\n",
    );
    for (history, (run_id, method, pretrain, seed)) in histories.iter().zip(&summaries) {
        writer.write(
            &format!("runs/{run_id}.jsonl"),
            &history_bytes(history)?,
        )?;
        let (mname, li, lv) = match method {
            Method::Erm => ("erm", 0.0, 0.0),
            Method::Linear { lambda_irm, lambda_vrex } => ("linear", *lambda_irm, *lambda_vrex),
            Method::Pair => ("pair", 0.0, 0.0),
        };
        let last = history.steps.last();
        let fmt_opt = |v: Option<f64>| v.map_or(String::from(""), |v| format!("{v}"));
        let _ = writeln!(
            summary,
            "{run_id},{mname},{li},{lv},{pretrain},{seed},{},{},{},{}",
            u8::from(history.diverged),
            fmt_opt(last.map(|l| l.train_acc)),
            fmt_opt(last.and_then(|l| l.val_acc)),
            fmt_opt(last.and_then(|l| l.test_acc)),
        );
    }
    writer.write("summary.csv", summary.as_bytes())?;
    writer.finish("sweep", Some(cfg.base.seed), Some(&raw))?;
    println!("{} runs complete", histories.len());
    Ok(ExitCode::SUCCESS)
}

pub fn sine_demo(args: &CommonArgs) -> anyhow::Result<ExitCode> {
    let (mut cfg, raw) = load_config::<SineDemoConfig>(args)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = crate::config::DataSpec::Sine {
        sampling: cfg.sampling.clone(),
        n_per_env: cfg.n_per_env,
    };
    let envs = data.build(cfg.train.seed)?;

    struct Entry {
        name: String,
        violation: f64,
        val_mse: Option<f64>,
        net: pareto_ood::nn::DenseNet,
    }
    let mut entries: Vec<Entry> = Vec::new();
    let mut run = |name: String, config: &trainer::TrainConfig| -> anyhow::Result<()> {
        let (net, history) = train_with_id(config, &envs, name.clone(), data.to_value())?;
        let violation = invariance_violation(&net, cfg.overlap)?;
        entries.push(Entry {
            name,
            violation,
            val_mse: history.steps.last().and_then(|s| s.val_acc),
            net,
        });
        Ok(())
    };

    let mut pair_cfg = cfg.train.clone();
    pair_cfg.method = Method::Pair;
    run("pair".into(), &pair_cfg)?;
    for &lambda in &cfg.irm_lambdas {
        let mut c = cfg.train.clone();
        c.method = Method::Linear { lambda_irm: lambda, lambda_vrex: 0.0 };
        run(format!("irmv1-{lambda:e}"), &c)?;
    }
    for &lambda in &cfg.vrex_lambdas {
        let mut c = cfg.train.clone();
        c.method = Method::Linear { lambda_irm: 0.0, lambda_vrex: lambda };
        run(format!("vrex-{lambda:e}"), &c)?;
    }

    let mut writer = ArtifactWriter::new(&args.out, args.force)?;
    let mut csv = String::from("method,violation,val_mse\n");
    for e in &entries {
        let _ = writeln!(
            csv,
            "{},{},{}",
            e.name,
            e.violation,
            e.val_mse.map_or(String::new(), |v| format!("{v}"))
        );
    }
    writer.write("violations.csv", csv.as_bytes())?;

    // Prediction belts for the balanced run: f(x1, x2) curves at a few
    // spurious-feature values; causal invariance makes them coincide.
    let pair_net = &entries[0].net;
    let mut plot = Plot::new(
        "predictions across the spurious sweep (balanced run)",
        "x1",
        "f(x1, x2)",
    )
    .with_ranges((-4.0, 4.0), (-1.0, 3.0));
    let truth: Vec<(f64, f64)> = (0..=160)
        .map(|i| {
            let x1 = -4.0 + i as f64 * 0.05;
            (x1, x1.sin() + 1.0)
        })
        .collect();
    plot.polyline(&truth, "#000000", 1.0);
    for (k, x2) in [-4.0, -2.0, 0.0, 2.0, 4.0].into_iter().enumerate() {
        let rows: Vec<Vec<f64>> =
            (0..=160).map(|i| vec![-4.0 + i as f64 * 0.05, x2]).collect();
        let preds = pair_net
            .predict_scalar(&pareto_ood::linalg::Matrix::from_rows(&rows)?)?;
        let curve: Vec<(f64, f64)> =
            rows.iter().zip(&preds).map(|(r, &p)| (r[0], p)).collect();
        let colors = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd"];
        plot.polyline(&curve, colors[k], 1.2);
    }
    writer.write("belts.svg", plot.render().as_bytes())?;

    let best_irm = entries
        .iter()
        .filter(|e| e.name.starts_with("irmv1"))
        .map(|e| e.violation)
        .fold(f64::INFINITY, f64::min);
    let best_vrex = entries
        .iter()
        .filter(|e| e.name.starts_with("vrex"))
        .map(|e| e.violation)
        .fold(f64::INFINITY, f64::min);
    let report = serde_json::json!({
        "pair_violation": entries[0].violation,
        "best_irmv1_violation": best_irm,
        "best_vrex_violation": best_vrex,
        "pair_recovers_invariance_best":
            entries[0].violation < best_irm && entries[0].violation < best_vrex,
    });
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    writer.write("summary.json", body.as_bytes())?;
    writer.finish("sine-demo", Some(cfg.train.seed), Some(&raw))?;
    println!(
        "violations: pair {:.5}, best irmv1 {:.5}, best vrex {:.5}",
        entries[0].violation, best_irm, best_vrex
    );
    Ok(ExitCode::SUCCESS)
}
