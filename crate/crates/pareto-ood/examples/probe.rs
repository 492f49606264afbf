use pareto_ood::data::{make_colored_envs, ColoredDigitSpec, ColoredSource};
use pareto_ood::epo::Preference;
use pareto_ood::nn::{Activation, GradScope, LossKind};
use pareto_ood::objectives::EstimatorConfig;
use pareto_ood::trainer::*;

fn envs_for(seed: u64) -> TrainEnvs {
    let mk = |colors: Vec<f64>, salt: u64| {
        make_colored_envs(&ColoredDigitSpec {
            source: ColoredSource::SyntheticBlobs, label_noise: 0.25,
            env_colors: colors, n_per_env: 2000, seed: seed ^ salt,
        }).unwrap()
    };
    TrainEnvs {
        train: mk(vec![0.1, 0.2], 0),
        val: Some(mk(vec![0.1], 0xAAAA).remove(0)),
        test: Some(mk(vec![0.9], 0xBBBB).remove(0)),
    }
}

fn base(seed: u64) -> TrainConfig {
    TrainConfig {
        net: NetSpec { layer_dims: vec![4, 16, 1], activation: Activation::Tanh },
        loss_kind: LossKind::Logistic,
        method: Method::Pair,
        pretrain_epochs: 30,
        balance_epochs: 2000,
        lr_descent: 1e-3,
        lr_balance: 0.3,
        batch_size: 4096,
        grad_scope: GradScope::Full,
        preference: Preference::new(vec![1.0, 1e10, 1e12]).unwrap(),
        estimator: EstimatorConfig::population_style(),
        mu_tolerance: 1e-3,
        optimizer_descent: DescentOptimizer::adam_default(),
        seed,
        log_interval: 500,
        log_full_losses: false,
        divergence_threshold: 1e6,
    }
}

fn final_test(h: &RunHistory) -> f64 {
    h.steps.last().and_then(|s| s.test_acc).unwrap_or(f64::NAN)
}

fn main() {
    let mut table: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for seed in 0..10u64 {
        let envs = envs_for(seed);
        for (tag, f) in [
            ("G lr.3 2000", Box::new(|_c: &mut TrainConfig| {}) as Box<dyn Fn(&mut TrainConfig)>),
            ("H lr.3 2000 mu1e-4", Box::new(|c: &mut TrainConfig| c.mu_tolerance = 1e-4)),
            ("I lr.3 2000 cls", Box::new(|c: &mut TrainConfig| c.grad_scope = GradScope::ClassifierOnly)),
            ("J lr.5 2000", Box::new(|c: &mut TrainConfig| c.lr_balance = 0.5)),
            ("K lr.3 2000 pre10", Box::new(|c: &mut TrainConfig| c.pretrain_epochs = 10)),
            ("L lr.3 2000 w8", Box::new(|c: &mut TrainConfig| c.net.layer_dims = vec![4, 8, 1])),
        ] {
            let mut c = base(seed);
            f(&mut c);
            let (_, h) = train(&c, &envs).unwrap();
            table.entry(tag.to_string()).or_default().push(final_test(&h));
        }
    }
    for (tag, mut accs) in table {
        let show: Vec<String> = accs.iter().map(|a| format!("{a:.2}")).collect();
        accs.sort_by(|a, b| a.total_cmp(b));
        println!("{tag}: median {:.3}  min {:.2}  all {:?}", accs[accs.len()/2], accs[0], show);
    }
}
