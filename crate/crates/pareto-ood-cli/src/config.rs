//! JSON config schemas shared by the subcommands, with named presets for
//! the standard environment families.

use pareto_ood::data::{self, ColoredDigitSpec, ColoredSource, SineRegSpec};
use pareto_ood::epo::Preference;
use pareto_ood::nn::LossKind;
use pareto_ood::trainer::{TrainConfig, TrainEnvs};
use pareto_ood::twobit::{FrontObjectives, GridSpec, TwoBitEnvSet};
use serde::{Deserialize, Serialize};

/// Default relative preference over (erm, irm, vrex).
pub fn default_preference() -> Preference {
    Preference::new(vec![1.0, 1e10, 1e12]).unwrap()
}

/// Two-bit environment-set selection: a named preset or explicit values.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvSetSpec {
    Preset { preset: String },
    Explicit { alpha: f64, betas: Vec<f64> },
}

impl EnvSetSpec {
    pub fn resolve(&self) -> anyhow::Result<TwoBitEnvSet> {
        match self {
            EnvSetSpec::Explicit { alpha, betas } => {
                Ok(TwoBitEnvSet::new(*alpha, betas.clone())?)
            }
            EnvSetSpec::Preset { preset } => match preset.as_str() {
                // The classic failure-case pair.
                "fig1a" => Ok(TwoBitEnvSet::new(0.1, vec![0.11, 0.4])?),
                // Standard colored-digit analog: 25% label noise.
                "cmnist" => Ok(TwoBitEnvSet::new(0.25, vec![0.1, 0.2])?),
                // Modified variant (sweep parameterization).
                "cmnist_m" => Ok(TwoBitEnvSet::new(0.1, vec![0.2, 0.25])?),
                // Modified variant matching the failure-case scan pair.
                "cmnist_m_fig1a" => Ok(TwoBitEnvSet::new(0.1, vec![0.11, 0.4])?),
                other => anyhow::bail!(
                    "config error: unknown envs.preset {other:?} (known: fig1a, cmnist, cmnist_m, cmnist_m_fig1a)"
                ),
            },
        }
    }
}

/// Data family for training commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Raw (x1, x2) two-bit features.
    Twobit {
        alpha: f64,
        train_betas: Vec<f64>,
        #[serde(default)]
        val_beta: Option<f64>,
        #[serde(default)]
        test_beta: Option<f64>,
        n_per_env: usize,
    },
    /// Colored-digit blobs (invariant block + color block).
    Blobs {
        label_noise: f64,
        train_colors: Vec<f64>,
        #[serde(default)]
        val_color: Option<f64>,
        #[serde(default)]
        test_color: Option<f64>,
        n_per_env: usize,
    },
    /// Named blob preset: "cmnist", "cmnist_m", "cmnist_m_fig1a".
    BlobsPreset { preset: String, n_per_env: usize },
    /// Colored digits from IDX containers.
    Idx {
        images: std::path::PathBuf,
        labels: std::path::PathBuf,
        label_noise: f64,
        train_colors: Vec<f64>,
        #[serde(default)]
        val_color: Option<f64>,
        #[serde(default)]
        test_color: Option<f64>,
        n_per_env: usize,
    },
    /// Sine regression environments ("uniform" or "gaussian").
    Sine { sampling: String, n_per_env: usize },
}

impl DataSpec {
    /// Materializes train/val/test environments, deterministically in the
    /// seed. Validation and test draws use distinct derived seeds.
    pub fn build(&self, seed: u64) -> anyhow::Result<TrainEnvs> {
        match self {
            DataSpec::Twobit { alpha, train_betas, val_beta, test_beta, n_per_env } => {
                let train = data::sample_twobit_envs(*alpha, train_betas, *n_per_env, seed)?;
                let val = match val_beta.or(train_betas.first().copied()) {
                    Some(beta) => Some(
                        data::sample_twobit_envs(*alpha, &[beta], *n_per_env, seed ^ VAL_SALT)?
                            .remove(0),
                    ),
                    None => None,
                };
                let test = match test_beta {
                    Some(beta) => Some(
                        data::sample_twobit_envs(*alpha, &[*beta], *n_per_env, seed ^ TEST_SALT)?
                            .remove(0),
                    ),
                    None => None,
                };
                Ok(TrainEnvs { train, val, test })
            }
            DataSpec::Blobs { label_noise, train_colors, val_color, test_color, n_per_env } => {
                build_colored(
                    ColoredSource::SyntheticBlobs,
                    *label_noise,
                    train_colors,
                    *val_color,
                    *test_color,
                    *n_per_env,
                    seed,
                )
            }
            DataSpec::BlobsPreset { preset, n_per_env } => {
                let envs = EnvSetSpec::Preset { preset: preset.clone() }.resolve()?;
                build_colored(
                    ColoredSource::SyntheticBlobs,
                    envs.alpha,
                    &envs.betas,
                    Some(envs.betas[0]),
                    Some(0.9),
                    *n_per_env,
                    seed,
                )
            }
            DataSpec::Idx { images, labels, label_noise, train_colors, val_color, test_color, n_per_env } => {
                build_colored(
                    ColoredSource::IdxFiles { images: images.clone(), labels: labels.clone() },
                    *label_noise,
                    train_colors,
                    *val_color,
                    *test_color,
                    *n_per_env,
                    seed,
                )
            }
            DataSpec::Sine { sampling, n_per_env } => {
                let spec = match sampling.as_str() {
                    "uniform" => SineRegSpec::uniform_preset(*n_per_env, seed),
                    "gaussian" => SineRegSpec::gaussian_preset(*n_per_env, seed),
                    other => anyhow::bail!(
                        "config error: unknown sine sampling {other:?} (known: uniform, gaussian)"
                    ),
                };
                let train = data::sample_sine_envs(&spec)?;
                // Validation: a fresh draw from the same regions.
                let mut val_spec = spec.clone();
                val_spec.seed = seed ^ VAL_SALT;
                let val_envs = data::sample_sine_envs(&val_spec)?;
                let val = merge_envs(val_envs);
                Ok(TrainEnvs { train, val: Some(val), test: None })
            }
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("serializable spec")
    }
}

const VAL_SALT: u64 = 0x76616c5f73616c74; // "val_salt"
const TEST_SALT: u64 = 0x746573745f73616c; // "test_sal"

fn build_colored(
    source: ColoredSource,
    label_noise: f64,
    train_colors: &[f64],
    val_color: Option<f64>,
    test_color: Option<f64>,
    n_per_env: usize,
    seed: u64,
) -> anyhow::Result<TrainEnvs> {
    let train = data::make_colored_envs(&ColoredDigitSpec {
        source: source.clone(),
        label_noise,
        env_colors: train_colors.to_vec(),
        n_per_env,
        seed,
    })?;
    let one_env = |color: f64, salt: u64| -> anyhow::Result<_> {
        Ok(data::make_colored_envs(&ColoredDigitSpec {
            source: source.clone(),
            label_noise,
            env_colors: vec![color],
            n_per_env,
            seed: seed ^ salt,
        })?
        .remove(0))
    };
    let val = match val_color.or(train_colors.first().copied()) {
        Some(c) => Some(one_env(c, VAL_SALT)?),
        None => None,
    };
    let test = match test_color {
        Some(c) => Some(one_env(c, TEST_SALT)?),
        None => None,
    };
    Ok(TrainEnvs { train, val, test })
}

fn merge_envs(mut envs: Vec<pareto_ood::objectives::EnvBatch>) -> pareto_ood::objectives::EnvBatch {
    use pareto_ood::linalg::Matrix;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets = Vec::new();
    for env in envs.drain(..) {
        for i in 0..env.len() {
            rows.push(env.inputs.row(i).to_vec());
            targets.push(env.targets[i]);
        }
    }
    pareto_ood::objectives::EnvBatch::new(0, Matrix::from_rows(&rows).unwrap(), targets).unwrap()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwobitSolveConfig {
    pub envs: EnvSetSpec,
    pub loss_kind: LossKind,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

fn default_front_objectives() -> FrontObjectives {
    FrontObjectives::PerEnv
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwobitFrontConfig {
    pub envs: EnvSetSpec,
    pub loss_kind: LossKind,
    #[serde(default = "default_front_objectives")]
    pub objectives: FrontObjectives,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    /// Append the refined constraint-system roots and the exact invariant
    /// predictors to the scan points.
    #[serde(default = "default_true")]
    pub include_roots: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCommandConfig {
    pub data: DataSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(default)]
    pub lambda_irm: Option<Vec<f64>>,
    #[serde(default)]
    pub lambda_vrex: Option<Vec<f64>>,
    #[serde(default)]
    pub pretrain_epochs: Option<Vec<usize>>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub data: DataSpec,
    pub base: TrainConfig,
    #[serde(default)]
    pub axes: Option<SweepAxes>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectCommandConfig {
    pub history_dir: std::path::PathBuf,
    pub preference: Vec<f64>,
    pub convergence_cutoff: u64,
    #[serde(default = "default_percentile")]
    pub percentile: f64,
    #[serde(default)]
    pub score_direction: pareto_ood::selection::ScoreDirection,
}

fn default_percentile() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SineDemoConfig {
    /// "uniform" or "gaussian".
    pub sampling: String,
    pub n_per_env: usize,
    pub train: TrainConfig,
    pub irm_lambdas: Vec<f64>,
    pub vrex_lambdas: Vec<f64>,
    #[serde(default = "default_overlap")]
    pub overlap: (f64, f64),
}

fn default_overlap() -> (f64, f64) {
    (-2.0, 2.0)
}
