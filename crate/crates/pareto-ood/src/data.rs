//! Samplers and ingestion: two-bit environments, colored-digit
//! construction (synthetic blobs or real IDX files), and the sine
//! extrapolation environments.
//!
//! Every sampler is driven by ChaCha12 seeded from a u64; that generator
//! is fixed for the life of the repo so identical specs reproduce batches
//! bit for bit. Multi-environment generators split streams per
//! environment (`seed ^ env_index`) so adding an environment never
//! perturbs the samples of existing ones. Within a sample the draw order
//! is fixed: label first, then the x1 flip, then the x2 flip.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::objectives::EnvBatch;

fn env_rng(seed: u64, env_index: usize) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ env_index as u64)
}

/// Rad(sigma): -1 with probability sigma, +1 otherwise.
fn rad(rng: &mut ChaCha12Rng, sigma: f64) -> f64 {
    if rng.random_bool(sigma) {
        -1.0
    } else {
        1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBitSampleSpec {
    pub alpha: f64,
    pub beta: f64,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub env_id: usize,
    /// Kept for config compatibility; the construction order is fixed as
    /// label first, flips after.
    #[serde(default = "default_true")]
    pub label_flip_first: bool,
}

fn default_true() -> bool {
    true
}

impl TwoBitSampleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidSpec("need n >= 1".into()));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidSpec(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if !self.label_flip_first {
            return Err(Error::InvalidSpec(
                "label_flip_first is fixed to true in this construction".into(),
            ));
        }
        Ok(())
    }
}

/// Samples one two-bit environment: y ~ Rad(0.5), x1 = y Rad(alpha),
/// x2 = y Rad(beta).
pub fn sample_twobit(spec: &TwoBitSampleSpec) -> Result<EnvBatch> {
    spec.validate()?;
    let mut rng = env_rng(spec.seed, spec.env_id);
    let mut inputs = Matrix::zeros(spec.n, 2);
    let mut targets = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let y = rad(&mut rng, 0.5);
        let x1 = y * rad(&mut rng, spec.alpha);
        let x2 = y * rad(&mut rng, spec.beta);
        inputs.set(i, 0, x1);
        inputs.set(i, 1, x2);
        targets.push(y);
    }
    EnvBatch::new(spec.env_id, inputs, targets)
}

/// One batch per beta, with per-environment derived seeds.
pub fn sample_twobit_envs(
    alpha: f64,
    betas: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<EnvBatch>> {
    betas
        .iter()
        .enumerate()
        .map(|(env_id, &beta)| {
            sample_twobit(&TwoBitSampleSpec {
                alpha,
                beta,
                n,
                seed,
                env_id,
                label_flip_first: true,
            })
        })
        .collect()
}

/// Exact population batch: every (x1, x2, y) atom appears with its exact
/// multiplicity, so batch means equal population expectations up to
/// summation rounding. Requires alpha * denom and beta * denom integral;
/// the batch holds 2 * denom^2 samples.
pub fn exact_population_batch(
    env_id: usize,
    alpha: f64,
    beta: f64,
    denom: usize,
) -> Result<EnvBatch> {
    let na = alpha * denom as f64;
    let nb = beta * denom as f64;
    if (na - na.round()).abs() > 1e-9 || (nb - nb.round()).abs() > 1e-9 {
        return Err(Error::InvalidSpec(format!(
            "denominator {denom} does not make alpha={alpha}, beta={beta} exact"
        )));
    }
    let (na, nb) = (na.round() as usize, nb.round() as usize);
    let n = 2 * denom * denom;
    let mut inputs = Matrix::zeros(n, 2);
    let mut targets = Vec::with_capacity(n);
    let mut row = 0;
    for y in [1.0, -1.0] {
        for i in 0..denom {
            let f1 = if i < na { -1.0 } else { 1.0 };
            for j in 0..denom {
                let f2 = if j < nb { -1.0 } else { 1.0 };
                inputs.set(row, 0, y * f1);
                inputs.set(row, 1, y * f2);
                targets.push(y);
                row += 1;
            }
        }
    }
    EnvBatch::new(env_id, inputs, targets)
}

/// Blob feature geometry: targets project onto these directions.
pub const BLOB_INVARIANT_DIRECTION: [f64; 2] = [1.2, -0.8];
pub const BLOB_COLOR_DIRECTION: [f64; 2] = [1.0, 0.6];
/// Noise scale keeps the invariant block margin at ~4.8 sigma, so the
/// clean label is recoverable from it essentially surely.
pub const BLOB_NOISE_STD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ColoredSource {
    /// Low-dimensional blobs standing in for digits; no downloads needed.
    SyntheticBlobs,
    /// Real digit images from IDX containers.
    IdxFiles { images: PathBuf, labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColoredDigitSpec {
    pub source: ColoredSource,
    /// Probability the binary label is flipped before coloring (the
    /// invariant noise; 0.25 in the standard protocol).
    pub label_noise: f64,
    /// Per-environment color flip probabilities.
    pub env_colors: Vec<f64>,
    pub n_per_env: usize,
    pub seed: u64,
}

impl ColoredDigitSpec {
    fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidSpec("label_noise must lie in [0,1)".into()));
        }
        if self.env_colors.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(Error::InvalidSpec(
                "env_colors entries must lie in [0,1]".into(),
            ));
        }
        if self.env_colors.is_empty() {
            return Err(Error::InvalidSpec("need at least one environment".into()));
        }
        if self.n_per_env == 0 {
            return Err(Error::InvalidSpec("need n_per_env >= 1".into()));
        }
        Ok(())
    }
}

/// Colored-digit environments. Construction order per sample: draw the
/// clean binary label, flip it with `label_noise`, then color with the
/// environment's correlation. Targets are the noisy labels, so a perfect
/// invariant-feature classifier tops out at 1 - label_noise.
pub fn make_colored_envs(spec: &ColoredDigitSpec) -> Result<Vec<EnvBatch>> {
    spec.validate()?;
    match &spec.source {
        ColoredSource::SyntheticBlobs => make_blob_envs(spec),
        ColoredSource::IdxFiles { images, labels } => make_idx_envs(spec, images, labels),
    }
}

fn make_blob_envs(spec: &ColoredDigitSpec) -> Result<Vec<EnvBatch>> {
    let mut envs = Vec::with_capacity(spec.env_colors.len());
    for (env_id, &color) in spec.env_colors.iter().enumerate() {
        let mut rng = env_rng(spec.seed, env_id);
        let mut inputs = Matrix::zeros(spec.n_per_env, 4);
        let mut targets = Vec::with_capacity(spec.n_per_env);
        for i in 0..spec.n_per_env {
            let clean = rad(&mut rng, 0.5);
            let noisy = clean * rad(&mut rng, spec.label_noise);
            let c = noisy * rad(&mut rng, color);
            for (j, &dir) in BLOB_INVARIANT_DIRECTION.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs.set(i, j, clean * dir + BLOB_NOISE_STD * noise);
            }
            for (j, &dir) in BLOB_COLOR_DIRECTION.iter().enumerate() {
                let noise: f64 = StandardNormal.sample(&mut rng);
                inputs.set(i, 2 + j, c * dir + BLOB_NOISE_STD * noise);
            }
            targets.push(noisy);
        }
        envs.push(EnvBatch::new(env_id, inputs, targets)?);
    }
    Ok(envs)
}

/// Pooled image side length for the IDX pipeline (28 -> 7).
const IDX_POOLED_SIDE: usize = 7;

fn make_idx_envs(spec: &ColoredDigitSpec, images: &Path, labels: &Path) -> Result<Vec<EnvBatch>> {
    let imgs = parse_idx(images)?;
    let labs = parse_idx(labels)?;
    if imgs.dims.len() != 3 {
        return Err(Error::InvalidSpec(format!(
            "expected a rank-3 image tensor, got rank {}",
            imgs.dims.len()
        )));
    }
    if labs.dims.len() != 1 || labs.dims[0] != imgs.dims[0] {
        return Err(Error::InvalidSpec(
            "label tensor does not match image count".into(),
        ));
    }
    let total_needed = spec.n_per_env * spec.env_colors.len();
    if imgs.dims[0] < total_needed {
        return Err(Error::InvalidSpec(format!(
            "need {total_needed} images, file holds {}",
            imgs.dims[0]
        )));
    }
    let (h, w) = (imgs.dims[1], imgs.dims[2]);
    let pool_h = h.div_ceil(IDX_POOLED_SIDE);
    let pool_w = w.div_ceil(IDX_POOLED_SIDE);
    let feat = IDX_POOLED_SIDE * IDX_POOLED_SIDE;
    let mut envs = Vec::with_capacity(spec.env_colors.len());
    let mut cursor = 0usize;
    for (env_id, &color) in spec.env_colors.iter().enumerate() {
        let mut rng = env_rng(spec.seed, env_id);
        // Two color channels: the pooled digit lands in one of them.
        let mut inputs = Matrix::zeros(spec.n_per_env, 2 * feat);
        let mut targets = Vec::with_capacity(spec.n_per_env);
        for i in 0..spec.n_per_env {
            let digit = labs.data[cursor];
            let clean = if digit >= 5 { 1.0 } else { -1.0 };
            let noisy = clean * rad(&mut rng, spec.label_noise);
            let c = noisy * rad(&mut rng, color);
            let img = &imgs.data[cursor * h * w..(cursor + 1) * h * w];
            let channel = if c > 0.0 { 0 } else { 1 };
            for py in 0..IDX_POOLED_SIDE {
                for px in 0..IDX_POOLED_SIDE {
                    let mut acc = 0.0;
                    let mut count = 0.0;
                    for dy in 0..pool_h {
                        for dx in 0..pool_w {
                            let (yy, xx) = (py * pool_h + dy, px * pool_w + dx);
                            if yy < h && xx < w {
                                acc += img[yy * w + xx] as f64 / 255.0;
                                count += 1.0;
                            }
                        }
                    }
                    let v = if count > 0.0 { acc / count } else { 0.0 };
                    inputs.set(i, channel * feat + py * IDX_POOLED_SIDE + px, v);
                }
            }
            targets.push(noisy);
            cursor += 1;
        }
        envs.push(EnvBatch::new(env_id, inputs, targets)?);
    }
    Ok(envs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussComponent {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SineSampling {
    Uniform { rects: Vec<Rect> },
    Gaussian { components: Vec<GaussComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SineRegSpec {
    pub sampling: SineSampling,
    pub n_per_env: usize,
    pub seed: u64,
}

impl SineRegSpec {
    /// Two rectangles whose x1 supports sit on either side of the overlap.
    pub fn uniform_preset(n_per_env: usize, seed: u64) -> Self {
        SineRegSpec {
            sampling: SineSampling::Uniform {
                rects: vec![
                    Rect { min: [-3.0, -3.0], max: [-2.0, 1.0] },
                    Rect { min: [-1.0, 2.0], max: [3.0, 3.0] },
                ],
            },
            n_per_env,
            seed,
        }
    }

    /// The harder anisotropic-Gaussian sampling.
    pub fn gaussian_preset(n_per_env: usize, seed: u64) -> Self {
        SineRegSpec {
            sampling: SineSampling::Gaussian {
                components: vec![
                    GaussComponent {
                        mean: [-0.9, -2.2],
                        cov: [[0.9, 0.11], [0.11, 0.1]],
                    },
                    GaussComponent {
                        mean: [1.0, 2.0],
                        cov: [[1.0, -0.3], [-0.3, 0.1]],
                    },
                ],
            },
            n_per_env,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_per_env == 0 {
            return Err(Error::InvalidSpec("need n_per_env >= 1".into()));
        }
        match &self.sampling {
            SineSampling::Uniform { rects } => {
                if rects.is_empty() {
                    return Err(Error::InvalidSpec("need at least one rectangle".into()));
                }
                for r in rects {
                    if r.min[0] >= r.max[0] || r.min[1] >= r.max[1] {
                        return Err(Error::InvalidSpec("degenerate rectangle".into()));
                    }
                }
            }
            SineSampling::Gaussian { components } => {
                if components.is_empty() {
                    return Err(Error::InvalidSpec("need at least one component".into()));
                }
                for c in components {
                    let [[a, b], [b2, d]] = c.cov;
                    if (b - b2).abs() > 1e-12 {
                        return Err(Error::InvalidSpec("covariance must be symmetric".into()));
                    }
                    if a <= 0.0 || a * d - b * b <= 0.0 {
                        return Err(Error::InvalidSpec(
                            "covariance must be positive definite".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Regression environments with y = sin(x1) + 1 exactly; x2 carries no
/// signal beyond its sampling correlation with x1.
pub fn sample_sine_envs(spec: &SineRegSpec) -> Result<Vec<EnvBatch>> {
    spec.validate()?;
    let n_env = match &spec.sampling {
        SineSampling::Uniform { rects } => rects.len(),
        SineSampling::Gaussian { components } => components.len(),
    };
    let mut envs = Vec::with_capacity(n_env);
    for env_id in 0..n_env {
        let mut rng = env_rng(spec.seed, env_id);
        let mut inputs = Matrix::zeros(spec.n_per_env, 2);
        let mut targets = Vec::with_capacity(spec.n_per_env);
        for i in 0..spec.n_per_env {
            let (x1, x2) = match &spec.sampling {
                SineSampling::Uniform { rects } => {
                    let r = &rects[env_id];
                    (
                        rng.random_range(r.min[0]..r.max[0]),
                        rng.random_range(r.min[1]..r.max[1]),
                    )
                }
                SineSampling::Gaussian { components } => {
                    let c = &components[env_id];
                    // 2x2 Cholesky of the covariance.
                    let l11 = c.cov[0][0].sqrt();
                    let l21 = c.cov[1][0] / l11;
                    let l22 = (c.cov[1][1] - l21 * l21).sqrt();
                    let z1: f64 = StandardNormal.sample(&mut rng);
                    let z2: f64 = StandardNormal.sample(&mut rng);
                    (c.mean[0] + l11 * z1, c.mean[1] + l21 * z1 + l22 * z2)
                }
            };
            inputs.set(i, 0, x1);
            inputs.set(i, 1, x2);
            targets.push(x1.sin() + 1.0);
        }
        envs.push(EnvBatch::new(env_id, inputs, targets)?);
    }
    Ok(envs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses a big-endian IDX container of unsigned bytes.
pub fn parse_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path)?;
    parse_idx_bytes(&bytes)
}

pub fn parse_idx_bytes(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("header needs 4 bytes, file has {}", bytes.len()),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::IdxParse {
            offset: 0,
            reason: format!("bad magic prefix {:#04x}{:02x}", bytes[0], bytes[1]),
        });
    }
    let dtype = bytes[2];
    if dtype != 0x08 {
        return Err(Error::IdxParse {
            offset: 2,
            reason: format!("unsupported dtype code {dtype:#04x} (only 0x08 unsigned byte)"),
        });
    }
    let ndim = bytes[3] as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            reason: format!("truncated dimension table, need {header_len} header bytes"),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 4 + 4 * d;
        let v = u32::from_be_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
        dims.push(v);
    }
    let payload: usize = dims.iter().product();
    let expected = header_len + payload;
    if bytes.len() < expected {
        return Err(Error::IdxParse {
            offset: bytes.len(),
            reason: format!("truncated payload: expected {expected} bytes total"),
        });
    }
    Ok(IdxTensor {
        dims,
        data: bytes[header_len..expected].to_vec(),
    })
}

/// CSV export of a batch for inspection: x1..xd, y.
pub fn batch_to_csv(batch: &EnvBatch) -> String {
    let d = batch.inputs.cols();
    let mut out = String::new();
    for j in 1..=d {
        if j > 1 {
            out.push(',');
        }
        out.push_str(&format!("x{j}"));
    }
    out.push_str(",y\n");
    for i in 0..batch.len() {
        for (j, v) in batch.inputs.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
        }
        out.push_str(&format!(",{}\n", batch.targets[i]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flip_probabilities_copy_the_label() {
        let batch = sample_twobit(&TwoBitSampleSpec {
            alpha: 0.0,
            beta: 0.0,
            n: 64,
            seed: 9,
            env_id: 0,
            label_flip_first: true,
        })
        .unwrap();
        for i in 0..batch.len() {
            assert_eq!(batch.inputs.get(i, 0), batch.targets[i]);
            assert_eq!(batch.inputs.get(i, 1), batch.targets[i]);
        }
    }

    #[test]
    fn samplers_are_bit_reproducible() {
        let spec = TwoBitSampleSpec {
            alpha: 0.2,
            beta: 0.7,
            n: 256,
            seed: 1234,
            env_id: 3,
            label_flip_first: true,
        };
        let a = sample_twobit(&spec).unwrap();
        let b = sample_twobit(&spec).unwrap();
        assert_eq!(a.inputs.data(), b.inputs.data());
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn exact_population_batch_matches_closed_form_moments() {
        use crate::twobit::{moments, OddPredictor};
        let (alpha, beta) = (0.1, 0.4);
        let batch = exact_population_batch(0, alpha, beta, 10).unwrap();
        let pred = OddPredictor::new(0.3, -1.1);
        // f over the batch via the odd predictor on (x1, x2).
        let (mut ef2, mut efy) = (0.0, 0.0);
        for i in 0..batch.len() {
            let (x1, x2) = (batch.inputs.get(i, 0), batch.inputs.get(i, 1));
            let f = pred.x1_coefficient() * x1 + pred.x2_coefficient() * x2;
            ef2 += f * f;
            efy += f * batch.targets[i];
        }
        ef2 /= batch.len() as f64;
        efy /= batch.len() as f64;
        let (tf2, tfy) = moments(pred, alpha, beta);
        assert!((ef2 - tf2).abs() < 1e-12);
        assert!((efy - tfy).abs() < 1e-12);
    }

    #[test]
    fn exact_population_batch_rejects_bad_denominator() {
        assert!(exact_population_batch(0, 0.1, 0.11, 10).is_err());
    }

    #[test]
    fn color_zero_means_color_equals_noisy_label() {
        let spec = ColoredDigitSpec {
            source: ColoredSource::SyntheticBlobs,
            label_noise: 0.25,
            env_colors: vec![0.0],
            n_per_env: 200,
            seed: 5,
        };
        let envs = make_colored_envs(&spec).unwrap();
        let batch = &envs[0];
        // With color correlation zero the color block projects onto the
        // noisy label direction with positive sign for every sample.
        for i in 0..batch.len() {
            let proj = batch.inputs.get(i, 2) * BLOB_COLOR_DIRECTION[0]
                + batch.inputs.get(i, 3) * BLOB_COLOR_DIRECTION[1];
            assert!(proj * batch.targets[i] > 0.0, "sample {i}");
        }
    }

    #[test]
    fn sine_targets_are_exact_and_envs_stay_in_their_rectangles() {
        let spec = SineRegSpec::uniform_preset(500, 11);
        let envs = sample_sine_envs(&spec).unwrap();
        assert_eq!(envs.len(), 2);
        for (i, t) in envs[0].targets.iter().enumerate() {
            let x1 = envs[0].inputs.get(i, 0);
            assert_eq!(*t, x1.sin() + 1.0);
            assert!((-3.0..=-2.0).contains(&x1));
            let x2 = envs[0].inputs.get(i, 1);
            assert!((-3.0..=1.0).contains(&x2));
        }
    }

    #[test]
    fn idx_round_trip_of_handcrafted_fixture() {
        // 1x1x1 tensor with payload 0x7f.
        let bytes = [0u8, 0, 0x08, 3, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0x7f];
        let t = parse_idx_bytes(&bytes).unwrap();
        assert_eq!(t.dims, vec![1, 1, 1]);
        assert_eq!(t.data, vec![127]);
        // Label-style vector of 3 items.
        let bytes = [0u8, 0, 0x08, 1, 0, 0, 0, 3, 9, 8, 7];
        let t = parse_idx_bytes(&bytes).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![9, 8, 7]);
    }

    #[test]
    fn idx_structured_errors_name_offsets() {
        let bad_magic = [1u8, 0, 0x08, 1, 0, 0, 0, 0];
        match parse_idx_bytes(&bad_magic).unwrap_err() {
            Error::IdxParse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("unexpected {other:?}"),
        }
        let bad_dtype = [0u8, 0, 0x0d, 1, 0, 0, 0, 0];
        match parse_idx_bytes(&bad_dtype).unwrap_err() {
            Error::IdxParse { offset, .. } => assert_eq!(offset, 2),
            other => panic!("unexpected {other:?}"),
        }
        let truncated = [0u8, 0, 0x08, 1, 0, 0, 0, 5, 1, 2];
        match parse_idx_bytes(&truncated).unwrap_err() {
            Error::IdxParse { offset, .. } => assert_eq!(offset, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mnist_header_if_present() {
        // Reads the canonical training images if a copy exists locally;
        // silently skipped otherwise.
        let candidates = [
            "data/mnist/train-images-idx3-ubyte",
            "/root/data/mnist/train-images-idx3-ubyte",
        ];
        for c in candidates {
            if std::path::Path::new(c).exists() {
                let t = parse_idx(std::path::Path::new(c)).unwrap();
                assert_eq!(t.dims, vec![60000, 28, 28]);
                return;
            }
        }
    }
}
