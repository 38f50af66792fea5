//! Distribution and retrieval metrics over feature sets (`M × F` matrices,
//! one row per sample), plus a seeded random-projection feature extractor.

use std::collections::BTreeMap;

use nalgebra::{DVector, SymmetricEigen};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hsa::TextEncoderProvider;
use crate::motion_repr::MotionClip;
use crate::nn::Mat;
use crate::sampler::stream_rng;

pub const R_PRECISION_POOL: usize = 32;
pub const DIVERSITY_SUBSET: usize = 300;
pub const MMODALITY_SUBSET: usize = 10;
pub const METRIC_RUNS: usize = 20;
pub const MMODALITY_RUNS: usize = 5;
const EIGEN_TOLERANCE: f64 = 1e-8;

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite {what} features")))
    }
}

/// Mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: Mat,
}

impl GaussianSummary {
    pub fn from_features(feats: &Mat) -> Result<Self> {
        let m = feats.nrows();
        if m < 2 {
            return Err(Error::invalid(format!("covariance needs at least 2 rows, got {m}")));
        }
        check_finite(feats, "input")?;
        let mean: DVector<f64> = feats.row_mean().transpose();
        let mut centered = feats.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let cov = centered.transpose() * &centered / (m as f64 - 1.0);
        Ok(Self { mean, cov })
    }
}

/// Eigenvalues of a symmetric PSD matrix with round-off negatives clamped;
/// returns the decomposition or an error if a genuinely negative eigenvalue
/// is present.
fn psd_eigen(m: &Mat, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < -EIGEN_TOLERANCE * scale {
            return Err(Error::Numerical(format!("{what} has negative eigenvalue {v}")));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &Mat) -> Result<Mat> {
    let eig = psd_eigen(m, "covariance")?;
    let d = Mat::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

/// `‖μ_a − μ_b‖² + Tr(Σ_a + Σ_b − 2 (Σ_a Σ_b)^{1/2})`, with the trace of the
/// square root taken as `Tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: a.mean.len(),
            actual: b.mean.len(),
            context: "feature width",
        });
    }
    let ra = sqrt_psd(&a.cov)?;
    let inner = &ra * &b.cov * &ra;
    let eig = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = eig.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let d = (&a.mean - &b.mean).norm_squared() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

pub fn fid(real: &Mat, generated: &Mat) -> Result<f64> {
    frechet_distance(&GaussianSummary::from_features(real)?, &GaussianSummary::from_features(generated)?)
}

fn row_distance(a: &Mat, i: usize, b: &Mat, j: usize) -> f64 {
    a.row(i)
        .iter()
        .zip(b.row(j).iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance between index-paired rows.
pub fn mm_dist(motion: &Mat, text: &Mat) -> Result<f64> {
    if motion.shape() != text.shape() {
        return Err(Error::invalid(format!(
            "paired feature sets differ in shape: {:?} vs {:?}",
            motion.shape(),
            text.shape()
        )));
    }
    if motion.nrows() == 0 {
        return Err(Error::invalid("empty feature sets"));
    }
    Ok((0..motion.nrows()).map(|i| row_distance(motion, i, text, i)).sum::<f64>() / motion.nrows() as f64)
}

/// Top-1/2/3 retrieval accuracy: each text ranks its own motion among
/// `pool_size - 1` random distractors placed at random pool positions; equal
/// distances are ordered by pool position.
pub fn r_precision<R: Rng + ?Sized>(motion: &Mat, text: &Mat, pool_size: usize, rng: &mut R) -> Result<[f64; 3]> {
    let n = motion.nrows();
    if motion.shape() != text.shape() {
        return Err(Error::invalid("paired feature sets differ in shape"));
    }
    if pool_size < 1 || n < pool_size {
        return Err(Error::invalid(format!("R-precision needs at least {pool_size} pairs, got {n}")));
    }
    let mut hits = [0usize; 3];
    for q in 0..n {
        // distractors are drawn from the other n - 1 motions
        let mut pool: Vec<usize> = sample(rng, n - 1, pool_size - 1)
            .into_iter()
            .map(|i| if i >= q { i + 1 } else { i })
            .collect();
        let slot = rng.random_range(0..pool_size);
        pool.insert(slot, q);
        let d_true = row_distance(text, q, motion, q);
        let rank = pool
            .iter()
            .enumerate()
            .filter(|&(pos, &c)| {
                let d = row_distance(text, q, motion, c);
                c != q && (d < d_true || (d == d_true && pos < slot))
            })
            .count();
        for (k, h) in hits.iter_mut().enumerate() {
            if rank <= k {
                *h += 1;
            }
        }
    }
    Ok(hits.map(|h| h as f64 / n as f64))
}

/// Mean distance between row `i` of `a` and row `i` of `b`.
pub fn paired_mean_distance(a: &Mat, b: &Mat) -> Result<f64> {
    mm_dist(a, b)
}

/// Draws `2 × subset` distinct rows, pairs the first half with the second,
/// and averages the distances.
pub fn diversity<R: Rng + ?Sized>(feats: &Mat, subset: usize, rng: &mut R) -> Result<f64> {
    if subset < 1 || feats.nrows() < 2 * subset {
        return Err(Error::invalid(format!(
            "diversity needs at least {} rows, got {}",
            2 * subset,
            feats.nrows()
        )));
    }
    let idx = sample(rng, feats.nrows(), 2 * subset).into_vec();
    Ok((0..subset)
        .map(|i| row_distance(feats, idx[i], feats, idx[subset + i]))
        .sum::<f64>()
        / subset as f64)
}

/// Per text, two disjoint `subset`-row draws paired element-wise;
/// `(1 / (subset · N)) Σ_texts Σ_i ‖f_i − f'_i‖`.
pub fn mmodality<R: Rng + ?Sized>(per_text: &BTreeMap<String, Mat>, subset: usize, rng: &mut R) -> Result<f64> {
    if per_text.is_empty() {
        return Err(Error::invalid("no texts for multimodality"));
    }
    let mut total = 0.0;
    for (text, feats) in per_text {
        if feats.nrows() < 2 * subset {
            return Err(Error::invalid(format!(
                "text {text:?} has {} generations, needs {}",
                feats.nrows(),
                2 * subset
            )));
        }
        let idx = sample(rng, feats.nrows(), 2 * subset).into_vec();
        total += (0..subset)
            .map(|i| row_distance(feats, idx[i], feats, idx[subset + i]))
            .sum::<f64>();
    }
    Ok(total / (subset * per_text.len()) as f64)
}

/// Repeated evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Half-width of the 95% interval: `1.96 s / √runs`.
    pub ci95: f64,
    pub runs: Vec<f64>,
}

impl MetricSummary {
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n.max(1.0);
        let var = if runs.len() > 1 {
            runs.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            ci95: 1.96 * var.sqrt() / n.max(1.0).sqrt(),
            runs,
        }
    }
}

/// Runs `metric` once per repetition with RNG stream `(seed, run)`.
pub fn repeat<F>(runs: usize, seed: u64, mut metric: F) -> Result<MetricSummary>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<f64>,
{
    let values = (0..runs)
        .map(|r| metric(&mut stream_rng(seed, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricSummary::from_runs(values))
}

/// Maps motions and captions into a shared feature space.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn motion_features(&self, clip: &MotionClip) -> Result<Vec<f64>>;
    fn text_features(&self, text: &str) -> Result<Vec<f64>>;
}

/// Seeded Gaussian projections: motions through per-channel mean and
/// standard deviation over frames, texts through the concatenated layer
/// features of a text provider.
pub struct RandomProjectionExtractor<P: TextEncoderProvider> {
    pub provider: P,
    motion_proj: Mat,
    text_proj: Mat,
}

fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (rows.max(1) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        g * scale
    })
}

impl<P: TextEncoderProvider> RandomProjectionExtractor<P> {
    pub fn new(provider: P, motion_dim: usize, dim: usize, seed: u64) -> Self {
        let text_width: usize = provider.layers().iter().filter_map(|&l| provider.width(l)).sum();
        Self {
            motion_proj: gaussian_matrix(2 * motion_dim, dim, seed),
            text_proj: gaussian_matrix(text_width, dim, seed.wrapping_add(1)),
            provider,
        }
    }
}

impl<P: TextEncoderProvider> FeatureExtractor for RandomProjectionExtractor<P> {
    fn dim(&self) -> usize {
        self.motion_proj.ncols()
    }

    fn motion_features(&self, clip: &MotionClip) -> Result<Vec<f64>> {
        if 2 * clip.dim() != self.motion_proj.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.motion_proj.nrows() / 2,
                actual: clip.dim(),
                context: "extractor motion width",
            });
        }
        if clip.len() == 0 {
            return Err(Error::invalid("empty clip"));
        }
        let mean = clip.features.row_mean();
        let var = clip.features.row_variance();
        let stats = Mat::from_fn(1, 2 * clip.dim(), |_, j| {
            if j < clip.dim() {
                mean[j]
            } else {
                var[j - clip.dim()].sqrt()
            }
        });
        Ok((stats * &self.motion_proj).iter().copied().collect())
    }

    fn text_features(&self, text: &str) -> Result<Vec<f64>> {
        let feats = self.provider.embed(text)?;
        let flat: Vec<f64> = feats.values().flatten().copied().collect();
        if flat.len() != self.text_proj.nrows() {
            return Err(Error::DimensionMismatch {
                expected: self.text_proj.nrows(),
                actual: flat.len(),
                context: "extractor text width",
            });
        }
        Ok((Mat::from_row_slice(1, flat.len(), &flat) * &self.text_proj).iter().copied().collect())
    }
}

/// Stacks feature vectors into an `M × F` matrix.
pub fn stack(rows: &[Vec<f64>]) -> Result<Mat> {
    let f = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != f) {
        return Err(Error::invalid("feature rows differ in width"));
    }
    Ok(Mat::from_fn(rows.len(), f, |i, j| rows[i][j]))
}
