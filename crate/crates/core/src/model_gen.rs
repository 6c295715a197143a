//! Synthetic data: latent factors `s`, mixed inputs `x = A s` and outputs `y`
//! drawn from a menu of semi-parametric observation models.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rng::{domain, substream};

/// Moment orders used by the grid proxy of the sub-Gaussian norm.
pub const PSI2_GRID: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Tolerance for symmetry, orthonormality and rank decisions.
pub const LINALG_TOL: f64 = 1e-10;

/// `sign` with `sign(0) = +1`, so quantised outputs never vanish.
#[inline]
pub fn sgn(t: f64) -> f64 {
    if t >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentKind {
    Gaussian,
    Rademacher,
    /// Uniform on `[-√3, √3]`.
    UniformScaled,
}

impl LatentKind {
    #[inline]
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            LatentKind::Gaussian => StandardNormal.sample(rng),
            LatentKind::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            LatentKind::UniformScaled => {
                let r3 = 3.0_f64.sqrt();
                rng.random_range(-r3..=r3)
            }
        }
    }

    /// `E|v|^q` for a single coordinate.
    pub fn abs_moment(self, q: f64) -> f64 {
        match self {
            LatentKind::Gaussian => {
                2.0_f64.powf(q / 2.0) * libm::tgamma((q + 1.0) / 2.0) / std::f64::consts::PI.sqrt()
            }
            LatentKind::Rademacher => 1.0,
            LatentKind::UniformScaled => 3.0_f64.powf(q / 2.0) / (q + 1.0),
        }
    }

    /// Sub-Gaussian constant κ of one coordinate: the population value of the
    /// moment-grid proxy `max_q q^{-1/2} (E|v|^q)^{1/q}`.
    pub fn kappa(self) -> f64 {
        PSI2_GRID
            .iter()
            .map(|&q| q.powf(-0.5) * self.abs_moment(q).powf(1.0 / q))
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub kind: LatentKind,
    pub dim: usize,
}

impl LatentDistribution {
    pub fn new(kind: LatentKind, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::param("latent dimension must be positive"));
        }
        Ok(Self { kind, dim })
    }

    pub fn kappa(&self) -> f64 {
        self.kind.kappa()
    }
}

/// Draw `n` i.i.d. latent vectors as the rows of an `n × d` matrix.
pub fn sample_latent(dist: &LatentDistribution, n: usize, seed: u64) -> Result<DMatrix<f64>> {
    sample_latent_with(Execution::default(), dist, n, seed)
}

pub fn sample_latent_with(
    exec: Execution,
    dist: &LatentDistribution,
    n: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    if n == 0 || dist.dim == 0 {
        return Err(Error::param("n and d must be positive"));
    }
    let d = dist.dim;
    let kind = dist.kind;
    let rows = par::map_indexed(exec, n, |i| {
        let mut rng = substream(seed, domain::LATENT, i as u64);
        (0..d).map(|_| kind.sample(&mut rng)).collect::<Vec<_>>()
    });
    Ok(DMatrix::from_row_iterator(n, d, rows.into_iter().flatten()))
}

/// Deterministic `p × d` factor loading matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    entries: DMatrix<f64>,
    rank: usize,
}

impl MixingMatrix {
    pub fn identity(d: usize) -> Self {
        Self {
            entries: DMatrix::identity(d, d),
            rank: d,
        }
    }

    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mixing matrix"));
        }
        let sv = entries.clone().singular_values();
        let smax = sv.max();
        let rank = sv
            .iter()
            .filter(|&&s| s > LINALG_TOL * smax.max(1.0))
            .count();
        Ok(Self { entries, rank })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Observed dimension `p`.
    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    /// Latent dimension `d`.
    pub fn d(&self) -> usize {
        self.entries.ncols()
    }
}

/// Factor a PSD covariance as `Σ = A Aᵀ` with `A = U D`, `UᵀU = I`.
///
/// Eigenvalues at or below `tol · max(1, λ_max)` are dropped, so `A` has as
/// many columns as the numerical rank of `Σ`. Columns are ordered by
/// decreasing eigenvalue and each column's largest-magnitude entry is made
/// positive.
pub fn isotropic_decomposition(sigma: &DMatrix<f64>, tol: f64) -> Result<MixingMatrix> {
    if !sigma.is_square() || sigma.nrows() == 0 {
        return Err(Error::dims("covariance must be a non-empty square matrix"));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    let scale = sigma.amax().max(1.0);
    let asym = (sigma - sigma.transpose()).amax();
    if asym > LINALG_TOL * scale {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (sigma + sigma.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lmax = eig.eigenvalues[order[0]];
    let cut = tol * lmax.abs().max(1.0);
    if let Some(&neg) = eig.eigenvalues.iter().find(|&&l| l < -cut) {
        return Err(Error::NegativeEigenvalue(neg));
    }
    let keep: Vec<usize> = order
        .into_iter()
        .filter(|&k| eig.eigenvalues[k] > cut)
        .collect();
    if keep.is_empty() {
        return Err(Error::param("covariance is numerically zero"));
    }

    let p = sigma.nrows();
    let mut a = DMatrix::zeros(p, keep.len());
    for (j, &k) in keep.iter().enumerate() {
        let mut col = eig.eigenvectors.column(k).clone_owned();
        let pivot = col.iamax();
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        a.set_column(j, &(col * eig.eigenvalues[k].sqrt()));
    }
    let rank = keep.len();
    Ok(MixingMatrix { entries: a, rank })
}

/// `x_i = A s_i` for every row.
pub fn apply_mixing(a: &MixingMatrix, latent: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if latent.ncols() != a.d() {
        return Err(Error::dims(format!(
            "latent has {} columns, mixing matrix expects {}",
            latent.ncols(),
            a.d()
        )));
    }
    Ok(latent * a.entries.transpose())
}

/// Scalar output functions `g` of single-index type models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum OutputFn {
    Sign,
    Identity,
    IdentityPlusGauss { sigma: f64 },
    Tanh,
    Abs,
    /// `sign`, then flipped independently with probability `1 − q`.
    SignWithFlip { q: f64 },
}

impl OutputFn {
    pub fn apply<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> f64 {
        match *self {
            OutputFn::Sign => sgn(t),
            OutputFn::Identity => t,
            OutputFn::IdentityPlusGauss { sigma } => {
                let e: f64 = StandardNormal.sample(rng);
                t + sigma * e
            }
            OutputFn::Tanh => t.tanh(),
            OutputFn::Abs => t.abs(),
            OutputFn::SignWithFlip { q } => {
                if rng.random::<f64>() < q {
                    sgn(t)
                } else {
                    -sgn(t)
                }
            }
        }
    }

    /// `E[g(t)]` over the internal randomness of `g`.
    pub fn conditional_mean(&self, t: f64) -> f64 {
        match *self {
            OutputFn::Sign => sgn(t),
            OutputFn::Identity | OutputFn::IdentityPlusGauss { .. } => t,
            OutputFn::Tanh => t.tanh(),
            OutputFn::Abs => t.abs(),
            OutputFn::SignWithFlip { q } => (2.0 * q - 1.0) * sgn(t),
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            OutputFn::IdentityPlusGauss { sigma } if !(sigma >= 0.0) => {
                Err(Error::param("identity_plus_gauss needs sigma >= 0"))
            }
            OutputFn::SignWithFlip { q } if !(0.0..=1.0).contains(&q) => {
                Err(Error::param("sign_with_flip needs q in [0, 1]"))
            }
            _ => Ok(()),
        }
    }
}

/// Multivariate output functions `G` of multi-index type models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "fn", rename_all = "snake_case")]
pub enum MultiFn {
    Sum,
    SumOfSigns,
    SignOfFirst,
    SignOfSum,
    Product,
    /// `Σ_j w_j g(v_j)`, a shallow network.
    Shallow { weights: Vec<f64>, g: OutputFn },
}

impl MultiFn {
    pub fn apply<R: Rng + ?Sized>(&self, v: &[f64], rng: &mut R) -> f64 {
        match self {
            MultiFn::Shallow { weights, g } => weights
                .iter()
                .zip(v)
                .map(|(w, &t)| w * g.apply(t, rng))
                .sum(),
            _ => self.conditional_mean(v),
        }
    }

    pub fn conditional_mean(&self, v: &[f64]) -> f64 {
        match self {
            MultiFn::Sum => v.iter().sum(),
            MultiFn::SumOfSigns => v.iter().map(|&t| sgn(t)).sum(),
            MultiFn::SignOfFirst => sgn(v[0]),
            MultiFn::SignOfSum => sgn(v.iter().sum()),
            MultiFn::Product => v.iter().product(),
            MultiFn::Shallow { weights, g } => weights
                .iter()
                .zip(v)
                .map(|(w, &t)| w * g.conditional_mean(t))
                .sum(),
        }
    }

    fn validate(&self, arity: usize) -> Result<()> {
        if arity == 0 {
            return Err(Error::param("multi-index output needs at least one argument"));
        }
        if let MultiFn::Shallow { weights, g } = self {
            if weights.len() != arity {
                return Err(Error::param(format!(
                    "shallow output has {} weights for {} arguments",
                    weights.len(),
                    arity
                )));
            }
            g.validate()?;
        }
        Ok(())
    }
}

fn default_branch_kind() -> LatentKind {
    LatentKind::Gaussian
}

/// Output rules. Index sets (`active`) are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ObservationModel {
    Linear {
        index: Vec<f64>,
        noise_sd: f64,
    },
    Sim {
        index: Vec<f64>,
        g: OutputFn,
    },
    DitheredOneBit {
        index: Vec<f64>,
        delta: f64,
    },
    /// `y ∈ {0, 1}` with `P(y = 1 | s) = logistic(⟨s, z⟩)`.
    GlmLogistic {
        index: Vec<f64>,
    },
    MultiIndex {
        indices: Vec<Vec<f64>>,
        g: MultiFn,
    },
    VariableSelection {
        active: Vec<usize>,
        g: MultiFn,
    },
    /// `y = M^{-1/2} Σ_j g_j(⟨s^j, z⟩)` observed through `s = M^{-1/2} Σ_j s^j`.
    Superimposed {
        index: Vec<f64>,
        fns: Vec<OutputFn>,
        #[serde(default = "default_branch_kind")]
        branch_kind: LatentKind,
    },
    /// `y = G(s_1, …, s_{d1})`; the last `d2` coordinates are noise.
    NoisySplit {
        d1: usize,
        d2: usize,
        g: MultiFn,
    },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_index(index: &[f64], d: usize) -> Result<()> {
    if index.len() != d {
        return Err(Error::dims(format!(
            "index vector has length {}, latent dimension is {}",
            index.len(),
            d
        )));
    }
    if index.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("index vector"));
    }
    if norm(index) == 0.0 {
        return Err(Error::param("index vector must be nonzero"));
    }
    Ok(())
}

/// Largest entry of `|ZᵀZ − I|` for the given vectors.
pub fn orthonormality_defect(vectors: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, a) in vectors.iter().enumerate() {
        for (j, b) in vectors.iter().enumerate() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot(a, b) - target).abs());
        }
    }
    worst
}

impl ObservationModel {
    /// Latent dimension implied by the model, when it fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ObservationModel::Linear { index, .. }
            | ObservationModel::Sim { index, .. }
            | ObservationModel::DitheredOneBit { index, .. }
            | ObservationModel::GlmLogistic { index }
            | ObservationModel::Superimposed { index, .. } => Some(index.len()),
            ObservationModel::MultiIndex { indices, .. } => indices.first().map(Vec::len),
            ObservationModel::VariableSelection { .. } => None,
            ObservationModel::NoisySplit { d1, d2, .. } => Some(d1 + d2),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            ObservationModel::Linear { index, noise_sd } => {
                check_index(index, d)?;
                if !(*noise_sd >= 0.0) {
                    return Err(Error::param("noise_sd must be >= 0"));
                }
            }
            ObservationModel::Sim { index, g } => {
                check_index(index, d)?;
                g.validate()?;
            }
            ObservationModel::DitheredOneBit { index, delta } => {
                check_index(index, d)?;
                if !(*delta > 0.0) {
                    return Err(Error::param("dithering parameter delta must be > 0"));
                }
            }
            ObservationModel::GlmLogistic { index } => check_index(index, d)?,
            ObservationModel::MultiIndex { indices, g } => {
                for z in indices {
                    check_index(z, d)?;
                }
                let defect = orthonormality_defect(indices);
                if defect > LINALG_TOL {
                    return Err(Error::NotOrthonormal(defect));
                }
                g.validate(indices.len())?;
            }
            ObservationModel::VariableSelection { active, g } => {
                if active.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::param("active set must be sorted and duplicate-free"));
                }
                if active.last().is_some_and(|&k| k >= d) {
                    return Err(Error::dims(format!(
                        "active index {} out of range for d = {}",
                        active.last().unwrap(),
                        d
                    )));
                }
                g.validate(active.len())?;
            }
            ObservationModel::Superimposed { index, fns, .. } => {
                check_index(index, d)?;
                if fns.is_empty() {
                    return Err(Error::param("superimposed model needs at least one branch"));
                }
                if (norm(index) - 1.0).abs() > LINALG_TOL {
                    return Err(Error::param("superimposed index must have unit norm"));
                }
                for g in fns {
                    g.validate()?;
                }
            }
            ObservationModel::NoisySplit { d1, d2, g } => {
                if d1 + d2 != d {
                    return Err(Error::dims(format!(
                        "noisy split d1 + d2 = {} but d = {}",
                        d1 + d2,
                        d
                    )));
                }
                g.validate(*d1)?;
            }
        }
        Ok(())
    }

    /// The single index vector of one-index models.
    pub fn index(&self) -> Option<&[f64]> {
        match self {
            ObservationModel::Linear { index, .. }
            | ObservationModel::Sim { index, .. }
            | ObservationModel::DitheredOneBit { index, .. }
            | ObservationModel::GlmLogistic { index }
            | ObservationModel::Superimposed { index, .. } => Some(index),
            _ => None,
        }
    }

    /// Coordinates of `s` that the output depends on (sorted).
    pub fn effective_coords(&self, d: usize) -> Vec<usize> {
        let support = |v: &[f64]| -> Vec<usize> {
            v.iter()
                .enumerate()
                .filter(|(_, x)| **x != 0.0)
                .map(|(k, _)| k)
                .collect()
        };
        match self {
            ObservationModel::MultiIndex { indices, .. } => {
                let mut all: Vec<usize> = indices.iter().flat_map(|z| support(z)).collect();
                all.sort_unstable();
                all.dedup();
                all
            }
            ObservationModel::VariableSelection { active, .. } => active.clone(),
            ObservationModel::NoisySplit { d1, .. } => (0..*d1).collect(),
            _ => self.index().map(support).unwrap_or_else(|| (0..d).collect()),
        }
    }

    /// `E[y | s]`. Not defined for superimposed models, whose output depends
    /// on latent blocks that are not part of `s`.
    pub fn conditional_mean(&self, s: &[f64]) -> Option<f64> {
        Some(match self {
            ObservationModel::Linear { index, .. } => dot(s, index),
            ObservationModel::Sim { index, g } => g.conditional_mean(dot(s, index)),
            ObservationModel::DitheredOneBit { index, delta } => {
                dot(s, index).clamp(-delta, *delta)
            }
            ObservationModel::GlmLogistic { index } => logistic(dot(s, index)),
            ObservationModel::MultiIndex { indices, g } => {
                let args: Vec<f64> = indices.iter().map(|z| dot(s, z)).collect();
                g.conditional_mean(&args)
            }
            ObservationModel::VariableSelection { active, g } => {
                let args: Vec<f64> = active.iter().map(|&k| s[k]).collect();
                g.conditional_mean(&args)
            }
            ObservationModel::NoisySplit { d1, g, .. } => g.conditional_mean(&s[..*d1]),
            ObservationModel::Superimposed { .. } => return None,
        })
    }

    /// Draw one output for latent row `s` (non-superimposed models).
    fn draw<R: Rng + ?Sized>(&self, s: &[f64], rng: &mut R) -> f64 {
        match self {
            ObservationModel::Linear { index, noise_sd } => {
                let e: f64 = StandardNormal.sample(rng);
                dot(s, index) + noise_sd * e
            }
            ObservationModel::Sim { index, g } => g.apply(dot(s, index), rng),
            ObservationModel::DitheredOneBit { index, delta } => {
                let tau = rng.random_range(-*delta..=*delta);
                delta * sgn(dot(s, index) + tau)
            }
            ObservationModel::GlmLogistic { index } => {
                if rng.random::<f64>() < logistic(dot(s, index)) {
                    1.0
                } else {
                    0.0
                }
            }
            ObservationModel::MultiIndex { indices, g } => {
                let args: Vec<f64> = indices.iter().map(|z| dot(s, z)).collect();
                g.apply(&args, rng)
            }
            ObservationModel::VariableSelection { active, g } => {
                let args: Vec<f64> = active.iter().map(|&k| s[k]).collect();
                g.apply(&args, rng)
            }
            ObservationModel::NoisySplit { d1, g, .. } => g.apply(&s[..*d1], rng),
            ObservationModel::Superimposed { .. } => unreachable!("handled by draw_superimposed"),
        }
    }
}

/// Outputs of [`generate_outputs`].
#[derive(Clone, Debug)]
pub struct GeneratedOutputs {
    pub y: DVector<f64>,
    /// For superimposed models: the averaged inputs `M^{-1/2} Σ_j s^j` that
    /// replace the latent matrix.
    pub averaged_latent: Option<DMatrix<f64>>,
}

pub fn generate_outputs(
    model: &ObservationModel,
    latent: &DMatrix<f64>,
    seed: u64,
) -> Result<GeneratedOutputs> {
    generate_outputs_with(Execution::default(), model, latent, seed)
}

pub fn generate_outputs_with(
    exec: Execution,
    model: &ObservationModel,
    latent: &DMatrix<f64>,
    seed: u64,
) -> Result<GeneratedOutputs> {
    let (n, d) = latent.shape();
    model.validate(d)?;
    let row = |i: usize| -> Vec<f64> { latent.row(i).iter().copied().collect() };

    if let ObservationModel::Superimposed {
        index,
        fns,
        branch_kind,
    } = model
    {
        let m = fns.len();
        let scale = (m as f64).sqrt().recip();
        let rows = par::map_indexed(exec, n, |i| {
            let mut rng = substream(seed, domain::OUTPUT, i as u64);
            let first = row(i);
            let mut avg = first.clone();
            let mut y = fns[0].apply(dot(&first, index), &mut rng);
            for g in &fns[1..] {
                let block: Vec<f64> = (0..d).map(|_| branch_kind.sample(&mut rng)).collect();
                y += g.apply(dot(&block, index), &mut rng);
                for (a, b) in avg.iter_mut().zip(&block) {
                    *a += b;
                }
            }
            avg.iter_mut().for_each(|a| *a *= scale);
            (y * scale, avg)
        });
        let y = DVector::from_iterator(n, rows.iter().map(|r| r.0));
        let averaged =
            DMatrix::from_row_iterator(n, d, rows.into_iter().flat_map(|r| r.1.into_iter()));
        return Ok(GeneratedOutputs {
            y,
            averaged_latent: Some(averaged),
        });
    }

    let ys = par::map_indexed(exec, n, |i| {
        let mut rng = substream(seed, domain::OUTPUT, i as u64);
        model.draw(&row(i), &mut rng)
    });
    Ok(GeneratedOutputs {
        y: DVector::from_vec(ys),
        averaged_latent: None,
    })
}

/// Dithering level `Δ = C κ λ √(log 2n)`.
pub fn dithering_scale(kappa: f64, lambda: f64, n: usize, c: f64) -> Result<f64> {
    if !(kappa > 0.0 && lambda > 0.0 && c > 0.0) || n == 0 {
        return Err(Error::param("dithering_scale needs kappa, lambda, C > 0 and n >= 1"));
    }
    Ok(c * kappa * lambda * (2.0 * n as f64).ln().sqrt())
}

/// Realisation of the sampling process `(s_i, x_i = A s_i, y_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub latent: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
    pub outputs: DVector<f64>,
    pub seed: u64,
}

/// Sidecar manifest written next to a sample CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub seed: u64,
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub latent_kind: LatentKind,
    pub model: ObservationModel,
}

pub fn generate_samples(
    dist: &LatentDistribution,
    mixing: &MixingMatrix,
    model: &ObservationModel,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    generate_samples_with(Execution::default(), dist, mixing, model, n, seed)
}

pub fn generate_samples_with(
    exec: Execution,
    dist: &LatentDistribution,
    mixing: &MixingMatrix,
    model: &ObservationModel,
    n: usize,
    seed: u64,
) -> Result<SampleSet> {
    let drawn = sample_latent_with(exec, dist, n, seed)?;
    let out = generate_outputs_with(exec, model, &drawn, seed)?;
    let latent = out.averaged_latent.unwrap_or(drawn);
    let inputs = apply_mixing(mixing, &latent)?;
    Ok(SampleSet {
        latent,
        inputs,
        outputs: out.y,
        seed,
    })
}

impl SampleSet {
    pub fn n(&self) -> usize {
        self.outputs.len()
    }

    /// CSV with columns `s_1..s_d, x_1..x_p, y`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, d) = self.latent.shape();
        let p = self.inputs.ncols();
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (1..=d)
            .map(|k| format!("s_{k}"))
            .chain((1..=p).map(|k| format!("x_{k}")))
            .chain(std::iter::once("y".to_string()))
            .collect();
        w.write_record(&header)?;
        for i in 0..n {
            let record: Vec<String> = self
                .latent
                .row(i)
                .iter()
                .chain(self.inputs.row(i).iter())
                .chain(std::iter::once(&self.outputs[i]))
                .map(|v| v.to_string())
                .collect();
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Write `<stem>.csv` and the `<stem>.json` manifest into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        stem: &str,
        kind: LatentKind,
        model: &ObservationModel,
    ) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::File::create(dir.join(format!("{stem}.csv")))?;
        self.write_csv(std::io::BufWriter::new(file))?;
        let manifest = SampleManifest {
            seed: self.seed,
            n: self.n(),
            d: self.latent.ncols(),
            p: self.inputs.ncols(),
            latent_kind: kind,
            model: model.clone(),
        };
        std::fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gauss(d: usize) -> LatentDistribution {
        LatentDistribution::new(LatentKind::Gaussian, d).unwrap()
    }

    #[test]
    fn rademacher_support() {
        let dist = LatentDistribution::new(LatentKind::Rademacher, 3).unwrap();
        let s = sample_latent(&dist, 2, 11).unwrap();
        assert_eq!(s.shape(), (2, 3));
        assert!(s.iter().all(|v| *v == 1.0 || *v == -1.0));
    }

    #[test]
    fn gaussian_columns_are_centered() {
        let s = sample_latent(&gauss(4), 100_000, 5).unwrap();
        for j in 0..4 {
            assert!(s.column(j).mean().abs() < 0.02);
        }
    }

    #[test]
    fn isotropy_for_every_kind() {
        let n = 100_000;
        let bound = 5.0 / (n as f64).sqrt();
        for kind in [
            LatentKind::Gaussian,
            LatentKind::Rademacher,
            LatentKind::UniformScaled,
        ] {
            let dist = LatentDistribution::new(kind, 3).unwrap();
            let s = sample_latent(&dist, n, 42).unwrap();
            let cov = s.transpose() * &s / n as f64;
            let dev = (cov - DMatrix::<f64>::identity(3, 3)).amax();
            assert!(dev <= bound, "{kind:?}: {dev}");
        }
    }

    #[test]
    fn uniform_scaled_has_unit_variance() {
        let dist = LatentDistribution::new(LatentKind::UniformScaled, 2).unwrap();
        let s = sample_latent(&dist, 100_000, 9).unwrap();
        let r3 = 3.0_f64.sqrt();
        assert!(s.iter().all(|v| v.abs() <= r3));
        let cov = s.transpose() * &s / 100_000.0;
        assert!((cov - DMatrix::<f64>::identity(2, 2)).amax() < 0.02);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(LatentDistribution::new(LatentKind::Gaussian, 0).is_err());
        let dist = gauss(2);
        assert!(sample_latent(&dist, 0, 1).is_err());
    }

    #[test]
    fn rows_do_not_depend_on_n() {
        let dist = gauss(3);
        let small = sample_latent(&dist, 10, 77).unwrap();
        let big = sample_latent(&dist, 50, 77).unwrap();
        assert_eq!(small, big.rows(0, 10).clone_owned());
    }

    #[test]
    fn kappa_per_kind() {
        let pi = std::f64::consts::PI;
        assert!((LatentKind::Gaussian.kappa() - (2.0 / pi).sqrt()).abs() < 1e-12);
        assert_eq!(LatentKind::Rademacher.kappa(), 1.0);
        assert!((LatentKind::UniformScaled.kappa() - 3.0_f64.sqrt() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn decomposition_of_identity_and_diagonal() {
        let a = isotropic_decomposition(&DMatrix::identity(3, 3), LINALG_TOL).unwrap();
        assert!((a.entries() - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
        assert_eq!(a.rank(), 3);

        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        let a = isotropic_decomposition(&sigma, LINALG_TOL).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        assert!((a.entries() - expected).amax() < 1e-12);
    }

    #[test]
    fn decomposition_of_random_spd() {
        let g = sample_latent(&gauss(6), 6, 3).unwrap();
        let sigma = &g * g.transpose() + DMatrix::<f64>::identity(6, 6) * 0.1;
        let a = isotropic_decomposition(&sigma, LINALG_TOL).unwrap();
        let back = a.entries() * a.entries().transpose();
        assert!((back - &sigma).norm() <= 1e-10);
        let u = a.entries().clone();
        for j in 0..u.ncols() {
            let col = u.column(j);
            assert!(col[col.iamax()] > 0.0);
        }
    }

    #[test]
    fn decomposition_detects_rank_and_errors() {
        let v = DVector::from_vec(vec![1.0, 2.0, 2.0]);
        let sigma = &v * v.transpose();
        let a = isotropic_decomposition(&sigma, LINALG_TOL).unwrap();
        assert_eq!(a.d(), 1);
        assert!((a.entries() * a.entries().transpose() - &sigma).norm() < 1e-10);

        let mut asym = DMatrix::<f64>::identity(2, 2);
        asym[(0, 1)] = 0.5;
        assert!(matches!(
            isotropic_decomposition(&asym, LINALG_TOL),
            Err(Error::NotSymmetric(_))
        ));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5]));
        assert!(matches!(
            isotropic_decomposition(&neg, LINALG_TOL),
            Err(Error::NegativeEigenvalue(_))
        ));
    }

    #[test]
    fn mixing_examples() {
        let s = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let a = MixingMatrix::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).unwrap();
        let x = apply_mixing(&a, &s).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), vec![2.0, 1.0]);
        let id = MixingMatrix::identity(2);
        assert_eq!(apply_mixing(&id, &s).unwrap(), s);
        assert!(apply_mixing(&MixingMatrix::identity(3), &s).is_err());
    }

    #[test]
    fn mixing_matches_naive_loop() {
        let s = sample_latent(&gauss(5), 40, 8).unwrap();
        let a = MixingMatrix::new(sample_latent(&gauss(5), 7, 9).unwrap()).unwrap();
        let x = apply_mixing(&a, &s).unwrap();
        for i in 0..40 {
            for r in 0..7 {
                let mut acc = 0.0;
                for k in 0..5 {
                    acc += a.entries()[(r, k)] * s[(i, k)];
                }
                assert!((x[(i, r)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_examples() {
        let s = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let lin = ObservationModel::Linear {
            index: vec![3.0, 0.0],
            noise_sd: 0.0,
        };
        assert_eq!(generate_outputs(&lin, &s, 1).unwrap().y[0], 3.0);

        let s = DMatrix::from_row_slice(1, 2, &[-0.4, 0.7]);
        let sim = ObservationModel::Sim {
            index: vec![1.0, 0.0],
            g: OutputFn::Sign,
        };
        assert_eq!(generate_outputs(&sim, &s, 1).unwrap().y[0], -1.0);
    }

    #[test]
    fn dithered_outputs_take_two_values() {
        let s = sample_latent(&gauss(3), 500, 1).unwrap();
        let m = ObservationModel::DitheredOneBit {
            index: vec![1.0, -1.0, 0.5],
            delta: 2.5,
        };
        let y = generate_outputs(&m, &s, 2).unwrap().y;
        assert!(y.iter().all(|v| *v == 2.5 || *v == -2.5));
        let bad = ObservationModel::DitheredOneBit {
            index: vec![1.0, 0.0, 0.0],
            delta: 0.0,
        };
        assert!(generate_outputs(&bad, &s, 2).is_err());
    }

    #[test]
    fn superimposed_identity_is_linear_in_average() {
        let s = sample_latent(&gauss(3), 200, 4).unwrap();
        let z = vec![0.6, 0.0, 0.8];
        let m = ObservationModel::Superimposed {
            index: z.clone(),
            fns: vec![OutputFn::Identity; 3],
            branch_kind: LatentKind::Gaussian,
        };
        let out = generate_outputs(&m, &s, 5).unwrap();
        let avg = out.averaged_latent.unwrap();
        for i in 0..200 {
            let lin: f64 = (0..3).map(|k| avg[(i, k)] * z[k]).sum();
            assert!((lin - out.y[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn noisy_split_ignores_noise_coordinates() {
        let mut s = sample_latent(&gauss(5), 100, 6).unwrap();
        let m = ObservationModel::NoisySplit {
            d1: 2,
            d2: 3,
            g: MultiFn::SignOfSum,
        };
        let y1 = generate_outputs(&m, &s, 7).unwrap().y;
        s.swap_columns(2, 4);
        s.swap_columns(3, 4);
        let y2 = generate_outputs(&m, &s, 7).unwrap().y;
        assert_eq!(y1, y2);
    }

    #[test]
    fn model_validation() {
        let mi = ObservationModel::MultiIndex {
            indices: vec![vec![1.0, 0.0], vec![1.0, 1.0]],
            g: MultiFn::Sum,
        };
        assert!(matches!(mi.validate(2), Err(Error::NotOrthonormal(_))));
        let vs = ObservationModel::VariableSelection {
            active: vec![2, 1],
            g: MultiFn::Sum,
        };
        assert!(vs.validate(4).is_err());
        let vs = ObservationModel::VariableSelection {
            active: vec![1, 4],
            g: MultiFn::Sum,
        };
        assert!(vs.validate(4).is_err());
        let ns = ObservationModel::NoisySplit {
            d1: 1,
            d2: 1,
            g: MultiFn::Sum,
        };
        assert!(ns.validate(3).is_err());
    }

    #[test]
    fn dithering_scale_examples() {
        let d = dithering_scale(1.0, 1.0, 2, 1.0).unwrap();
        assert!((d - 4.0_f64.ln().sqrt()).abs() < 1e-15);
        assert!((d - 1.17741).abs() < 1e-5);
        let d2 = dithering_scale(1.0, 2.0, 2, 1.0).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-15);
        assert!(dithering_scale(0.0, 1.0, 2, 1.0).is_err());
        assert!(dithering_scale(1.0, 1.0, 0, 1.0).is_err());
    }

    #[test]
    fn same_seed_same_samples() {
        let dist = LatentDistribution::new(LatentKind::Rademacher, 4).unwrap();
        let model = ObservationModel::Sim {
            index: vec![1.0, 0.5, 0.0, 0.0],
            g: OutputFn::SignWithFlip { q: 0.9 },
        };
        let mix = MixingMatrix::identity(4);
        let a = generate_samples(&dist, &mix, &model, 300, 123).unwrap();
        let b = generate_samples_with(Execution::Sequential, &dist, &mix, &model, 300, 123)
            .unwrap();
        assert_eq!(a, b);
    }
}
