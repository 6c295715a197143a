//! Mismatch covariance / deviation and target-vector constructions.
//!
//! For a candidate `z` the mismatch covariance is `ρ(z) = ‖E[(y − ⟨s,z⟩) s]‖`
//! and the mismatch deviation is the sub-Gaussian norm of `y − ⟨s,z⟩`. Under
//! isotropy `ρ(z) = ‖E[y s] − z‖`, which is how the exact backends compute it:
//! `E[y s]` is obtained by full enumeration for Rademacher latents or by 1-D
//! quadrature for Gaussian latents whenever the output only depends on one
//! direction. Every other combination is reported as unsupported; Monte Carlo
//! is only used when the caller asks for it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::HypothesisSet;
use crate::model_gen::{
    LatentDistribution, LatentKind, MultiFn, ObservationModel, OutputFn, PSI2_GRID,
};
use crate::quadrature::GaussianQuadrature;
use crate::rng::{domain, substream};
use crate::solver;

/// Largest number of Rademacher coordinates enumerated exactly.
pub const MAX_ENUMERATION_DIM: usize = 20;

/// Minimum sample count for the moment-grid ψ2 proxy.
pub const MIN_PSI2_SAMPLES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MismatchReport {
    pub rho_hat: f64,
    pub rho_exact: Option<f64>,
    pub dev_hat: f64,
    pub n_used: usize,
    pub model_digest: String,
}

/// SHA-256 of the canonical JSON encoding of `(kind, model)`.
pub fn model_digest(kind: LatentKind, model: &ObservationModel) -> String {
    let json = serde_json::to_string(&(kind, model)).expect("model serialises");
    hex::encode(Sha256::digest(json.as_bytes()))
}

impl MismatchReport {
    /// Empirical ρ̂ and dev̂ at `z`, plus the exact ρ when a backend exists.
    pub fn evaluate(
        latent: &DMatrix<f64>,
        y: &DVector<f64>,
        z: &DVector<f64>,
        model: &ObservationModel,
        dist: &LatentDistribution,
    ) -> Result<Self> {
        let rho_exact = match mismatch_covariance_exact(model, dist, z) {
            Ok(v) => Some(v),
            Err(Error::Unsupported(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            rho_hat: mismatch_covariance(latent, y, z)?,
            rho_exact,
            dev_hat: mismatch_deviation(latent, y, z)?,
            n_used: y.len(),
            model_digest: model_digest(dist.kind, model),
        })
    }
}

fn check_samples(latent: &DMatrix<f64>, y: &DVector<f64>, z: &DVector<f64>) -> Result<()> {
    if latent.nrows() != y.len() {
        return Err(Error::dims(format!(
            "{} latent rows but {} outputs",
            latent.nrows(),
            y.len()
        )));
    }
    if latent.ncols() != z.len() {
        return Err(Error::dims(format!(
            "z has length {}, latent dimension is {}",
            z.len(),
            latent.ncols()
        )));
    }
    if y.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    Ok(())
}

/// `(1/n) Σ y_i s_i`.
pub fn empirical_cross_moment(latent: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    latent.tr_mul(y) / y.len() as f64
}

/// ρ̂(z) = ‖(1/n) Σ (y_i − ⟨s_i, z⟩) s_i‖₂.
pub fn mismatch_covariance(
    latent: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    check_samples(latent, y, z)?;
    let resid = y - latent * z;
    Ok(empirical_cross_moment(latent, &resid).norm())
}

/// Grid proxy `max_{q ∈ {1,2,4,8,16}} q^{-1/2} (mean |v|^q)^{1/q}`.
fn psi2_grid(values: &[f64]) -> f64 {
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let n = values.len() as f64;
    PSI2_GRID
        .iter()
        .map(|&q| {
            let m: f64 = values.iter().map(|v| (v.abs() / scale).powf(q)).sum::<f64>() / n;
            q.powf(-0.5) * m.powf(1.0 / q) * scale
        })
        .fold(0.0, f64::max)
}

/// Moment-grid estimate of the sub-Gaussian norm of scalar samples.
pub fn subgaussian_norm(samples: &[f64]) -> Result<f64> {
    if samples.len() < MIN_PSI2_SAMPLES {
        return Err(Error::InsufficientSamples {
            needed: MIN_PSI2_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("samples"));
    }
    Ok(psi2_grid(samples))
}

/// dev̂(z): the ψ2 proxy of the residuals `y_i − ⟨s_i, z⟩`.
pub fn mismatch_deviation(
    latent: &DMatrix<f64>,
    y: &DVector<f64>,
    z: &DVector<f64>,
) -> Result<f64> {
    check_samples(latent, y, z)?;
    let resid = y - latent * z;
    subgaussian_norm(resid.as_slice())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `E[f(t) s]` over Rademacher `s ∈ {±1}^d`, for `f` depending only on the
/// coordinates in `coords`.
fn rademacher_moment<F: Fn(&[f64]) -> f64>(d: usize, coords: &[usize], f: F) -> Result<DVector<f64>> {
    if coords.len() > MAX_ENUMERATION_DIM {
        return Err(Error::Unsupported(format!(
            "exact enumeration over {} Rademacher coordinates (limit {})",
            coords.len(),
            MAX_ENUMERATION_DIM
        )));
    }
    let atoms = 1usize << coords.len();
    let mut acc = vec![0.0; coords.len()];
    let mut s = vec![0.0; d];
    for mask in 0..atoms {
        for (j, &k) in coords.iter().enumerate() {
            s[k] = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
        }
        let m = f(&s);
        for (j, &k) in coords.iter().enumerate() {
            acc[j] += m * s[k];
        }
    }
    let mut out = DVector::zeros(d);
    for (j, &k) in coords.iter().enumerate() {
        out[k] = acc[j] / atoms as f64;
    }
    Ok(out)
}

/// `E[f(t) t]` for `t ~ N(0, σ²)`, with kinks of `f` at `breaks` (in t units).
fn gaussian_scalar_moment<F: Fn(f64) -> f64>(f: F, sigma: f64, breaks: &[f64]) -> f64 {
    let scaled: Vec<f64> = breaks.iter().map(|b| b / sigma).collect();
    GaussianQuadrature::shared().expect_with_breaks(|x| f(sigma * x) * sigma * x, &scaled)
}

fn output_breaks(g: &OutputFn) -> Vec<f64> {
    match g {
        OutputFn::Sign | OutputFn::Abs | OutputFn::SignWithFlip { .. } => vec![0.0],
        _ => vec![],
    }
}

fn multi_breaks(g: &MultiFn) -> Vec<f64> {
    match g {
        MultiFn::Shallow { g, .. } => output_breaks(g),
        _ => vec![0.0],
    }
}

/// One-dimensional view of a model under a Gaussian latent: the output is
/// `m(⟨s, u⟩)` for a direction `u`, with kinks of `m` at `breaks`.
struct ScalarView<'a> {
    direction: Vec<f64>,
    m: Box<dyn Fn(f64) -> f64 + 'a>,
    breaks: Vec<f64>,
}

fn unit(d: usize, k: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[k] = 1.0;
    e
}

fn scalar_view(model: &ObservationModel, d: usize) -> Option<ScalarView<'_>> {
    Some(match model {
        ObservationModel::Linear { index, .. } => ScalarView {
            direction: index.clone(),
            m: Box::new(|t| t),
            breaks: vec![],
        },
        ObservationModel::Sim { index, g } => ScalarView {
            direction: index.clone(),
            m: Box::new(move |t| g.conditional_mean(t)),
            breaks: output_breaks(g),
        },
        ObservationModel::DitheredOneBit { index, delta } => ScalarView {
            direction: index.clone(),
            m: Box::new(move |t| t.clamp(-*delta, *delta)),
            breaks: vec![*delta],
        },
        ObservationModel::GlmLogistic { index } => ScalarView {
            direction: index.clone(),
            m: Box::new(crate::model_gen::logistic),
            breaks: vec![],
        },
        ObservationModel::MultiIndex { indices, g } if indices.len() == 1 => ScalarView {
            direction: indices[0].clone(),
            m: Box::new(move |t| g.conditional_mean(&[t])),
            breaks: multi_breaks(g),
        },
        ObservationModel::VariableSelection { active, g } if active.len() == 1 => ScalarView {
            direction: unit(d, active[0]),
            m: Box::new(move |t| g.conditional_mean(&[t])),
            breaks: multi_breaks(g),
        },
        ObservationModel::NoisySplit { d1: 1, g, .. } => ScalarView {
            direction: unit(d, 0),
            m: Box::new(move |t| g.conditional_mean(&[t])),
            breaks: multi_breaks(g),
        },
        _ => return None,
    })
}

/// `E[m(⟨s,u⟩) s]` for Gaussian `s`: only the component along `u` survives.
fn gaussian_view_moment(view: &ScalarView<'_>) -> DVector<f64> {
    let sigma = dot(&view.direction, &view.direction).sqrt();
    let along = gaussian_scalar_moment(&view.m, sigma, &view.breaks) / (sigma * sigma);
    DVector::from_iterator(view.direction.len(), view.direction.iter().map(|u| along * u))
}

fn branch_moment(kind: LatentKind, index: &[f64], g: &OutputFn) -> Result<DVector<f64>> {
    let d = index.len();
    match kind {
        LatentKind::Gaussian => {
            let sigma = dot(index, index).sqrt();
            let along = gaussian_scalar_moment(|t| g.conditional_mean(t), sigma, &output_breaks(g))
                / (sigma * sigma);
            Ok(DVector::from_iterator(d, index.iter().map(|u| along * u)))
        }
        LatentKind::Rademacher => {
            let coords: Vec<usize> = (0..d).filter(|&k| index[k] != 0.0).collect();
            rademacher_moment(d, &coords, |s| g.conditional_mean(dot(s, index)))
        }
        LatentKind::UniformScaled => Err(Error::Unsupported(
            "exact expectations for uniform_scaled latents".into(),
        )),
    }
}

/// Exact `E[y s]`.
pub fn expected_ys(model: &ObservationModel, dist: &LatentDistribution) -> Result<DVector<f64>> {
    let d = dist.dim;
    model.validate(d)?;
    if let ObservationModel::Superimposed {
        index,
        fns,
        branch_kind,
    } = model
    {
        let mut acc = DVector::zeros(d);
        for (j, g) in fns.iter().enumerate() {
            let kind = if j == 0 { dist.kind } else { *branch_kind };
            acc += branch_moment(kind, index, g)?;
        }
        return Ok(acc / fns.len() as f64);
    }
    match dist.kind {
        LatentKind::Rademacher => {
            let coords = model.effective_coords(d);
            rademacher_moment(d, &coords, |s| {
                model.conditional_mean(s).expect("non-superimposed model")
            })
        }
        LatentKind::Gaussian => match scalar_view(model, d) {
            Some(view) => Ok(gaussian_view_moment(&view)),
            None => Err(Error::Unsupported(
                "exact Gaussian expectations need an output that depends on a single direction"
                    .into(),
            )),
        },
        LatentKind::UniformScaled => Err(Error::Unsupported(
            "exact expectations for uniform_scaled latents".into(),
        )),
    }
}

/// Exact ρ(z) = ‖E[y s] − z‖.
pub fn mismatch_covariance_exact(
    model: &ObservationModel,
    dist: &LatentDistribution,
    z: &DVector<f64>,
) -> Result<f64> {
    if z.len() != dist.dim {
        return Err(Error::dims(format!(
            "z has length {}, latent dimension is {}",
            z.len(),
            dist.dim
        )));
    }
    Ok((expected_ys(model, dist)? - z).norm())
}

/// How expectations in target constructions are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Expectation {
    /// Enumeration or quadrature; unsupported combinations are errors.
    Exact,
    /// Seeded Monte Carlo with `n_mc` draws.
    MonteCarlo { n_mc: usize, seed: u64 },
    /// Exact when available, otherwise the declared Monte Carlo budget.
    Auto { n_mc: usize, seed: u64 },
}

impl Default for Expectation {
    fn default() -> Self {
        Expectation::Auto {
            n_mc: 200_000,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFamily {
    SingleIndex,
    Index,
    MultiIndex,
    VariableSelection,
    Superimposed,
    NoisySplitSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    #[serde(with = "crate::serde_la::vector")]
    pub z: DVector<f64>,
    /// The μ or μ_j coefficients.
    pub mu: Vec<f64>,
    /// Monte Carlo standard errors of `mu`; `None` for exact backends.
    pub mu_stderr: Option<Vec<f64>>,
    pub family: TargetFamily,
}

/// Monte Carlo mean and standard error of each component of `f(s)` for
/// latent draws `s`.
fn monte_carlo_moments<F: Fn(&[f64]) -> Vec<f64> + Sync>(
    dist: &LatentDistribution,
    n_mc: usize,
    seed: u64,
    width: usize,
    f: F,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_mc < 2 {
        return Err(Error::param("Monte Carlo needs n_mc >= 2"));
    }
    let draws = crate::par::map_indexed(crate::par::Execution::default(), n_mc, |i| {
        let mut rng = substream(seed, domain::TARGET_MC, i as u64);
        let s: Vec<f64> = (0..dist.dim).map(|_| dist.kind.sample(&mut rng)).collect();
        f(&s)
    });
    let n = n_mc as f64;
    let mut mean = vec![0.0; width];
    for row in &draws {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for row in &draws {
        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *acc += (v - m).powi(2);
        }
    }
    let stderr = var.iter().map(|v| (v / (n - 1.0)).sqrt() / n.sqrt()).collect();
    Ok((mean, stderr))
}

fn resolve<T>(
    mode: Expectation,
    exact: impl FnOnce() -> Result<T>,
    mc: impl FnOnce(usize, u64) -> Result<T>,
) -> Result<T> {
    match mode {
        Expectation::Exact => exact(),
        Expectation::MonteCarlo { n_mc, seed } => mc(n_mc, seed),
        Expectation::Auto { n_mc, seed } => match exact() {
            Err(Error::Unsupported(_)) => mc(n_mc, seed),
            other => other,
        },
    }
}

/// `z = μ z♮` with `μ = E[g(⟨s,z♮⟩)⟨s,z♮⟩] / ‖z♮‖²` for linear, single-index
/// and logistic GLM models.
pub fn target_single_index(
    model: &ObservationModel,
    dist: &LatentDistribution,
    mode: Expectation,
) -> Result<TargetVector> {
    let index = match model {
        ObservationModel::Linear { index, .. }
        | ObservationModel::Sim { index, .. }
        | ObservationModel::GlmLogistic { index } => index,
        _ => {
            return Err(Error::param(
                "target_single_index needs a linear, single-index or logistic model",
            ))
        }
    };
    model.validate(dist.dim)?;
    let norm_sq = dot(index, index);
    let zvec = DVector::from_column_slice(index);

    let (mu, stderr) = resolve(
        mode,
        || {
            let ys = expected_ys(model, dist)?;
            Ok((ys.dot(&zvec) / norm_sq, None))
        },
        |n_mc, seed| {
            let (m, se) = monte_carlo_moments(dist, n_mc, seed, 1, |s| {
                let t = dot(s, index);
                vec![model.conditional_mean(s).unwrap() * t]
            })?;
            Ok((m[0] / norm_sq, Some(vec![se[0] / norm_sq])))
        },
    )?;
    Ok(TargetVector {
        z: zvec * mu,
        mu: vec![mu],
        mu_stderr: stderr,
        family: TargetFamily::SingleIndex,
    })
}

/// `z = Σ_j μ_j z_j` with `μ_j = E[G(…) ⟨s, z_j⟩]`.
pub fn target_multi_index(
    model: &ObservationModel,
    dist: &LatentDistribution,
    mode: Expectation,
) -> Result<TargetVector> {
    let d = dist.dim;
    model.validate(d)?;
    let (indices, family): (Vec<Vec<f64>>, _) = match model {
        ObservationModel::MultiIndex { indices, .. } => {
            (indices.clone(), TargetFamily::MultiIndex)
        }
        ObservationModel::VariableSelection { active, .. } => (
            active.iter().map(|&k| unit(d, k)).collect(),
            TargetFamily::VariableSelection,
        ),
        _ => {
            return Err(Error::param(
                "target_multi_index needs a multi-index or variable-selection model",
            ))
        }
    };

    let (mu, stderr) = resolve(
        mode,
        || {
            let ys = expected_ys(model, dist)?;
            let mu: Vec<f64> = indices.iter().map(|zj| dot(ys.as_slice(), zj)).collect();
            Ok((mu, None))
        },
        |n_mc, seed| {
            let (m, se) = monte_carlo_moments(dist, n_mc, seed, indices.len(), |s| {
                let y = model.conditional_mean(s).unwrap();
                indices.iter().map(|zj| y * dot(s, zj)).collect()
            })?;
            Ok((m, Some(se)))
        },
    )?;

    let mut z = DVector::zeros(d);
    for (m, zj) in mu.iter().zip(&indices) {
        for k in 0..d {
            z[k] += m * zj[k];
        }
    }
    // variable selection: coordinates outside the active set are exactly zero
    if let ObservationModel::VariableSelection { active, .. } = model {
        for k in 0..d {
            if !active.contains(&k) {
                z[k] = 0.0;
            }
        }
    }
    Ok(TargetVector {
        z,
        mu,
        mu_stderr: stderr,
        family,
    })
}

/// `z = μ̄ z♮` with `μ̄ = M⁻¹ Σ_j E[g_j(γ) γ]` for Gaussian branches.
pub fn target_superimposed(
    model: &ObservationModel,
    dist: &LatentDistribution,
) -> Result<TargetVector> {
    let ObservationModel::Superimposed {
        index,
        fns,
        branch_kind,
    } = model
    else {
        return Err(Error::param("target_superimposed needs a superimposed model"));
    };
    if (dot(index, index).sqrt() - 1.0).abs() > crate::model_gen::LINALG_TOL {
        return Err(Error::param("superimposed index must have unit norm"));
    }
    if dist.kind != LatentKind::Gaussian || *branch_kind != LatentKind::Gaussian {
        return Err(Error::Unsupported(
            "superimposed targets are defined for Gaussian branches".into(),
        ));
    }
    model.validate(dist.dim)?;
    let per_branch: Vec<f64> = fns
        .iter()
        .map(|g| gaussian_scalar_moment(|t| g.conditional_mean(t), 1.0, &output_breaks(g)))
        .collect();
    let mu = per_branch.iter().sum::<f64>() / fns.len() as f64;
    Ok(TargetVector {
        z: DVector::from_column_slice(index) * mu,
        mu: vec![mu],
        mu_stderr: None,
        family: TargetFamily::Superimposed,
    })
}

/// Signal target of a noisy-split model: `z_v = E[y v]`, padded with zeros on
/// the noise block.
pub fn target_noisy_signal(
    model: &ObservationModel,
    dist: &LatentDistribution,
    mode: Expectation,
) -> Result<TargetVector> {
    let ObservationModel::NoisySplit { d1, .. } = model else {
        return Err(Error::param("target_noisy_signal needs a noisy-split model"));
    };
    let d1 = *d1;
    model.validate(dist.dim)?;
    let (zv, stderr) = resolve(
        mode,
        || Ok((expected_ys(model, dist)?.rows(0, d1).iter().copied().collect(), None)),
        |n_mc, seed| {
            let (m, se) = monte_carlo_moments(dist, n_mc, seed, d1, |s| {
                let y = model.conditional_mean(s).unwrap();
                s[..d1].iter().map(|v| y * v).collect()
            })?;
            Ok((m, Some(se)))
        },
    )?;
    let mut z = DVector::zeros(dist.dim);
    for (k, v) in zv.iter().enumerate() {
        z[k] = *v;
    }
    Ok(TargetVector {
        z,
        mu: zv,
        mu_stderr: stderr,
        family: TargetFamily::NoisySplitSignal,
    })
}

/// Target of the mismatch principle for any supported model family. Dithered
/// 1-bit models target the index vector itself.
pub fn target_for_model(
    model: &ObservationModel,
    dist: &LatentDistribution,
    mode: Expectation,
) -> Result<TargetVector> {
    match model {
        ObservationModel::Linear { .. }
        | ObservationModel::Sim { .. }
        | ObservationModel::GlmLogistic { .. } => target_single_index(model, dist, mode),
        ObservationModel::DitheredOneBit { index, .. } => {
            model.validate(dist.dim)?;
            Ok(index_target(index))
        }
        ObservationModel::MultiIndex { .. } | ObservationModel::VariableSelection { .. } => {
            target_multi_index(model, dist, mode)
        }
        ObservationModel::Superimposed { .. } => target_superimposed(model, dist),
        ObservationModel::NoisySplit { .. } => target_noisy_signal(model, dist, mode),
    }
}

/// The trivial target set `T = {z♮}`.
pub fn index_target(index: &[f64]) -> TargetVector {
    TargetVector {
        z: DVector::from_column_slice(index),
        mu: vec![1.0],
        mu_stderr: None,
        family: TargetFamily::Index,
    }
}

/// The three terms of `ρ(z)² = ρ_v(z_v)² + ‖z_n‖²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub rho_total: f64,
    pub rho_signal: f64,
    pub noise_norm: f64,
    /// `ρ_total² − ρ_signal² − ‖z_n‖²`.
    pub residual: f64,
}

impl Decomposition {
    fn new(rho_total: f64, rho_signal: f64, noise_norm: f64) -> Self {
        Self {
            rho_total,
            rho_signal,
            noise_norm,
            residual: rho_total.powi(2) - rho_signal.powi(2) - noise_norm.powi(2),
        }
    }
}

fn check_partition(d: usize, d1: usize, d2: usize, z: &DVector<f64>) -> Result<()> {
    if d1 + d2 != d || z.len() != d {
        return Err(Error::dims(format!(
            "partition ({d1}, {d2}) does not match dimension {d} / z length {}",
            z.len()
        )));
    }
    Ok(())
}

/// Empirical decomposition on noisy-split samples.
pub fn mismatch_decomposition(
    latent: &DMatrix<f64>,
    y: &DVector<f64>,
    d1: usize,
    d2: usize,
    z: &DVector<f64>,
) -> Result<Decomposition> {
    check_partition(latent.ncols(), d1, d2, z)?;
    let total = mismatch_covariance(latent, y, z)?;
    let v = latent.columns(0, d1).clone_owned();
    let zv = z.rows(0, d1).clone_owned();
    let signal = mismatch_covariance(&v, y, &zv)?;
    Ok(Decomposition::new(total, signal, z.rows(d1, d2).norm()))
}

/// Decomposition computed from exact expectations.
pub fn mismatch_decomposition_exact(
    model: &ObservationModel,
    dist: &LatentDistribution,
    z: &DVector<f64>,
) -> Result<Decomposition> {
    let ObservationModel::NoisySplit { d1, d2, .. } = model else {
        return Err(Error::param("mismatch_decomposition needs a noisy-split model"));
    };
    check_partition(dist.dim, *d1, *d2, z)?;
    let ys = expected_ys(model, dist)?;
    let total = (&ys - z).norm();
    let signal = (ys.rows(0, *d1) - z.rows(0, *d1)).norm();
    Ok(Decomposition::new(total, signal, z.rows(*d1, *d2).norm()))
}

/// Minimum-noise-power completion of a signal target.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePowerTarget {
    pub beta: DVector<f64>,
    pub z_n: DVector<f64>,
    /// `‖A_vᵀ β − z_v‖`.
    pub feasibility_residual: f64,
}

/// Penalty parameters of the augmented-Lagrangian stages.
pub const NOISE_POWER_EPS_SCHEDULE: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];
pub const NOISE_POWER_FEAS_TOL: f64 = 1e-6;
const NOISE_POWER_MAX_OUTER: usize = 200;
const NOISE_POWER_MAX_INNER: usize = 20_000;

/// `β = argmin { ‖A_nᵀ β‖ : β ∈ K, A_vᵀ β = z_v }` and `z_n = A_nᵀ β`.
///
/// `k = None` means `K = R^p`, solved directly through the KKT system. For a
/// constraint set the fiber condition is enforced by an augmented Lagrangian
/// whose inner problems are solved by accelerated projected gradient.
pub fn noise_power_target(
    a_v: &DMatrix<f64>,
    a_n: &DMatrix<f64>,
    k: Option<&HypothesisSet>,
    z_v: &DVector<f64>,
) -> Result<NoisePowerTarget> {
    let p = a_v.nrows();
    if a_n.nrows() != p || a_v.ncols() != z_v.len() {
        return Err(Error::dims(format!(
            "A_v is {}x{}, A_n is {}x{}, z_v has length {}",
            a_v.nrows(),
            a_v.ncols(),
            a_n.nrows(),
            a_n.ncols(),
            z_v.len()
        )));
    }
    let beta = match k {
        None => kkt_least_noise(a_v, a_n, z_v)?,
        Some(set) => augmented_lagrangian(a_v, a_n, set, z_v)?,
    };
    let feasibility_residual = (a_v.tr_mul(&beta) - z_v).norm();
    if !(feasibility_residual <= NOISE_POWER_FEAS_TOL) {
        return Err(Error::Infeasible {
            residual: feasibility_residual,
        });
    }
    Ok(NoisePowerTarget {
        z_n: a_n.tr_mul(&beta),
        beta,
        feasibility_residual,
    })
}

fn kkt_least_noise(
    a_v: &DMatrix<f64>,
    a_n: &DMatrix<f64>,
    z_v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let p = a_v.nrows();
    let d1 = a_v.ncols();
    let mut kkt = DMatrix::zeros(p + d1, p + d1);
    kkt.view_mut((0, 0), (p, p))
        .copy_from(&(a_n * a_n.transpose() * 2.0));
    kkt.view_mut((0, p), (p, d1)).copy_from(a_v);
    kkt.view_mut((p, 0), (d1, p)).copy_from(&a_v.transpose());
    let mut rhs = DVector::zeros(p + d1);
    rhs.rows_mut(p, d1).copy_from(z_v);
    let svd = kkt.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(1.0);
    let sol = svd
        .solve(&rhs, tol)
        .map_err(|e| Error::param(format!("KKT solve failed: {e}")))?;
    Ok(sol.rows(0, p).clone_owned())
}

fn augmented_lagrangian(
    a_v: &DMatrix<f64>,
    a_n: &DMatrix<f64>,
    set: &HypothesisSet,
    z_v: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g_n = a_n * a_n.transpose();
    let g_v = a_v * a_v.transpose();
    let av_zv = a_v * z_v;
    let norm_n = solver::spectral_norm(a_n, 1)?.powi(2);
    let norm_v = solver::spectral_norm(a_v, 2)?.powi(2);

    let mut beta = solver::project(set, &DVector::zeros(a_v.nrows()))?;
    let mut nu = DVector::zeros(a_v.ncols());
    let mut best = (f64::INFINITY, beta.clone());

    for outer in 0..NOISE_POWER_MAX_OUTER {
        let eps = NOISE_POWER_EPS_SCHEDULE[outer.min(NOISE_POWER_EPS_SCHEDULE.len() - 1)];
        let lip = 2.0 * norm_n + norm_v / eps;
        let step = 1.0 / lip.max(f64::MIN_POSITIVE);
        let grad = |b: &DVector<f64>| -> DVector<f64> {
            &g_n * b * 2.0 + a_v * &nu + (&g_v * b - &av_zv) / eps
        };

        // FISTA
        let mut prev = beta.clone();
        let mut look = beta.clone();
        let mut t = 1.0_f64;
        for _ in 0..NOISE_POWER_MAX_INNER {
            let next = solver::project(set, &(&look - grad(&look) * step))?;
            let moved = (&next - &prev).norm();
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            look = &next + (&next - &prev) * ((t - 1.0) / t_next);
            prev = next;
            t = t_next;
            if moved <= 1e-13 * (1.0 + prev.norm()) {
                break;
            }
        }
        beta = prev;

        let resid = a_v.tr_mul(&beta) - z_v;
        let r = resid.norm();
        if r < best.0 {
            best = (r, beta.clone());
        }
        nu += resid / eps;
        if r <= 0.1 * NOISE_POWER_FEAS_TOL
            || (r <= NOISE_POWER_FEAS_TOL && outer + 1 >= NOISE_POWER_EPS_SCHEDULE.len())
        {
            return Ok(beta);
        }
    }
    Err(Error::Infeasible { residual: best.0 })
}
