//! Projected gradient descent for the generalized Lasso
//! `min_{β ∈ K} (1/n) Σ (y_i − ⟨x_i, β⟩)²`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::HypothesisSet;
use crate::model_gen::MixingMatrix;
use crate::rng::{domain, substream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Relative objective decrease below which iteration stops.
    pub rel_tol: f64,
    /// Seed of the power-iteration start vector.
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            rel_tol: 1e-9,
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::config("solver.max_iters", "must be at least 1"));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::config("solver.rel_tol", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    #[serde(with = "crate::serde_la::vector")]
    pub beta_hat: DVector<f64>,
    #[serde(with = "crate::serde_la::option_vector")]
    pub z_hat: Option<DVector<f64>>,
    pub objective: f64,
    pub iters: usize,
    pub converged: bool,
    /// `‖β̂ − P_K(β̂ − ∇f(β̂)/L)‖`.
    pub fixed_point_residual: f64,
}

/// Euclidean projection onto `K`.
pub fn project(k: &HypothesisSet, v: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(match k {
        HypothesisSet::L2Ball { radius } => {
            let norm = v.norm();
            if norm <= *radius {
                v.clone()
            } else {
                v * (radius / norm)
            }
        }
        HypothesisSet::L1Ball { radius } => project_l1(v, *radius),
        HypothesisSet::Box { lo, hi } => {
            check_len(lo.len(), v.len())?;
            DVector::from_iterator(
                v.len(),
                v.iter().zip(lo.iter().zip(hi)).map(|(x, (l, h))| x.clamp(*l, *h)),
            )
        }
        HypothesisSet::Subspace { basis, radius_cap } => {
            check_len(basis.nrows(), v.len())?;
            let coords = basis.tr_mul(v);
            let coords = match radius_cap {
                Some(r) if coords.norm() > *r => {
                    let n = coords.norm();
                    coords * (r / n)
                }
                _ => coords,
            };
            basis * coords
        }
        HypothesisSet::Shifted { inner, center } => {
            check_len(center.len(), v.len())?;
            let c = DVector::from_column_slice(center);
            project(inner, &(v - &c))? + c
        }
        HypothesisSet::LinearImage { .. } => {
            return Err(Error::Unsupported(
                "no direct projection onto a linear image; use solve_adapted".into(),
            ))
        }
    })
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dims(format!(
            "set lives in R^{expected}, vector has length {got}"
        )));
    }
    Ok(())
}

/// Sort-and-threshold projection onto `{‖β‖₁ ≤ r}`.
fn project_l1(v: &DVector<f64>, r: f64) -> DVector<f64> {
    if v.lp_norm(1) <= r {
        return v.clone();
    }
    let mut u: Vec<f64> = v.iter().map(|x| x.abs()).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumsum += uj;
        let t = (cumsum - r) / (j + 1) as f64;
        if uj > t {
            theta = t;
        } else {
            break;
        }
    }
    v.map(|x| x.signum() * (x.abs() - theta).max(0.0))
}

/// Largest singular value of `x` by power iteration on `XᵀX`.
pub fn spectral_norm(x: &DMatrix<f64>, seed: u64) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix"));
    }
    let p = x.ncols();
    if p == 0 || x.nrows() == 0 || x.amax() == 0.0 {
        return Ok(0.0);
    }
    let mut rng = substream(seed, domain::POWER, 0);
    let mut v = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let w = x.tr_mul(&(x * &v));
        let next = v.dot(&w);
        let norm = w.norm();
        if norm == 0.0 {
            break;
        }
        v = w / norm;
        let done = (next - lambda).abs() <= 1e-12 * next.abs();
        lambda = next;
        if done {
            break;
        }
    }
    Ok(lambda.max(0.0).sqrt())
}

fn objective(x: &DMatrix<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> f64 {
    (y - x * beta).norm_squared() / y.len() as f64
}

/// Solve `(P_K)` by projected gradient with step `1/L`, `L = 2σ_max(X)²/n`.
pub fn solve_klasso(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    k: &HypothesisSet,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    cfg.validate()?;
    let (n, p) = x.shape();
    if n == 0 || y.len() != n {
        return Err(Error::dims(format!("X is {n}x{p}, y has length {}", y.len())));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("outputs"));
    }
    let sigma = spectral_norm(x, cfg.seed)?;
    let nf = n as f64;
    let lip = 2.0 * sigma * sigma / nf * (1.0 + 1e-9);

    let mut beta = project(k, &DVector::zeros(p))?;
    let mut f = objective(x, y, &beta);
    if lip == 0.0 {
        return Ok(FitResult {
            beta_hat: beta,
            z_hat: None,
            objective: f,
            iters: 0,
            converged: true,
            fixed_point_residual: 0.0,
        });
    }
    let step = 1.0 / lip;
    let pgd_step = |b: &DVector<f64>| -> Result<DVector<f64>> {
        let grad = x.tr_mul(&(x * b - y)) * (2.0 / nf);
        project(k, &(b - grad * step))
    };

    let mut converged = false;
    let mut iters = 0;
    while iters < cfg.max_iters {
        let next = pgd_step(&beta)?;
        let f_next = objective(x, y, &next);
        iters += 1;
        if f_next > f * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::DescentViolation {
                iter: iters,
                before: f,
                after: f_next,
            });
        }
        let moved = (&next - &beta).norm();
        let rel_dec = if f > 0.0 { (f - f_next) / f } else { 0.0 };
        beta = next;
        f = f_next;
        if rel_dec < cfg.rel_tol && moved <= 10.0 * cfg.rel_tol * (1.0 + beta.norm()) {
            converged = true;
            break;
        }
    }
    let fixed_point_residual = (&beta - pgd_step(&beta)?).norm();
    Ok(FitResult {
        objective: objective(x, y, &beta),
        beta_hat: beta,
        z_hat: None,
        iters,
        converged,
        fixed_point_residual,
    })
}

/// Store and return `ẑ = Aᵀβ̂`.
pub fn pushforward_estimate(a: &MixingMatrix, fit: &mut FitResult) -> Result<DVector<f64>> {
    if a.p() != fit.beta_hat.len() {
        return Err(Error::dims(format!(
            "A has {} rows, beta has length {}",
            a.p(),
            fit.beta_hat.len()
        )));
    }
    let z = a.entries().tr_mul(&fit.beta_hat);
    fit.z_hat = Some(z.clone());
    Ok(z)
}

/// Minimum singular value accepted for the approximate mixing matrix.
pub const ADAPTED_MIN_SINGULAR: f64 = 1e-8;

/// Solve `(P_K)` over `K = (Ã†)ᵀ K̃` through the substitution `β = (Ã†)ᵀ w`,
/// `w ∈ K̃`. Returns `β̂` and `ẑ = Ãᵀβ̂`.
pub fn solve_adapted(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    a_tilde: &DMatrix<f64>,
    k_tilde: &HypothesisSet,
    cfg: &SolverConfig,
) -> Result<FitResult> {
    if a_tilde.nrows() != x.ncols() {
        return Err(Error::dims(format!(
            "A_tilde has {} rows, X has {} columns",
            a_tilde.nrows(),
            x.ncols()
        )));
    }
    if a_tilde.ncols() > a_tilde.nrows() {
        return Err(Error::RankDeficient(0.0));
    }
    let svd = a_tilde.clone().svd(true, true);
    let smin = svd.singular_values.min();
    if !(smin > ADAPTED_MIN_SINGULAR) {
        return Err(Error::RankDeficient(smin));
    }
    let pinv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| Error::param(format!("pseudo-inverse failed: {e}")))?;
    let lift = pinv.transpose();
    let xw = x * &lift;
    let fit = solve_klasso(&xw, y, k_tilde, cfg)?;
    let beta = &lift * &fit.beta_hat;
    let z = a_tilde.tr_mul(&beta);
    Ok(FitResult {
        objective: objective(x, y, &beta),
        beta_hat: beta,
        z_hat: Some(z),
        ..fit
    })
}
