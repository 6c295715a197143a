//! Hypothesis sets, Gaussian mean widths and sample-size calculators.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_gen::LINALG_TOL;
use crate::par::{self, Execution};
use crate::quadrature::{normal_pdf, normal_sf};
use crate::rng::{domain, substream};

/// Closed convex constraint set `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum HypothesisSet {
    L2Ball { radius: f64 },
    L1Ball { radius: f64 },
    /// `{β : lo ≤ β ≤ hi}`; `lo = hi = 0` is the singleton `{0}`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    /// Span of the orthonormal columns of `basis`, optionally intersected
    /// with a Euclidean ball of radius `radius_cap`.
    Subspace {
        #[serde(with = "crate::serde_la::matrix")]
        basis: DMatrix<f64>,
        #[serde(default)]
        radius_cap: Option<f64>,
    },
    Shifted {
        inner: Box<HypothesisSet>,
        center: Vec<f64>,
    },
    /// `M · inner`. Has a support function but no projection.
    LinearImage {
        #[serde(with = "crate::serde_la::matrix")]
        matrix: DMatrix<f64>,
        inner: Box<HypothesisSet>,
    },
}

impl HypothesisSet {
    pub fn singleton_zero(dim: usize) -> Self {
        HypothesisSet::Box {
            lo: vec![0.0; dim],
            hi: vec![0.0; dim],
        }
    }

    /// Ambient dimension, when the set fixes one.
    pub fn dim(&self) -> Option<usize> {
        match self {
            HypothesisSet::L2Ball { .. } | HypothesisSet::L1Ball { .. } => None,
            HypothesisSet::Box { lo, .. } => Some(lo.len()),
            HypothesisSet::Subspace { basis, .. } => Some(basis.nrows()),
            HypothesisSet::Shifted { center, .. } => Some(center.len()),
            HypothesisSet::LinearImage { matrix, .. } => Some(matrix.nrows()),
        }
    }

    pub fn is_bounded(&self) -> bool {
        match self {
            HypothesisSet::Subspace { basis, radius_cap } => {
                radius_cap.is_some() || basis.ncols() == 0
            }
            HypothesisSet::Shifted { inner, .. } | HypothesisSet::LinearImage { inner, .. } => {
                inner.is_bounded()
            }
            _ => true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            HypothesisSet::L2Ball { radius } | HypothesisSet::L1Ball { radius } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::param("ball radius must be positive and finite"));
                }
            }
            HypothesisSet::Box { lo, hi } => {
                if lo.len() != hi.len() {
                    return Err(Error::dims("box bounds have different lengths"));
                }
                if lo.iter().zip(hi).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
                    return Err(Error::param("box needs finite lo <= hi componentwise"));
                }
            }
            HypothesisSet::Subspace { basis, radius_cap } => {
                let gram = basis.tr_mul(basis);
                let defect = (gram - DMatrix::identity(basis.ncols(), basis.ncols())).amax();
                if defect > LINALG_TOL {
                    return Err(Error::NotOrthonormal(defect));
                }
                if let Some(r) = radius_cap {
                    if !(*r > 0.0 && r.is_finite()) {
                        return Err(Error::param("subspace radius cap must be positive"));
                    }
                }
            }
            HypothesisSet::Shifted { inner, center } => {
                inner.validate()?;
                if let Some(d) = inner.dim() {
                    if d != center.len() {
                        return Err(Error::dims("shift center does not match inner set"));
                    }
                }
            }
            HypothesisSet::LinearImage { matrix, inner } => {
                inner.validate()?;
                if let Some(d) = inner.dim() {
                    if d != matrix.ncols() {
                        return Err(Error::dims("linear image matrix does not match inner set"));
                    }
                }
            }
        }
        Ok(())
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        match self.dim() {
            Some(d) if d != len => Err(Error::dims(format!(
                "set lives in R^{d}, vector has length {len}"
            ))),
            _ => Ok(()),
        }
    }
}

/// `h_K(g) = sup_{h ∈ K} ⟨g, h⟩`; `h_{MK}(g) = h_K(Mᵀg)`.
pub fn support_function(k: &HypothesisSet, g: &DVector<f64>) -> Result<f64> {
    if !k.is_bounded() {
        return Err(Error::Unbounded(
            "support function of an uncapped subspace".into(),
        ));
    }
    k.check_dim(g.len())?;
    Ok(match k {
        HypothesisSet::L2Ball { radius } => radius * g.norm(),
        HypothesisSet::L1Ball { radius } => radius * g.amax(),
        HypothesisSet::Box { lo, hi } => g
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(gi, (l, h))| (l * gi).max(h * gi))
            .sum(),
        HypothesisSet::Subspace { basis, radius_cap } => {
            radius_cap.unwrap_or(0.0) * basis.tr_mul(g).norm()
        }
        HypothesisSet::Shifted { inner, center } => {
            g.iter().zip(center).map(|(a, b)| a * b).sum::<f64>() + support_function(inner, g)?
        }
        HypothesisSet::LinearImage { matrix, inner } => {
            support_function(inner, &matrix.tr_mul(g))?
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WidthKind {
    Global,
    ConicL1,
    LocalBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_mc: usize,
    pub kind: WidthKind,
}

/// Monte Carlo estimate of `w(K) = E sup_{h∈K} ⟨g, h⟩` in `R^d`.
pub fn mean_width_global(k: &HypothesisSet, d: usize, n_mc: usize, seed: u64) -> Result<WidthEstimate> {
    mean_width_global_with(Execution::default(), k, d, n_mc, seed)
}

pub fn mean_width_global_with(
    exec: Execution,
    k: &HypothesisSet,
    d: usize,
    n_mc: usize,
    seed: u64,
) -> Result<WidthEstimate> {
    if n_mc < 2 || d == 0 {
        return Err(Error::param("mean width needs d >= 1 and n_mc >= 2"));
    }
    if !k.is_bounded() {
        return Err(Error::Unbounded("mean width of an unbounded set".into()));
    }
    k.validate()?;
    k.check_dim(d)?;
    let vals = par::try_map_indexed(exec, n_mc, |i| {
        let mut rng = substream(seed, domain::WIDTH, i as u64);
        let g = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
        support_function(k, &g)
    })?;
    let n = n_mc as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(WidthEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        n_mc,
        kind: WidthKind::Global,
    })
}

/// Default τ grid: 4001 points on `[0, 10]`.
pub fn default_tau_grid() -> Vec<f64> {
    (0..=4000).map(|i| i as f64 * 10.0 / 4000.0).collect()
}

/// `E(|γ| − τ)₊²` for standard normal `γ`.
pub fn gaussian_tail_second_moment(tau: f64) -> f64 {
    2.0 * ((1.0 + tau * tau) * normal_sf(tau) - tau * normal_pdf(tau))
}

/// Statistical-dimension upper bound for the ℓ1 descent cone at an
/// `s`-sparse point of `R^d`; the returned value is `√δ̂`.
pub fn conic_width_l1_descent(d: usize, s: usize, tau_grid: &[f64]) -> Result<WidthEstimate> {
    if s == 0 || s > d {
        return Err(Error::param(format!("sparsity {s} out of range 1..={d}")));
    }
    if tau_grid.is_empty() {
        return Err(Error::param("empty tau grid"));
    }
    let (s, d) = (s as f64, d as f64);
    let delta = tau_grid
        .iter()
        .map(|&t| s * (1.0 + t * t) + (d - s) * gaussian_tail_second_moment(t))
        .fold(f64::INFINITY, f64::min);
    Ok(WidthEstimate {
        value: delta.sqrt(),
        stderr: 0.0,
        n_mc: 0,
        kind: WidthKind::ConicL1,
    })
}

/// Upper bound on the local width `w_t(K − z)`:
/// `min(w(K − z)/t, conic_l1)`, the second branch only for an ℓ1 ball with
/// `z` on its boundary and a declared sparsity.
pub fn local_width_bound(
    k: &HypothesisSet,
    z: &DVector<f64>,
    t: f64,
    sparsity: Option<usize>,
    n_mc: usize,
    seed: u64,
) -> Result<WidthEstimate> {
    if !(t > 0.0) {
        return Err(Error::param("local width scale t must be positive"));
    }
    let d = z.len();
    let shifted = HypothesisSet::Shifted {
        inner: Box::new(k.clone()),
        center: z.iter().map(|v| -v).collect(),
    };
    let global = mean_width_global(&shifted, d, n_mc, seed)?;
    let mut best = WidthEstimate {
        value: global.value / t,
        stderr: global.stderr / t,
        n_mc,
        kind: WidthKind::LocalBound,
    };
    if let (HypothesisSet::L1Ball { radius }, Some(s)) = (k, sparsity) {
        let on_boundary = (z.lp_norm(1) - radius).abs() <= 1e-9 * radius.max(1.0);
        if on_boundary {
            let conic = conic_width_l1_descent(d, s, &default_tau_grid())?;
            if conic.value < best.value {
                best = WidthEstimate {
                    value: conic.value,
                    stderr: 0.0,
                    n_mc,
                    kind: WidthKind::LocalBound,
                };
            }
        }
    }
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Global,
    Conic,
}

/// `⌈C κ⁴ δ^{-4} w²⌉` (global) or `⌈C κ⁴ δ^{-2} w²⌉` (conic).
pub fn required_samples(width_sq: f64, kappa: f64, delta: f64, regime: Regime, c: f64) -> Result<u64> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::param("delta must lie in (0, 1]"));
    }
    if !(width_sq >= 0.0 && kappa > 0.0 && c > 0.0) {
        return Err(Error::param("required_samples needs width_sq >= 0 and kappa, C > 0"));
    }
    let power = match regime {
        Regime::Global => 4,
        Regime::Conic => 2,
    };
    let n = c * kappa.powi(4) * delta.powi(-power) * width_sq;
    if !n.is_finite() {
        return Err(Error::NonFinite("required sample size"));
    }
    Ok(n.ceil() as u64)
}
