//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::path::PathBuf;

use mismatch_lasso::experiment::{
    DitherSpec, ExperimentConfig, ExperimentKind, MixingSpec, SetSpec, TargetSpec, WidthSpec,
};
use mismatch_lasso::mismatch_lab::Expectation;
use mismatch_lasso::model_gen::{LatentDistribution, LatentKind, ObservationModel};
use mismatch_lasso::SolverConfig;
use nalgebra::DVector;

/// Composite Simpson rule for `E[f(γ)]`, `γ ~ N(0,1)`, on `[-12, 12]`.
pub fn simpson_gaussian<F: Fn(f64) -> f64>(f: F) -> f64 {
    let m = 200_000;
    let (a, b) = (-12.0, 12.0);
    let h = (b - a) / m as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let g = |x: f64| f(x) * phi(x);
    let mut acc = g(a) + g(b);
    for i in 1..m {
        let x = a + i as f64 * h;
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * g(x);
    }
    acc * h / 3.0
}

/// `E‖g‖₂` for `g ~ N(0, I_d)`.
pub fn gamma_ratio_width(d: usize) -> f64 {
    std::f64::consts::SQRT_2 * libm::tgamma((d as f64 + 1.0) / 2.0) / libm::tgamma(d as f64 / 2.0)
}

/// Projection onto the ℓ1 ball by enumerating supports: the minimiser lies
/// on a face carrying the signs of `v`.
pub fn l1_projection_oracle(v: &DVector<f64>, r: f64) -> DVector<f64> {
    if v.lp_norm(1) <= r {
        return v.clone();
    }
    let d = v.len();
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << d) {
        let supp: Vec<usize> = (0..d).filter(|k| mask >> k & 1 == 1).collect();
        let theta = (supp.iter().map(|&k| v[k].abs()).sum::<f64>() - r) / supp.len() as f64;
        if theta < 0.0 || supp.iter().any(|&k| v[k].abs() < theta) {
            continue;
        }
        let mut x = DVector::zeros(d);
        for &k in &supp {
            x[k] = v[k].signum() * (v[k].abs() - theta);
        }
        let dist = (&x - v).norm();
        if best.as_ref().is_none_or(|(b, _)| dist < *b) {
            best = Some((dist, x));
        }
    }
    best.expect("some face is feasible").1
}

/// `‖Π_C g‖` for the descent cone `C` of the ℓ1 norm at a point with sign
/// pattern `signs` on its support (zeros elsewhere). By Moreau this is the
/// distance from `g` to the polar cone `{t u : t ≥ 0, u ∈ ∂‖x‖₁}`, a convex
/// 1-D problem in `t` solved by ternary search.
pub fn l1_cone_projection_norm(g: &[f64], signs: &[f64]) -> f64 {
    let dist_sq = |t: f64| -> f64 {
        g.iter()
            .zip(signs)
            .map(|(&gi, &si)| {
                if si != 0.0 {
                    (gi - t * si).powi(2)
                } else {
                    (gi.abs() - t).max(0.0).powi(2)
                }
            })
            .sum()
    };
    let (mut lo, mut hi) = (0.0, g.iter().fold(0.0_f64, |m, v| m.max(v.abs())) + 1.0);
    for _ in 0..300 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if dist_sq(a) <= dist_sq(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    dist_sq(0.5 * (lo + hi)).sqrt()
}

pub fn config(
    experiment: ExperimentKind,
    model: ObservationModel,
    kind: LatentKind,
    d: usize,
    n_grid: Vec<usize>,
    trials: usize,
) -> ExperimentConfig {
    ExperimentConfig {
        experiment,
        model,
        dist: LatentDistribution::new(kind, d).unwrap(),
        mixing: MixingSpec::Identity,
        hypothesis_set: SetSpec::default(),
        target: TargetSpec::Principle,
        n_grid,
        trials,
        master_seed: 2024,
        output_dir: PathBuf::from("unused"),
        solver: SolverConfig::default(),
        expectation: Expectation::Exact,
        dithering: DitherSpec::default(),
        perturbation: 0.05,
        width: WidthSpec::default(),
    }
}

pub fn unit_vector(entries: &[f64], d: usize) -> Vec<f64> {
    let norm = entries.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut v = vec![0.0; d];
    for (k, e) in entries.iter().enumerate() {
        v[k] = e / norm;
    }
    v
}
