//! Centralized solution of the relaxed voltage-regulation problem.
//!
//! Solved through its dual: accelerated projected gradient ascent on
//! `h(mu)` with adaptive restart. The step is `1/L` with `L` an upper bound
//! on the Lipschitz constant of the gradient, derived from the largest
//! per-node response slope and the spectral norms of `R` and `X`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::devices::{BestResponseRoute, RelaxedResponse};
use crate::dual::{dual_function_value, DualEvaluation, DualState};
use crate::error::{Error, Result};
use crate::instance::Instance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    /// Target for the projected-gradient KKT residual, in p.u. volts.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Best-response solver used inside the dual evaluations.
    pub route: BestResponseRoute,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            tolerance: 1e-9,
            max_iterations: 2_000_000,
            route: BestResponseRoute::ClosedForm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub responses: Vec<RelaxedResponse>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub dual: DualState,
    /// Total device cost at the primal optimum.
    pub primal_value: f64,
    /// `h(mu*)`.
    pub dual_value: f64,
    /// Largest constraint violation `max(g, 0)`.
    pub primal_violation: f64,
    /// `|| mu - [mu + g]_+ ||_inf`.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub lipschitz: f64,
}

impl OracleSolution {
    pub fn duality_gap(&self) -> f64 {
        self.primal_value - self.dual_value
    }
}

fn spectral_norm_sq(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let s = m.clone().symmetric_eigenvalues().iter().fold(0.0f64, |acc, e| acc.max(e.abs()));
    s * s
}

/// Upper bound on the Lipschitz constant of the dual gradient.
pub fn dual_lipschitz_bound(instance: &Instance) -> f64 {
    let n = instance.nodes();
    let mut slope_p = vec![0.0; n];
    let mut slope_q = vec![0.0; n];
    for c in &instance.customers {
        let i = c.node - 1;
        for pv in &c.pvs {
            slope_p[i] += 0.5 / pv.c_p;
            slope_q[i] += 0.5 / pv.c_q;
        }
        for t in &c.tcls {
            slope_p[i] += c.pu_per_watt.powi(2) / (2.0 * t.c_t * t.theta2 * t.theta2);
        }
    }
    let sp = slope_p.iter().fold(0.0f64, |a, &b| a.max(b));
    let sq = slope_q.iter().fold(0.0f64, |a, &b| a.max(b));
    2.0 * (sp * spectral_norm_sq(&instance.model.r) + sq * spectral_norm_sq(&instance.model.x))
}

fn kkt_residual(mu: &[f64], g: &[f64]) -> f64 {
    mu.iter()
        .zip(g)
        .map(|(&m, &gi)| (m - (m + gi).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Solves the relaxed problem to a KKT residual below `options.tolerance`.
pub fn oracle_solve(instance: &Instance, options: &OracleOptions) -> Result<OracleSolution> {
    let n = instance.nodes();
    let lipschitz = dual_lipschitz_bound(instance);
    let inner_tol = (options.tolerance * 1e-3).max(1e-15);
    if !(lipschitz > 0.0) {
        // no controllable devices: the dual is linear and only mu = 0 can be optimal
        let eval = dual_function_value(instance, &DualState::zeros(n), options.route, inner_tol)?;
        return finish(instance, DualState::zeros(n), eval, 0, lipschitz, options.tolerance);
    }
    let step = 1.0 / lipschitz;
    let mut x = vec![0.0; 2 * n];
    let mut x_prev = x.clone();
    let mut momentum = 0.0;
    let mut t = 1.0f64;
    let mut best: Option<(f64, Vec<f64>)> = None;

    for it in 0..options.max_iterations {
        let y: Vec<f64> = x.iter().zip(&x_prev).map(|(a, b)| a + momentum * (a - b)).collect();
        let state = if y.iter().all(|&v| v >= 0.0) {
            DualState::from_stacked(&y)
        } else {
            // evaluate at the extrapolated point without projecting it
            let half = y.len() / 2;
            DualState { lower: y[..half].to_vec(), upper: y[half..].to_vec() }
        };
        let eval = dual_function_value(instance, &state, options.route, inner_tol)?;
        let g = &eval.residual;
        if y.iter().all(|&v| v >= 0.0) {
            let r = kkt_residual(&y, g);
            if r < options.tolerance {
                return finish(instance, DualState::from_stacked(&y), eval, it + 1, lipschitz, options.tolerance);
            }
            if best.as_ref().is_none_or(|(b, _)| r < *b) {
                best = Some((r, y.clone()));
            }
        }
        let x_new: Vec<f64> = y.iter().zip(g).map(|(yi, gi)| (yi + step * gi).max(0.0)).collect();
        let restart: f64 = y
            .iter()
            .zip(&x_new)
            .zip(&x)
            .map(|((yi, xn), xo)| (yi - xn) * (xn - xo))
            .sum();
        if restart > 0.0 {
            t = 1.0;
            momentum = 0.0;
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            momentum = (t - 1.0) / t_next;
            t = t_next;
        }
        x_prev = std::mem::replace(&mut x, x_new);
    }
    Err(Error::OracleNonConvergence {
        iterations: options.max_iterations,
        residual: best.map_or(f64::INFINITY, |(r, _)| r),
    })
}

fn finish(
    instance: &Instance,
    dual: DualState,
    eval: DualEvaluation,
    iterations: usize,
    lipschitz: f64,
    tolerance: f64,
) -> Result<OracleSolution> {
    let (p, q) = instance.relaxed_injections(&eval.responses)?;
    let v = instance.model.linear_voltage(&p, &q)?;
    let primal_value = instance
        .customers
        .iter()
        .zip(&eval.responses)
        .map(|(c, r)| r.cost(c))
        .sum();
    let primal_violation = eval.residual.iter().fold(0.0f64, |a, &g| a.max(g));
    let kkt = kkt_residual(&dual.stacked(), &eval.residual);
    if kkt >= tolerance && iterations > 0 {
        return Err(Error::OracleNonConvergence { iterations, residual: kkt });
    }
    Ok(OracleSolution {
        responses: eval.responses,
        p,
        q,
        v,
        dual,
        primal_value,
        dual_value: eval.value,
        primal_violation,
        kkt_residual: kkt,
        iterations,
        lipschitz,
    })
}
