//! Controllable devices and customer best responses.
//!
//! Fast devices are PV inverters with a continuous `(p, q)` setpoint inside
//! `{0 <= p <= p_av, p^2 + q^2 <= eta^2}`. Slow devices are thermostatically
//! controlled loads (TCLs) that consume `c` watts from a discrete rate grid;
//! for pricing and optimization they are relaxed to the convex hull of that
//! grid intersected with their comfort band.
//!
//! Sign convention: fast-device `p`, `q` are injections. A slow device that
//! consumes `c` injects `-c` real power and no reactive power, so the payment
//! term `-alpha * p` of the customer problem becomes `+alpha * c`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recovery::RateGrid;

/// Iteration cap of the projected-gradient best-response route.
pub const GENERIC_MAX_ITERATIONS: usize = 10_000;
/// Default tolerance of the projected-gradient best-response route.
pub const GENERIC_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvSpec {
    /// Available real power, p.u.
    pub p_av: f64,
    /// Apparent power rating, p.u.
    pub eta: f64,
    /// Curtailment weight in `c_p (p_av - p)^2`.
    pub c_p: f64,
    /// Reactive weight in `c_q q^2`.
    pub c_q: f64,
}

impl PvSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_av >= 0.0) || !self.p_av.is_finite() {
            return Err(Error::Parameter(format!("PV availability must be >= 0, got {}", self.p_av)));
        }
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Parameter(format!("PV rating must be > 0, got {}", self.eta)));
        }
        if !(self.c_p > 0.0 && self.c_q > 0.0) {
            return Err(Error::Parameter(format!(
                "PV cost weights must be positive for strong convexity, got c_p={}, c_q={}",
                self.c_p, self.c_q
            )));
        }
        Ok(())
    }

    pub fn cost(&self, p: f64, q: f64) -> f64 {
        self.c_p * (self.p_av - p).powi(2) + self.c_q * q * q
    }

    pub fn gradient(&self, p: f64, q: f64) -> (f64, f64) {
        (-2.0 * self.c_p * (self.p_av - p), 2.0 * self.c_q * q)
    }

    pub fn contains(&self, p: f64, q: f64, tolerance: f64) -> bool {
        p >= -tolerance
            && p <= self.p_av + tolerance
            && p.hypot(q) <= self.eta + tolerance
    }

    /// The cost minimizer: full output, no reactive power.
    pub fn cost_minimizer(&self) -> (f64, f64) {
        (self.p_av.min(self.eta), 0.0)
    }
}

/// A strongly convex, differentiable cost on a fast device's `(p, q)`.
pub trait FastDeviceCost: Send + Sync {
    fn value(&self, p: f64, q: f64) -> f64;
    fn gradient(&self, p: f64, q: f64) -> (f64, f64);
}

impl FastDeviceCost for PvSpec {
    fn value(&self, p: f64, q: f64) -> f64 {
        self.cost(p, q)
    }

    fn gradient(&self, p: f64, q: f64) -> (f64, f64) {
        PvSpec::gradient(self, p, q)
    }
}

/// Euclidean projection onto `{0 <= p <= p_av, p^2 + q^2 <= eta^2}`.
pub fn project_pv_set(p: f64, q: f64, p_av: f64, eta: f64) -> (f64, f64) {
    let p_max = p_av.min(eta);
    if (0.0..=p_max).contains(&p) && p.hypot(q) <= eta {
        return (p, q);
    }
    let mut best = (f64::INFINITY, (0.0, 0.0));
    let mut consider = |cand: (f64, f64)| {
        let d = (cand.0 - p).powi(2) + (cand.1 - q).powi(2);
        if d < best.0 {
            best = (d, cand);
        }
    };
    // the two straight edges
    consider((0.0, q.clamp(-eta, eta)));
    let half_chord = (eta * eta - p_max * p_max).max(0.0).sqrt();
    consider((p_max, q.clamp(-half_chord, half_chord)));
    // the arc, when the radial projection lands on it
    let norm = p.hypot(q);
    if norm > 0.0 {
        let radial = (p * eta / norm, q * eta / norm);
        if (0.0..=p_max).contains(&radial.0) {
            consider(radial);
        }
    }
    best.1
}

/// Minimizes `c_p (p_av - p)^2 + c_q q^2 - alpha p - beta q` over the PV set.
///
/// With the circle constraint relaxed by a multiplier `lambda >= 0` the problem
/// separates into two clipped scalar quadratics; the squared norm of that
/// solution is nonincreasing in `lambda`, so the active multiplier is found by
/// bisection to machine precision. Falls back to projected gradient when the
/// bisection cannot bracket a root.
pub fn pv_best_response(spec: &PvSpec, alpha: f64, beta: f64, tolerance: f64) -> (f64, f64) {
    let point = |lambda: f64| {
        let p = ((2.0 * spec.c_p * spec.p_av + alpha) / (2.0 * (spec.c_p + lambda))).clamp(0.0, spec.p_av);
        let q = beta / (2.0 * (spec.c_q + lambda));
        (p, q)
    };
    let eta2 = spec.eta * spec.eta;
    let norm2 = |(p, q): (f64, f64)| p * p + q * q;

    let free = point(0.0);
    if norm2(free) <= eta2 {
        return free;
    }
    let mut lo = 0.0;
    let mut hi = 1.0_f64.max(spec.c_p).max(spec.c_q);
    let mut doublings = 0;
    while norm2(point(hi)) > eta2 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 2000 || !hi.is_finite() {
            return pv_best_response_generic(spec, spec.p_av, spec.eta, alpha, beta, tolerance, GENERIC_MAX_ITERATIONS);
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm2(point(mid)) > eta2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (p, q) = point(hi);
    project_pv_set(p, q, spec.p_av, spec.eta)
}

/// Projected gradient with backtracking for an arbitrary strongly convex cost.
///
/// Minimizes `cost(p, q) - alpha p - beta q` over the PV set and stops when the
/// projected step is shorter than `tolerance`.
pub fn pv_best_response_generic(
    cost: &dyn FastDeviceCost,
    p_av: f64,
    eta: f64,
    alpha: f64,
    beta: f64,
    tolerance: f64,
    max_iterations: usize,
) -> (f64, f64) {
    let objective = |p: f64, q: f64| cost.value(p, q) - alpha * p - beta * q;
    let grad = |p: f64, q: f64| {
        let (gp, gq) = cost.gradient(p, q);
        (gp - alpha, gq - beta)
    };
    let (mut p, mut q) = project_pv_set(p_av.min(eta), 0.0, p_av, eta);
    let mut step = 1.0;
    for _ in 0..max_iterations {
        let f0 = objective(p, q);
        let (gp, gq) = grad(p, q);
        let mut next;
        loop {
            next = project_pv_set(p - step * gp, q - step * gq, p_av, eta);
            let (dp, dq) = (next.0 - p, next.1 - q);
            let model = f0 + gp * dp + gq * dq + (dp * dp + dq * dq) / (2.0 * step);
            if objective(next.0, next.1) <= model + 1e-15 * f0.abs().max(1.0) || step < 1e-14 {
                break;
            }
            step *= 0.5;
        }
        let moved = (next.0 - p).hypot(next.1 - q);
        p = next.0;
        q = next.1;
        if moved < tolerance * step.max(1.0) && moved < tolerance {
            break;
        }
        step *= 1.5;
    }
    (p, q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TclSpec {
    /// Current indoor temperature, °F.
    pub t_in: f64,
    /// Ambient temperature, °F.
    pub t_out: f64,
    /// Mixing coefficient of the indoor/outdoor difference.
    pub theta1: f64,
    /// Temperature change per watt consumed (negative for cooling).
    pub theta2: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub t_nom: f64,
    /// Feasible consumption rates, W.
    pub rates: RateGrid,
    /// Comfort weight in `c_T (T+ - T_nom)^2`.
    pub c_t: f64,
}

impl TclSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min < self.t_max) {
            return Err(Error::Parameter(format!(
                "TCL comfort band [{}, {}] is empty",
                self.t_min, self.t_max
            )));
        }
        if self.theta2 == 0.0 || !self.theta2.is_finite() {
            return Err(Error::Parameter("TCL theta2 must be nonzero".to_string()));
        }
        if !(self.c_t > 0.0) {
            return Err(Error::Parameter(format!("TCL weight must be > 0, got {}", self.c_t)));
        }
        for v in [self.t_in, self.t_out, self.theta1, self.t_nom] {
            if !v.is_finite() {
                return Err(Error::Parameter("TCL thermal parameters must be finite".to_string()));
            }
        }
        Ok(())
    }

    /// Indoor temperature after one interval without consumption.
    fn drift_temperature(&self) -> f64 {
        self.t_in + self.theta1 * (self.t_out - self.t_in)
    }

    pub fn next_temperature(&self, consumption: f64) -> f64 {
        self.drift_temperature() + self.theta2 * consumption
    }

    pub fn cost(&self, consumption: f64) -> f64 {
        self.c_t * (self.next_temperature(consumption) - self.t_nom).powi(2)
    }

    pub fn cost_derivative(&self, consumption: f64) -> f64 {
        2.0 * self.c_t * self.theta2 * (self.next_temperature(consumption) - self.t_nom)
    }

    /// Distance of the next temperature from the comfort band.
    pub fn comfort_violation(&self, consumption: f64) -> f64 {
        let t = self.next_temperature(consumption);
        (self.t_min - t).max(t - self.t_max).max(0.0)
    }

    /// Grid rate closest to the comfort band, ties broken by comfort cost.
    pub fn least_violation_rate(&self) -> f64 {
        let mut best = self.rates.min();
        let mut key = (f64::INFINITY, f64::INFINITY);
        for &rate in self.rates.rates() {
            let k = (self.comfort_violation(rate), self.cost(rate));
            if k < key {
                key = k;
                best = rate;
            }
        }
        best
    }
}

/// Consumption interval of the TCL's convex hull: rates within the grid span
/// whose next temperature stays inside the comfort band.
pub fn tcl_hull(spec: &TclSpec) -> Result<(f64, f64)> {
    let base = spec.drift_temperature();
    let c1 = (spec.t_min - base) / spec.theta2;
    let c2 = (spec.t_max - base) / spec.theta2;
    let lo = c1.min(c2).max(spec.rates.min());
    let hi = c1.max(c2).min(spec.rates.max());
    if lo > hi {
        return Err(Error::HullInfeasible {
            node: 0,
            device: 0,
            detail: format!(
                "next temperature range [{:.3}, {:.3}] misses [{}, {}]",
                spec.next_temperature(spec.rates.max()).min(spec.next_temperature(spec.rates.min())),
                spec.next_temperature(spec.rates.max()).max(spec.next_temperature(spec.rates.min())),
                spec.t_min,
                spec.t_max
            ),
        });
    }
    Ok((lo, hi))
}

/// Minimizes `c_T (T+(c) - T_nom)^2 + price * c` over the hull. `price` is in
/// currency per watt.
pub fn tcl_relaxed_best_response(spec: &TclSpec, price: f64) -> Result<f64> {
    let (lo, hi) = tcl_hull(spec)?;
    let stationary = (spec.t_nom - spec.drift_temperature()) / spec.theta2
        - price / (2.0 * spec.c_t * spec.theta2 * spec.theta2);
    Ok(stationary.clamp(lo, hi))
}

/// Golden-section search of the same objective, an independent route used to
/// cross-check the closed form.
pub fn tcl_relaxed_best_response_search(spec: &TclSpec, price: f64, tolerance: f64) -> Result<f64> {
    let (mut lo, mut hi) = tcl_hull(spec)?;
    let f = |c: f64| spec.cost(c) + price * c;
    let ratio = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > tolerance {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerSpec {
    /// Node the customer is attached to (1-based).
    pub node: usize,
    pub pvs: Vec<PvSpec>,
    pub tcls: Vec<TclSpec>,
    /// Non-controllable real injection, p.u.
    pub p0: f64,
    /// Non-controllable reactive injection, p.u.
    pub q0: f64,
    /// Per-unit power per watt of TCL consumption.
    pub pu_per_watt: f64,
}

impl CustomerSpec {
    pub fn validate(&self, nodes: usize) -> Result<()> {
        if self.node == 0 || self.node > nodes {
            return Err(Error::Parameter(format!(
                "customer node {} outside 1..={nodes}",
                self.node
            )));
        }
        if !(self.pu_per_watt > 0.0) {
            return Err(Error::Parameter("pu_per_watt must be positive".to_string()));
        }
        if !self.p0.is_finite() || !self.q0.is_finite() {
            return Err(Error::Parameter("baseline injections must be finite".to_string()));
        }
        for pv in &self.pvs {
            pv.validate()?;
        }
        for tcl in &self.tcls {
            tcl.validate()?;
        }
        Ok(())
    }

    pub fn participating(&self) -> bool {
        !self.pvs.is_empty() || !self.tcls.is_empty()
    }

    /// Device cost for explicit fast setpoints and slow consumptions.
    pub fn cost_of(&self, fast: &[(f64, f64)], slow: &[f64]) -> f64 {
        let pv: f64 = self.pvs.iter().zip(fast).map(|(s, &(p, q))| s.cost(p, q)).sum();
        let tcl: f64 = self.tcls.iter().zip(slow).map(|(s, &c)| s.cost(c)).sum();
        pv + tcl
    }

    /// Net device injection `(p, q)` in p.u.
    pub fn device_injection(&self, fast: &[(f64, f64)], slow: &[f64]) -> (f64, f64) {
        let p = fast.iter().map(|f| f.0).sum::<f64>() - slow.iter().sum::<f64>() * self.pu_per_watt;
        let q = fast.iter().map(|f| f.1).sum::<f64>();
        (p, q)
    }

    /// Cost minus payment, the objective of the customer problem.
    pub fn objective(&self, fast: &[(f64, f64)], slow: &[f64], alpha: f64, beta: f64) -> f64 {
        let (p, q) = self.device_injection(fast, slow);
        self.cost_of(fast, slow) - alpha * p - beta * q
    }

    /// TCL price per watt implied by a real-power signal.
    pub fn slow_price(&self, alpha: f64) -> f64 {
        alpha * self.pu_per_watt
    }
}

/// Current setpoints of one customer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CustomerDecision {
    pub fast: Vec<(f64, f64)>,
    /// Relaxed TCL consumption from the last slow update, W.
    pub slow_relaxed: Vec<f64>,
    /// Realized (grid) TCL consumption, W.
    pub slow_realized: Vec<f64>,
}

impl CustomerDecision {
    pub fn injection(&self, spec: &CustomerSpec) -> (f64, f64) {
        spec.device_injection(&self.fast, &self.slow_realized)
    }

    pub fn relaxed_injection(&self, spec: &CustomerSpec) -> (f64, f64) {
        spec.device_injection(&self.fast, &self.slow_relaxed)
    }
}

/// Customer cost at the realized setpoints.
pub fn customer_cost(spec: &CustomerSpec, decision: &CustomerDecision) -> f64 {
    spec.cost_of(&decision.fast, &decision.slow_realized)
}

/// Joint best response over the relaxed feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxedResponse {
    pub fast: Vec<(f64, f64)>,
    pub slow: Vec<f64>,
}

impl RelaxedResponse {
    pub fn injection(&self, spec: &CustomerSpec) -> (f64, f64) {
        spec.device_injection(&self.fast, &self.slow)
    }

    pub fn cost(&self, spec: &CustomerSpec) -> f64 {
        spec.cost_of(&self.fast, &self.slow)
    }
}

/// Which solver the best response uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BestResponseRoute {
    /// KKT case split for PVs, clipped stationary point for TCLs.
    #[default]
    ClosedForm,
    /// Projected gradient for PVs, golden-section search for TCLs.
    Iterative,
}

/// `b_i(alpha, beta)`: the customer's joint minimizer over the relaxed set.
///
/// A TCL whose comfort band cannot be reached reports
/// [`Error::HullInfeasible`] tagged with this customer's node and the device
/// index.
pub fn customer_best_response(
    spec: &CustomerSpec,
    alpha: f64,
    beta: f64,
    route: BestResponseRoute,
    tolerance: f64,
) -> Result<RelaxedResponse> {
    let fast = fast_conditional_best_response(spec, alpha, beta, route, tolerance);
    let price = spec.slow_price(alpha);
    let slow = spec
        .tcls
        .iter()
        .enumerate()
        .map(|(d, tcl)| {
            let result = match route {
                BestResponseRoute::ClosedForm => tcl_relaxed_best_response(tcl, price),
                BestResponseRoute::Iterative => {
                    let (lo, hi) = tcl_hull(tcl)?;
                    tcl_relaxed_best_response_search(tcl, price, tolerance * (hi - lo).max(1.0))
                }
            };
            result.map_err(|e| tag_device(e, spec.node, d))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RelaxedResponse { fast, slow })
}

/// Minimizes the customer objective over fast devices with slow setpoints
/// held fixed. The shipped costs are separable, so this is one PV best
/// response per device regardless of the slow state.
pub fn fast_conditional_best_response(
    spec: &CustomerSpec,
    alpha: f64,
    beta: f64,
    route: BestResponseRoute,
    tolerance: f64,
) -> Vec<(f64, f64)> {
    spec.pvs
        .iter()
        .map(|pv| match route {
            BestResponseRoute::ClosedForm => pv_best_response(pv, alpha, beta, tolerance),
            BestResponseRoute::Iterative => {
                pv_best_response_generic(pv, pv.p_av, pv.eta, alpha, beta, tolerance, GENERIC_MAX_ITERATIONS)
            }
        })
        .collect()
}

pub(crate) fn tag_device(err: Error, node: usize, device: usize) -> Error {
    match err {
        Error::HullInfeasible { detail, .. } => Error::HullInfeasible { node, device, detail },
        other => other,
    }
}
