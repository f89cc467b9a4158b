//! Operator side of the distributed algorithm: projected dual ascent on the
//! voltage-limit multipliers, the incentive signals derived from them,
//! stepsize schedules and evaluation of the Lagrangian and dual function.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::devices::{customer_best_response, BestResponseRoute, RelaxedResponse};
use crate::error::{check_len, Error, Result};
use crate::grid::LinearGridModel;
use crate::instance::Instance;

/// Any dual entry above this aborts a run.
pub const DUAL_DIVERGENCE_SENTINEL: f64 = 1e9;

/// Multipliers of the lower (`lower`) and upper (`upper`) voltage limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl DualState {
    pub fn zeros(n: usize) -> Self {
        DualState {
            lower: vec![0.0; n],
            upper: vec![0.0; n],
        }
    }

    /// Builds a state from the stacked vector `[lower; upper]`, projecting
    /// negative entries to zero.
    pub fn from_stacked(stacked: &[f64]) -> Self {
        let n = stacked.len() / 2;
        DualState {
            lower: stacked[..n].iter().map(|v| v.max(0.0)).collect(),
            upper: stacked[n..].iter().map(|v| v.max(0.0)).collect(),
        }
    }

    pub fn stacked(&self) -> Vec<f64> {
        self.lower.iter().chain(&self.upper).copied().collect()
    }

    pub fn nodes(&self) -> usize {
        self.lower.len()
    }

    /// `lower - upper`, the vector the signals are built from.
    pub fn net(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| l - u).collect()
    }

    pub fn max_entry(&self) -> f64 {
        self.lower.iter().chain(&self.upper).copied().fold(0.0, f64::max)
    }

    pub fn distance(&self, other: &DualState) -> f64 {
        self.lower
            .iter()
            .chain(&self.upper)
            .zip(other.lower.iter().chain(&other.upper))
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.lower.iter().chain(&self.upper).all(|&v| v >= 0.0)
    }
}

/// Per-node prices for real (`alpha`) and reactive (`beta`) injections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncentiveSignal {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl IncentiveSignal {
    pub fn zeros(n: usize) -> Self {
        IncentiveSignal {
            alpha: vec![0.0; n],
            beta: vec![0.0; n],
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.alpha
            .iter()
            .chain(&self.beta)
            .map(|v| v.abs())
            .fold(0.0, f64::max)
    }
}

/// `mu_lower <- [mu_lower + eps (v_min - v)]+`, `mu_upper <- [mu_upper + eps (v - v_max)]+`,
/// with `residual = [v_min - v; v - v_max]`.
pub fn dual_ascent_step(state: &DualState, residual: &[f64], epsilon: f64) -> Result<DualState> {
    let n = state.nodes();
    check_len("constraint residual", 2 * n, residual.len())?;
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("stepsize must be positive, got {epsilon}")));
    }
    let project = |mu: f64, g: f64| (mu + epsilon * g).max(0.0);
    Ok(DualState {
        lower: state.lower.iter().zip(&residual[..n]).map(|(&m, &g)| project(m, g)).collect(),
        upper: state.upper.iter().zip(&residual[n..]).map(|(&m, &g)| project(m, g)).collect(),
    })
}

/// `alpha = R (mu_lower - mu_upper)`, `beta = X (mu_lower - mu_upper)`.
pub fn compute_signals(model: &LinearGridModel, state: &DualState) -> Result<IncentiveSignal> {
    check_len("dual state", model.nodes(), state.nodes())?;
    check_len("dual state", model.nodes(), state.upper.len())?;
    let net = DVector::from_vec(state.net());
    Ok(IncentiveSignal {
        alpha: (&model.r * &net).as_slice().to_vec(),
        beta: (&model.x * &net).as_slice().to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum StepsizeSchedule {
    Constant { epsilon: f64 },
    /// `1 / t` during slow frame `t`.
    Diminishing,
}

impl StepsizeSchedule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            StepsizeSchedule::Constant { epsilon } if !(epsilon > 0.0) || !epsilon.is_finite() => Err(
                Error::Parameter(format!("constant stepsize must be positive, got {epsilon}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Fast iteration `k = t M + m` with `0 <= m < M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimClock {
    k: u64,
    ratio: u64,
}

impl SimClock {
    pub fn new(k: u64, ratio: u64) -> Result<Self> {
        if ratio == 0 {
            return Err(Error::Clock("slow-to-fast ratio M must be at least 1".to_string()));
        }
        Ok(SimClock { k, ratio })
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn ratio(&self) -> u64 {
        self.ratio
    }

    pub fn frame(&self) -> u64 {
        self.k / self.ratio
    }

    pub fn offset(&self) -> u64 {
        self.k % self.ratio
    }

    pub fn is_slow_update(&self) -> bool {
        self.offset() == 0
    }

    pub fn tick(&mut self) {
        self.k += 1;
    }
}

pub fn stepsize(schedule: &StepsizeSchedule, clock: &SimClock) -> Result<f64> {
    match *schedule {
        StepsizeSchedule::Constant { epsilon } => Ok(epsilon),
        StepsizeSchedule::Diminishing => {
            let t = clock.frame();
            if t == 0 {
                return Err(Error::Clock(format!(
                    "diminishing stepsize undefined in frame 0 (k = {}, M = {})",
                    clock.k(),
                    clock.ratio()
                )));
            }
            Ok(1.0 / t as f64)
        }
    }
}

/// `sum_i C_i(z_i) + mu^T g(z)`.
pub fn lagrangian_value(total_cost: f64, residual: &[f64], state: &DualState) -> Result<f64> {
    let n = state.nodes();
    check_len("constraint residual", 2 * n, residual.len())?;
    let penalty: f64 = state
        .lower
        .iter()
        .chain(&state.upper)
        .zip(residual)
        .map(|(mu, g)| mu * g)
        .sum();
    Ok(total_cost + penalty)
}

/// The dual function at a point together with the minimizers that attain it.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEvaluation {
    pub value: f64,
    pub signals: IncentiveSignal,
    pub responses: Vec<RelaxedResponse>,
    /// `g(z(mu))`, a supergradient of the dual function at `mu`.
    pub residual: Vec<f64>,
}

/// The part of the Lagrangian that does not depend on device setpoints:
/// `mu_lower^T (v_min - v_base) + mu_upper^T (v_base - v_max)`, where
/// `v_base` is the voltage produced by baseline injections alone.
pub fn dual_constant(instance: &Instance, state: &DualState) -> Result<f64> {
    let (p0, q0) = instance.baseline();
    let v_base = instance.model.linear_voltage(&p0, &q0)?;
    let residual = instance.model.constraint_residual(&v_base)?;
    lagrangian_value(0.0, &residual, state)
}

/// `h(mu) = min_z L(z, mu)`, evaluated customer by customer.
pub fn dual_function_value(
    instance: &Instance,
    state: &DualState,
    route: BestResponseRoute,
    tolerance: f64,
) -> Result<DualEvaluation> {
    if !(tolerance > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tolerance}")));
    }
    let signals = compute_signals(&instance.model, state)?;
    let responses = instance
        .customers
        .iter()
        .map(|c| {
            let i = c.node - 1;
            customer_best_response(c, signals.alpha[i], signals.beta[i], route, tolerance)
        })
        .collect::<Result<Vec<_>>>()?;
    let value = dual_value_from_responses(instance, state, &signals, &responses)?;
    let (p, q) = instance.relaxed_injections(&responses)?;
    let v = instance.model.linear_voltage(&p, &q)?;
    let residual = instance.model.constraint_residual(&v)?;
    Ok(DualEvaluation {
        value,
        signals,
        responses,
        residual,
    })
}

/// Sums the customer objectives at the given responses plus the dual constant.
pub fn dual_value_from_responses(
    instance: &Instance,
    state: &DualState,
    signals: &IncentiveSignal,
    responses: &[RelaxedResponse],
) -> Result<f64> {
    check_len("customer responses", instance.customers.len(), responses.len())?;
    let customers: f64 = instance
        .customers
        .iter()
        .zip(responses)
        .map(|(c, r)| {
            let i = c.node - 1;
            c.objective(&r.fast, &r.slow, signals.alpha[i], signals.beta[i])
        })
        .sum();
    Ok(customers + dual_constant(instance, state)?)
}

/// `h_F(mu | z_S)`: the dual function with slow setpoints (W) held fixed.
pub fn reduced_dual_function_value(
    instance: &Instance,
    state: &DualState,
    slow: &[Vec<f64>],
    tolerance: f64,
) -> Result<f64> {
    check_len("slow setpoints", instance.customers.len(), slow.len())?;
    let signals = compute_signals(&instance.model, state)?;
    let mut total = dual_constant(instance, state)?;
    for (c, s) in instance.customers.iter().zip(slow) {
        let i = c.node - 1;
        let (alpha, beta) = (signals.alpha[i], signals.beta[i]);
        let fast = crate::devices::fast_conditional_best_response(c, alpha, beta, BestResponseRoute::ClosedForm, tolerance);
        total += c.objective(&fast, s, alpha, beta);
    }
    Ok(total)
}
