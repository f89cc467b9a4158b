use serde::{Deserialize, Serialize};

use crate::devices::{customer_best_response, BestResponseRoute};
use crate::dual::compute_signals;
use crate::error::{check_len, Result};
use crate::instance::Instance;
use crate::sim::oracle::OracleSolution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelaxationReport {
    /// Largest per-device deviation between the customers' own responses to
    /// the optimal signals and the oracle's primal solution, p.u.
    pub max_primal_deviation: f64,
    /// Largest deviation of the resulting voltage profile, p.u.
    pub max_voltage_deviation: f64,
}

/// Re-solves every customer problem at the signals induced by `solution.dual`
/// and compares the result with the oracle's primal point. TCL setpoints are
/// compared as injections so all deviations share the p.u. scale.
pub fn exact_relaxation_check(
    instance: &Instance,
    solution: &OracleSolution,
    route: BestResponseRoute,
    tolerance: f64,
) -> Result<RelaxationReport> {
    check_len("oracle responses", instance.customers.len(), solution.responses.len())?;
    let signals = compute_signals(&instance.model, &solution.dual)?;
    let mut max_dev: f64 = 0.0;
    let mut responses = Vec::with_capacity(instance.customers.len());
    for (c, star) in instance.customers.iter().zip(&solution.responses) {
        let i = c.node - 1;
        let own = customer_best_response(c, signals.alpha[i], signals.beta[i], route, tolerance)?;
        for (a, b) in own.fast.iter().zip(&star.fast) {
            max_dev = max_dev.max((a.0 - b.0).abs()).max((a.1 - b.1).abs());
        }
        for (a, b) in own.slow.iter().zip(&star.slow) {
            max_dev = max_dev.max((a - b).abs() * c.pu_per_watt);
        }
        responses.push(own);
    }
    let (p, q) = instance.relaxed_injections(&responses)?;
    let v = instance.model.linear_voltage(&p, &q)?;
    let max_voltage_deviation = v.iter().zip(&solution.v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(RelaxationReport {
        max_primal_deviation: max_dev,
        max_voltage_deviation,
    })
}
