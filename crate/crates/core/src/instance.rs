use serde::{Deserialize, Serialize};

use crate::devices::{CustomerSpec, RelaxedResponse};
use crate::error::{check_len, Error, Result};
use crate::grid::{build_linear_model, FeederTopology, LinearGridModel, VoltageLimits};
use crate::recovery::{bracket_rates, SlowSpan};

/// A feeder, its linear model and the customers attached to it.
#[derive(Debug, Clone)]
pub struct Instance {
    pub topology: FeederTopology,
    pub model: LinearGridModel,
    pub customers: Vec<CustomerSpec>,
}

impl Instance {
    pub fn new(topology: FeederTopology, limits: VoltageLimits, customers: Vec<CustomerSpec>) -> Result<Self> {
        let model = build_linear_model(&topology, limits)?;
        for customer in &customers {
            customer.validate(topology.nodes)?;
        }
        Ok(Instance {
            topology,
            model,
            customers,
        })
    }

    pub fn nodes(&self) -> usize {
        self.model.nodes()
    }

    pub fn with_limits(&self, limits: VoltageLimits) -> Result<Self> {
        Ok(Instance {
            model: self.model.with_limits(limits)?,
            ..self.clone()
        })
    }

    /// Non-controllable injections aggregated by node.
    pub fn baseline(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.nodes();
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        for c in &self.customers {
            p[c.node - 1] += c.p0;
            q[c.node - 1] += c.q0;
        }
        (p, q)
    }

    /// Net nodal injections: baseline plus each customer's device injection.
    pub fn net_injections(&self, device: &[(f64, f64)]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("customer injections", self.customers.len(), device.len())?;
        let (mut p, mut q) = self.baseline();
        for (c, &(dp, dq)) in self.customers.iter().zip(device) {
            p[c.node - 1] += dp;
            q[c.node - 1] += dq;
        }
        Ok((p, q))
    }

    pub fn relaxed_injections(&self, responses: &[RelaxedResponse]) -> Result<(Vec<f64>, Vec<f64>)> {
        let device: Vec<_> = self
            .customers
            .iter()
            .zip(responses)
            .map(|(c, r)| r.injection(c))
            .collect();
        self.net_injections(&device)
    }

    pub fn slow_device_count(&self) -> usize {
        self.customers.iter().map(|c| c.tcls.len()).sum()
    }

    pub fn fast_device_count(&self) -> usize {
        self.customers.iter().map(|c| c.pvs.len()).sum()
    }

    /// Largest adjacent-rate gap of every TCL, in p.u.
    pub fn slow_spans_worst_case(&self) -> Vec<SlowSpan> {
        self.customers
            .iter()
            .flat_map(|c| {
                c.tcls.iter().map(move |t| SlowSpan {
                    node: c.node,
                    span: t.rates.max_span() * c.pu_per_watt,
                })
            })
            .collect()
    }

    /// Bracket width around each relaxed TCL setpoint, in p.u.
    pub fn slow_spans_at(&self, responses: &[RelaxedResponse]) -> Result<Vec<SlowSpan>> {
        let mut spans = Vec::with_capacity(self.slow_device_count());
        for (c, r) in self.customers.iter().zip(responses) {
            for (t, &c_star) in c.tcls.iter().zip(&r.slow) {
                let (lo, hi) = bracket_rates(c_star, &t.rates)?;
                spans.push(SlowSpan {
                    node: c.node,
                    span: (hi - lo) * c.pu_per_watt,
                });
            }
        }
        Ok(spans)
    }

    pub fn summary(&self) -> InstanceSummary {
        InstanceSummary {
            nodes: self.nodes(),
            customers: self.customers.len(),
            fast_devices: self.fast_device_count(),
            slow_devices: self.slow_device_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceSummary {
    pub nodes: usize,
    pub customers: usize,
    pub fast_devices: usize,
    pub slow_devices: usize,
}

pub(crate) fn ensure_finite(what: &str, values: &[f64]) -> Result<()> {
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!("{what} contains non-finite value {bad}")));
    }
    Ok(())
}
