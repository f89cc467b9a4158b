use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::devices::{tcl_relaxed_best_response, BestResponseRoute};
use crate::error::Result;
use crate::grid::{ac_power_flow, VoltageLimits, SWEEP_DEFAULT_TOLERANCE};
use crate::instance::Instance;
use crate::recovery::{variance_bound_device_sum, variance_upper_bound};
use crate::scenario::config::ScenarioConfig;
use crate::scenario::BuiltScenario;
use crate::sim::{
    exact_relaxation_check, oracle_solve, run_two_timescale, ConvergenceDetector, Flow, NullSink, OracleOptions,
    OracleSolution, RelaxationReport, RunOutcome, RunningStats, TraceRecord, TraceSink,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub solve_oracle: bool,
    /// End the run once the post-convergence sample budget is filled.
    pub stop_when_sampled: bool,
    pub detector_window: usize,
    pub detector_rel_tol: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            solve_oracle: true,
            stop_when_sampled: false,
            detector_window: ConvergenceDetector::DEFAULT_WINDOW,
            detector_rel_tol: ConvergenceDetector::DEFAULT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fig2Row {
    pub k: u64,
    pub v: f64,
    pub running_mean: f64,
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub outcome: RunOutcome,
    pub oracle: Option<OracleSolution>,
    pub relaxation: Option<RelaxationReport>,
    /// Iteration at which the running mean was declared converged.
    pub converged_at: Option<u64>,
    /// Statistics of the post-convergence samples.
    pub post: RunningStats,
    /// Post-convergence samples at or above the nominal upper limit, per node.
    pub upper_violations: Vec<u64>,
    /// Post-convergence samples at or below the nominal lower limit, per node.
    pub lower_violations: Vec<u64>,
    /// AC voltage with every device at its own cost minimizer.
    pub uncontrolled: Vec<f64>,
    /// 1-based node tracked in the fig2 series.
    pub fig2_node: usize,
    pub fig2: Vec<Fig2Row>,
}

/// AC voltages with devices ignoring prices: PVs at full output without
/// reactive power, TCLs at their unpriced relaxed setpoint.
pub fn uncontrolled_voltage(instance: &Instance) -> Result<Vec<f64>> {
    let injections: Vec<(f64, f64)> = instance
        .customers
        .iter()
        .map(|c| {
            let fast: Vec<_> = c.pvs.iter().map(|pv| pv.cost_minimizer()).collect();
            let slow: Vec<_> = c
                .tcls
                .iter()
                .map(|t| tcl_relaxed_best_response(t, 0.0).unwrap_or_else(|_| t.least_violation_rate()))
                .collect();
            c.device_injection(&fast, &slow)
        })
        .collect();
    let (p, q) = instance.net_injections(&injections)?;
    ac_power_flow(&instance.topology, &p, &q, SWEEP_DEFAULT_TOLERANCE)
}

struct Telemetry<'a> {
    inner: &'a mut dyn TraceSink,
    detector: ConvergenceDetector,
    converged_at: Option<u64>,
    post: RunningStats,
    budget: u64,
    stop_when_sampled: bool,
    nominal: &'a VoltageLimits,
    upper: Vec<u64>,
    lower: Vec<u64>,
    fig2_node: usize,
    fig2: Vec<Fig2Row>,
}

impl TraceSink for Telemetry<'_> {
    fn record(&mut self, r: &TraceRecord) -> Result<Flow> {
        let v = r.voltage();
        let i = self.fig2_node - 1;
        self.fig2.push(Fig2Row {
            k: r.k,
            v: v[i],
            running_mean: r.running_mean_v[i],
        });
        if self.converged_at.is_none() && self.detector.observe(&r.running_mean_v) {
            self.converged_at = Some(r.k);
        } else if self.converged_at.is_some() && self.post.count() < self.budget {
            self.post.push(v, r.dual_value);
            for (j, &vj) in v.iter().enumerate() {
                if vj >= self.nominal.upper[j] {
                    self.upper[j] += 1;
                }
                if vj <= self.nominal.lower[j] {
                    self.lower[j] += 1;
                }
            }
        }
        let flow = self.inner.record(r)?;
        if self.stop_when_sampled && self.post.count() >= self.budget {
            return Ok(Flow::Stop);
        }
        Ok(flow)
    }
}

/// Runs a built scenario: optional oracle and relaxation check, the uncontrolled
/// snapshot, then the closed loop with convergence detection and
/// post-convergence sampling. Every trace record is forwarded to `sink`.
pub fn run_scenario(built: &BuiltScenario, sink: &mut dyn TraceSink, options: &RunOptions) -> Result<ScenarioRun> {
    let instance = &built.instance;
    let n = instance.nodes();
    let oracle = if options.solve_oracle {
        Some(oracle_solve(instance, &OracleOptions::default())?)
    } else {
        None
    };
    let relaxation = match &oracle {
        Some(sol) => Some(exact_relaxation_check(instance, sol, BestResponseRoute::Iterative, 1e-10)?),
        None => None,
    };
    let uncontrolled = uncontrolled_voltage(instance)?;
    let reference = oracle.as_ref().map_or(&uncontrolled, |o| &o.v);
    let fig2_node = reference
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(1, |(i, _)| i + 1);

    let mut telemetry = Telemetry {
        inner: sink,
        detector: ConvergenceDetector::new(options.detector_window, options.detector_rel_tol),
        converged_at: None,
        post: RunningStats::new(n),
        budget: built.config.post_samples,
        stop_when_sampled: options.stop_when_sampled,
        nominal: &built.nominal,
        upper: vec![0; n],
        lower: vec![0; n],
        fig2_node,
        fig2: Vec::with_capacity(built.config.iterations as usize),
    };
    let outcome = run_two_timescale(instance, &built.config.run_settings(), &mut telemetry)?;
    Ok(ScenarioRun {
        outcome,
        oracle,
        relaxation,
        converged_at: telemetry.converged_at,
        post: telemetry.post,
        upper_violations: telemetry.upper,
        lower_violations: telemetry.lower,
        uncontrolled,
        fig2_node,
        fig2: telemetry.fig2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetVariance {
    pub name: String,
    pub samples: u64,
    pub converged_at: Option<u64>,
    /// Per-node variance of the post-convergence voltage samples.
    pub variance: Vec<f64>,
    /// Worst-case bound `D_S / 4 * sum_j R_ij^2 * max span^2`.
    pub bound: Vec<f64>,
    /// `sum_j R_ij^2 * sum_d span_d^2 / 4`.
    pub device_sum_bound: Vec<f64>,
    /// Post-convergence mean voltage.
    pub mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub presets: Vec<PresetVariance>,
}

/// Runs each scenario until its post-convergence sample budget is filled and
/// reports per-node empirical variances next to the analytical bounds.
/// Scenarios run concurrently; each run is deterministic on its own.
pub fn scenario_variance_report(configs: &[ScenarioConfig]) -> Result<VarianceReport> {
    let presets = configs
        .par_iter()
        .map(|config| {
            let built = BuiltScenario::build(config)?;
            let options = RunOptions {
                solve_oracle: false,
                stop_when_sampled: true,
                ..RunOptions::default()
            };
            let run = run_scenario(&built, &mut NullSink, &options)?;
            let model = &built.instance.model;
            let spans = built.instance.slow_spans_worst_case();
            Ok(PresetVariance {
                name: config.name.clone(),
                samples: run.post.count(),
                converged_at: run.converged_at,
                variance: run.post.voltage_variance(),
                bound: variance_upper_bound(model, &spans),
                device_sum_bound: variance_bound_device_sum(model, &spans),
                mean: run.post.mean_voltage(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VarianceReport { presets })
}
