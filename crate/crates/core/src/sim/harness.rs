//! The two-timescale closed loop.
//!
//! Every fast iteration `k = t M + m` the operator publishes signals built
//! from its current multipliers. When `m == 0` each customer solves its joint
//! relaxed problem and draws realized TCL rates whose expectation equals the
//! relaxed setpoint; otherwise only PV setpoints are re-solved with TCLs held.
//! The operator then evaluates voltages, steps the multipliers and emits one
//! [`TraceRecord`]. Customers only ever report injections back.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::devices::{
    fast_conditional_best_response, tcl_relaxed_best_response, BestResponseRoute, CustomerDecision, CustomerSpec,
};
use crate::dual::{
    compute_signals, dual_ascent_step, dual_constant, lagrangian_value, stepsize, DualState, IncentiveSignal,
    SimClock, StepsizeSchedule, DUAL_DIVERGENCE_SENTINEL,
};
use crate::error::{Error, Result};
use crate::grid::{ac_power_flow_with, SWEEP_DEFAULT_TOLERANCE};
use crate::instance::Instance;
use crate::recovery::{bracket_rates, two_point_sample, DeviceStream, StreamFactory};
use crate::sim::stats::RunningStats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VoltageMode {
    /// Dual updates use `Rp + Xq + a`.
    #[default]
    Linear,
    /// Dual updates use the backward/forward sweep.
    Ac,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    /// Slow-to-fast ratio `M`.
    pub slow_ratio: u64,
    /// Number of fast iterations `K`.
    pub iterations: u64,
    pub stepsize: StepsizeSchedule,
    pub voltage_mode: VoltageMode,
    pub seed: u64,
    /// Also solve AC power flow when the dual update uses the linear model.
    pub record_ac: bool,
    /// Evaluate `h(mu(k))` every iteration.
    pub track_dual_value: bool,
    pub parallel: bool,
    pub tolerance: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            slow_ratio: 60,
            iterations: 20_000,
            stepsize: StepsizeSchedule::Constant { epsilon: 0.1 },
            voltage_mode: VoltageMode::Linear,
            seed: 0,
            record_ac: false,
            track_dual_value: true,
            parallel: false,
            tolerance: 1e-9,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.slow_ratio == 0 {
            return Err(Error::Config("M must be at least 1".to_string()));
        }
        if self.iterations < self.slow_ratio {
            return Err(Error::Config(format!(
                "iterations K = {} must be at least M = {}",
                self.iterations, self.slow_ratio
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("solver tolerance must be positive".to_string()));
        }
        self.stepsize.validate()
    }

    /// First fast iteration: `k = M`, i.e. slow frame `t = 1`, `m = 0`.
    pub fn first_iteration(&self) -> u64 {
        self.slow_ratio
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordFlags {
    /// `(node, device)` of TCLs pinned because their comfort band is unreachable.
    pub hull_pinned: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: u64,
    pub slow_update: bool,
    pub epsilon: f64,
    /// Net nodal injections after the customers' update, p.u.
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Relaxed TCL setpoints in customer/device order, W.
    pub slow_relaxed: Vec<f64>,
    /// Realized TCL rates in customer/device order, W.
    pub slow_realized: Vec<f64>,
    pub v_linear: Vec<f64>,
    pub v_ac: Option<Vec<f64>>,
    pub uses_ac: bool,
    /// Multipliers the customers responded to.
    pub dual: DualState,
    pub signals: IncentiveSignal,
    /// `L(z(k+1), mu(k))` on the linear model.
    pub lagrangian: f64,
    /// `h(mu(k))`.
    pub dual_value: Option<f64>,
    pub running_mean_v: Vec<f64>,
    pub running_mean_h: Option<f64>,
    pub flags: RecordFlags,
}

impl TraceRecord {
    /// The voltage the operator used for this iteration's dual step.
    pub fn voltage(&self) -> &[f64] {
        match (&self.v_ac, self.uses_ac) {
            (Some(v), true) => v,
            _ => &self.v_linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Receives every trace record as it is produced.
pub trait TraceSink {
    fn record(&mut self, record: &TraceRecord) -> Result<Flow>;
}

impl TraceSink for Vec<TraceRecord> {
    fn record(&mut self, record: &TraceRecord) -> Result<Flow> {
        self.push(record.clone());
        Ok(Flow::Continue)
    }
}

/// Adapts a closure into a [`TraceSink`].
pub struct FnSink<F>(pub F);

impl<F: FnMut(&TraceRecord) -> Result<Flow>> TraceSink for FnSink<F> {
    fn record(&mut self, record: &TraceRecord) -> Result<Flow> {
        (self.0)(record)
    }
}

/// Discards records.
pub struct NullSink;

impl TraceSink for NullSink {
    fn record(&mut self, _: &TraceRecord) -> Result<Flow> {
        Ok(Flow::Continue)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub iterations: u64,
    pub stopped_early: bool,
    pub final_dual: DualState,
    pub final_signals: IncentiveSignal,
    /// Statistics over every iteration of the run.
    pub stats: RunningStats,
    pub max_signal: f64,
    /// Largest `||g(z(k))||_2` seen, the empirical counterpart of `G`.
    pub max_residual_norm: f64,
    pub hull_pinned_events: u64,
}

/// A customer's private state: its setpoints and one random stream per TCL.
struct Agent<'a> {
    spec: &'a CustomerSpec,
    decision: CustomerDecision,
    streams: Vec<DeviceStream>,
}

struct AgentStep {
    /// Customer objective at the joint relaxed optimum, when requested.
    objective: Option<f64>,
    pinned: Vec<usize>,
}

impl<'a> Agent<'a> {
    fn new(spec: &'a CustomerSpec, customer_index: usize, streams: &StreamFactory) -> Self {
        let slow = spec.tcls.iter().map(|t| t.rates.min()).collect::<Vec<_>>();
        Agent {
            spec,
            decision: CustomerDecision {
                fast: spec.pvs.iter().map(|pv| pv.cost_minimizer()).collect(),
                slow_relaxed: slow.clone(),
                slow_realized: slow,
            },
            streams: (0..spec.tcls.len())
                .map(|d| streams.stream(stream_node(spec, customer_index), d))
                .collect(),
        }
    }

    fn step(&mut self, alpha: f64, beta: f64, slow_update: bool, want_objective: bool, tol: f64) -> Result<AgentStep> {
        let spec = self.spec;
        let fast = fast_conditional_best_response(spec, alpha, beta, BestResponseRoute::ClosedForm, tol);
        let mut pinned = Vec::new();
        let mut relaxed = Vec::new();
        if slow_update || want_objective {
            let price = spec.slow_price(alpha);
            for (d, tcl) in spec.tcls.iter().enumerate() {
                let c = match tcl_relaxed_best_response(tcl, price) {
                    Ok(c) => c,
                    Err(Error::HullInfeasible { .. }) => {
                        pinned.push(d);
                        tcl.least_violation_rate()
                    }
                    Err(e) => return Err(e),
                };
                relaxed.push(c);
            }
        }
        if slow_update {
            for (d, tcl) in spec.tcls.iter().enumerate() {
                let bracket = bracket_rates(relaxed[d], &tcl.rates)?;
                let outcome = two_point_sample(relaxed[d], bracket, &mut self.streams[d]);
                self.decision.slow_realized[d] = outcome.realized;
            }
            self.decision.slow_relaxed = relaxed.clone();
        }
        let objective = want_objective.then(|| spec.objective(&fast, &relaxed, alpha, beta));
        self.decision.fast = fast;
        Ok(AgentStep { objective, pinned })
    }
}

/// Several customers may share a node, so the stream key uses the customer
/// index in the upper half to stay unique.
fn stream_node(spec: &CustomerSpec, customer_index: usize) -> usize {
    (customer_index << 16) | spec.node
}

/// Runs `settings.iterations` fast iterations starting at `k = M`, feeding
/// each record to `sink`. Deterministic for a given seed whether or not
/// customers are evaluated in parallel.
pub fn run_two_timescale(instance: &Instance, settings: &RunSettings, sink: &mut dyn TraceSink) -> Result<RunOutcome> {
    run_from(instance, settings, DualState::zeros(instance.nodes()), sink)
}

/// Same as [`run_two_timescale`] with a warm-started multiplier.
pub fn run_from(
    instance: &Instance,
    settings: &RunSettings,
    initial: DualState,
    sink: &mut dyn TraceSink,
) -> Result<RunOutcome> {
    settings.validate()?;
    let n = instance.nodes();
    let model = &instance.model;
    let tree = instance.topology.tree()?;
    let factory = StreamFactory::new(settings.seed);
    let mut agents: Vec<Agent> = instance
        .customers
        .iter()
        .enumerate()
        .map(|(i, c)| Agent::new(c, i, &factory))
        .collect();
    let (p0, q0) = instance.baseline();

    let mut dual = initial;
    let mut clock = SimClock::new(settings.first_iteration(), settings.slow_ratio)?;
    let mut stats = RunningStats::new(n);
    let mut max_signal: f64 = 0.0;
    let mut max_residual_norm: f64 = 0.0;
    let mut hull_pinned_events = 0u64;
    let mut signals = compute_signals(model, &dual)?;
    let mut done = 0u64;
    let mut stopped_early = false;

    while done < settings.iterations {
        let slow_update = clock.is_slow_update();
        let epsilon = stepsize(&settings.stepsize, &clock)?;
        let want_h = settings.track_dual_value;
        let tol = settings.tolerance;

        let steps: Vec<Result<AgentStep>> = if settings.parallel {
            agents
                .par_iter_mut()
                .map(|a| {
                    let i = a.spec.node - 1;
                    a.step(signals.alpha[i], signals.beta[i], slow_update, want_h, tol)
                })
                .collect()
        } else {
            agents
                .iter_mut()
                .map(|a| {
                    let i = a.spec.node - 1;
                    a.step(signals.alpha[i], signals.beta[i], slow_update, want_h, tol)
                })
                .collect()
        };

        let mut flags = RecordFlags::default();
        let mut objective_sum = 0.0;
        for (agent, step) in agents.iter().zip(steps) {
            let step = step?;
            if let Some(obj) = step.objective {
                objective_sum += obj;
            }
            for d in step.pinned {
                flags.hull_pinned.push((agent.spec.node, d));
            }
        }
        hull_pinned_events += flags.hull_pinned.len() as u64;

        // operator side: aggregate, evaluate voltages, step multipliers
        let mut p = p0.clone();
        let mut q = q0.clone();
        let mut cost = 0.0;
        for agent in &agents {
            let (dp, dq) = agent.decision.injection(agent.spec);
            p[agent.spec.node - 1] += dp;
            q[agent.spec.node - 1] += dq;
            cost += crate::devices::customer_cost(agent.spec, &agent.decision);
        }
        let v_linear = model.linear_voltage(&p, &q)?;
        let uses_ac = settings.voltage_mode == VoltageMode::Ac;
        let v_ac = if uses_ac || settings.record_ac {
            Some(ac_power_flow_with(&instance.topology, &tree, &p, &q, SWEEP_DEFAULT_TOLERANCE)?)
        } else {
            None
        };
        let linear_residual = model.constraint_residual(&v_linear)?;
        let residual = match (&v_ac, uses_ac) {
            (Some(v), true) => model.constraint_residual(v)?,
            _ => linear_residual.clone(),
        };
        let lagrangian = lagrangian_value(cost, &linear_residual, &dual)?;
        let dual_value = if want_h {
            Some(objective_sum + dual_constant(instance, &dual)?)
        } else {
            None
        };
        let used = match (&v_ac, uses_ac) {
            (Some(v), true) => v.as_slice(),
            _ => v_linear.as_slice(),
        };
        stats.push(used, dual_value);
        max_signal = max_signal.max(signals.max_abs());
        max_residual_norm = max_residual_norm.max(residual.iter().map(|g| g * g).sum::<f64>().sqrt());

        let record = TraceRecord {
            k: clock.k(),
            slow_update,
            epsilon,
            p,
            q,
            slow_relaxed: agents.iter().flat_map(|a| a.decision.slow_relaxed.iter().copied()).collect(),
            slow_realized: agents.iter().flat_map(|a| a.decision.slow_realized.iter().copied()).collect(),
            v_linear,
            v_ac,
            uses_ac,
            dual: dual.clone(),
            signals: signals.clone(),
            lagrangian,
            dual_value,
            running_mean_v: stats.mean_voltage(),
            running_mean_h: want_h.then(|| stats.dual_value.mean()),
            flags,
        };

        let next = dual_ascent_step(&dual, &residual, epsilon)?;
        let largest = next.max_entry();
        let flow = sink.record(&record)?;
        if !(largest <= DUAL_DIVERGENCE_SENTINEL) {
            return Err(Error::DualDivergence {
                iteration: clock.k(),
                value: largest,
                sentinel: DUAL_DIVERGENCE_SENTINEL,
            });
        }
        dual = next;
        signals = compute_signals(model, &dual)?;
        clock.tick();
        done += 1;
        if flow == Flow::Stop {
            stopped_early = done < settings.iterations;
            break;
        }
    }

    Ok(RunOutcome {
        iterations: done,
        stopped_early,
        final_dual: dual,
        final_signals: signals,
        stats,
        max_signal,
        max_residual_norm,
        hull_pinned_events,
    })
}
