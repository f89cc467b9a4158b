//! Acceptance suite. Each criterion prints one PASS/FAIL line; the process
//! exits nonzero if any criterion fails.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voltdual::devices::BestResponseRoute;
use voltdual::dual::{dual_function_value, DualState, StepsizeSchedule};
use voltdual::recovery::{two_point_sample, variance_upper_bound, StreamFactory};
use voltdual::scenario::{
    random_slater_instance, run_scenario, run_to_directory, scenario_variance_report, BuiltScenario, RunManifest,
    RunOptions, ScenarioConfig,
};
use voltdual::sim::{
    exact_relaxation_check, oracle_solve, run_two_timescale, ConvergenceDetector, Flow, FnSink, NullSink,
    OracleOptions, RunSettings, RunningStats, VoltageMode,
};
use voltdual::Instance;

type Outcome = Result<(bool, String), String>;
type Criterion = (&'static str, fn() -> Outcome);

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Exact relaxation on random binding instances.
fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut binding = 0;
    for seed in 0..50 {
        let inst = random_slater_instance(5, seed, true).map_err(e)?;
        let sol = oracle_solve(&inst, &OracleOptions::default()).map_err(e)?;
        let rep = exact_relaxation_check(&inst, &sol, BestResponseRoute::Iterative, 1e-12).map_err(e)?;
        worst = worst.max(rep.max_primal_deviation);
        if sol.dual.max_entry() > 0.0 {
            binding += 1;
        }
    }
    let elapsed = start.elapsed();
    Ok((
        worst <= 1e-5 && elapsed < Duration::from_secs(60) && binding >= 25,
        format!("max deviation {worst:.2e} (<= 1e-5), {binding}/50 with binding limits, {elapsed:.1?} (< 60 s)"),
    ))
}

/// Convergence in mean on toy2 under both stepsize schedules.
fn criterion_2() -> Outcome {
    let start = Instant::now();
    let built = BuiltScenario::build(&ScenarioConfig::preset("toy2").map_err(e)?).map_err(e)?;
    let inst = &built.instance;
    let sol = oracle_solve(inst, &OracleOptions::default()).map_err(e)?;
    let mut pass = true;
    let mut notes = Vec::new();
    for (label, schedule) in [
        ("constant 0.1", StepsizeSchedule::Constant { epsilon: 0.1 }),
        ("1/t", StepsizeSchedule::Diminishing),
    ] {
        let settings = RunSettings {
            slow_ratio: 60,
            iterations: 20_000,
            stepsize: schedule,
            ..RunSettings::default()
        };
        let out = run_two_timescale(inst, &settings, &mut NullSink).map_err(e)?;
        let dv = max_abs_diff(&out.stats.mean_voltage(), &sol.v);
        let dh = (out.stats.dual_value.mean() - sol.dual_value).abs() / sol.dual_value.abs();
        pass &= dv <= 1e-3 && dh <= 5e-3;
        notes.push(format!("{label}: |v-v*| {dv:.2e} (<= 1e-3), h rel {dh:.2e} (<= 5e-3)"));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    Ok((pass, format!("{}; {elapsed:.1?} (< 120 s)", notes.join("; "))))
}

/// Unbiased two-point recovery.
fn criterion_3() -> Outcome {
    let start = Instant::now();
    let n = 100_000;
    let mut stream = StreamFactory::new(2024).stream(1, 0);
    let (mut upper, mut sum) = (0u64, 0.0);
    for _ in 0..n {
        let o = two_point_sample(15_000.0, (0.0, 60_000.0), &mut stream);
        if o.realized == 60_000.0 {
            upper += 1;
        }
        sum += o.realized;
    }
    let freq = upper as f64 / n as f64;
    let mean = sum / n as f64;
    let sigma_mean = 60_000.0 * (0.25f64 * 0.75 / n as f64).sqrt();
    let elapsed = start.elapsed();
    Ok((
        (freq - 0.25).abs() <= 0.006 && (mean - 15_000.0).abs() <= 4.0 * sigma_mean && elapsed < Duration::from_secs(10),
        format!(
            "upper frequency {freq:.4} (0.25 +/- 0.006), mean {mean:.1} (15000 +/- {:.1}), {elapsed:.1?} (< 10 s)",
            4.0 * sigma_mean
        ),
    ))
}

/// Collects `samples` post-convergence voltage samples from a closed-loop run.
fn post_convergence_stats(inst: &Instance, settings: &RunSettings, samples: u64) -> Result<RunningStats, String> {
    let mut detector = ConvergenceDetector::default();
    let mut converged = false;
    let mut stats = RunningStats::new(inst.nodes());
    let mut sink = FnSink(|r: &voltdual::sim::TraceRecord| {
        if converged {
            stats.push(r.voltage(), None);
        } else {
            converged = detector.observe(&r.running_mean_v);
        }
        Ok(if stats.count() >= samples { Flow::Stop } else { Flow::Continue })
    });
    run_two_timescale(inst, settings, &mut sink).map_err(e)?;
    if stats.count() < samples {
        return Err(format!("only {} post-convergence samples", stats.count()));
    }
    Ok(stats)
}

/// Empirical variance against the bound on a 10-node, 20-TCL instance.
fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut inst = random_slater_instance(10, 11, true).map_err(e)?;
    for c in &mut inst.customers {
        let mut extra = c.tcls[0].clone();
        extra.t_in += 0.4;
        c.tcls.push(extra);
    }
    assert_eq!(inst.slow_device_count(), 20);
    let settings = RunSettings {
        iterations: 400_000,
        stepsize: StepsizeSchedule::Constant { epsilon: 0.5 },
        seed: 4,
        track_dual_value: false,
        ..RunSettings::default()
    };
    let stats = post_convergence_stats(&inst, &settings, 10_000)?;
    let bound = variance_upper_bound(&inst.model, &inst.slow_spans_worst_case());
    let var = stats.voltage_variance();
    let violations = var.iter().zip(&bound).filter(|(v, b)| v > b).count();
    let ratio = var.iter().zip(&bound).map(|(v, b)| v / b).fold(0.0, f64::max);
    let elapsed = start.elapsed();
    Ok((
        violations == 0 && elapsed < Duration::from_secs(300) && var.iter().any(|&v| v > 0.0),
        format!("{violations} nodes above the bound, max variance/bound {ratio:.3}, {elapsed:.1?} (< 300 s)"),
    ))
}

/// Robust limits: empirical violation frequency against the Chebyshev level.
fn criterion_5() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for delta in [0.001, 0.002, 0.004] {
        let mut config = ScenarioConfig::preset("ieee37-1").map_err(e)?;
        config.voltage_mode = VoltageMode::Linear;
        config.record_ac = false;
        config.delta = delta;
        config.iterations = 400_000;
        config.post_samples = 20_000;
        let built = BuiltScenario::build(&config).map_err(e)?;
        let options = RunOptions {
            solve_oracle: false,
            stop_when_sampled: true,
            ..RunOptions::default()
        };
        let run = run_scenario(&built, &mut NullSink, &options).map_err(e)?;
        let n = run.post.count() as f64;
        let var = run.post.voltage_variance();
        let mut worst_margin = f64::INFINITY;
        let mut max_freq: f64 = 0.0;
        for (i, &count) in run.upper_violations.iter().enumerate() {
            let f = count as f64 / n;
            let se = (f * (1.0 - f) / n).sqrt();
            let allowed = var[i] / (2.0 * delta * delta) + 3.0 * se;
            worst_margin = worst_margin.min(allowed - f);
            max_freq = max_freq.max(f);
        }
        pass &= worst_margin >= 0.0 && run.post.count() >= 20_000;
        notes.push(format!("delta {delta}: max freq {max_freq:.4}, min slack {worst_margin:.4}"));
    }
    // guarantee level of the 1.035 / 0.965 parameterization with the analytical bound
    let mut config = ScenarioConfig::preset("ieee37-2").map_err(e)?;
    config.delta = 0.015;
    let built = BuiltScenario::build(&config).map_err(e)?;
    let bound = variance_upper_bound(&built.instance.model, &built.instance.slow_spans_worst_case());
    let level = bound
        .iter()
        .map(|&b| built.robust.violation_probability_bound(b))
        .fold(0.0, f64::max);
    let upper = built.instance.model.limits.upper[0];
    pass &= level <= 0.05 && (upper - 1.035).abs() < 1e-12;
    notes.push(format!("limits {upper:.3}: guarantee level {:.2}% (<= 5%)", 100.0 * level));
    Ok((pass, notes.join("; ")))
}

/// Scenario variance ordering on the 37-bus preset.
fn criterion_6() -> Outcome {
    let start = Instant::now();
    let configs = ["ieee37-1", "ieee37-2", "ieee37-3"]
        .iter()
        .map(|n| ScenarioConfig::preset(n))
        .collect::<Result<Vec<_>, _>>()
        .map_err(e)?;
    let report = scenario_variance_report(&configs).map_err(e)?;
    let [p1, p2, p3] = &report.presets[..] else {
        return Err("expected three presets".into());
    };
    let nodes = p1.variance.len();
    let ordered = (0..nodes)
        .filter(|&i| p1.variance[i] > p2.variance[i] && p2.variance[i] > p3.variance[i])
        .count();
    let bound_ordered = (0..nodes).all(|i| p1.bound[i] > p3.bound[i]);
    let spread = max_abs_diff(&p1.mean, &p2.mean).max(max_abs_diff(&p2.mean, &p3.mean)).max(max_abs_diff(&p1.mean, &p3.mean));
    let samples = report.presets.iter().map(|p| p.samples).min().unwrap_or(0);
    let elapsed = start.elapsed();
    Ok((
        ordered == nodes && bound_ordered && spread <= 2e-3 && samples >= 10_000 && elapsed < Duration::from_secs(900),
        format!(
            "Var1 > Var2 > Var3 at {ordered}/{nodes} nodes, bound1 > bound3 everywhere: {bound_ordered}, mean spread {spread:.2e} (<= 2e-3), {samples} samples, {elapsed:.1?}"
        ),
    ))
}

/// End-to-end regulation with robust limits under the AC model.
fn criterion_7() -> Outcome {
    let config = ScenarioConfig::preset("ieee37").map_err(e)?;
    let built = BuiltScenario::build(&config).map_err(e)?;
    let upper = built.instance.model.limits.upper[0];
    let lower = built.instance.model.limits.lower[0];
    let options = RunOptions {
        solve_oracle: false,
        ..RunOptions::default()
    };
    let run = run_scenario(&built, &mut NullSink, &options).map_err(e)?;
    let over = run.uncontrolled.iter().filter(|&&v| v > 1.05).count();
    let vmax_uncontrolled = run.uncontrolled.iter().cloned().fold(f64::MIN, f64::max);
    let mean = run.post.mean_voltage();
    let half = run.post.ci95_half_widths();
    let top = mean.iter().zip(&half).map(|(m, h)| m + h).fold(f64::MIN, f64::max);
    Ok((
        over >= 1 && top <= 1.05 && run.post.count() >= 25_000 && (upper - 1.04).abs() < 1e-12 && (lower - 0.96).abs() < 1e-12,
        format!(
            "uncontrolled max {vmax_uncontrolled:.4} ({over} nodes > 1.05), controlled max mean+CI {top:.4} (<= 1.05), {} samples",
            run.post.count()
        ),
    ))
}

/// Manifest re-runs reproduce the trace byte for byte.
fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut identical = true;
    let mut notes = Vec::new();
    for name in ["toy2", "ieee37-1"] {
        let mut config = ScenarioConfig::preset(name).map_err(e)?;
        config.iterations = 3_000;
        config.seed = 99;
        let first = dir.path().join(format!("{name}-a"));
        let options = RunOptions {
            solve_oracle: false,
            ..RunOptions::default()
        };
        run_to_directory(&config, &first, &options, true, false).map_err(e)?;
        let manifest = RunManifest::read(&first.join("manifest.json")).map_err(e)?;
        manifest.verify_inputs().map_err(e)?;
        let second = dir.path().join(format!("{name}-b"));
        run_to_directory(&manifest.scenario(), &second, &options, true, false).map_err(e)?;
        let mut parallel = manifest.scenario();
        parallel.parallel = true;
        let third = dir.path().join(format!("{name}-c"));
        run_to_directory(&parallel, &third, &options, true, false).map_err(e)?;
        let read = |d: &std::path::Path| std::fs::read(d.join("trace.csv")).map_err(e);
        let a = read(&first)?;
        let same = a == read(&second)? && a == read(&third)?;
        identical &= same && !a.is_empty();
        notes.push(format!("{name}: {} bytes, identical {same}", a.len()));
    }
    Ok((identical, notes.join("; ")))
}

/// Oracle against brute force and weak duality at random multipliers.
fn criterion_9() -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for name in ["toy1", "toy2"] {
        let built = BuiltScenario::build(&ScenarioConfig::preset(name).map_err(e)?).map_err(e)?;
        let inst = &built.instance;
        let sol = oracle_solve(inst, &OracleOptions::default()).map_err(e)?;
        let (grid, _, _) = common::grid_oracle_single_pv(inst);
        let gap = (grid - sol.primal_value).abs();
        let scale = sol.dual.max_entry().max(1.0);
        let mut worst: f64 = f64::NEG_INFINITY;
        for _ in 0..100 {
            let stacked: Vec<f64> = (0..2 * inst.nodes()).map(|_| rng.gen_range(0.0..2.0 * scale)).collect();
            let h = dual_function_value(inst, &DualState::from_stacked(&stacked), BestResponseRoute::ClosedForm, 1e-12)
                .map_err(e)?
                .value;
            worst = worst.max(h - sol.primal_value);
        }
        pass &= gap <= 1e-4 && worst <= 1e-12;
        notes.push(format!("{name}: |oracle-grid| {gap:.1e}, max h(mu)-f* {worst:.2e}"));
    }
    Ok((pass, notes.join("; ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("exact relaxation", criterion_1),
        ("convergence in mean", criterion_2),
        ("unbiased recovery", criterion_3),
        ("variance bound", criterion_4),
        ("robust limits", criterion_5),
        ("scenario variance ordering", criterion_6),
        ("end-to-end regulation", criterion_7),
        ("determinism", criterion_8),
        ("oracle integrity", criterion_9),
    ];
    let results: Vec<Outcome> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria.iter().map(|(_, f)| s.spawn(f)).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err("panicked".to_string())))
            .collect()
    });
    let mut failures = 0;
    for (i, ((name, _), result)) in criteria.iter().zip(results).enumerate() {
        let (ok, detail) = result.unwrap_or_else(|err| (false, format!("error: {err}")));
        if !ok {
            failures += 1;
        }
        println!("{} criterion {} ({name}): {detail}", if ok { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
