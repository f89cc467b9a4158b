use std::fs;
use std::path::Path;

use voltdual::dual::StepsizeSchedule;
use voltdual::scenario::profiles::{ingest_profile_reader, write_profile, NOON};
use voltdual::scenario::{
    ingest_profile, load_scenario, run_to_directory, synthetic_profiles, BuiltScenario, ProfileKind, RunManifest,
    RunOptions, ScenarioConfig, ScenarioSource, TclGrouping,
};
use voltdual::sim::{RunningStats, VoltageMode};
use voltdual::{Error, ErrorKind};

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn ieee37_inventory_matches_the_feeder_description() {
    let built = BuiltScenario::build(&ScenarioConfig::preset("ieee37").unwrap()).unwrap();
    let inst = &built.instance;
    assert_eq!(inst.nodes(), 36);
    assert_eq!(inst.fast_device_count(), 18);
    assert_eq!(inst.slow_device_count(), 375);
    assert_eq!(built.config.slow_ratio, 60);
    assert_eq!(built.config.voltage_mode, VoltageMode::Ac);
    assert!((inst.model.limits.upper[0] - 1.04).abs() < 1e-12);
    assert!((built.nominal.upper[0] - 1.05).abs() < 1e-12);

    let combined = BuiltScenario::build(&ScenarioConfig::preset("ieee37-1").unwrap()).unwrap();
    let aggregated = BuiltScenario::build(&ScenarioConfig::preset("ieee37-3").unwrap()).unwrap();
    assert_eq!(combined.instance.slow_device_count(), 25);
    assert_eq!(aggregated.instance.slow_device_count(), 25);
    assert_eq!(combined.config.grouping, TclGrouping::Combined);
    let t1 = &combined.instance.customers.iter().find(|c| !c.tcls.is_empty()).unwrap().tcls[0];
    let t3 = &aggregated.instance.customers.iter().find(|c| !c.tcls.is_empty()).unwrap().tcls[0];
    assert_eq!(t1.rates.rates(), &[0.0, 60_000.0]);
    assert_eq!(t3.rates.rates().len(), 16);
    assert_eq!(t3.rates.max_span(), 4000.0);
}

#[test]
fn overrides_reach_the_run_settings() {
    let c = load_scenario(
        &ScenarioSource::Preset("toy2".into()),
        &[
            "iterations=1234".into(),
            "seed=9".into(),
            "stepsize={ mode = \"diminishing\" }".into(),
            "limits.upper=1.04".into(),
            "voltage_mode=ac".into(),
        ],
    )
    .unwrap();
    let s = c.run_settings();
    assert_eq!(s.iterations, 1234);
    assert_eq!(s.seed, 9);
    assert_eq!(s.stepsize, StepsizeSchedule::Diminishing);
    assert_eq!(s.voltage_mode, VoltageMode::Ac);
    assert_eq!(c.limits.upper, 1.04);
    let err = load_scenario(&ScenarioSource::Preset("toy2".into()), &["no_such_key=1".into()]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
    let err = load_scenario(&ScenarioSource::Preset("nowhere".into()), &[]).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Config);
}

#[test]
fn scenario_files_merge_over_presets_and_resolve_paths() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("load.csv"), "timestep,node,value,unit\n48,1,50,kw\n48,2,0,kw\n").unwrap();
    let file = dir.path().join("s.toml");
    fs::write(&file, "preset = \"toy2\"\niterations = 777\n\n[profiles]\nload_p = \"load.csv\"\n").unwrap();
    let c = load_scenario(&ScenarioSource::File(file), &[]).unwrap();
    assert_eq!(c.iterations, 777);
    assert_eq!(c.profiles.load_p.as_deref(), Some(dir.path().join("load.csv").as_path()));
    let built = BuiltScenario::build(&c).unwrap();
    let (p0, _) = built.instance.baseline();
    assert!((p0[0] + 0.05).abs() < 1e-12, "50 kW load on a 1000 kVA base: {}", p0[0]);
}

#[test]
fn scenario_parse_errors_report_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "name = \"x\"\npreset_missing = true\n\niterations = \"many\"\n").unwrap();
    match load_scenario(&ScenarioSource::File(file), &[]).unwrap_err() {
        Error::Parse { line, .. } => assert!(line == 2 || line == 4, "line {line}"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn profile_round_trip_is_exact() {
    let built = BuiltScenario::build(&ScenarioConfig::preset("ieee37").unwrap()).unwrap();
    let topo = &built.instance.topology;
    for series in synthetic_profiles(&built.inventory, topo.nodes, topo.base_kva) {
        let mut buf = Vec::new();
        write_profile(&series, &mut buf).unwrap();
        let back = ingest_profile_reader(buf.as_slice(), "mem", series.kind, topo.nodes, topo.base_kva).unwrap();
        assert_eq!(back.timesteps, series.timesteps);
        for (a, b) in back.values.iter().zip(&series.values) {
            assert_eq!(a, b);
        }
    }
}

#[test]
fn profile_units_and_row_errors() {
    let read = |text: &str, kind| ingest_profile_reader(text.as_bytes(), "t.csv", kind, 2, 1000.0);
    let s = read("timestep,node,value,unit\n0,1,200,kw\n0,2,0.1,pu\n", ProfileKind::LoadP).unwrap();
    assert_eq!(s.values[0][0], 0.2);
    assert_eq!(s.values[1][0], 0.1);
    let s = read("timestep,node,value\n0,1,-20\n", ProfileKind::LoadQ).unwrap();
    assert_eq!(s.values[0][0], -0.02);
    assert!(!s.present[1] && !s.warnings.is_empty());
    let cases = [
        ("timestep,node,value,unit\n0,1,1,kw\n0,1,2,kw\n", 3),
        ("timestep,node,value,unit\n0,1,1,kw\n0,5,2,kw\n", 3),
        ("timestep,node,value,unit\n0,1,x,kw\n", 2),
        ("timestep,node,value,unit\n0,1,1,degf\n", 2),
        ("time,node,value\n", 1),
    ];
    for (text, row) in cases {
        match read(text, ProfileKind::LoadP).unwrap_err() {
            Error::Ingestion { row: r, .. } => assert_eq!(r, row, "{text:?}"),
            other => panic!("unexpected {other}"),
        }
    }
    let err = read("timestep,node,value,unit\n0,1,1,kw\n0,1,2,kw\n", ProfileKind::LoadP).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Ingestion);
}

#[test]
fn empty_profile_gives_zero_baseline_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let s = ingest_profile(&empty, ProfileKind::LoadP, 2, 1000.0).unwrap();
    assert!(s.timesteps.is_empty());
    assert_eq!(s.at(NOON).unwrap(), vec![0.0, 0.0]);
    let mut c = ScenarioConfig::preset("toy2").unwrap();
    c.profiles.load_p = Some(empty.clone());
    c.profiles.load_q = Some(empty);
    let built = BuiltScenario::build(&c).unwrap();
    let (p0, q0) = built.instance.baseline();
    assert!(p0.iter().chain(&q0).all(|&x| x == 0.0));
    assert!(built.warnings.iter().any(|w| w.contains("empty")));
}

#[test]
fn synthetic_noon_snapshot_is_an_overvoltage() {
    let built = BuiltScenario::build(&ScenarioConfig::preset("ieee37").unwrap()).unwrap();
    let v = voltdual::scenario::uncontrolled_voltage(&built.instance).unwrap();
    assert!(v.iter().any(|&x| x > 1.05));
    let ambient = built.profiles.iter().find(|p| p.kind == ProfileKind::Ambient).unwrap();
    let noon = ambient.at(NOON).unwrap();
    assert!(noon.iter().all(|&t| (90.0..=100.0).contains(&t)));
}

#[test]
fn output_directory_contents_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ScenarioConfig::preset("toy2").unwrap();
    c.iterations = 14_000;
    c.post_samples = 2000;
    let out = dir.path().join("run");
    let res = run_to_directory(&c, &out, &RunOptions::default(), true, true).unwrap();
    for f in ["trace.csv", "dual.csv", "fig2.csv", "fig4.csv", "summary.json", "manifest.json", "fig2.svg", "fig4.svg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }

    let (_, fig2) = csv_rows(&out.join("fig2.csv"));
    assert_eq!(fig2.len(), 14_000);
    let (header, trace) = csv_rows(&out.join("trace.csv"));
    assert_eq!(trace.len(), 14_000);
    let (_, dual) = csv_rows(&out.join("dual.csv"));
    assert_eq!(dual.len(), 14_000 * 2);

    // recompute the confidence intervals from the trace
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let converged = summary["converged_at"].as_u64().expect("toy2 converges");
    assert_eq!(Some(converged), res.run.converged_at);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let (v1, v2) = (col("v_1"), col("v_2"));
    let mut stats = RunningStats::new(2);
    for row in trace.iter().filter(|r| r[0].parse::<u64>().unwrap() > converged).take(2000) {
        stats.push(&[row[v1].parse().unwrap(), row[v2].parse().unwrap()], None);
    }
    assert_eq!(stats.count(), 2000);
    let (_, fig4) = csv_rows(&out.join("fig4.csv"));
    for (i, row) in fig4.iter().enumerate() {
        let s = &stats.voltage[i];
        let half = 1.96 * s.std_dev() / (s.count() as f64).sqrt();
        let mean: f64 = row[2].parse().unwrap();
        let hi: f64 = row[4].parse().unwrap();
        assert!((mean - s.mean()).abs() < 1e-12);
        assert!((hi - (s.mean() + half)).abs() < 1e-12);
    }

    for key in [
        "oracle",
        "relaxation_deviation",
        "variance_bound",
        "violation_probability_bound",
        "upper_violation_frequency",
        "uncontrolled_v",
        "max_signal",
        "post_mean_v",
    ] {
        assert!(!summary[key].is_null(), "{key} missing");
    }
    assert_eq!(summary["post_samples"].as_u64(), Some(2000));

    let manifest = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(manifest.scenario(), c);
    assert_eq!(manifest.seed, 1);
}

#[test]
fn manifest_detects_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let load = dir.path().join("load.csv");
    fs::write(&load, "timestep,node,value\n48,1,100\n48,2,0\n").unwrap();
    let mut c = ScenarioConfig::preset("toy2").unwrap();
    c.iterations = 200;
    c.profiles.load_p = Some(load.clone());
    let out = dir.path().join("run");
    let options = RunOptions {
        solve_oracle: false,
        ..RunOptions::default()
    };
    run_to_directory(&c, &out, &options, false, false).unwrap();
    let m = RunManifest::read(&out.join("manifest.json")).unwrap();
    assert_eq!(m.inputs.len(), 1);
    m.verify_inputs().unwrap();
    fs::write(&load, "timestep,node,value\n48,1,101\n48,2,0\n").unwrap();
    assert!(m.verify_inputs().is_err());
}

#[test]
fn divergent_run_leaves_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = ScenarioConfig::preset("toy2").unwrap();
    c.stepsize = StepsizeSchedule::Constant { epsilon: 1e12 };
    let out = dir.path().join("run");
    let options = RunOptions {
        solve_oracle: false,
        ..RunOptions::default()
    };
    let err = run_to_directory(&c, &out, &options, false, false).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Divergence);
    let (_, rows) = csv_rows(&out.join("trace.csv"));
    assert!(!rows.is_empty());
}
