//! Scenario configuration, presets, profile ingestion, orchestration and
//! report export.

pub mod config;
pub mod inventory;
pub mod manifest;
pub mod profiles;
pub mod reports;
pub mod runner;
pub mod synth;

pub use config::{load_scenario, LimitBand, Preset, ProfileRefs, ScenarioConfig, ScenarioSource};
pub use inventory::{DeviceInventory, ProfileSnapshot, TclGrouping};
pub use manifest::{InputDigest, RunManifest};
pub use profiles::{ingest_profile, synthetic_profiles, write_profile_file, ProfileKind, ProfileSeries};
pub use reports::{emit_reports, write_fig3, TraceCsvSink};
pub use runner::{
    run_scenario, scenario_variance_report, uncontrolled_voltage, PresetVariance, RunOptions, ScenarioRun,
    VarianceReport,
};
pub use synth::random_slater_instance;

use crate::error::Result;
use crate::grid::{FeederTopology, VoltageLimits};
use crate::instance::Instance;
use crate::recovery::{robust_limits, RobustBounds};

/// A scenario turned into a concrete instance at its operating timestep.
#[derive(Debug, Clone)]
pub struct BuiltScenario {
    pub config: ScenarioConfig,
    /// Instance whose model carries the operating (robust) limits.
    pub instance: Instance,
    pub nominal: VoltageLimits,
    pub robust: RobustBounds,
    pub inventory: DeviceInventory,
    pub profiles: Vec<ProfileSeries>,
    pub warnings: Vec<String>,
}

impl BuiltScenario {
    pub fn build(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let topology = match (&config.feeder, config.preset) {
            (Some(path), _) => FeederTopology::from_path(path)?,
            (None, Some(p)) => FeederTopology::from_toml_str(p.feeder_toml(), &format!("<{}>", p.name()))?,
            (None, None) => unreachable!("validated"),
        };
        let inventory = match (&config.devices, config.preset) {
            (Some(path), _) => DeviceInventory::from_path(path)?,
            (None, Some(p)) => DeviceInventory::from_toml_str(p.devices_toml(), &format!("<{} devices>", p.name()))?,
            (None, None) => unreachable!("validated"),
        };
        let n = topology.nodes;
        let base = topology.base_kva;

        let synthetic = if config.profiles.synthetic {
            synthetic_profiles(&inventory, n, base)
        } else {
            Vec::new()
        };
        let mut profiles = Vec::new();
        let mut warnings = Vec::new();
        let refs = &config.profiles;
        for (kind, path) in [
            (ProfileKind::LoadP, &refs.load_p),
            (ProfileKind::LoadQ, &refs.load_q),
            (ProfileKind::PvAvailable, &refs.pv_available),
            (ProfileKind::Ambient, &refs.ambient),
        ] {
            let series = match path {
                Some(p) => Some(ingest_profile(p, kind, n, base)?),
                None => synthetic.iter().find(|s| s.kind == kind).cloned(),
            };
            if let Some(s) = series {
                warnings.extend(s.warnings.iter().cloned());
                profiles.push(s);
            }
        }
        let t = refs.timestep;
        let pick = |kind: ProfileKind| -> Result<Option<Vec<f64>>> {
            match profiles.iter().find(|s| s.kind == kind) {
                Some(s) if kind == ProfileKind::Ambient => s.at_present(t).map(Some),
                Some(s) => s.at(t).map(Some),
                None => Ok(None),
            }
        };
        let snapshot = ProfileSnapshot {
            load_p: pick(ProfileKind::LoadP)?,
            load_q: pick(ProfileKind::LoadQ)?,
            pv_available: pick(ProfileKind::PvAvailable)?,
            ambient: pick(ProfileKind::Ambient)?,
        };
        let customers = inventory.to_customers(n, base, config.grouping, &snapshot)?;
        let nominal = config.nominal_limits(n);
        let robust = robust_limits(&nominal, config.delta)?;
        let instance = Instance::new(topology, robust.limits.clone(), customers)?;
        Ok(BuiltScenario {
            config: config.clone(),
            instance,
            nominal,
            robust,
            inventory,
            profiles,
            warnings,
        })
    }
}

/// Output of [`run_to_directory`].
#[derive(Debug, Clone)]
pub struct DirectoryRun {
    pub built: BuiltScenario,
    pub run: ScenarioRun,
    pub manifest: RunManifest,
    pub files: Vec<std::path::PathBuf>,
}

/// Digests the inputs, writes `manifest.json`, streams `trace.csv` (and
/// `dual.csv` if requested) and emits the reports into `out`. A failed run
/// still leaves the partial trace on disk.
pub fn run_to_directory(
    config: &ScenarioConfig,
    out: &std::path::Path,
    options: &RunOptions,
    dual_csv: bool,
    plots: bool,
) -> Result<DirectoryRun> {
    let manifest = RunManifest::create(config, out)?;
    let built = BuiltScenario::build(config)?;
    std::fs::create_dir_all(out).map_err(|e| crate::error::Error::io(out, e))?;
    manifest.write(&out.join(manifest::MANIFEST_FILE))?;
    let mut sink = TraceCsvSink::create(out, &built.instance, dual_csv)?;
    let run = run_scenario(&built, &mut sink, options);
    let mut files = sink.finish()?;
    let run = run?;
    files.extend(emit_reports(&run, &built, out, plots)?);
    files.push(out.join(manifest::MANIFEST_FILE));
    Ok(DirectoryRun {
        built,
        run,
        manifest,
        files,
    })
}
