use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dual::StepsizeSchedule;
use crate::error::{Error, Result};
use crate::grid::{parse_error, VoltageLimits};
use crate::recovery::robust_limits;
use crate::scenario::inventory::TclGrouping;
use crate::sim::{RunSettings, VoltageMode};

/// Built-in feeders and device inventories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy1,
    Toy2,
    Ieee37,
}

impl Preset {
    pub fn feeder_toml(self) -> &'static str {
        match self {
            Preset::Toy1 => include_str!("../../presets/toy1_feeder.toml"),
            Preset::Toy2 => include_str!("../../presets/toy2_feeder.toml"),
            Preset::Ieee37 => include_str!("../../presets/ieee37_feeder.toml"),
        }
    }

    pub fn devices_toml(self) -> &'static str {
        match self {
            Preset::Toy1 => include_str!("../../presets/toy1_devices.toml"),
            Preset::Toy2 => include_str!("../../presets/toy2_devices.toml"),
            Preset::Ieee37 => include_str!("../../presets/ieee37_devices.toml"),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Toy1 => "toy1",
            Preset::Toy2 => "toy2",
            Preset::Ieee37 => "ieee37",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileRefs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_p: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_q: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pv_available: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambient: Option<PathBuf>,
    /// Generate the built-in synthetic day for profiles not given as files.
    #[serde(default)]
    pub synthetic: bool,
    /// Timestep the operating point is taken from.
    #[serde(default = "default_timestep")]
    pub timestep: u64,
}

fn default_timestep() -> u64 {
    crate::scenario::profiles::NOON
}

impl Default for ProfileRefs {
    fn default() -> Self {
        ProfileRefs {
            load_p: None,
            load_q: None,
            pv_available: None,
            ambient: None,
            synthetic: false,
            timestep: default_timestep(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitBand {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// TCL grouping: "1" combined two-rate, "2" independent, "3" aggregate
    /// rates, "custom" as listed.
    #[serde(default)]
    pub grouping: TclGrouping,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feeder: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub devices: Option<PathBuf>,
    #[serde(default)]
    pub profiles: ProfileRefs,
    /// Slow-to-fast ratio `M`.
    pub slow_ratio: u64,
    /// Fast iterations `K`.
    pub iterations: u64,
    pub stepsize: StepsizeSchedule,
    /// Nominal limits, p.u.
    pub limits: LimitBand,
    /// Robust margin; the operator enforces the nominal band shrunk by `delta`.
    #[serde(default)]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub voltage_mode: VoltageMode,
    #[serde(default)]
    pub record_ac: bool,
    #[serde(default)]
    pub parallel: bool,
    /// Post-convergence samples used for variances and confidence intervals.
    #[serde(default = "default_post_samples")]
    pub post_samples: u64,
}

fn default_post_samples() -> u64 {
    25_000
}

impl ScenarioConfig {
    /// Built-in configuration by name: `toy1`, `toy2`, `ieee37` or
    /// `ieee37-1` / `ieee37-2` / `ieee37-3` for the TCL groupings.
    pub fn preset(name: &str) -> Result<Self> {
        let base = |preset: Preset, grouping, iterations, stepsize, limits, delta, mode, synthetic| ScenarioConfig {
            name: name.to_string(),
            preset: Some(preset),
            grouping,
            feeder: None,
            devices: None,
            profiles: ProfileRefs {
                synthetic,
                ..ProfileRefs::default()
            },
            slow_ratio: 60,
            iterations,
            stepsize,
            limits,
            delta,
            seed: 1,
            voltage_mode: mode,
            record_ac: false,
            parallel: false,
            post_samples: default_post_samples(),
        };
        let eps = |epsilon| StepsizeSchedule::Constant { epsilon };
        let band = LimitBand {
            lower: 0.95,
            upper: 1.05,
        };
        let ieee = |g| {
            let mut c = base(Preset::Ieee37, g, 60_000, eps(0.1), band, 0.01, VoltageMode::Ac, true);
            c.record_ac = true;
            c
        };
        Ok(match name {
            "toy1" => base(
                Preset::Toy1,
                TclGrouping::Custom,
                20_000,
                eps(1.0e4),
                LimitBand {
                    lower: 0.95,
                    upper: 1.005,
                },
                0.0,
                VoltageMode::Linear,
                false,
            ),
            "toy2" => base(Preset::Toy2, TclGrouping::Custom, 20_000, eps(0.1), band, 0.0, VoltageMode::Linear, false),
            "ieee37" | "ieee37-2" => ieee(TclGrouping::Independent),
            "ieee37-1" => ieee(TclGrouping::Combined),
            "ieee37-3" => ieee(TclGrouping::Aggregated),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.slow_ratio == 0 {
            return Err(Error::Config("slow_ratio (M) must be at least 1".to_string()));
        }
        if self.iterations < self.slow_ratio {
            return Err(Error::Config(format!(
                "iterations (K = {}) must be at least slow_ratio (M = {})",
                self.iterations, self.slow_ratio
            )));
        }
        let LimitBand { lower, upper } = self.limits;
        if !(lower.is_finite() && upper.is_finite() && lower > 0.0 && lower < upper) {
            return Err(Error::Config(format!("limits need 0 < lower < upper, got [{lower}, {upper}]")));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) || 2.0 * self.delta >= upper - lower {
            return Err(Error::Config(format!(
                "delta = {} must be >= 0 and leave a nonempty band inside [{lower}, {upper}]",
                self.delta
            )));
        }
        self.stepsize.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.preset.is_none() && (self.feeder.is_none() || self.devices.is_none()) {
            return Err(Error::Config("a scenario without preset needs feeder and devices files".to_string()));
        }
        Ok(())
    }

    pub fn nominal_limits(&self, nodes: usize) -> VoltageLimits {
        VoltageLimits::uniform(nodes, self.limits.lower, self.limits.upper)
    }

    /// Limits the operator enforces: nominal band shrunk by `delta`.
    pub fn operating_limits(&self, nodes: usize) -> Result<VoltageLimits> {
        Ok(robust_limits(&self.nominal_limits(nodes), self.delta)?.limits)
    }

    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            slow_ratio: self.slow_ratio,
            iterations: self.iterations,
            stepsize: self.stepsize,
            voltage_mode: self.voltage_mode,
            seed: self.seed,
            record_ac: self.record_ac,
            track_dual_value: true,
            parallel: self.parallel,
            ..RunSettings::default()
        }
    }

    /// Every input file the scenario reads, with a role label.
    pub fn input_files(&self) -> Vec<(&'static str, &Path)> {
        fn add<'a>(out: &mut Vec<(&'static str, &'a Path)>, role: &'static str, p: &'a Option<PathBuf>) {
            if let Some(p) = p {
                out.push((role, p.as_path()));
            }
        }
        let mut out = Vec::new();
        add(&mut out, "feeder", &self.feeder);
        add(&mut out, "devices", &self.devices);
        add(&mut out, "load_p", &self.profiles.load_p);
        add(&mut out, "load_q", &self.profiles.load_q);
        add(&mut out, "pv_available", &self.profiles.pv_available);
        add(&mut out, "ambient", &self.profiles.ambient);
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize scenario: {e}")))
    }
}

/// Where a scenario comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ScenarioSource {
    Preset(String),
    File(PathBuf),
}

/// Applies `key.path=value` overrides. Values are parsed as TOML and fall
/// back to plain strings.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cursor = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {part:?} is not a table")))?;
    }
    cursor.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(config: &ScenarioConfig) -> Result<toml::Table> {
    toml::Table::try_from(config).map_err(|e| Error::Config(format!("cannot serialize scenario: {e}")))
}

fn resolve(dir: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = dir.join(&*path);
        }
    }
}

/// Loads and validates a scenario. A file may name a `preset` whose values
/// it then overrides; relative paths resolve against the file's directory.
pub fn load_scenario(source: &ScenarioSource, overrides: &[String]) -> Result<ScenarioConfig> {
    let (mut table, dir) = match source {
        ScenarioSource::Preset(name) => (to_table(&ScenarioConfig::preset(name)?)?, None),
        ScenarioSource::File(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let origin = path.display().to_string();
            let file: toml::Table = toml::from_str(&text).map_err(|e| parse_error(&origin, &text, e))?;
            let table = match file.get("preset").and_then(|v| v.as_str()) {
                Some(name) => {
                    let mut base = to_table(&ScenarioConfig::preset(name)?)?;
                    if !file.contains_key("name") {
                        base.insert("name".into(), toml::Value::String(name.to_string()));
                    }
                    let mut file = file;
                    // the preset key may carry a grouping suffix
                    file.remove("preset");
                    merge(&mut base, file);
                    base
                }
                None => {
                    // direct parse keeps line numbers in field errors
                    toml::from_str::<ScenarioConfig>(&text).map_err(|e| parse_error(&origin, &text, e))?;
                    file
                }
            };
            (table, path.parent().map(Path::to_path_buf))
        }
    };
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let mut config: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    if let Some(dir) = dir {
        resolve(&dir, &mut config.feeder);
        resolve(&dir, &mut config.devices);
        resolve(&dir, &mut config.profiles.load_p);
        resolve(&dir, &mut config.profiles.load_q);
        resolve(&dir, &mut config.profiles.pv_available);
        resolve(&dir, &mut config.profiles.ambient);
    }
    config.validate()?;
    Ok(config)
}
