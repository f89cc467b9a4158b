//! Time-indexed per-node profiles in long CSV form: `timestep,node,value[,unit]`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::inventory::DeviceInventory;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Real consumption.
    LoadP,
    /// Reactive consumption.
    LoadQ,
    /// Available PV power.
    PvAvailable,
    /// Outdoor temperature, °F.
    Ambient,
}

impl ProfileKind {
    pub const ALL: [ProfileKind; 4] = [ProfileKind::LoadP, ProfileKind::LoadQ, ProfileKind::PvAvailable, ProfileKind::Ambient];

    pub fn name(self) -> &'static str {
        match self {
            ProfileKind::LoadP => "load_p",
            ProfileKind::LoadQ => "load_q",
            ProfileKind::PvAvailable => "pv_available",
            ProfileKind::Ambient => "ambient",
        }
    }

    /// Unit assumed when the unit column is absent.
    pub fn default_unit(self) -> &'static str {
        match self {
            ProfileKind::LoadQ => "kvar",
            ProfileKind::Ambient => "degf",
            _ => "kw",
        }
    }

    /// Unit written on export.
    fn stored_unit(self) -> &'static str {
        match self {
            ProfileKind::Ambient => "degf",
            _ => "pu",
        }
    }

    /// Factor that converts `unit` to the stored unit.
    fn unit_scale(self, unit: &str, base_kva: f64) -> Option<f64> {
        let unit = unit.to_ascii_lowercase();
        match (self, unit.as_str()) {
            (ProfileKind::Ambient, "degf" | "f") => Some(1.0),
            (ProfileKind::Ambient, _) => None,
            (_, "pu") => Some(1.0),
            (ProfileKind::LoadQ, "kvar") => Some(1.0 / base_kva),
            (ProfileKind::LoadP | ProfileKind::PvAvailable, "kw") => Some(1.0 / base_kva),
            _ => None,
        }
    }
}

/// A dense per-node series. Power values are p.u., temperatures °F.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSeries {
    pub kind: ProfileKind,
    pub timesteps: Vec<u64>,
    /// `values[node - 1][t]`, aligned with `timesteps`.
    pub values: Vec<Vec<f64>>,
    /// Whether the node appeared in the source.
    pub present: Vec<bool>,
    #[serde(skip)]
    pub warnings: Vec<String>,
}

impl ProfileSeries {
    pub fn nodes(&self) -> usize {
        self.values.len()
    }

    /// Per-node values at `timestep`. An empty series yields zeros.
    pub fn at(&self, timestep: u64) -> Result<Vec<f64>> {
        if self.timesteps.is_empty() {
            return Ok(vec![0.0; self.nodes()]);
        }
        let t = self.timesteps.binary_search(&timestep).map_err(|_| {
            Error::Config(format!("{} profile has no timestep {timestep}", self.kind.name()))
        })?;
        Ok(self.values.iter().map(|v| v[t]).collect())
    }

    /// Like [`ProfileSeries::at`] but with NaN at nodes absent from the source.
    pub fn at_present(&self, timestep: u64) -> Result<Vec<f64>> {
        let mut v = self.at(timestep)?;
        for (x, &p) in v.iter_mut().zip(&self.present) {
            if !p {
                *x = f64::NAN;
            }
        }
        Ok(v)
    }
}

pub fn ingest_profile(path: &Path, kind: ProfileKind, nodes: usize, base_kva: f64) -> Result<ProfileSeries> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_profile_reader(file, &path.display().to_string(), kind, nodes, base_kva)
}

/// Parses a profile. Nodes absent from the data get an all-zero series and a
/// warning; malformed rows fail with their 1-based line number.
pub fn ingest_profile_reader<R: Read>(
    reader: R,
    origin: &str,
    kind: ProfileKind,
    nodes: usize,
    base_kva: f64,
) -> Result<ProfileSeries> {
    let err = |row: usize, message: String| Error::Ingestion {
        path: origin.to_string(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    let mut warnings = Vec::new();
    let header = match records.next() {
        None => None,
        Some(r) => Some(r.map_err(|e| err(1, e.to_string()))?),
    };
    let mut data: BTreeMap<usize, BTreeMap<u64, f64>> = BTreeMap::new();
    if let Some(header) = header {
        let cols: Vec<String> = header.iter().map(|c| c.to_ascii_lowercase()).collect();
        let has_unit = match cols.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["timestep", "node", "value"] => false,
            ["timestep", "node", "value", "unit"] => true,
            _ => {
                return Err(err(
                    1,
                    format!("expected header timestep,node,value[,unit], found {}", cols.join(",")),
                ))
            }
        };
        for (i, record) in records.enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| err(row, e.to_string()))?;
            if record.iter().all(str::is_empty) {
                continue;
            }
            let expected = if has_unit { 4 } else { 3 };
            if record.len() != expected {
                return Err(err(row, format!("expected {expected} fields, found {}", record.len())));
            }
            let timestep: u64 = record[0]
                .parse()
                .map_err(|_| err(row, format!("bad timestep {:?}", &record[0])))?;
            let node: usize = record[1].parse().map_err(|_| err(row, format!("bad node {:?}", &record[1])))?;
            if node == 0 || node > nodes {
                return Err(err(row, format!("node {node} outside 1..={nodes}")));
            }
            let value: f64 = record[2].parse().map_err(|_| err(row, format!("bad value {:?}", &record[2])))?;
            if !value.is_finite() {
                return Err(err(row, "value is not finite".to_string()));
            }
            let unit = if has_unit { &record[3] } else { kind.default_unit() };
            let scale = kind
                .unit_scale(unit, base_kva)
                .ok_or_else(|| err(row, format!("unit {unit:?} does not fit a {} profile", kind.name())))?;
            if data.entry(node).or_default().insert(timestep, value * scale).is_some() {
                return Err(err(row, format!("duplicate entry for node {node} at timestep {timestep}")));
            }
        }
    }

    let timesteps: Vec<u64> = match data.values().next() {
        None => {
            let w = format!("{origin}: {} profile is empty, using zeros", kind.name());
            log::warn!("{w}");
            warnings.push(w);
            Vec::new()
        }
        Some(first) => first.keys().copied().collect(),
    };
    let reference: BTreeSet<u64> = timesteps.iter().copied().collect();
    for (node, series) in &data {
        if series.keys().copied().collect::<BTreeSet<_>>() != reference {
            return Err(err(0, format!("node {node} does not share the timesteps of the other nodes")));
        }
    }
    let mut values = Vec::with_capacity(nodes);
    let mut present = Vec::with_capacity(nodes);
    for node in 1..=nodes {
        match data.get(&node) {
            Some(series) => {
                values.push(series.values().copied().collect());
                present.push(true);
            }
            None => {
                if !timesteps.is_empty() {
                    let w = format!("{origin}: node {node} missing from {} profile, using zeros", kind.name());
                    log::warn!("{w}");
                    warnings.push(w);
                }
                values.push(vec![0.0; timesteps.len()]);
                present.push(false);
            }
        }
    }
    Ok(ProfileSeries {
        kind,
        timesteps,
        values,
        present,
        warnings,
    })
}

/// Writes a profile in the long format. Values are written in the stored
/// unit with shortest round-trip formatting, so re-ingestion is exact.
pub fn write_profile<W: Write>(series: &ProfileSeries, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::io("<profile>", std::io::Error::other(e));
    w.write_record(["timestep", "node", "value", "unit"]).map_err(io)?;
    for (t_idx, t) in series.timesteps.iter().enumerate() {
        for (i, v) in series.values.iter().enumerate() {
            if !series.present[i] {
                continue;
            }
            w.write_record([
                t.to_string(),
                (i + 1).to_string(),
                v[t_idx].to_string(),
                series.kind.stored_unit().to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| Error::io("<profile>", e))
}

pub fn write_profile_file(series: &ProfileSeries, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_profile(series, std::io::BufWriter::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Timestep of the midday snapshot in a 96-step day.
pub const NOON: u64 = 48;
pub const STEPS_PER_DAY: u64 = 96;

/// One synthetic day at 15-minute resolution: a PV bell between 06:00 and
/// 18:00, a load curve with an evening peak and ambient temperature
/// oscillating in the 90 to 100 °F band, equal to 95 °F at noon.
pub fn synthetic_profiles(inventory: &DeviceInventory, nodes: usize, base_kva: f64) -> Vec<ProfileSeries> {
    let steps: Vec<u64> = (0..STEPS_PER_DAY).collect();
    let (peak_p, peak_q) = inventory.node_loads(nodes);
    let ratings = inventory.node_pv_ratings(nodes);
    let hour = |t: u64| t as f64 / 4.0;
    let pv_shape = |t: u64| {
        let h = hour(t);
        if (6.0..=18.0).contains(&h) {
            0.95 * (std::f64::consts::PI * (h - 6.0) / 12.0).sin()
        } else {
            0.0
        }
    };
    let load_shape = |t: u64| {
        let h = hour(t);
        0.4 + 0.15 * (-((h - 8.0) / 2.0).powi(2)).exp() + 0.6 * (-((h - 19.0) / 3.0).powi(2)).exp()
    };
    let ambient = |t: u64| 95.0 + 5.0 * (2.0 * std::f64::consts::PI * (t as f64 - NOON as f64) / STEPS_PER_DAY as f64).sin();

    let build = |kind: ProfileKind, f: &dyn Fn(usize, u64) -> f64| ProfileSeries {
        kind,
        timesteps: steps.clone(),
        values: (0..nodes).map(|i| steps.iter().map(|&t| f(i, t)).collect()).collect(),
        present: vec![true; nodes],
        warnings: Vec::new(),
    };
    vec![
        build(ProfileKind::LoadP, &|i, t| peak_p[i] / base_kva * load_shape(t)),
        build(ProfileKind::LoadQ, &|i, t| peak_q[i] / base_kva * load_shape(t)),
        build(ProfileKind::PvAvailable, &|i, t| ratings[i] / base_kva * pv_shape(t)),
        build(ProfileKind::Ambient, &|_, t| ambient(t)),
    ]
}
