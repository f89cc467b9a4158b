use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::devices::{CustomerSpec, PvSpec, TclSpec};
use crate::error::{Error, Result};
use crate::grid::parse_error;
use crate::recovery::RateGrid;

/// How a TCL entry with `count > 1` is turned into devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum TclGrouping {
    /// One aggregate device switching between all-off and all-on.
    #[serde(rename = "1")]
    Combined,
    /// `count` identical devices rounded independently.
    #[serde(rename = "2")]
    Independent,
    /// One aggregate device with every achievable aggregate rate.
    #[serde(rename = "3")]
    Aggregated,
    /// Same as `Independent`; used for hand-written inventories.
    #[default]
    #[serde(rename = "custom")]
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvEntry {
    pub rating_kva: f64,
    /// Defaults to the rating.
    #[serde(default)]
    pub available_kw: Option<f64>,
    pub c_p: f64,
    pub c_q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TclEntry {
    #[serde(default = "one")]
    pub count: usize,
    pub t_in: f64,
    pub t_out: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub t_nom: f64,
    pub c_t: f64,
    pub rates_w: Vec<f64>,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomerEntry {
    pub node: usize,
    #[serde(default)]
    pub load_kw: f64,
    #[serde(default)]
    pub load_kvar: f64,
    #[serde(default)]
    pub pv: Vec<PvEntry>,
    #[serde(default)]
    pub tcl: Vec<TclEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DeviceInventory {
    #[serde(rename = "customer", default)]
    pub customers: Vec<CustomerEntry>,
}

/// Per-node values taken from profiles at one timestep. `None` keeps the
/// inventory value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSnapshot {
    /// Consumption, p.u.
    pub load_p: Option<Vec<f64>>,
    pub load_q: Option<Vec<f64>>,
    /// Available PV power per node, p.u.
    pub pv_available: Option<Vec<f64>>,
    /// Ambient temperature per node, °F. NaN marks nodes without data.
    pub ambient: Option<Vec<f64>>,
}

impl DeviceInventory {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_error(origin, text, e))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Peak load per node, kW and kvar.
    pub fn node_loads(&self, nodes: usize) -> (Vec<f64>, Vec<f64>) {
        let mut p = vec![0.0; nodes];
        let mut q = vec![0.0; nodes];
        for c in &self.customers {
            if (1..=nodes).contains(&c.node) {
                p[c.node - 1] += c.load_kw;
                q[c.node - 1] += c.load_kvar;
            }
        }
        (p, q)
    }

    /// Total PV rating per node, kVA.
    pub fn node_pv_ratings(&self, nodes: usize) -> Vec<f64> {
        let mut r = vec![0.0; nodes];
        for c in &self.customers {
            if (1..=nodes).contains(&c.node) {
                r[c.node - 1] += c.pv.iter().map(|pv| pv.rating_kva).sum::<f64>();
            }
        }
        r
    }

    /// Builds customers on a feeder with `nodes` load nodes and the given
    /// power base. Baseline loads become separate non-participating
    /// customers, one per loaded node.
    pub fn to_customers(
        &self,
        nodes: usize,
        base_kva: f64,
        grouping: TclGrouping,
        profiles: &ProfileSnapshot,
    ) -> Result<Vec<CustomerSpec>> {
        let pu_per_kw = 1.0 / base_kva;
        let pu_per_watt = pu_per_kw / 1000.0;
        for c in &self.customers {
            if c.node == 0 || c.node > nodes {
                return Err(Error::Config(format!("inventory customer at node {} outside 1..={nodes}", c.node)));
            }
        }
        let ratings = self.node_pv_ratings(nodes);
        let mut out = Vec::new();
        for c in &self.customers {
            let i = c.node - 1;
            let pvs = c
                .pv
                .iter()
                .map(|pv| {
                    let eta = pv.rating_kva * pu_per_kw;
                    let p_av = match &profiles.pv_available {
                        Some(avail) if ratings[i] > 0.0 => avail[i] * pv.rating_kva / ratings[i],
                        _ => pv.available_kw.unwrap_or(pv.rating_kva) * pu_per_kw,
                    };
                    let spec = PvSpec {
                        p_av: p_av.clamp(0.0, eta),
                        eta,
                        c_p: pv.c_p,
                        c_q: pv.c_q,
                    };
                    spec.validate()?;
                    Ok(spec)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tcls = Vec::new();
            for entry in &c.tcl {
                let t_out = match &profiles.ambient {
                    Some(a) if a[i].is_finite() => a[i],
                    _ => entry.t_out,
                };
                tcls.extend(expand_tcl(entry, t_out, grouping)?);
            }
            if pvs.is_empty() && tcls.is_empty() {
                continue;
            }
            out.push(CustomerSpec {
                node: c.node,
                pvs,
                tcls,
                p0: 0.0,
                q0: 0.0,
                pu_per_watt,
            });
        }
        let (peak_p, peak_q) = self.node_loads(nodes);
        let load_p = profiles.load_p.clone().unwrap_or_else(|| peak_p.iter().map(|p| p * pu_per_kw).collect());
        let load_q = profiles.load_q.clone().unwrap_or_else(|| peak_q.iter().map(|q| q * pu_per_kw).collect());
        for i in 0..nodes {
            if load_p[i] != 0.0 || load_q[i] != 0.0 {
                out.push(CustomerSpec {
                    node: i + 1,
                    pvs: Vec::new(),
                    tcls: Vec::new(),
                    p0: -load_p[i],
                    q0: -load_q[i],
                    pu_per_watt,
                });
            }
        }
        Ok(out)
    }
}

fn expand_tcl(entry: &TclEntry, t_out: f64, grouping: TclGrouping) -> Result<Vec<TclSpec>> {
    if entry.count == 0 {
        return Ok(Vec::new());
    }
    let single = RateGrid::new(entry.rates_w.clone())?;
    let base = TclSpec {
        t_in: entry.t_in,
        t_out,
        theta1: entry.theta1,
        theta2: entry.theta2,
        t_min: entry.t_min,
        t_max: entry.t_max,
        t_nom: entry.t_nom,
        rates: single.clone(),
        c_t: entry.c_t,
    };
    let n = entry.count as f64;
    let combined = |rates: RateGrid| TclSpec {
        theta2: entry.theta2 / n,
        c_t: entry.c_t * n,
        rates,
        ..base.clone()
    };
    let devices = match grouping {
        TclGrouping::Independent | TclGrouping::Custom => vec![base.clone(); entry.count],
        _ if entry.count == 1 => vec![base.clone()],
        TclGrouping::Combined => vec![combined(RateGrid::new(vec![single.min() * n, single.max() * n])?)],
        TclGrouping::Aggregated => vec![combined(RateGrid::new(aggregate_rates(single.rates(), entry.count))?)],
    };
    for d in &devices {
        d.validate()?;
    }
    Ok(devices)
}

/// Every sum of `count` rates drawn (with repetition) from `rates`.
pub fn aggregate_rates(rates: &[f64], count: usize) -> Vec<f64> {
    let mut sums = vec![0.0];
    for _ in 0..count {
        let mut next: Vec<f64> = sums.iter().flat_map(|s| rates.iter().map(move |r| s + r)).collect();
        next.sort_by(f64::total_cmp);
        next.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * a.abs().max(1.0));
        sums = next;
    }
    sums
}
