//! Radial feeder description, the linearized voltage model `v = Rp + Xq + a`
//! and a backward/forward sweep AC power flow used to validate it.
//!
//! Node 0 is the substation (slack). Load nodes are numbered `1..=N`; every
//! vector in this module is indexed by `node - 1`.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Iteration cap of the backward/forward sweep.
pub const SWEEP_MAX_ITERATIONS: usize = 1000;
/// Default convergence tolerance of the sweep (max voltage change, p.u.).
pub const SWEEP_DEFAULT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    /// Series resistance, p.u.
    pub r: f64,
    /// Series reactance, p.u.
    pub x: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederTopology {
    /// Number of load nodes `N` (the substation is not counted).
    pub nodes: usize,
    pub lines: Vec<Line>,
    /// Substation voltage magnitude, p.u.
    pub v0: f64,
    /// Three-phase power base in kVA.
    pub base_kva: f64,
}

/// Parent pointers and a root-first ordering of a validated radial feeder.
#[derive(Debug, Clone)]
pub struct TreeIndex {
    /// `parent[i]` is the parent node of node `i` (`None` for the substation).
    pub parent: Vec<Option<usize>>,
    /// `parent_line[i]` indexes the line joining node `i` to its parent.
    pub parent_line: Vec<usize>,
    /// Breadth-first order starting at node 0.
    pub order: Vec<usize>,
    pub depth: Vec<usize>,
}

impl FeederTopology {
    pub fn new(nodes: usize, lines: Vec<Line>, v0: f64, base_kva: f64) -> Result<Self> {
        let topology = FeederTopology {
            nodes,
            lines,
            v0,
            base_kva,
        };
        topology.tree()?;
        Ok(topology)
    }

    /// Validates the invariants and returns the rooted tree.
    pub fn tree(&self) -> Result<TreeIndex> {
        if !(self.v0 > 0.0) || !self.v0.is_finite() {
            return Err(Error::Parameter(format!(
                "substation voltage must be positive, got {}",
                self.v0
            )));
        }
        if !(self.base_kva > 0.0) || !self.base_kva.is_finite() {
            return Err(Error::Parameter(format!(
                "power base must be positive, got {}",
                self.base_kva
            )));
        }
        let n = self.nodes;
        if self.lines.len() != n {
            return Err(Error::Topology(format!(
                "a radial feeder with {n} load nodes needs {n} lines, found {}",
                self.lines.len()
            )));
        }
        let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
        for (idx, line) in self.lines.iter().enumerate() {
            if line.from > n || line.to > n {
                return Err(Error::Topology(format!(
                    "line {idx} references node outside 0..={n}"
                )));
            }
            if line.from == line.to {
                return Err(Error::Topology(format!("line {idx} is a self-loop")));
            }
            if !(line.r >= 0.0) || !line.r.is_finite() || !line.x.is_finite() {
                return Err(Error::Parameter(format!(
                    "line {idx} has invalid impedance r={}, x={}",
                    line.r, line.x
                )));
            }
            adjacency[line.from].push((line.to, idx));
            adjacency[line.to].push((line.from, idx));
        }

        let mut parent = vec![None; n + 1];
        let mut parent_line = vec![usize::MAX; n + 1];
        let mut depth = vec![0; n + 1];
        let mut visited = vec![false; n + 1];
        let mut order = Vec::with_capacity(n + 1);
        let mut queue = VecDeque::from([0usize]);
        visited[0] = true;
        while let Some(node) = queue.pop_front() {
            order.push(node);
            for &(next, idx) in &adjacency[node] {
                if idx == parent_line[node] {
                    continue;
                }
                if visited[next] {
                    return Err(Error::Topology(format!(
                        "cycle detected through line {idx} ({node}-{next})"
                    )));
                }
                visited[next] = true;
                parent[next] = Some(node);
                parent_line[next] = idx;
                depth[next] = depth[node] + 1;
                queue.push_back(next);
            }
        }
        if let Some(missing) = visited.iter().position(|v| !v) {
            return Err(Error::Topology(format!(
                "node {missing} is not connected to the substation"
            )));
        }
        Ok(TreeIndex {
            parent,
            parent_line,
            order,
            depth,
        })
    }

    /// Parses the TOML feeder description.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: FeederFile = toml::from_str(text).map_err(|e| parse_error(origin, text, e))?;
        file.into_topology()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }
}

pub(crate) fn parse_error(origin: &str, text: &str, err: toml::de::Error) -> Error {
    let line = err
        .span()
        .map(|span| text[..span.start.min(text.len())].lines().count().max(1))
        .unwrap_or(0);
    Error::Parse {
        path: origin.to_string(),
        line,
        message: err.message().to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ImpedanceUnit {
    #[default]
    Pu,
    Ohm,
}

/// On-disk feeder description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederFile {
    pub v0: f64,
    pub base_kva: f64,
    /// Line-to-line base voltage, needed when impedances are given in ohms.
    #[serde(default)]
    pub base_kv: Option<f64>,
    #[serde(default)]
    pub units: ImpedanceUnit,
    #[serde(default)]
    pub nodes: Option<usize>,
    #[serde(rename = "line")]
    pub lines: Vec<Line>,
}

impl FeederFile {
    pub fn into_topology(self) -> Result<FeederTopology> {
        let scale = match self.units {
            ImpedanceUnit::Pu => 1.0,
            ImpedanceUnit::Ohm => {
                let kv = self.base_kv.ok_or_else(|| {
                    Error::Config("impedances in ohms require base_kv".to_string())
                })?;
                if !(kv > 0.0) {
                    return Err(Error::Parameter(format!("base_kv must be positive, got {kv}")));
                }
                let z_base = kv * kv * 1000.0 / self.base_kva;
                1.0 / z_base
            }
        };
        let nodes = self.nodes.unwrap_or(self.lines.len());
        let lines = self
            .lines
            .into_iter()
            .map(|l| Line {
                r: l.r * scale,
                x: l.x * scale,
                ..l
            })
            .collect();
        FeederTopology::new(nodes, lines, self.v0, self.base_kva)
    }
}

/// Per-node voltage limits in p.u.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl VoltageLimits {
    pub fn uniform(n: usize, lower: f64, upper: f64) -> Self {
        VoltageLimits {
            lower: vec![lower; n],
            upper: vec![upper; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_len("lower voltage limits", n, self.lower.len())?;
        check_len("upper voltage limits", n, self.upper.len())?;
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(lo < hi) {
                return Err(Error::Parameter(format!(
                    "node {}: lower limit {lo} must be below upper limit {hi}",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGridModel {
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub a: DVector<f64>,
    pub limits: VoltageLimits,
}

/// Builds `R`, `X` and `a` by summing line impedances over the common path
/// from the substation to each pair of nodes, scaled by `1 / v0`.
pub fn build_linear_model(
    topology: &FeederTopology,
    limits: VoltageLimits,
) -> Result<LinearGridModel> {
    let tree = topology.tree()?;
    let n = topology.nodes;
    limits.validate(n)?;

    // cumulative impedance from the substation to every node
    let mut path_r = vec![0.0; n + 1];
    let mut path_x = vec![0.0; n + 1];
    for &node in tree.order.iter().skip(1) {
        let parent = tree.parent[node].expect("non-root node has a parent");
        let line = &topology.lines[tree.parent_line[node]];
        path_r[node] = path_r[parent] + line.r;
        path_x[node] = path_x[parent] + line.x;
    }

    let mut r = DMatrix::zeros(n, n);
    let mut x = DMatrix::zeros(n, n);
    for i in 1..=n {
        for j in i..=n {
            let common = lowest_common_ancestor(&tree, i, j);
            let rij = path_r[common] / topology.v0;
            let xij = path_x[common] / topology.v0;
            r[(i - 1, j - 1)] = rij;
            r[(j - 1, i - 1)] = rij;
            x[(i - 1, j - 1)] = xij;
            x[(j - 1, i - 1)] = xij;
        }
    }
    Ok(LinearGridModel {
        r,
        x,
        a: DVector::from_element(n, topology.v0),
        limits,
    })
}

fn lowest_common_ancestor(tree: &TreeIndex, mut i: usize, mut j: usize) -> usize {
    while tree.depth[i] > tree.depth[j] {
        i = tree.parent[i].unwrap();
    }
    while tree.depth[j] > tree.depth[i] {
        j = tree.parent[j].unwrap();
    }
    while i != j {
        i = tree.parent[i].unwrap();
        j = tree.parent[j].unwrap();
    }
    i
}

impl LinearGridModel {
    pub fn nodes(&self) -> usize {
        self.a.len()
    }

    /// `Rp + Xq + a`.
    pub fn linear_voltage(&self, p: &[f64], q: &[f64]) -> Result<Vec<f64>> {
        let n = self.nodes();
        check_len("real injections", n, p.len())?;
        check_len("reactive injections", n, q.len())?;
        let p = DVector::from_column_slice(p);
        let q = DVector::from_column_slice(q);
        let v = &self.r * p + &self.x * q + &self.a;
        Ok(v.as_slice().to_vec())
    }

    /// `[v_min - v; v - v_max]`; positive entries are violations.
    pub fn constraint_residual(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.nodes();
        check_len("voltages", n, v.len())?;
        let mut residual = Vec::with_capacity(2 * n);
        residual.extend(self.limits.lower.iter().zip(v).map(|(lo, v)| lo - v));
        residual.extend(v.iter().zip(&self.limits.upper).map(|(v, hi)| v - hi));
        Ok(residual)
    }

    pub fn with_limits(&self, limits: VoltageLimits) -> Result<Self> {
        limits.validate(self.nodes())?;
        Ok(LinearGridModel {
            limits,
            ..self.clone()
        })
    }

    /// Writes `R`, `X`, `a` and the limits in long format (`kind,row,col,value`).
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::io("model csv", std::io::Error::other(e));
        writer.write_record(["kind", "row", "col", "value"]).map_err(io)?;
        let n = self.nodes();
        for (kind, matrix) in [("R", &self.r), ("X", &self.x)] {
            for i in 0..n {
                for j in 0..n {
                    writer
                        .write_record([
                            kind.to_string(),
                            (i + 1).to_string(),
                            (j + 1).to_string(),
                            format!("{:e}", matrix[(i, j)]),
                        ])
                        .map_err(io)?;
                }
            }
        }
        for (kind, values) in [
            ("a", self.a.as_slice()),
            ("v_min", self.limits.lower.as_slice()),
            ("v_max", self.limits.upper.as_slice()),
        ] {
            for (i, value) in values.iter().enumerate() {
                writer
                    .write_record([
                        kind.to_string(),
                        (i + 1).to_string(),
                        String::new(),
                        format!("{value:e}"),
                    ])
                    .map_err(io)?;
            }
        }
        writer.flush().map_err(|e| Error::io("model csv", e))?;
        Ok(())
    }
}

/// Net nodal injections together with the voltages they produce under the
/// linear model.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

impl NetworkState {
    pub fn assemble(model: &LinearGridModel, p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        let v = model.linear_voltage(&p, &q)?;
        Ok(NetworkState { p, q, v })
    }
}

/// Voltage magnitudes from a backward/forward sweep of the full AC equations.
///
/// Injections are in p.u. with generation positive. Fails with
/// [`Error::SweepDivergence`] when the successive-iterate change does not fall
/// below `tolerance` within [`SWEEP_MAX_ITERATIONS`].
pub fn ac_power_flow(topology: &FeederTopology, p: &[f64], q: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    let tree = topology.tree()?;
    ac_power_flow_with(topology, &tree, p, q, tolerance)
}

/// Same as [`ac_power_flow`] with a precomputed tree, for repeated solves.
pub fn ac_power_flow_with(
    topology: &FeederTopology,
    tree: &TreeIndex,
    p: &[f64],
    q: &[f64],
    tolerance: f64,
) -> Result<Vec<f64>> {
    let n = topology.nodes;
    check_len("real injections", n, p.len())?;
    check_len("reactive injections", n, q.len())?;
    if !(tolerance > 0.0) {
        return Err(Error::Parameter(format!("sweep tolerance must be positive, got {tolerance}")));
    }
    let source = Complex64::new(topology.v0, 0.0);
    let mut voltage = vec![source; n + 1];
    let mut branch = vec![Complex64::new(0.0, 0.0); n + 1];
    let mut last_change = f64::INFINITY;

    for _ in 0..SWEEP_MAX_ITERATIONS {
        // backward: accumulate injection currents towards the substation
        for (node, current) in branch.iter_mut().enumerate().skip(1) {
            let s = Complex64::new(p[node - 1], q[node - 1]);
            *current = -(s / voltage[node]).conj();
        }
        for &node in tree.order.iter().skip(1).rev() {
            let parent = tree.parent[node].unwrap();
            if parent != 0 {
                let child = branch[node];
                branch[parent] += child;
            }
        }
        // forward: drop voltages along each line
        last_change = 0.0;
        for &node in tree.order.iter().skip(1) {
            let parent = tree.parent[node].unwrap();
            let line = &topology.lines[tree.parent_line[node]];
            let z = Complex64::new(line.r, line.x);
            let updated = voltage[parent] - z * branch[node];
            last_change = f64::max(last_change, (updated - voltage[node]).norm());
            voltage[node] = updated;
        }
        if !last_change.is_finite() {
            break;
        }
        if last_change < tolerance {
            return Ok(voltage[1..].iter().map(|v| v.norm()).collect());
        }
    }
    Err(Error::SweepDivergence {
        iterations: SWEEP_MAX_ITERATIONS,
        last_change,
    })
}
