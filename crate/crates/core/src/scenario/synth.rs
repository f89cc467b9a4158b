//! Random instances for property and acceptance tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::devices::{CustomerSpec, PvSpec, TclSpec};
use crate::error::Result;
use crate::grid::{build_linear_model, FeederTopology, Line, VoltageLimits};
use crate::instance::Instance;
use crate::recovery::RateGrid;

/// Random radial feeder with `nodes` load nodes; each node attaches to a
/// uniformly chosen earlier node.
pub fn random_feeder(nodes: usize, rng: &mut impl Rng) -> Result<FeederTopology> {
    let lines = (1..=nodes)
        .map(|to| Line {
            from: rng.gen_range(0..to),
            to,
            r: rng.gen_range(0.005..0.05),
            x: rng.gen_range(0.005..0.05),
        })
        .collect();
    FeederTopology::new(nodes, lines, 1.0, 1000.0)
}

/// A random instance whose upper limits bind at the devices' cost
/// minimizers yet admit a strictly feasible point.
///
/// Every node gets a load, a PV and, with `tcls`, one two-rate TCL. The
/// upper limit is placed between the voltage of a strictly interior point
/// (PV at 30% output, absorbing reactive power) and the unconstrained
/// voltage, so Slater's condition holds with a margin.
pub fn random_slater_instance(nodes: usize, seed: u64, tcls: bool) -> Result<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let topology = random_feeder(nodes, &mut rng)?;
    let pu_per_watt = 1.0 / (topology.base_kva * 1000.0);
    let mut customers = Vec::new();
    for node in 1..=nodes {
        let eta = rng.gen_range(0.2..0.5);
        let pv = PvSpec {
            p_av: eta * rng.gen_range(0.8..1.0),
            eta,
            c_p: rng.gen_range(1.0..5.0),
            c_q: rng.gen_range(0.5..3.0),
        };
        let tcl = tcls.then(|| TclSpec {
            t_in: rng.gen_range(75.5..77.0),
            t_out: rng.gen_range(90.0..100.0),
            theta1: 0.1,
            theta2: -0.001,
            t_min: 70.0,
            t_max: 80.0,
            t_nom: 75.0,
            rates: RateGrid::new(vec![0.0, 4000.0]).expect("static grid"),
            c_t: 20.0,
        });
        customers.push(CustomerSpec {
            node,
            pvs: vec![pv],
            tcls: tcl.into_iter().collect(),
            p0: -rng.gen_range(0.0..0.1),
            q0: -rng.gen_range(0.0..0.05),
            pu_per_watt,
        });
    }
    let wide = VoltageLimits::uniform(nodes, 0.0, f64::MAX);
    let model = build_linear_model(&topology, wide.clone())?;
    let probe = Instance {
        topology: topology.clone(),
        model,
        customers: customers.clone(),
    };
    let (p0, q0) = probe.baseline();
    let injection = |frac: f64, q_frac: f64| -> Result<Vec<f64>> {
        let mut p = p0.clone();
        let mut q = q0.clone();
        for c in &customers {
            for pv in &c.pvs {
                p[c.node - 1] += frac * pv.p_av;
                q[c.node - 1] -= q_frac * pv.eta;
            }
            for t in &c.tcls {
                // the hull midpoint is strictly inside for these parameters
                let (lo, hi) = crate::devices::tcl_hull(t)?;
                p[c.node - 1] -= 0.5 * (lo + hi) * c.pu_per_watt;
            }
        }
        probe.model.linear_voltage(&p, &q)
    };
    let v_interior = injection(0.3, 0.3)?;
    let v_free = injection(1.0, 0.0)?;
    let share = rng.gen_range(0.3..0.7);
    let upper: Vec<f64> = v_interior
        .iter()
        .zip(&v_free)
        .map(|(a, b)| a + 1e-3 + share * (b - a).max(0.0))
        .collect();
    let lower = v_interior.iter().map(|v| v - 0.1).collect();
    Instance::new(topology, VoltageLimits { lower, upper }, customers)
}
