use proptest::prelude::*;

use voltdual::devices::{
    customer_best_response, pv_best_response, pv_best_response_generic, tcl_hull, tcl_relaxed_best_response,
    tcl_relaxed_best_response_search, BestResponseRoute, CustomerSpec, PvSpec, TclSpec, GENERIC_MAX_ITERATIONS,
};
use voltdual::recovery::RateGrid;
use voltdual::{Error, ErrorKind};

fn pv_strategy() -> impl Strategy<Value = PvSpec> {
    (0.05f64..1.0, 0.0f64..1.2, 0.1f64..5.0, 0.1f64..5.0).prop_map(|(eta, frac, c_p, c_q)| PvSpec {
        p_av: eta * frac,
        eta,
        c_p,
        c_q,
    })
}

fn objective(pv: &PvSpec, alpha: f64, beta: f64, (p, q): (f64, f64)) -> f64 {
    pv.c_p * (pv.p_av - p).powi(2) + pv.c_q * q * q - alpha * p - beta * q
}

/// Dense polar sampling of the PV set, refined around the incumbent.
fn pv_grid_minimum(pv: &PvSpec, alpha: f64, beta: f64) -> f64 {
    let p_max = pv.p_av.min(pv.eta);
    let mut best = f64::INFINITY;
    let n = 400;
    for a in 0..=n {
        let p = p_max * a as f64 / n as f64;
        let half = (pv.eta * pv.eta - p * p).max(0.0).sqrt();
        for b in 0..=n {
            let q = -half + 2.0 * half * b as f64 / n as f64;
            best = best.min(objective(pv, alpha, beta, (p, q)));
        }
    }
    best
}

fn tcl(t_in: f64) -> TclSpec {
    TclSpec {
        t_in,
        t_out: 95.0,
        theta1: 0.1,
        theta2: -0.001,
        t_min: 70.0,
        t_max: 80.0,
        t_nom: 75.0,
        rates: RateGrid::new((0..=10).map(|k| 400.0 * k as f64).collect()).unwrap(),
        c_t: 20.0,
    }
}

proptest! {
    #[test]
    fn pv_response_is_feasible(pv in pv_strategy(), alpha in -20.0f64..20.0, beta in -20.0f64..20.0) {
        let (p, q) = pv_best_response(&pv, alpha, beta, 1e-12);
        prop_assert!(pv.contains(p, q, 1e-9), "({p}, {q}) outside the set of {pv:?}");
    }

    #[test]
    fn pv_response_beats_dense_grid(pv in pv_strategy(), alpha in -5.0f64..5.0, beta in -5.0f64..5.0) {
        let z = pv_best_response(&pv, alpha, beta, 1e-12);
        let grid = pv_grid_minimum(&pv, alpha, beta);
        let f = objective(&pv, alpha, beta, z);
        prop_assert!(f <= grid + 1e-9, "closed form {f} worse than grid {grid}");
        // grid spacing is eta / 200, objective is smooth: the grid gets close
        let scale = (pv.c_p + pv.c_q + alpha.abs() + beta.abs()) * pv.eta * pv.eta;
        prop_assert!(grid - f <= 1e-3 * scale.max(1e-3));
    }

    #[test]
    fn pv_routes_agree(pv in pv_strategy(), alpha in -5.0f64..5.0, beta in -5.0f64..5.0) {
        let a = pv_best_response(&pv, alpha, beta, 1e-12);
        let b = pv_best_response_generic(&pv, pv.p_av, pv.eta, alpha, beta, 1e-13, GENERIC_MAX_ITERATIONS);
        prop_assert!((objective(&pv, alpha, beta, a) - objective(&pv, alpha, beta, b)).abs() < 1e-7);
        prop_assert!((a.0 - b.0).abs() < 1e-4 && (a.1 - b.1).abs() < 1e-4);
    }

    #[test]
    fn pv_real_power_is_monotone_in_alpha(pv in pv_strategy(), alpha in -5.0f64..5.0, step in 0.0f64..3.0, beta in -2.0f64..2.0) {
        // by strong convexity the response is monotone in its own price
        let (p1, q1) = pv_best_response(&pv, alpha, beta, 1e-12);
        let (p2, _) = pv_best_response(&pv, alpha + step, beta, 1e-12);
        prop_assert!(p2 >= p1 - 1e-9);
        let (_, q2) = pv_best_response(&pv, alpha, beta + step, 1e-12);
        prop_assert!(q2 >= q1 - 1e-9);
    }

    #[test]
    fn tcl_routes_agree(t_in in 72.0f64..80.0, price in -0.02f64..0.02) {
        let spec = tcl(t_in);
        let closed = tcl_relaxed_best_response(&spec, price).unwrap();
        let search = tcl_relaxed_best_response_search(&spec, price, 1e-9).unwrap();
        // the objective is flat in watts, so the search resolves to about 1e-3 W
        prop_assert!((closed - search).abs() < 1e-2);
        prop_assert!(spec.cost(closed) + price * closed <= spec.cost(search) + price * search + 1e-9);
        let (lo, hi) = tcl_hull(&spec).unwrap();
        prop_assert!(closed >= lo && closed <= hi);
        let t = spec.next_temperature(closed);
        prop_assert!(t >= spec.t_min - 1e-9 && t <= spec.t_max + 1e-9);
    }

    #[test]
    fn tcl_consumption_falls_as_price_rises(t_in in 72.0f64..80.0, price in -0.02f64..0.02, step in 0.0f64..0.01) {
        let spec = tcl(t_in);
        let a = tcl_relaxed_best_response(&spec, price).unwrap();
        let b = tcl_relaxed_best_response(&spec, price + step).unwrap();
        prop_assert!(b <= a + 1e-9);
    }
}

#[test]
fn zero_price_pv_response_is_cost_minimizer() {
    let pv = PvSpec {
        p_av: 0.3,
        eta: 0.35,
        c_p: 3.0,
        c_q: 1.0,
    };
    assert_eq!(pv_best_response(&pv, 0.0, 0.0, 1e-12), (0.3, 0.0));
    assert_eq!(pv.cost_minimizer(), (0.3, 0.0));
}

#[test]
fn pv_response_on_arc_matches_hand_solution() {
    // alpha pushes p beyond eta's reach when p_av = eta; q pinned by beta = 0
    let pv = PvSpec {
        p_av: 1.0,
        eta: 1.0,
        c_p: 3.0,
        c_q: 1.0,
    };
    // with alpha = -3: unconstrained p = (6 - 3) / 6 = 0.5, q = 0
    let (p, q) = pv_best_response(&pv, -3.0, 0.0, 1e-12);
    assert!((p - 0.5).abs() < 1e-12 && q.abs() < 1e-12);
    // large beta: q saturates against the circle at p solving the KKT system
    let (p, q) = pv_best_response(&pv, 0.0, 10.0, 1e-12);
    assert!((p * p + q * q - 1.0).abs() < 1e-9);
    // stationarity on the arc: (2 c_p (p - p_av)) / p == (2 c_q q - beta) / q
    let lp = 2.0 * 3.0 * (p - 1.0) / p;
    let lq = (2.0 * q - 10.0) / q;
    assert!((lp - lq).abs() < 1e-6);
}

#[test]
fn unreachable_comfort_band_is_reported_with_device_location() {
    let mut hot = tcl(120.0);
    hot.t_out = 130.0;
    let customer = CustomerSpec {
        node: 4,
        pvs: vec![],
        tcls: vec![tcl(75.0), hot],
        p0: 0.0,
        q0: 0.0,
        pu_per_watt: 1e-6,
    };
    let err = customer_best_response(&customer, 0.0, 0.0, BestResponseRoute::ClosedForm, 1e-12).unwrap_err();
    match err {
        Error::HullInfeasible { node, device, .. } => assert_eq!((node, device), (4, 1)),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(
        Error::HullInfeasible { node: 1, device: 0, detail: String::new() }.kind(),
        ErrorKind::Numerical
    );
    let spec = &customer.tcls[1];
    let least = spec.least_violation_rate();
    assert_eq!(least, spec.rates.max());
}

#[test]
fn joint_response_of_two_device_customer_beats_grid_search() {
    let customer = CustomerSpec {
        node: 1,
        pvs: vec![PvSpec {
            p_av: 0.2,
            eta: 0.25,
            c_p: 3.0,
            c_q: 1.0,
        }],
        tcls: vec![tcl(76.0)],
        p0: 0.0,
        q0: 0.0,
        pu_per_watt: 1e-3,
    };
    for &(alpha, beta) in &[(0.0, 0.0), (-0.4, -0.2), (0.3, 0.5), (-2.0, 1.0)] {
        let z = customer_best_response(&customer, alpha, beta, BestResponseRoute::ClosedForm, 1e-12).unwrap();
        let f = customer.objective(&z.fast, &z.slow, alpha, beta);
        let (lo, hi) = tcl_hull(&customer.tcls[0]).unwrap();
        let pv = &customer.pvs[0];
        let mut grid = f64::INFINITY;
        let n = 120;
        for a in 0..=n {
            let p = pv.p_av * a as f64 / n as f64;
            let half = (pv.eta * pv.eta - p * p).max(0.0).sqrt();
            for b in 0..=n {
                let q = -half + 2.0 * half * b as f64 / n as f64;
                for c in 0..=n {
                    let w = lo + (hi - lo) * c as f64 / n as f64;
                    grid = grid.min(customer.objective(&[(p, q)], &[w], alpha, beta));
                }
            }
        }
        assert!(f <= grid + 1e-9, "({alpha}, {beta}): response {f} vs grid {grid}");
        assert!(grid - f < 1e-2, "({alpha}, {beta}): grid {grid} far from response {f}");
        let it = customer_best_response(&customer, alpha, beta, BestResponseRoute::Iterative, 1e-12).unwrap();
        let g = customer.objective(&it.fast, &it.slow, alpha, beta);
        assert!((f - g).abs() < 1e-7);
    }
}

#[test]
fn invalid_device_parameters_are_rejected() {
    let pv = PvSpec {
        p_av: 0.5,
        eta: -1.0,
        c_p: 1.0,
        c_q: 1.0,
    };
    assert!(pv.validate().is_err());
    let mut t = tcl(75.0);
    t.t_min = 81.0;
    assert!(t.validate().is_err());
    assert!(RateGrid::new(vec![]).is_err());
    assert!(RateGrid::new(vec![0.0, f64::NAN]).is_err());
}
