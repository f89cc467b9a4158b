//! Independent reference computations shared by the integration tests.

#![allow(dead_code)]

use voltdual::Instance;

/// Brute-force minimum of the relaxed problem for an instance whose only
/// controllable device is a single PV. Grid search over the PV disk with
/// repeated zooming around the incumbent.
pub fn grid_oracle_single_pv(instance: &Instance) -> (f64, f64, f64) {
    let (ci, pv) = instance
        .customers
        .iter()
        .enumerate()
        .find_map(|(i, c)| c.pvs.first().map(|pv| (i, pv.clone())))
        .expect("instance has a PV");
    assert_eq!(instance.fast_device_count(), 1);
    assert_eq!(instance.slow_device_count(), 0);
    let node = instance.customers[ci].node;
    let (p0, q0) = instance.baseline();
    let model = &instance.model;
    let eval = |p: f64, q: f64| -> Option<f64> {
        if p < 0.0 || p > pv.p_av || p * p + q * q > pv.eta * pv.eta {
            return None;
        }
        let mut pp = p0.clone();
        let mut qq = q0.clone();
        pp[node - 1] += p;
        qq[node - 1] += q;
        let v = model.linear_voltage(&pp, &qq).unwrap();
        let ok = v
            .iter()
            .zip(model.limits.lower.iter().zip(&model.limits.upper))
            .all(|(v, (lo, hi))| v >= lo && v <= hi);
        ok.then(|| pv.c_p * (pv.p_av - p).powi(2) + pv.c_q * q * q)
    };
    let n = 200;
    let (mut plo, mut phi, mut qlo, mut qhi) = (0.0, pv.p_av, -pv.eta, pv.eta);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..12 {
        let dp = (phi - plo) / n as f64;
        let dq = (qhi - qlo) / n as f64;
        for a in 0..=n {
            for b in 0..=n {
                let p = plo + a as f64 * dp;
                let q = qlo + b as f64 * dq;
                if let Some(c) = eval(p, q) {
                    if c < best.0 {
                        best = (c, p, q);
                    }
                }
            }
        }
        plo = (best.1 - 4.0 * dp).max(0.0);
        phi = (best.1 + 4.0 * dp).min(pv.p_av);
        qlo = (best.2 - 4.0 * dq).max(-pv.eta);
        qhi = (best.2 + 4.0 * dq).min(pv.eta);
    }
    best
}
