use serde::{Deserialize, Serialize};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Welford accumulator for one scalar series.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalarStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl ScalarStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance (zero with fewer than two samples).
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    pub fn std_dev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// `1.96 * std / sqrt(n)`.
    pub fn ci95_half_width(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        Z95 * self.std_dev() / (self.count as f64).sqrt()
    }

    pub fn std_error(&self) -> f64 {
        if self.count == 0 {
            return 0.0;
        }
        self.std_dev() / (self.count as f64).sqrt()
    }
}

/// Per-node voltage statistics plus the running mean of the dual function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub voltage: Vec<ScalarStats>,
    pub dual_value: ScalarStats,
}

impl RunningStats {
    pub fn new(nodes: usize) -> Self {
        RunningStats {
            voltage: vec![ScalarStats::default(); nodes],
            dual_value: ScalarStats::default(),
        }
    }

    pub fn push(&mut self, voltage: &[f64], dual_value: Option<f64>) {
        for (s, &v) in self.voltage.iter_mut().zip(voltage) {
            s.push(v);
        }
        if let Some(h) = dual_value {
            self.dual_value.push(h);
        }
    }

    pub fn count(&self) -> u64 {
        self.voltage.first().map_or(0, |s| s.count())
    }

    pub fn mean_voltage(&self) -> Vec<f64> {
        self.voltage.iter().map(|s| s.mean()).collect()
    }

    pub fn voltage_variance(&self) -> Vec<f64> {
        self.voltage.iter().map(|s| s.variance()).collect()
    }

    pub fn ci95_half_widths(&self) -> Vec<f64> {
        self.voltage.iter().map(|s| s.ci95_half_width()).collect()
    }
}

/// Declares convergence once the running mean moved by less than `rel_tol`
/// (relative, max over components) across the trailing `window` samples.
#[derive(Debug, Clone)]
pub struct ConvergenceDetector {
    window: usize,
    rel_tol: f64,
    history: std::collections::VecDeque<Vec<f64>>,
}

impl ConvergenceDetector {
    pub const DEFAULT_WINDOW: usize = 2000;
    pub const DEFAULT_REL_TOL: f64 = 1e-4;

    pub fn new(window: usize, rel_tol: f64) -> Self {
        ConvergenceDetector {
            window: window.max(1),
            rel_tol,
            history: std::collections::VecDeque::with_capacity(window + 1),
        }
    }

    /// Feeds the current running mean; returns true once converged.
    pub fn observe(&mut self, running_mean: &[f64]) -> bool {
        self.history.push_back(running_mean.to_vec());
        if self.history.len() <= self.window {
            return false;
        }
        let old = self.history.pop_front().unwrap();
        old.iter().zip(running_mean).all(|(a, b)| {
            let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
            (a - b).abs() / scale < self.rel_tol
        })
    }
}

impl Default for ConvergenceDetector {
    fn default() -> Self {
        Self::new(Self::DEFAULT_WINDOW, Self::DEFAULT_REL_TOL)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn batch(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = if xs.len() < 2 {
            0.0
        } else {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        };
        (mean, var)
    }

    #[test]
    fn constant_sequence_has_zero_variance() {
        let mut s = ScalarStats::default();
        for _ in 0..100 {
            s.push(1.04);
        }
        assert_eq!(s.variance(), 0.0);
        assert_eq!(s.mean(), 1.04);
    }

    #[test]
    fn alternating_sequence_moments() {
        let mut s = ScalarStats::default();
        for i in 0..100_000 {
            s.push((i % 2) as f64);
        }
        assert_relative_eq!(s.mean(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(s.variance(), 0.25, epsilon = 1e-5);
    }

    #[test]
    fn incremental_matches_batch_on_every_prefix() {
        let xs: Vec<f64> = (0..500).map(|i| ((i * 7919) % 101) as f64 * 0.013 + 1.0).collect();
        let mut s = ScalarStats::default();
        for (i, &x) in xs.iter().enumerate() {
            s.push(x);
            let (mean, var) = batch(&xs[..=i]);
            assert_relative_eq!(s.mean(), mean, max_relative = 1e-12);
            if var > 0.0 {
                assert_relative_eq!(s.variance(), var, max_relative = 1e-12);
            }
        }
        assert_relative_eq!(s.ci95_half_width(), 1.96 * s.std_dev() / (500f64).sqrt());
    }

    #[test]
    fn detector_waits_for_window() {
        let mut d = ConvergenceDetector::new(3, 1e-4);
        assert!(!d.observe(&[1.0]));
        assert!(!d.observe(&[1.0]));
        assert!(!d.observe(&[1.0]));
        assert!(d.observe(&[1.0]));
        assert!(!d.observe(&[1.1]));
    }
}
