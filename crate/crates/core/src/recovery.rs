//! Randomized recovery of discrete TCL rates from relaxed setpoints, the
//! resulting voltage-variance bound and Chebyshev-style limit tightening.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LinearGridModel, VoltageLimits};

/// Strictly increasing, finite, nonempty set of consumption rates (W).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct RateGrid(Vec<f64>);

impl RateGrid {
    pub fn new(rates: Vec<f64>) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Parameter("rate grid needs at least one rate".to_string()));
        }
        if rates.iter().any(|r| !r.is_finite()) {
            return Err(Error::Parameter("rate grid entries must be finite".to_string()));
        }
        if rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(format!(
                "rate grid must be strictly increasing: {rates:?}"
            )));
        }
        Ok(RateGrid(rates))
    }

    /// `0, step, 2 step, ..., max`.
    pub fn uniform(step: f64, max: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Parameter(format!("rate step must be positive, got {step}")));
        }
        let count = (max / step).round() as usize;
        Self::new((0..=count).map(|i| i as f64 * step).collect())
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }

    pub fn contains(&self, rate: f64) -> bool {
        self.0.binary_search_by(|r| r.total_cmp(&rate)).is_ok()
    }

    /// Largest gap between adjacent rates.
    pub fn max_span(&self) -> f64 {
        self.0.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
    }
}

impl TryFrom<Vec<f64>> for RateGrid {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        RateGrid::new(value)
    }
}

impl From<RateGrid> for Vec<f64> {
    fn from(grid: RateGrid) -> Self {
        grid.0
    }
}

/// Adjacent grid rates `(lo, hi)` with `lo <= c_star <= hi`; both equal
/// `c_star` when it is itself a grid rate.
pub fn bracket_rates(c_star: f64, grid: &RateGrid) -> Result<(f64, f64)> {
    if !(c_star >= grid.min() && c_star <= grid.max()) {
        return Err(Error::OutOfRange {
            value: c_star,
            min: grid.min(),
            max: grid.max(),
        });
    }
    let rates = grid.rates();
    match rates.binary_search_by(|r| r.total_cmp(&c_star)) {
        Ok(i) => Ok((rates[i], rates[i])),
        Err(i) => Ok((rates[i - 1], rates[i])),
    }
}

/// Seedable generator split into independent per-device substreams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFactory {
    seed: u64,
}

impl StreamFactory {
    pub fn new(seed: u64) -> Self {
        StreamFactory { seed }
    }

    pub fn stream_id(node: usize, device: usize) -> u64 {
        ((node as u64) << 32) | device as u64
    }

    pub fn stream(&self, node: usize, device: usize) -> DeviceStream {
        let id = Self::stream_id(node, device);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(id);
        DeviceStream { id, rng }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceStream {
    id: u64,
    rng: ChaCha8Rng,
}

impl DeviceStream {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingOutcome {
    pub lo: f64,
    pub hi: f64,
    /// Probability of realizing `hi`.
    pub prob_upper: f64,
    pub realized: f64,
    pub stream: u64,
}

/// Upper-rate probability `(c_star - lo) / (hi - lo)`; zero for a degenerate bracket.
pub fn upper_probability(c_star: f64, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        ((c_star - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Draws `hi` with probability `(c_star - lo) / (hi - lo)`, otherwise `lo`, so
/// the realized rate has expectation `c_star`. Degenerate brackets return the
/// single rate without consuming randomness.
pub fn two_point_sample(c_star: f64, bracket: (f64, f64), stream: &mut DeviceStream) -> RoundingOutcome {
    let (lo, hi) = bracket;
    let prob_upper = upper_probability(c_star, bracket);
    let realized = if hi > lo {
        if stream.uniform() < prob_upper {
            hi
        } else {
            lo
        }
    } else {
        lo
    };
    RoundingOutcome {
        lo,
        hi,
        prob_upper,
        realized,
        stream: stream.id(),
    }
}

/// A slow device's location and rounding span, in p.u.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlowSpan {
    pub node: usize,
    pub span: f64,
}

/// `D_S / 4 * sum_j R_ij^2 * max span^2` at every node.
pub fn variance_upper_bound(model: &LinearGridModel, spans: &[SlowSpan]) -> Vec<f64> {
    let count = spans.len() as f64;
    let max_span = spans.iter().map(|s| s.span.abs()).fold(0.0, f64::max);
    row_square_sums(model)
        .into_iter()
        .map(|r2| count / 4.0 * r2 * max_span * max_span)
        .collect()
}

/// `sum_j R_ij^2 * sum_{devices} span^2 / 4`, the tighter intermediate bound.
pub fn variance_bound_device_sum(model: &LinearGridModel, spans: &[SlowSpan]) -> Vec<f64> {
    let span_sq: f64 = spans.iter().map(|s| s.span * s.span).sum();
    row_square_sums(model)
        .into_iter()
        .map(|r2| r2 * span_sq / 4.0)
        .collect()
}

fn row_square_sums(model: &LinearGridModel) -> Vec<f64> {
    model
        .r
        .row_iter()
        .map(|row| row.iter().map(|r| r * r).sum())
        .collect()
}

/// Limits tightened by a margin `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustBounds {
    pub delta: f64,
    pub limits: VoltageLimits,
}

impl RobustBounds {
    /// Chebyshev bound `Var / (2 delta^2)` on the one-sided violation probability.
    pub fn violation_probability_bound(&self, variance: f64) -> f64 {
        if self.delta == 0.0 {
            return if variance > 0.0 { 1.0 } else { 0.0 };
        }
        (variance / (2.0 * self.delta * self.delta)).min(1.0)
    }
}

/// `v_max' = v_max - delta`, `v_min' = v_min + delta`.
pub fn robust_limits(limits: &VoltageLimits, delta: f64) -> Result<RobustBounds> {
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Parameter(format!("robust margin must be >= 0, got {delta}")));
    }
    let lower: Vec<f64> = limits.lower.iter().map(|v| v + delta).collect();
    let upper: Vec<f64> = limits.upper.iter().map(|v| v - delta).collect();
    if let Some(i) = lower.iter().zip(&upper).position(|(lo, hi)| lo >= hi) {
        return Err(Error::Parameter(format!(
            "margin {delta} leaves an empty voltage band at node {}",
            i + 1
        )));
    }
    Ok(RobustBounds {
        delta,
        limits: VoltageLimits { lower, upper },
    })
}
