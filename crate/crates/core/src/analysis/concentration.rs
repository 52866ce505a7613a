use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Hoeffding interval for `|D|_2^2` with `n` i.i.d. `U(-delta/2, delta/2)`
/// entries: `n delta^2 / 12 +- sqrt(n delta^4 / 32 * ln(2 / eps))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingBounds {
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub expected: f64,
    pub half_width: f64,
}

impl HoeffdingBounds {
    pub fn lower(&self) -> f64 {
        self.expected - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.expected + self.half_width
    }

    /// Closed-interval membership.
    pub fn contains(&self, v: f64) -> bool {
        self.lower() <= v && v <= self.upper()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub bounds: HoeffdingBounds,
    pub trials: usize,
    pub empirical_coverage: f64,
}

pub fn hoeffding_interval(n: usize, delta: f64, epsilon: f64) -> Result<HoeffdingBounds> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    let nf = n as f64;
    Ok(HoeffdingBounds {
        n,
        delta,
        epsilon,
        expected: nf * delta * delta / 12.0,
        half_width: (nf * delta.powi(4) / 32.0 * (2.0 / epsilon).ln()).sqrt(),
    })
}

const CHUNK: usize = 1000;

/// Monte Carlo coverage of the Hoeffding interval. Trials are split into
/// chunks of 1000, each with its own stream derived from `seed`, so the
/// result does not depend on how chunks are scheduled.
pub fn monte_carlo_norm_check(
    n: usize,
    delta: f64,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<ConcentrationReport> {
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 trials, got {trials}")));
    }
    let bounds = hoeffding_interval(n, delta, epsilon)?;
    let chunks: Vec<usize> = (0..trials.div_ceil(CHUNK)).collect();
    let count = |c: usize| -> Result<usize> {
        let mut rng = seed::labeled_rng(seed, &format!("norm-check/{c}"));
        let m = CHUNK.min(trials - c * CHUNK);
        let mut inside = 0;
        for _ in 0..m {
            let mut s = 0.0;
            for _ in 0..n {
                let u: f64 = rng.random::<f64>() - 0.5;
                s += u * u;
            }
            if bounds.contains(s * delta * delta) {
                inside += 1;
            }
        }
        Ok(inside)
    };
    let inside: usize = crate::train::map_maybe_parallel(&chunks, count)?.into_iter().sum();
    Ok(ConcentrationReport { bounds, trials, empirical_coverage: inside as f64 / trials as f64 })
}
