use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seed;
use crate::tensor::Tensor;

/// Largest dimension accepted by the vertex oracle.
pub const MAX_ORACLE_DIM: usize = 20;

/// Dense symmetric matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Row-major `n x n` entries, symmetric within `1e-12`.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || data.len() != n * n {
            return Err(Error::shape("symmetric matrix", format!("{} entries for n = {n}", data.len())));
        }
        for i in 0..n {
            for j in 0..i {
                if (data[i * n + j] - data[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        Ok(SymMatrix { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// `x^T H x`
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        let n = self.n;
        (0..n).map(|i| x[i] * (0..n).map(|j| self.data[i * n + j] * x[j]).sum::<f64>()).sum()
    }

    pub fn smallest_eigenvalue(&self) -> Result<f64> {
        let t = Tensor::new(vec![self.n, self.n], self.data.clone())?;
        Ok(linalg::symmetric_eigenvalues(&t)?[0])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexMax {
    /// `max_{|D|_inf <= delta} D^T H D`
    pub value: f64,
    /// A maximizing vertex, entries `+-delta`.
    pub vertex: Vec<f64>,
}

/// Exact worst case of the quadratic term over the `l_inf` ball by
/// enumerating all `2^n` vertices (a convex function on a box peaks at a
/// vertex). Equals `delta^2 * |H^(1/2)|_{inf->2}^2`.
pub fn second_order_vertex_oracle(h: &SymMatrix, delta: f64) -> Result<VertexMax> {
    let n = h.n;
    if n > MAX_ORACLE_DIM {
        return Err(Error::InvalidArgument(format!("vertex enumeration is limited to n <= {MAX_ORACLE_DIM}, got {n}")));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidArgument(format!("delta must be >= 0, got {delta}")));
    }
    let lambda_min = h.smallest_eigenvalue()?;
    if lambda_min < -1e-10 {
        return Err(Error::InvalidArgument(format!("matrix is not PSD (smallest eigenvalue {lambda_min})")));
    }
    // Gray-code walk: flipping s_j changes s^T H s by -4 s_j (Hs)_j + 4 H_jj.
    let mut s = vec![1.0; n];
    let mut hs: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h.get(i, j)).sum()).collect();
    let mut q: f64 = hs.iter().sum();
    let mut best = (q, s.clone());
    for k in 1u64..(1u64 << n) {
        let j = k.trailing_zeros() as usize;
        q += -4.0 * s[j] * hs[j] + 4.0 * h.get(j, j);
        for (i, v) in hs.iter_mut().enumerate() {
            *v -= 2.0 * s[j] * h.get(i, j);
        }
        s[j] = -s[j];
        if q > best.0 {
            best = (q, s.clone());
        }
    }
    // recompute exactly at the chosen vertex to drop accumulated round-off
    let value = h.quadratic_form(&best.1) * delta * delta;
    Ok(VertexMax { value, vertex: best.1.iter().map(|v| v * delta).collect() })
}

/// Largest `D^T H D` over uniform samples from the box `|D|_inf <= delta`.
pub fn box_sampling_max(h: &SymMatrix, delta: f64, samples: usize, seed: u64) -> f64 {
    let mut rng = seed::labeled_rng(seed, "box-sampling");
    let mut x = vec![0.0; h.n];
    let mut best = f64::NEG_INFINITY;
    for _ in 0..samples {
        for v in &mut x {
            *v = rng.random_range(-delta..=delta);
        }
        best = best.max(h.quadratic_form(&x));
    }
    best
}

fn lp_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0, |m, v| m.max(v.abs()))
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Check that every sample inside the `l_p` ball of radius `delta` also lies
/// in the `l_inf` ball of the same radius. Returns the number of samples
/// that were inside the `l_p` ball, or an error naming the first violation.
pub fn lp_ball_inclusion_check(samples: &[Vec<f64>], p: f64, delta: f64) -> Result<usize> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    let mut inside = 0;
    for (i, x) in samples.iter().enumerate() {
        if lp_norm(x, p) <= delta {
            inside += 1;
            if lp_norm(x, f64::INFINITY) > delta {
                return Err(Error::InvalidArgument(format!("sample {i} is in the l{p} ball but not the l_inf ball")));
            }
        }
    }
    Ok(inside)
}
