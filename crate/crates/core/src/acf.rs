//! Lagged correlation matrices and their Green-Kubo integrals.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Series;

/// Default truncation window, in autocorrelation e-folding times.
pub const DEFAULT_EFOLDINGS: f64 = 8.0;

/// Lagged correlation matrices `C(k dt)`, `C_ij(s) = <a_i(0) b_j(s)>`,
/// for `k = 0..=max_lag`.
#[derive(Debug, Clone, PartialEq)]
pub struct Acf {
    pub dt: f64,
    pub values: Vec<DMatrix<f64>>,
}

impl Acf {
    pub fn max_lag(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.first().map(|m| (m.nrows(), m.ncols())).unwrap_or((0, 0))
    }

    pub fn trace(&self, k: usize) -> f64 {
        self.values[k].trace()
    }

    /// Every entry multiplied by `alpha`.
    pub fn scaled(&self, alpha: f64) -> Acf {
        Acf {
            dt: self.dt,
            values: self.values.iter().map(|m| m * alpha).collect(),
        }
    }
}

fn check_lags(n: usize, max_lag: usize) -> Result<()> {
    if max_lag == 0 {
        return Err(Error::InvalidInput("max_lag must be >= 1".into()));
    }
    let need = 10 * max_lag;
    if n <= need {
        return Err(Error::TooFewSamples { got: n, need });
    }
    Ok(())
}

/// Sample autocorrelation after mean removal, `C(k) = 1/(N-k) sum_t x(t) x(t+k)^T`.
/// `C(0)` is symmetrized.
pub fn autocorrelation(samples: &Series, max_lag: usize, dt: f64) -> Result<Acf> {
    let mut acf = cross_correlation(samples, samples, max_lag, dt)?;
    let c0 = &acf.values[0];
    acf.values[0] = (c0 + c0.transpose()) * 0.5;
    Ok(acf)
}

/// Mean-removed lagged cross-correlation `C_ij(k) = 1/(N-k) sum_t a_i(t) b_j(t+k)`.
pub fn cross_correlation(a: &Series, b: &Series, max_lag: usize, dt: f64) -> Result<Acf> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("lag spacing must be positive".into()));
    }
    let n = a.len();
    check_lags(n, max_lag)?;
    let a = a.centered();
    let b = b.centered();
    let (p, q) = (a.dim(), b.dim());
    let fa = a.as_flat();
    let fb = b.as_flat();
    let mut values = Vec::with_capacity(max_lag + 1);
    let mut acc = vec![0.0; p * q];
    for k in 0..=max_lag {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..n - k {
            let ra = &fa[t * p..(t + 1) * p];
            let rb = &fb[(t + k) * q..(t + k + 1) * q];
            for i in 0..p {
                let ai = ra[i];
                let row = &mut acc[i * q..(i + 1) * q];
                for j in 0..q {
                    row[j] += ai * rb[j];
                }
            }
        }
        let norm = 1.0 / (n - k) as f64;
        values.push(DMatrix::from_row_slice(p, q, &acc).map(|v| v * norm));
    }
    if values.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("non-finite correlation".into()));
    }
    Ok(Acf { dt, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum Truncation {
    /// Integrate over lags `0..=lag`.
    FixedLag { lag: usize },
    /// Stop at the first lag where the trace of `C` is nonpositive.
    FirstZeroCrossing,
    /// Integrate over `factor` e-folding times of the normalized trace.
    EFoldings { factor: f64 },
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation::EFoldings {
            factor: DEFAULT_EFOLDINGS,
        }
    }
}

impl Truncation {
    /// The lag at which the integral is cut for this `acf`.
    pub fn resolve(&self, acf: &Acf) -> Result<usize> {
        let available = acf.max_lag();
        let lag = match *self {
            Truncation::FixedLag { lag } => lag,
            Truncation::FirstZeroCrossing => match (1..=available).find(|&k| acf.trace(k) <= 0.0) {
                Some(k) => k,
                None => {
                    return Err(Error::InsufficientLags {
                        needed: available + 1,
                        available,
                    })
                }
            },
            Truncation::EFoldings { factor } => {
                let c0 = acf.trace(0);
                if c0 <= 0.0 {
                    0
                } else {
                    let target = c0 * (-1.0f64).exp();
                    let k = (1..=available)
                        .find(|&k| acf.trace(k) < target)
                        .ok_or(Error::InsufficientLags {
                            needed: available + 1,
                            available,
                        })?;
                    // linear interpolation of the 1/e crossing between k-1 and k
                    let (hi, lo) = (acf.trace(k - 1), acf.trace(k));
                    let frac = if hi > lo { (hi - target) / (hi - lo) } else { 1.0 };
                    let tau = (k as f64 - 1.0 + frac).max(0.0);
                    (factor * tau).ceil() as usize
                }
            }
        };
        if lag > available {
            return Err(Error::InsufficientLags { needed: lag, available });
        }
        Ok(lag)
    }
}

/// Trapezoidal Green-Kubo integral of a correlation function.
#[derive(Debug, Clone, PartialEq)]
pub struct GreenKubo {
    pub matrix: DMatrix<f64>,
    pub lag: usize,
    pub dt: f64,
}

impl GreenKubo {
    pub fn truncation_time(&self) -> f64 {
        self.lag as f64 * self.dt
    }

    /// `(G + G^T) / 2`.
    pub fn symmetrized(&self) -> DMatrix<f64> {
        (&self.matrix + self.matrix.transpose()) * 0.5
    }
}

/// `G = int_0^T C(s) ds` by the trapezoid rule, with `T` set by `truncation`.
pub fn green_kubo_integral(acf: &Acf, truncation: Truncation) -> Result<GreenKubo> {
    let lag = truncation.resolve(acf)?;
    Ok(GreenKubo {
        matrix: trapezoid(acf, lag),
        lag,
        dt: acf.dt,
    })
}

pub(crate) fn trapezoid(acf: &Acf, lag: usize) -> DMatrix<f64> {
    let (p, q) = acf.dim();
    let mut g = DMatrix::zeros(p, q);
    if lag == 0 {
        return g;
    }
    g += &acf.values[0] * 0.5;
    for k in 1..lag {
        g += &acf.values[k];
    }
    g += &acf.values[lag] * 0.5;
    g * acf.dt
}
