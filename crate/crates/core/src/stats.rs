//! Streaming moments, empirical distribution functions and two-sample
//! Kolmogorov-Smirnov distances.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One-pass mean and covariance accumulator (Welford, merged by Chan's rule).
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    count: u64,
    mean: DVector<f64>,
    /// Sum of outer products of deviations from the running mean.
    m2: DMatrix<f64>,
}

impl Moments {
    pub fn new(dim: usize) -> Self {
        Moments {
            count: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_samples<'a>(dim: usize, samples: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut m = Moments::new(dim);
        for s in samples {
            m.push(s);
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) {
        debug_assert_eq!(x.len(), self.dim());
        self.count += 1;
        let n = self.count as f64;
        let delta = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        self.mean += &delta / n;
        let delta2 = DVector::from_iterator(x.len(), x.iter().zip(self.mean.iter()).map(|(a, b)| a - b));
        self.m2 += &delta * delta2.transpose();
    }

    /// Combines two accumulators; `a.merge(b)` equals pushing `b`'s samples
    /// into `a` up to rounding.
    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.mean += &delta * (nb / n);
        self.m2 += &other.m2 + &delta * delta.transpose() * (na * nb / n);
        self.count += other.count;
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Unbiased sample covariance (zero for fewer than two samples).
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.count < 2 {
            return DMatrix::zeros(self.dim(), self.dim());
        }
        let c = &self.m2 / (self.count - 1) as f64;
        (&c + c.transpose()) * 0.5
    }

    /// Standard error of each mean component.
    pub fn mean_stderr(&self) -> DVector<f64> {
        let cov = self.covariance();
        let n = self.count.max(1) as f64;
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|i| (cov[(i, i)] / n).sqrt()))
    }
}

/// Sample variance and its standard error for one coordinate.
///
/// The error uses the fourth central moment: `Var(s^2) ~ (m4 - s^4) / n`.
pub fn variance_with_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n < 2 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let (mut m2, mut m4) = (0.0, 0.0);
    for x in xs {
        let d = (x - mean) * (x - mean);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / (n - 1) as f64;
    let m4 = m4 / n as f64;
    let biased = m2 / n as f64;
    let se = ((m4 - biased * biased).max(0.0) / n as f64).sqrt();
    (var, se)
}

/// Two-sample KS statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::InvalidInput("NaN in KS sample".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = if a[i] <= b[j] { a[i] } else { b[j] };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// KS over each coordinate of row-major `d`-vectors; returns the maximum.
pub fn ks_distance_max(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, |r| r.len());
    let mut worst = 0.0f64;
    for k in 0..d {
        let xa: Vec<f64> = a.iter().map(|r| r[k]).collect();
        let xb: Vec<f64> = b.iter().map(|r| r[k]).collect();
        worst = worst.max(ks_distance(&xa, &xb)?);
    }
    Ok(worst)
}

/// Asymptotic 95% critical value of the two-sample KS statistic.
pub fn ks_critical_95(n: usize, m: usize) -> f64 {
    let (n, m) = (n as f64, m as f64);
    1.358 * ((n + m) / (n * m)).sqrt()
}

/// `F(x_k)` for each grid point.
pub fn ecdf_on_grid(samples: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len().max(1) as f64;
    grid.iter().map(|g| s.partition_point(|v| v <= g) as f64 / n).collect()
}

/// `n` equally spaced points covering `[lo, hi]`; a single point if the
/// range is degenerate.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}
