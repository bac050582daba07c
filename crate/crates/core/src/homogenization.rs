//! Green-Kubo estimates of the homogenized drift and diffusion.
//!
//! For the slow equation `dq/dt = f1 + f0 / eps` with
//! `f0 = -J^-1 sum_i lambda_i phi_i` and `f1 = J^-1 u(q + zeta)`, the limit
//! SDE `dQ = U(Q) dt + sigma(Q) dW` has
//!
//! ```text
//! sigma sigma^T / 2 = int_0^inf sym< f0(0) f0(s)^T > ds
//! U = < f1 > + int_0^inf < (f0(0) . grad) f0(s) > ds
//! ```
//!
//! Expectations are ergodic averages over one long driver trajectory.
//! With frozen displacement (`c = 0`, `J = Id`) the diffusion reduces to
//! `sum_ij G_ij phi_i phi_j^T` with `G` the Green-Kubo matrix of `lambda`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::acf::{self, Acf, Truncation};
use crate::driver::{FastDriver, ObservableMap};
use crate::error::{Error, Result};
use crate::linalg;
use crate::modes::{Matrix, ModeBasis, Vector};
use crate::multiscale::CoefficientChannels;
use crate::series::Series;
use crate::velocity::MeanVelocityField;

/// Rows of sigma with smaller norm are dropped by [`extract_xi`].
pub const XI_DROP_NORM: f64 = 1e-12;
/// Relative clip mass above which [`factor_diffusion`] reports not-PSD.
pub const PSD_CLIP_LIMIT: f64 = 1e-4;

/// `(a b^T)_ij = a_i b_j`.
pub fn outer(a: &[f64], b: &[f64]) -> Result<DMatrix<f64>> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| a[i] * b[j]))
}

/// Time-aligned driver samples: observables and, unless frozen, the
/// displacement coefficients read at the same instants.
#[derive(Debug, Clone)]
pub struct FastSamples {
    pub lambda: Series,
    pub coeffs: Option<Series>,
    /// Fast-time spacing between rows.
    pub spacing: f64,
}

impl FastSamples {
    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Every observable multiplied by `alpha`; coefficients unchanged.
    pub fn scaled(&self, alpha: f64) -> FastSamples {
        FastSamples {
            lambda: self.lambda.scaled(alpha),
            coeffs: self.coeffs.clone(),
            spacing: self.spacing,
        }
    }
}

/// Records `(lambda, c)` along one trajectory: `burn_in` discarded steps,
/// then a sample every `stride` steps.
pub fn sample_fast(
    driver: &mut FastDriver,
    lambda_map: &ObservableMap,
    coefficients: Option<&CoefficientChannels>,
    dt_fast: f64,
    n_samples: usize,
    burn_in: usize,
    stride: usize,
) -> Result<FastSamples> {
    if n_samples == 0 || stride == 0 {
        return Err(Error::InvalidInput("n_samples and stride must be >= 1".into()));
    }
    lambda_map.check_driver(driver)?;
    if let Some(c) = coefficients {
        c.map().check_driver(driver)?;
    }
    for _ in 0..burn_in {
        driver.step(dt_fast)?;
    }
    let m = lambda_map.dim();
    let mut lambda = Series::with_capacity(m, n_samples);
    let mut coeffs = coefficients.map(|c| Series::with_capacity(c.map().dim(), n_samples));
    let mut lbuf = vec![0.0; m];
    let mut cbuf = vec![0.0; coefficients.map_or(0, |c| c.map().dim())];
    for k in 0..n_samples {
        if k > 0 {
            for _ in 0..stride {
                driver.step(dt_fast)?;
            }
        }
        lambda_map.eval_into(driver.state(), &mut lbuf);
        lambda.push(&lbuf);
        if let (Some(ch), Some(series)) = (coefficients, coeffs.as_mut()) {
            ch.eval_into(driver.state(), &mut cbuf);
            series.push(&cbuf);
        }
    }
    let unit = if driver.kind().is_discrete() { 1.0 } else { dt_fast };
    Ok(FastSamples {
        lambda,
        coeffs,
        spacing: unit * stride as f64,
    })
}

/// `sum_ij G_ij phi_i(q) phi_j(q)^T`.
pub fn mode_weighted_tensor<const D: usize>(basis: &ModeBasis<D>, g: &DMatrix<f64>, q: &Vector<D>) -> Matrix<D> {
    let phis: Vec<Vector<D>> = basis.modes().iter().map(|m| m.value(q)).collect();
    let mut out = Matrix::<D>::zeros();
    for (i, pi) in phis.iter().enumerate() {
        for (j, pj) in phis.iter().enumerate() {
            out += pi * pj.transpose() * g[(i, j)];
        }
    }
    out
}

/// `sum_il G_il (phi_i . grad) phi_l (q)`.
pub fn mode_weighted_correction<const D: usize>(basis: &ModeBasis<D>, g: &DMatrix<f64>, q: &Vector<D>) -> Vector<D> {
    let mut out = Vector::<D>::zeros();
    for (i, mi) in basis.modes().iter().enumerate() {
        let pi = mi.value(q);
        for (l, ml) in basis.modes().iter().enumerate() {
            out += ml.jacobian(q) * pi * g[(i, l)];
        }
    }
    out
}

fn symmetrize<const D: usize>(m: &Matrix<D>) -> Matrix<D> {
    (m + m.transpose()) * 0.5
}

fn check_samples<const D: usize>(basis: &ModeBasis<D>, samples: &FastSamples) -> Result<()> {
    if samples.lambda.dim() != basis.len() {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            got: samples.lambda.dim(),
        });
    }
    if let Some(c) = &samples.coeffs {
        if c.len() != samples.lambda.len() || c.dim() != basis.len() {
            return Err(Error::DimensionMismatch {
                expected: samples.lambda.len(),
                got: c.len(),
            });
        }
    }
    Ok(())
}

/// `f0(q, t) = -J_t^-1 sum_i lambda_i(t) phi_i(q)` along the samples.
fn forcing_series<const D: usize>(basis: &ModeBasis<D>, q: &Vector<D>, samples: &FastSamples) -> Result<Series> {
    let mut out = Series::with_capacity(D, samples.len());
    for t in 0..samples.len() {
        let v = basis.combine(samples.lambda.row(t), q);
        let f = match &samples.coeffs {
            None => -v,
            Some(c) => -(basis.jacobian_inverse(c.row(t), q)? * v),
        };
        out.push(f.as_slice());
    }
    Ok(out)
}

/// Row-major `grad f0` (entry `(k, j) = d f0_k / d q_j`) along the samples.
fn forcing_gradient_series<const D: usize>(
    basis: &ModeBasis<D>,
    q: &Vector<D>,
    samples: &FastSamples,
) -> Result<Series> {
    let mut out = Series::with_capacity(D * D, samples.len());
    let mut row = vec![0.0; D * D];
    for t in 0..samples.len() {
        let lam = samples.lambda.row(t);
        let grad = match &samples.coeffs {
            None => -basis.combine_jacobian(lam, q),
            Some(cs) => {
                // d_j f0 = J^-1 (d_j J) J^-1 v - J^-1 d_j v
                let c = cs.row(t);
                let jinv = basis.jacobian_inverse(c, q)?;
                let v = basis.combine(lam, q);
                let dv = basis.combine_jacobian(lam, q);
                let d2 = basis.combine_second_derivatives(c, q);
                let jinv_v = jinv * v;
                let mut g = Matrix::<D>::zeros();
                for (j, dj) in d2.iter().enumerate() {
                    let col = jinv * (dj * jinv_v) - jinv * dv.column(j);
                    g.set_column(j, &col);
                }
                g
            }
        };
        for k in 0..D {
            for j in 0..D {
                row[k * D + j] = grad[(k, j)];
            }
        }
        out.push(&row);
    }
    Ok(out)
}

/// Half the homogenized diffusion matrix, `D = sigma sigma^T / 2`, at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionEstimate<const D: usize> {
    pub tensor: Matrix<D>,
    /// Truncation lag (in samples) actually used.
    pub lag: usize,
    pub spacing: f64,
}

/// Green-Kubo estimate of `sigma sigma^T / 2` at `q`.
///
/// `lambda_acf` must come from `samples.lambda`; it fixes the truncation lag.
/// Frozen samples (`coeffs = None`) use the closed form in `G`; otherwise the
/// correlation of the full forcing `f0` is integrated over the same window.
pub fn estimate_diffusion_tensor<const D: usize>(
    basis: &ModeBasis<D>,
    q: &Vector<D>,
    lambda_acf: &Acf,
    samples: &FastSamples,
    truncation: Truncation,
) -> Result<DiffusionEstimate<D>> {
    check_samples(basis, samples)?;
    if lambda_acf.dim() != (basis.len(), basis.len()) {
        return Err(Error::DimensionMismatch {
            expected: basis.len(),
            got: lambda_acf.dim().0,
        });
    }
    let gk = acf::green_kubo_integral(lambda_acf, truncation)?;
    let tensor = match &samples.coeffs {
        None => mode_weighted_tensor(basis, &gk.symmetrized(), q),
        Some(_) => {
            let f0 = forcing_series(basis, q, samples)?;
            let facf = acf::autocorrelation(&f0, gk.lag.max(1), samples.spacing)?;
            let g = acf::trapezoid(&facf, gk.lag);
            linalg::to_static::<D, D>(&g)
        }
    };
    Ok(DiffusionEstimate {
        tensor: symmetrize(&tensor),
        lag: gk.lag,
        spacing: lambda_acf.dt,
    })
}

/// Drift split into its averaged-velocity and fluctuation-induced parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftEstimate<const D: usize> {
    pub mean_velocity: Vector<D>,
    pub correction: Vector<D>,
}

impl<const D: usize> DriftEstimate<D> {
    pub fn total(&self) -> Vector<D> {
        self.mean_velocity + self.correction
    }
}

/// `U = <J^-1 u(q + zeta, t)> + int_0^T <(f0(0) . grad) f0(s)> ds`, the time
/// integral truncated at `lag` samples.
pub fn estimate_drift<const D: usize>(
    basis: &ModeBasis<D>,
    q: &Vector<D>,
    velocity: &MeanVelocityField,
    samples: &FastSamples,
    lag: usize,
    t: f64,
) -> Result<DriftEstimate<D>> {
    check_samples(basis, samples)?;
    let n = samples.len();
    if n == 0 {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    let mean_velocity = match &samples.coeffs {
        None => velocity.eval(q, t),
        Some(cs) => {
            let mut acc = Vector::<D>::zeros();
            for k in 0..n {
                let c = cs.row(k);
                let shifted = q + basis.combine(c, q);
                acc += basis.jacobian_inverse(c, q)? * velocity.eval(&shifted, t);
            }
            acc / n as f64
        }
    };
    let mut correction = Vector::<D>::zeros();
    if lag > 0 {
        let f0 = forcing_series(basis, q, samples)?;
        let grad = forcing_gradient_series(basis, q, samples)?;
        let cross = acf::cross_correlation(&f0, &grad, lag, samples.spacing)?;
        // contract C_{j,(k,j)}(s) over j
        let contracted = Acf {
            dt: cross.dt,
            values: cross
                .values
                .iter()
                .map(|c| DMatrix::from_fn(D, 1, |k, _| (0..D).map(|j| c[(j, k * D + j)]).sum()))
                .collect(),
        };
        let g = acf::trapezoid(&contracted, lag);
        for k in 0..D {
            correction[k] = g[(k, 0)];
        }
    }
    Ok(DriftEstimate {
        mean_velocity,
        correction,
    })
}

/// Symmetric PSD square root of a diffusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionFactor {
    pub sigma: DMatrix<f64>,
    /// Magnitude of the most negative eigenvalue clipped to zero.
    pub clipped: f64,
}

/// `sigma = V diag(sqrt(max(l, 0))) V^T` for `d2 = V diag(l) V^T`.
pub fn factor_diffusion(d2: &DMatrix<f64>) -> Result<DiffusionFactor> {
    if !d2.is_square() {
        return Err(Error::DimensionMismatch {
            expected: d2.nrows(),
            got: d2.ncols(),
        });
    }
    if d2.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("diffusion matrix is not finite".into()));
    }
    let asym = (d2 - d2.transpose()).amax();
    if asym > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "diffusion matrix asymmetric by {asym:.3e}"
        )));
    }
    let sym = (d2 + d2.transpose()) * 0.5;
    let (values, vectors) = linalg::sym_eigen_sorted(&sym);
    let norm = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clipped = values.iter().fold(0.0f64, |m, v| m.max(-v));
    if clipped > PSD_CLIP_LIMIT * norm {
        return Err(Error::NotPsd {
            clip: clipped,
            limit: PSD_CLIP_LIMIT * norm,
        });
    }
    let roots = DVector::from_iterator(values.len(), values.iter().map(|v| v.max(0.0).sqrt()));
    let sigma = &vectors * DMatrix::from_diagonal(&roots) * vectors.transpose();
    Ok(DiffusionFactor {
        sigma: (&sigma + sigma.transpose()) * 0.5,
        clipped,
    })
}

/// The noise fields `xi_i` as the rows of sigma.
#[derive(Debug, Clone, PartialEq)]
pub struct XiFields {
    pub xi: Vec<DVector<f64>>,
    /// Indices of rows dropped for having norm below [`XI_DROP_NORM`].
    pub dropped: Vec<usize>,
}

pub fn extract_xi(sigma: &DMatrix<f64>) -> XiFields {
    let mut xi = Vec::new();
    let mut dropped = Vec::new();
    for (i, row) in sigma.row_iter().enumerate() {
        if row.norm() < XI_DROP_NORM {
            dropped.push(i);
        } else {
            xi.push(row.transpose());
        }
    }
    XiFields { xi, dropped }
}

/// Homogenized coefficients at one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientEstimate<const D: usize> {
    pub at: Vector<D>,
    pub drift: Vector<D>,
    /// `sigma sigma^T`.
    pub diffusion_matrix: Matrix<D>,
    pub sigma: Matrix<D>,
    pub xi: Vec<Vector<D>>,
    /// Truncation of the Green-Kubo window in fast time.
    pub truncation_lag: f64,
    pub sample_count: usize,
}

impl<const D: usize> CoefficientEstimate<D> {
    /// `sigma sigma^T / 2`.
    pub fn half_diffusion(&self) -> Matrix<D> {
        self.diffusion_matrix * 0.5
    }
}

/// Drift, diffusion, sigma and xi at every probe. Probes are independent
/// and evaluated in parallel; output order follows `probes`.
pub fn estimate_coefficients<const D: usize>(
    basis: &ModeBasis<D>,
    velocity: &MeanVelocityField,
    samples: &FastSamples,
    lambda_acf: &Acf,
    truncation: Truncation,
    probes: &[Vector<D>],
) -> Result<Vec<CoefficientEstimate<D>>> {
    probes
        .par_iter()
        .map(|q| {
            let diff = estimate_diffusion_tensor(basis, q, lambda_acf, samples, truncation)?;
            let drift = estimate_drift(basis, q, velocity, samples, diff.lag, 0.0)?;
            let d2 = diff.tensor * 2.0;
            let factor = factor_diffusion(&linalg::to_dynamic(&d2))?;
            let sigma = linalg::to_static::<D, D>(&factor.sigma);
            let xi = extract_xi(&factor.sigma)
                .xi
                .into_iter()
                .map(|v| Vector::<D>::from_column_slice(v.as_slice()))
                .collect();
            Ok(CoefficientEstimate {
                at: *q,
                drift: drift.total(),
                diffusion_matrix: d2,
                sigma,
                xi,
                truncation_lag: diff.lag as f64 * diff.spacing,
                sample_count: samples.len(),
            })
        })
        .collect()
}
