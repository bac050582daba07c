//! Fluctuating displacement field `zeta(x) = sum_i c_i phi_i(x)` on a periodic box.
//!
//! Every mode is a plane wave `phi(x) = a e cos(k.x + p)` with unit
//! direction `e`; values, Jacobians and second derivatives are analytic.

use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

use crate::error::{Error, Result};
use crate::linalg;
use crate::series::Series;

pub type Vector<const D: usize> = SVector<f64, D>;
pub type Matrix<const D: usize> = SMatrix<f64, D, D>;

/// Smallest singular value of `Id + grad zeta` tolerated before a point is
/// declared outside the diffeomorphism regime.
pub const MIN_SINGULAR_VALUE: f64 = 1e-6;

/// Periodic box `[0, L_1) x ... x [0, L_D)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Domain<const D: usize> {
    pub lengths: Vector<D>,
}

impl<const D: usize> Domain<D> {
    pub fn new(lengths: Vector<D>) -> Result<Self> {
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::config("domain side lengths must be positive"));
        }
        Ok(Domain { lengths })
    }

    pub fn unit_torus() -> Self {
        Domain {
            lengths: Vector::<D>::from_element(TAU),
        }
    }

    pub fn wrap(&self, x: &Vector<D>) -> Vector<D> {
        Vector::<D>::from_fn(|i, _| x[i].rem_euclid(self.lengths[i]))
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mode<const D: usize> {
    pub wavevector: Vector<D>,
    pub phase: f64,
    pub amplitude: f64,
    pub direction: Vector<D>,
}

impl<const D: usize> Mode<D> {
    #[inline]
    fn angle(&self, x: &Vector<D>) -> f64 {
        self.wavevector.dot(x) + self.phase
    }

    #[inline]
    pub fn value(&self, x: &Vector<D>) -> Vector<D> {
        self.direction * (self.amplitude * self.angle(x).cos())
    }

    /// `J_kj = d phi_k / d x_j`.
    #[inline]
    pub fn jacobian(&self, x: &Vector<D>) -> Matrix<D> {
        self.direction * self.wavevector.transpose() * (-self.amplitude * self.angle(x).sin())
    }

    pub fn sup_norm(&self) -> f64 {
        self.amplitude.abs()
    }

    /// Spectral-norm bound of the Jacobian over the domain.
    pub fn jacobian_sup_norm(&self) -> f64 {
        self.amplitude.abs() * self.wavevector.norm()
    }
}

/// The `M` spatial modes with their domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeBasis<const D: usize> {
    domain: Domain<D>,
    modes: Vec<Mode<D>>,
}

impl<const D: usize> ModeBasis<D> {
    /// Validates periodicity of every wavevector and normalizes directions.
    pub fn new(domain: Domain<D>, modes: Vec<Mode<D>>) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::config("mode basis needs at least one mode"));
        }
        let mut out = Vec::with_capacity(modes.len());
        for (i, mut m) in modes.into_iter().enumerate() {
            let n = m.direction.norm();
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::config(format!("mode {i}: direction must be nonzero")));
            }
            m.direction /= n;
            if !m.phase.is_finite() || !m.amplitude.is_finite() {
                return Err(Error::config(format!("mode {i}: non-finite phase or amplitude")));
            }
            for j in 0..D {
                let cycles = m.wavevector[j] * domain.lengths[j] / TAU;
                if !cycles.is_finite() || (cycles - cycles.round()).abs() > 1e-9 {
                    return Err(Error::config(format!(
                        "mode {i}: wavevector component {j} is not periodic on the box"
                    )));
                }
            }
            out.push(m);
        }
        Ok(ModeBasis { domain, modes: out })
    }

    /// A single spatially constant mode `phi = amplitude * direction`.
    pub fn constant(domain: Domain<D>, amplitude: f64, direction: Vector<D>) -> Result<Self> {
        ModeBasis::new(
            domain,
            vec![Mode {
                wavevector: Vector::<D>::zeros(),
                phase: 0.0,
                amplitude,
                direction,
            }],
        )
    }

    /// `count` low-wavenumber modes with distinct wavevectors, random phases
    /// and directions, unit amplitude.
    pub fn auto(domain: Domain<D>, count: usize, amplitude: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let modes = low_wavenumbers::<D>(count)
            .into_iter()
            .map(|n| {
                let wavevector = Vector::<D>::from_fn(|j, _| TAU * n[j] as f64 / domain.lengths[j]);
                let direction = loop {
                    let v = Vector::<D>::from_fn(|_, _| rng.random_range(-1.0..1.0));
                    if v.norm() > 0.2 {
                        break v;
                    }
                };
                Mode {
                    wavevector,
                    phase: rng.random_range(0.0..TAU),
                    amplitude,
                    direction,
                }
            })
            .collect();
        ModeBasis::new(domain, modes)
    }

    pub fn domain(&self) -> &Domain<D> {
        &self.domain
    }

    pub fn modes(&self) -> &[Mode<D>] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    /// `sum_i w_i phi_i(x)`; shared by `eval_zeta` and `dzeta_dt`.
    #[inline]
    pub fn combine(&self, weights: &[f64], x: &Vector<D>) -> Vector<D> {
        let mut out = Vector::<D>::zeros();
        for (m, w) in self.modes.iter().zip(weights) {
            if *w != 0.0 {
                out += m.value(x) * *w;
            }
        }
        out
    }

    /// `sum_i w_i grad phi_i(x)`.
    #[inline]
    pub fn combine_jacobian(&self, weights: &[f64], x: &Vector<D>) -> Matrix<D> {
        let mut out = Matrix::<D>::zeros();
        for (m, w) in self.modes.iter().zip(weights) {
            if *w != 0.0 {
                out += m.jacobian(x) * *w;
            }
        }
        out
    }

    /// Derivatives of `sum_i w_i grad phi_i` along each coordinate:
    /// entry `[j][(k, l)] = d/dx_j d phi_k / d x_l`.
    pub fn combine_second_derivatives(&self, weights: &[f64], x: &Vector<D>) -> [Matrix<D>; D] {
        let mut out = [Matrix::<D>::zeros(); D];
        for (m, w) in self.modes.iter().zip(weights) {
            if *w == 0.0 {
                continue;
            }
            let outer = m.direction * m.wavevector.transpose() * (-m.amplitude * m.angle(x).cos() * w);
            for (j, slot) in out.iter_mut().enumerate() {
                *slot += outer * m.wavevector[j];
            }
        }
        out
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.modes.len() {
            return Err(Error::DimensionMismatch {
                expected: self.modes.len(),
                got: n,
            });
        }
        Ok(())
    }

    /// Displacement `zeta(x) = sum_i c_i phi_i(x)`.
    pub fn eval_zeta(&self, coeffs: &[f64], x: &Vector<D>) -> Result<Vector<D>> {
        self.check_len(coeffs.len())?;
        Ok(self.combine(coeffs, &self.domain.wrap(x)))
    }

    /// `d zeta / dt = sum_i lambda_i phi_i(x)`.
    pub fn dzeta_dt(&self, lambda: &[f64], x: &Vector<D>) -> Result<Vector<D>> {
        self.check_len(lambda.len())?;
        Ok(self.combine(lambda, &self.domain.wrap(x)))
    }

    pub fn grad_zeta(&self, coeffs: &[f64], x: &Vector<D>) -> Result<Matrix<D>> {
        self.check_len(coeffs.len())?;
        Ok(self.combine_jacobian(coeffs, x))
    }

    /// `J = Id + grad zeta(x)` with its inverse.
    pub fn mean_map_jacobian(&self, coeffs: &[f64], x: &Vector<D>) -> Result<MeanMapJacobian<D>> {
        self.check_len(coeffs.len())?;
        let j = Matrix::<D>::identity() + self.combine_jacobian(coeffs, x);
        let min_sv = linalg::min_singular_value(&linalg::to_dynamic(&j));
        if !(min_sv >= MIN_SINGULAR_VALUE) {
            return Err(self.near_singular(min_sv, coeffs, x));
        }
        let inverse = j.try_inverse().ok_or_else(|| self.near_singular(0.0, coeffs, x))?;
        Ok(MeanMapJacobian {
            matrix: j,
            inverse,
            min_singular_value: min_sv,
        })
    }

    /// Inverse of `Id + grad zeta` for hot loops. Falls back to an exact
    /// singular-value check only when the cheap Frobenius bound fails.
    #[inline]
    pub(crate) fn jacobian_inverse(&self, coeffs: &[f64], x: &Vector<D>) -> Result<Matrix<D>> {
        let j = Matrix::<D>::identity() + self.combine_jacobian(coeffs, x);
        if let Some(inv) = j.try_inverse() {
            // sigma_min = 1/||J^-1||_2 >= 1/||J^-1||_F
            if inv.norm() * MIN_SINGULAR_VALUE <= 1.0 {
                return Ok(inv);
            }
        }
        self.mean_map_jacobian(coeffs, x).map(|m| m.inverse)
    }

    fn near_singular(&self, min_singular: f64, coeffs: &[f64], x: &Vector<D>) -> Error {
        Error::NearSingular {
            min_singular,
            x: x.iter().copied().collect(),
            coeffs: coeffs.to_vec(),
        }
    }

    /// Upper bound on `sup_x ||grad zeta(x)||_2` over all `||c|| <= cap`.
    pub fn gradient_bound(&self, cap: f64) -> f64 {
        cap * self
            .modes
            .iter()
            .map(|m| m.jacobian_sup_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Largest off-diagonal entry of the domain-averaged Gram matrix
    /// `<phi_i . phi_j>`, by midpoint quadrature on `n^D` points.
    pub fn orthogonality_defect(&self, n: usize) -> f64 {
        let m = self.modes.len();
        let mut gram = vec![0.0; m * m];
        let total = n.pow(D as u32);
        let mut values = vec![Vector::<D>::zeros(); m];
        for flat in 0..total {
            let mut rem = flat;
            let x = Vector::<D>::from_fn(|j, _| {
                let idx = rem % n;
                rem /= n;
                (idx as f64 + 0.5) * self.domain.lengths[j] / n as f64
            });
            for (v, mode) in values.iter_mut().zip(&self.modes) {
                *v = mode.value(&x);
            }
            for a in 0..m {
                for b in 0..m {
                    gram[a * m + b] += values[a].dot(&values[b]);
                }
            }
        }
        let mut worst: f64 = 0.0;
        for a in 0..m {
            for b in 0..m {
                if a != b {
                    worst = worst.max((gram[a * m + b] / total as f64).abs());
                }
            }
        }
        worst
    }

    /// Largest sup-norm over the modes.
    pub fn max_sup_norm(&self) -> f64 {
        self.modes.iter().map(Mode::sup_norm).fold(0.0, f64::max)
    }
}

/// Distinct integer wavevectors ordered by length, one per `+-n` pair.
fn low_wavenumbers<const D: usize>(count: usize) -> Vec<[i64; D]> {
    let mut out = Vec::with_capacity(count);
    let mut radius = 1i64;
    while out.len() < count {
        let mut shell: Vec<[i64; D]> = Vec::new();
        let side = (2 * radius + 1) as usize;
        for flat in 0..side.pow(D as u32) {
            let mut rem = flat;
            let mut n = [0i64; D];
            for c in n.iter_mut() {
                *c = (rem % side) as i64 - radius;
                rem /= side;
            }
            let inf = n.iter().map(|v| v.abs()).max().unwrap_or(0);
            if inf != radius {
                continue;
            }
            // canonical representative of {n, -n}: first nonzero entry positive
            if n.iter().find(|v| **v != 0).is_some_and(|v| *v > 0) {
                shell.push(n);
            }
        }
        shell.sort_by_key(|n| (n.iter().map(|v| v * v).sum::<i64>(), *n));
        for n in shell {
            if out.len() < count {
                out.push(n);
            }
        }
        radius += 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanMapJacobian<const D: usize> {
    pub matrix: Matrix<D>,
    pub inverse: Matrix<D>,
    pub min_singular_value: f64,
}

/// Result of the empirical centering check.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteringReport<const D: usize> {
    /// `max_x || mean_t J(x, c_t)^-1 sum_i lambda_i(t) phi_i(x) ||`.
    pub residual: f64,
    pub argmax: Vector<D>,
    pub sample_count: usize,
}

/// Empirical `<(Id + grad zeta)^-1 d zeta/dt>` at each probe, maximized over
/// probes. `coeffs = None` means frozen displacement (`c = 0`).
pub fn centering_residual<const D: usize>(
    basis: &ModeBasis<D>,
    lambda: &Series,
    coeffs: Option<&Series>,
    probes: &[Vector<D>],
) -> Result<CenteringReport<D>> {
    basis.check_len(lambda.dim())?;
    if let Some(c) = coeffs {
        basis.check_len(c.dim())?;
        if c.len() != lambda.len() {
            return Err(Error::DimensionMismatch {
                expected: lambda.len(),
                got: c.len(),
            });
        }
    }
    if lambda.is_empty() || probes.is_empty() {
        return Err(Error::InvalidInput("centering needs samples and probes".into()));
    }
    let mut best = (-1.0, probes[0]);
    for x in probes {
        let mut acc = Vector::<D>::zeros();
        for t in 0..lambda.len() {
            let v = basis.combine(lambda.row(t), x);
            acc += match coeffs {
                None => v,
                Some(c) => basis.jacobian_inverse(c.row(t), x)? * v,
            };
        }
        let r = (acc / lambda.len() as f64).norm();
        if r > best.0 {
            best = (r, *x);
        }
    }
    Ok(CenteringReport {
        residual: best.0,
        argmax: best.1,
        sample_count: lambda.len(),
    })
}
