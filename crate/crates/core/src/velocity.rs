//! Catalog of analytic mean velocity fields `u(x, t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::{Matrix, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanVelocityField {
    Zero,
    /// Constant velocity `U`.
    Uniform {
        velocity: Vec<f64>,
    },
    /// `u_0 = U sin(k x_1)`, other components zero.
    Shear {
        amplitude: f64,
        wavenumber: f64,
    },
    /// Taylor-Green cell in the first two coordinates:
    /// `u = U (sin(k x0) cos(k x1), -cos(k x0) sin(k x1))`.
    Cellular {
        amplitude: f64,
        wavenumber: f64,
    },
    /// Solid-body rotation about `center` in the first two coordinates.
    Rotation {
        omega: f64,
        center: Vec<f64>,
    },
}

impl MeanVelocityField {
    pub fn name(&self) -> &'static str {
        match self {
            MeanVelocityField::Zero => "zero",
            MeanVelocityField::Uniform { .. } => "uniform",
            MeanVelocityField::Shear { .. } => "shear",
            MeanVelocityField::Cellular { .. } => "cellular",
            MeanVelocityField::Rotation { .. } => "rotation",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let need_2d = |name: &str| {
            if d < 2 {
                Err(Error::config(format!("velocity kind {name} needs dimension >= 2")))
            } else {
                Ok(())
            }
        };
        match self {
            MeanVelocityField::Zero => Ok(()),
            MeanVelocityField::Uniform { velocity } => {
                if velocity.len() != d {
                    return Err(Error::config(format!(
                        "uniform velocity has {} components, dimension is {d}",
                        velocity.len()
                    )));
                }
                finite(velocity)
            }
            MeanVelocityField::Shear { amplitude, wavenumber }
            | MeanVelocityField::Cellular { amplitude, wavenumber } => {
                need_2d(self.name())?;
                finite(&[*amplitude, *wavenumber])
            }
            MeanVelocityField::Rotation { omega, center } => {
                need_2d(self.name())?;
                if center.len() != d {
                    return Err(Error::config("rotation center must have one entry per dimension"));
                }
                finite(&[*omega])?;
                finite(center)
            }
        }
    }

    #[inline]
    pub fn eval<const D: usize>(&self, x: &Vector<D>, _t: f64) -> Vector<D> {
        let mut u = Vector::<D>::zeros();
        match self {
            MeanVelocityField::Zero => {}
            MeanVelocityField::Uniform { velocity } => {
                for i in 0..D {
                    u[i] = velocity[i];
                }
            }
            MeanVelocityField::Shear { amplitude, wavenumber } => {
                u[0] = amplitude * (wavenumber * x[1]).sin();
            }
            MeanVelocityField::Cellular { amplitude, wavenumber } => {
                let (s0, c0) = (wavenumber * x[0]).sin_cos();
                let (s1, c1) = (wavenumber * x[1]).sin_cos();
                u[0] = amplitude * s0 * c1;
                u[1] = -amplitude * c0 * s1;
            }
            MeanVelocityField::Rotation { omega, center } => {
                u[0] = -omega * (x[1] - center[1]);
                u[1] = omega * (x[0] - center[0]);
            }
        }
        u
    }

    /// `(grad u)_kj = d u_k / d x_j`.
    pub fn jacobian<const D: usize>(&self, x: &Vector<D>, _t: f64) -> Matrix<D> {
        let mut g = Matrix::<D>::zeros();
        match self {
            MeanVelocityField::Zero | MeanVelocityField::Uniform { .. } => {}
            MeanVelocityField::Shear { amplitude, wavenumber } => {
                g[(0, 1)] = amplitude * wavenumber * (wavenumber * x[1]).cos();
            }
            MeanVelocityField::Cellular { amplitude, wavenumber } => {
                let (s0, c0) = (wavenumber * x[0]).sin_cos();
                let (s1, c1) = (wavenumber * x[1]).sin_cos();
                let ak = amplitude * wavenumber;
                g[(0, 0)] = ak * c0 * c1;
                g[(0, 1)] = -ak * s0 * s1;
                g[(1, 0)] = ak * s0 * s1;
                g[(1, 1)] = -ak * c0 * c1;
            }
            MeanVelocityField::Rotation { omega, .. } => {
                g[(0, 1)] = -omega;
                g[(1, 0)] = *omega;
            }
        }
        g
    }

    /// True when the field vanishes identically.
    pub fn is_zero(&self) -> bool {
        match self {
            MeanVelocityField::Zero => true,
            MeanVelocityField::Uniform { velocity } => velocity.iter().all(|v| *v == 0.0),
            MeanVelocityField::Shear { amplitude, .. } | MeanVelocityField::Cellular { amplitude, .. } => {
                *amplitude == 0.0
            }
            MeanVelocityField::Rotation { omega, .. } => *omega == 0.0,
        }
    }
}

fn finite(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::config("velocity parameters must be finite"))
    }
}
