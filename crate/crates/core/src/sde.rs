//! Integrators for `dX = U(X) dt + sum_i xi_i(X) dW_i` in the Ito
//! (Euler-Maruyama) and Stratonovich (Heun) readings, ensemble drivers and
//! particle transport with Jacobian bookkeeping.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modes::{Matrix, Mode, Vector};
use crate::multiscale::slow_step_count;
use crate::velocity::MeanVelocityField;

/// A time-independent vector field on `R^D`.
pub trait VectorField<const D: usize>: Send + Sync {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>>;

    /// `(grad f)_kj = d f_k / d x_j`; central differences unless overridden.
    fn jacobian(&self, x: &Vector<D>) -> Result<Matrix<D>> {
        let mut g = Matrix::<D>::zeros();
        for j in 0..D {
            let h = 1e-6 * (1.0 + x[j].abs());
            let mut e = Vector::<D>::zeros();
            e[j] = h;
            let col = (self.eval(&(x + e))? - self.eval(&(x - e))?) / (2.0 * h);
            g.set_column(j, &col);
        }
        Ok(g)
    }

    fn divergence(&self, x: &Vector<D>) -> Result<f64> {
        Ok(self.jacobian(x)?.trace())
    }
}

pub type Field<const D: usize> = Arc<dyn VectorField<D>>;

/// A spatially constant field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantField<const D: usize>(pub Vector<D>);

impl<const D: usize> VectorField<D> for ConstantField<D> {
    fn eval(&self, _x: &Vector<D>) -> Result<Vector<D>> {
        Ok(self.0)
    }

    fn jacobian(&self, _x: &Vector<D>) -> Result<Matrix<D>> {
        Ok(Matrix::<D>::zeros())
    }
}

/// `A x + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearField<const D: usize> {
    pub matrix: Matrix<D>,
    pub offset: Vector<D>,
}

impl<const D: usize> LinearField<D> {
    pub fn new(matrix: Matrix<D>) -> Self {
        LinearField {
            matrix,
            offset: Vector::<D>::zeros(),
        }
    }
}

impl<const D: usize> VectorField<D> for LinearField<D> {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        Ok(self.matrix * x + self.offset)
    }

    fn jacobian(&self, _x: &Vector<D>) -> Result<Matrix<D>> {
        Ok(self.matrix)
    }
}

/// Closure-backed field; Jacobian by central differences.
pub struct FnField<F>(pub F);

impl<F> FnField<F> {
    pub fn new(f: F) -> Self {
        FnField(f)
    }
}

impl<const D: usize, F> VectorField<D> for FnField<F>
where
    F: Fn(&Vector<D>) -> Vector<D> + Send + Sync,
{
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        Ok((self.0)(x))
    }
}

impl<const D: usize> VectorField<D> for MeanVelocityField {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        Ok(MeanVelocityField::eval(self, x, 0.0))
    }

    fn jacobian(&self, x: &Vector<D>) -> Result<Matrix<D>> {
        Ok(MeanVelocityField::jacobian(self, x, 0.0))
    }
}

/// The columns of a constant matrix as additive noise fields.
pub fn constant_columns<const D: usize>(sigma: &Matrix<D>) -> Vec<Field<D>> {
    (0..D)
        .map(|j| Arc::new(ConstantField(sigma.column(j).into_owned())) as Field<D>)
        .collect()
}

/// `weight * phi(x)` for one spatial mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeField<const D: usize> {
    pub mode: Mode<D>,
    pub weight: f64,
}

impl<const D: usize> VectorField<D> for ModeField<D> {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        Ok(self.mode.value(x) * self.weight)
    }

    fn jacobian(&self, x: &Vector<D>) -> Result<Matrix<D>> {
        Ok(self.mode.jacobian(x) * self.weight)
    }
}

/// `b(x) - 1/2 sum_j (grad xi_j) xi_j (x)`: the drift that makes the
/// Stratonovich equation with noise `xi_j` equal in law to the Ito equation
/// with drift `b`.
pub struct StratonovichDrift<const D: usize> {
    pub ito_drift: Field<D>,
    pub noise: Vec<Field<D>>,
}

impl<const D: usize> VectorField<D> for StratonovichDrift<D> {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        let mut b = self.ito_drift.eval(x)?;
        for f in &self.noise {
            b -= f.jacobian(x)? * f.eval(x)? * 0.5;
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpretation {
    Ito,
    Stratonovich,
}

impl Interpretation {
    pub fn as_str(self) -> &'static str {
        match self {
            Interpretation::Ito => "ito",
            Interpretation::Stratonovich => "stratonovich",
        }
    }
}

/// `dX = U dt + sum_i noise_i(X) dW_i`, read as Ito or Stratonovich.
#[derive(Clone)]
pub struct SdeSpec<const D: usize> {
    pub drift: Field<D>,
    pub noise: Vec<Field<D>>,
    pub interpretation: Interpretation,
    pub dt: f64,
    pub t_final: f64,
    pub ensemble_size: usize,
    pub seed: u64,
}

impl<const D: usize> SdeSpec<D> {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config("sde dt must be positive"));
        }
        if !(self.t_final > 0.0 && self.t_final.is_finite()) {
            return Err(Error::config("sde t_final must be positive"));
        }
        if self.ensemble_size == 0 {
            return Err(Error::config("ensemble size must be >= 1"));
        }
        Ok(())
    }

    pub fn noise_dim(&self) -> usize {
        self.noise.len()
    }
}

fn diverged(step: u64, what: &str) -> Error {
    Error::IntegrationDiverged {
        kind: "sde",
        step,
        detail: format!("non-finite {what}"),
    }
}

fn finite<const D: usize>(x: Vector<D>) -> Result<Vector<D>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(diverged(0, "state"))
    }
}

/// `X + U(X) dt + sum_i noise_i(X) dW_i`; `dw` already carries the `sqrt(dt)`.
pub fn euler_maruyama_step<const D: usize>(x: &Vector<D>, spec: &SdeSpec<D>, dw: &[f64]) -> Result<Vector<D>> {
    if spec.interpretation != Interpretation::Ito {
        return Err(Error::InvalidInput("euler_maruyama_step needs an Ito spec".into()));
    }
    em_step(x, spec.drift.as_ref(), &spec.noise, spec.dt, dw)
}

fn em_step<const D: usize>(
    x: &Vector<D>,
    drift: &dyn VectorField<D>,
    noise: &[Field<D>],
    dt: f64,
    dw: &[f64],
) -> Result<Vector<D>> {
    check_noise(noise, dw)?;
    let mut next = x + drift.eval(x)? * dt;
    for (f, w) in noise.iter().zip(dw) {
        next += f.eval(x)? * *w;
    }
    finite(next)
}

fn check_noise<const D: usize>(noise: &[Field<D>], dw: &[f64]) -> Result<()> {
    if noise.len() != dw.len() {
        return Err(Error::DimensionMismatch {
            expected: noise.len(),
            got: dw.len(),
        });
    }
    Ok(())
}

/// Heun predictor-corrector for `dq = u dt + sum_i xi_i(q) o dW_i`:
/// `q* = q + u(q) dt + sum xi_i(q) dW_i`, then both `u` and `xi_i` are
/// averaged between `q` and `q*`.
pub fn stratonovich_heun_step<const D: usize>(
    q: &Vector<D>,
    u: &dyn VectorField<D>,
    xi: &[Field<D>],
    dt: f64,
    dw: &[f64],
) -> Result<Vector<D>> {
    Ok(heun_with_predictor(q, u, xi, dt, dw)?.0)
}

fn heun_with_predictor<const D: usize>(
    q: &Vector<D>,
    u: &dyn VectorField<D>,
    xi: &[Field<D>],
    dt: f64,
    dw: &[f64],
) -> Result<(Vector<D>, Vector<D>)> {
    check_noise(xi, dw)?;
    let u0 = u.eval(q)?;
    let xi0 = xi.iter().map(|f| f.eval(q)).collect::<Result<Vec<_>>>()?;
    let mut pred = q + u0 * dt;
    for (v, w) in xi0.iter().zip(dw) {
        pred += v * *w;
    }
    let pred = finite(pred)?;
    let mut next = q + (u0 + u.eval(&pred)?) * (0.5 * dt);
    for ((f, v), w) in xi.iter().zip(&xi0).zip(dw) {
        next += (v + f.eval(&pred)?) * (0.5 * *w);
    }
    Ok((finite(next)?, pred))
}

/// Normal stream of ensemble member `member`: a pure function of
/// `(seed, member)` consumed `noise_dim` variates per step.
pub fn member_rng(seed: u64, member: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member);
    rng
}

/// Integrates one path from `x0`; returns `X_T`.
pub fn integrate_path<const D: usize>(spec: &SdeSpec<D>, x0: &Vector<D>, member: u64) -> Result<Vector<D>> {
    let steps = slow_step_count(spec.t_final, spec.dt)?;
    let dt = spec.t_final / steps as f64;
    let sq = dt.sqrt();
    let mut rng = member_rng(spec.seed, member);
    let mut dw = vec![0.0; spec.noise_dim()];
    let mut x = *x0;
    for step in 0..steps {
        for w in dw.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *w = sq * z;
        }
        x = match spec.interpretation {
            Interpretation::Ito => em_step(&x, spec.drift.as_ref(), &spec.noise, dt, &dw),
            Interpretation::Stratonovich => stratonovich_heun_step(&x, spec.drift.as_ref(), &spec.noise, dt, &dw),
        }
        .map_err(|e| match e {
            Error::IntegrationDiverged { .. } => diverged(step as u64, "state"),
            other => other,
        })?;
    }
    Ok(x)
}

/// Endpoints `X_T` of `spec.ensemble_size` independent paths, in member order.
pub fn simulate_sde_ensemble<const D: usize>(spec: &SdeSpec<D>, x0: &Vector<D>) -> Result<Vec<Vector<D>>> {
    spec.validate()?;
    (0..spec.ensemble_size)
        .into_par_iter()
        .map(|m| integrate_path(spec, x0, m as u64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Particle<const D: usize> {
    pub position: Vector<D>,
    pub weight: f64,
    /// Initial density carried by the particle.
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportedParticle<const D: usize> {
    pub position: Vector<D>,
    pub weight: f64,
    /// Determinant of the flow-map Jacobian `det(d x_t / d x_0)`.
    pub jacobian_det: f64,
    /// `rho_0 / J_t`.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportReport<const D: usize> {
    pub particles: Vec<TransportedParticle<D>>,
    pub total_weight_before: f64,
    pub total_weight_after: f64,
    /// `max |J_t - 1|` over particles.
    pub max_jacobian_deviation: f64,
}

fn total_weight(ws: impl Iterator<Item = f64>) -> f64 {
    ws.fold(0.0, |acc, w| acc + w)
}

/// Moves particles along `dx = u dt + sum_i xi_i o dW_i` with the Heun
/// scheme (independent noise per particle) and carries `ln J` along by
/// `d ln J = div u dt + sum_i div xi_i o dW_i`, Heun-averaged the same way.
pub fn advect_density_particles<const D: usize>(
    particles: &[Particle<D>],
    u: &dyn VectorField<D>,
    xi: &[Field<D>],
    dt: f64,
    t_final: f64,
    seed: u64,
) -> Result<TransportReport<D>> {
    if particles.iter().any(|p| !(p.weight >= 0.0) || !p.weight.is_finite()) {
        return Err(Error::InvalidInput(
            "particle weights must be finite and nonnegative".into(),
        ));
    }
    let steps = slow_step_count(t_final, dt)?;
    let h = t_final / steps as f64;
    let sq = h.sqrt();
    let moved = particles
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = member_rng(seed, i as u64);
            let mut dw = vec![0.0; xi.len()];
            let mut q = p.position;
            let mut log_j = 0.0;
            for step in 0..steps {
                for w in dw.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *w = sq * z;
                }
                let (next, pred) = heun_with_predictor(&q, u, xi, h, &dw)?;
                let mut dl = (u.divergence(&q)? + u.divergence(&pred)?) * (0.5 * h);
                for (f, w) in xi.iter().zip(&dw) {
                    dl += (f.divergence(&q)? + f.divergence(&pred)?) * (0.5 * *w);
                }
                log_j += dl;
                if !log_j.is_finite() {
                    return Err(Error::IntegrationDiverged {
                        kind: "transport",
                        step: step as u64,
                        detail: "non-finite Jacobian".into(),
                    });
                }
                q = next;
            }
            let det = log_j.exp();
            Ok(TransportedParticle {
                position: q,
                weight: p.weight,
                jacobian_det: det,
                density: p.density / det,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_dev = moved.iter().fold(0.0f64, |m, p| m.max((p.jacobian_det - 1.0).abs()));
    Ok(TransportReport {
        total_weight_before: total_weight(particles.iter().map(|p| p.weight)),
        total_weight_after: total_weight(moved.iter().map(|p| p.weight)),
        max_jacobian_deviation: max_dev,
        particles: moved,
    })
}
