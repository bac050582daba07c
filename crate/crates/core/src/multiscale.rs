//! Deterministic fast-slow particle system
//!
//! ```text
//! (Id + grad zeta(q)) dq/dt = u(q + zeta(q), t) - (1/eps) sum_i lambda_i phi_i(q)
//! ```
//!
//! with the fast driver running at rate `1/eps^2`. The slow position is
//! advanced by classical RK4 at the fast substep resolution, holding the
//! observables `lambda` and displacement coefficients `c` constant over
//! each fast substep.

use rayon::prelude::*;

use crate::driver::{FastDriver, ObservableMap};
use crate::error::{Error, Result};
use crate::modes::{ModeBasis, Vector};
use crate::series::Series;
use crate::velocity::MeanVelocityField;

/// Largest admissible `dt_slow * sup|phi| * sup|lambda| / eps`.
pub const STEP_GUARD: f64 = 0.1;

/// Displacement coefficients read off the driver state:
/// `c_i = scale * tanh(obs_i(y))`, so `||c|| <= cap` with `scale = cap / sqrt(M)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientChannels {
    map: ObservableMap,
    scale: f64,
    cap: f64,
}

impl CoefficientChannels {
    pub fn new(map: ObservableMap, cap: f64) -> Result<Self> {
        if !(cap.is_finite() && cap >= 0.0) {
            return Err(Error::config("amplitude_cap must be finite and nonnegative"));
        }
        let scale = cap / (map.dim().max(1) as f64).sqrt();
        Ok(CoefficientChannels { map, scale, cap })
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn map(&self) -> &ObservableMap {
        &self.map
    }

    #[inline]
    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        self.map.eval_into(y, out);
        for v in out.iter_mut() {
            *v = self.scale * v.tanh();
        }
    }
}

/// Static description of the fast-slow system.
#[derive(Debug, Clone)]
pub struct MultiscaleSystem<const D: usize> {
    basis: ModeBasis<D>,
    velocity: MeanVelocityField,
    lambda_map: ObservableMap,
    coefficients: Option<CoefficientChannels>,
    eps: f64,
    dt_fast: f64,
    lambda_bound: f64,
}

impl<const D: usize> MultiscaleSystem<D> {
    /// `coefficients = None` is the frozen-displacement system (`c = 0`).
    /// `lambda_bound` is the bound on `|lambda_i|` used by the step-size guard.
    pub fn new(
        basis: ModeBasis<D>,
        velocity: MeanVelocityField,
        lambda_map: ObservableMap,
        coefficients: Option<CoefficientChannels>,
        eps: f64,
        dt_fast: f64,
        lambda_bound: f64,
    ) -> Result<Self> {
        velocity.validate(D)?;
        if lambda_map.dim() != basis.len() {
            return Err(Error::config(format!(
                "{} observables for {} modes",
                lambda_map.dim(),
                basis.len()
            )));
        }
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(Error::config(format!("eps = {eps} outside (0, 1]")));
        }
        if !(dt_fast > 0.0 && dt_fast.is_finite()) {
            return Err(Error::config("dt_fast must be positive"));
        }
        if !(lambda_bound >= 0.0 && lambda_bound.is_finite()) {
            return Err(Error::config("lambda bound must be finite"));
        }
        if let Some(c) = &coefficients {
            if c.map.dim() != basis.len() {
                return Err(Error::config(format!(
                    "{} coefficient channels for {} modes",
                    c.map.dim(),
                    basis.len()
                )));
            }
            let g = basis.gradient_bound(c.cap);
            if g >= 1.0 {
                return Err(Error::NearSingular {
                    min_singular: (1.0 - g).max(0.0),
                    x: Vec::new(),
                    coeffs: vec![c.cap],
                });
            }
        }
        Ok(MultiscaleSystem {
            basis,
            velocity,
            lambda_map,
            coefficients,
            eps,
            dt_fast,
            lambda_bound,
        })
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        MultiscaleSystem::new(
            self.basis.clone(),
            self.velocity.clone(),
            self.lambda_map.clone(),
            self.coefficients.clone(),
            eps,
            self.dt_fast,
            self.lambda_bound,
        )
    }

    pub fn basis(&self) -> &ModeBasis<D> {
        &self.basis
    }
    pub fn velocity(&self) -> &MeanVelocityField {
        &self.velocity
    }
    pub fn lambda_map(&self) -> &ObservableMap {
        &self.lambda_map
    }
    pub fn coefficients(&self) -> Option<&CoefficientChannels> {
        self.coefficients.as_ref()
    }
    pub fn eps(&self) -> f64 {
        self.eps
    }
    pub fn dt_fast(&self) -> f64 {
        self.dt_fast
    }
    pub fn lambda_bound(&self) -> f64 {
        self.lambda_bound
    }

    /// Largest `dt_slow` accepted by the step-size guard.
    pub fn max_dt_slow(&self) -> f64 {
        let forcing = self.basis.max_sup_norm() * self.lambda_bound;
        if forcing == 0.0 {
            f64::INFINITY
        } else {
            STEP_GUARD * self.eps / forcing
        }
    }

    pub fn check_step(&self, dt_slow: f64) -> Result<()> {
        if !(dt_slow > 0.0 && dt_slow.is_finite()) {
            return Err(Error::InvalidInput(format!("dt_slow = {dt_slow} must be positive")));
        }
        let limit = self.max_dt_slow();
        if dt_slow > limit * (1.0 + 1e-12) {
            return Err(Error::StepSizeGuard(format!(
                "dt_slow = {dt_slow} exceeds {limit:.4e} for eps = {}",
                self.eps
            )));
        }
        Ok(())
    }

    /// Number of fast substeps per slow step.
    pub fn substeps(&self, dt_slow: f64) -> usize {
        let n = dt_slow / (self.eps * self.eps * self.dt_fast);
        (n - 1e-9).ceil().max(1.0) as usize
    }

    /// Observables and coefficients of the current driver state.
    pub fn observe(&self, driver: &FastDriver, lambda: &mut [f64], coeffs: &mut [f64]) {
        self.lambda_map.eval_into(driver.state(), lambda);
        match &self.coefficients {
            Some(c) => c.eval_into(driver.state(), coeffs),
            None => coeffs.iter_mut().for_each(|v| *v = 0.0),
        }
    }

    /// `J^-1 [u(q + zeta(q), t) - (1/eps) sum_i lambda_i phi_i(q)]`.
    #[inline]
    pub fn slow_rhs(&self, q: &Vector<D>, t: f64, lambda: &[f64], coeffs: &[f64]) -> Result<Vector<D>> {
        let forcing = self.basis.combine(lambda, q) / self.eps;
        match &self.coefficients {
            None => Ok(self.velocity.eval(q, t) - forcing),
            Some(_) => {
                let shifted = q + self.basis.combine(coeffs, q);
                let rhs = self.velocity.eval(&shifted, t) - forcing;
                Ok(self.basis.jacobian_inverse(coeffs, q)? * rhs)
            }
        }
    }

    #[inline]
    fn rk4(&self, q: &Vector<D>, t: f64, h: f64, lambda: &[f64], coeffs: &[f64]) -> Result<Vector<D>> {
        let k1 = self.slow_rhs(q, t, lambda, coeffs)?;
        let k2 = self.slow_rhs(&(q + k1 * (h / 2.0)), t + h / 2.0, lambda, coeffs)?;
        let k3 = self.slow_rhs(&(q + k2 * (h / 2.0)), t + h / 2.0, lambda, coeffs)?;
        let k4 = self.slow_rhs(&(q + k3 * h), t + h, lambda, coeffs)?;
        Ok(q + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
    }

    /// A fresh state at `qbar0` driven by `driver` (burn-in is the caller's job).
    pub fn state(&self, qbar0: Vector<D>, driver: FastDriver) -> Result<MultiscaleState<D>> {
        self.lambda_map.check_driver(&driver)?;
        if let Some(c) = &self.coefficients {
            c.map.check_driver(&driver)?;
        }
        let m = self.basis.len();
        let mut s = MultiscaleState {
            qbar: qbar0,
            driver,
            lambda: vec![0.0; m],
            coeffs: vec![0.0; m],
            t: 0.0,
            eps: self.eps,
        };
        self.observe(&s.driver, &mut s.lambda, &mut s.coeffs);
        Ok(s)
    }

    /// Advances `state` by one slow step of length `dt_slow`.
    pub fn step(&self, state: &mut MultiscaleState<D>, dt_slow: f64) -> Result<()> {
        self.check_step(dt_slow)?;
        if state.eps != self.eps {
            return Err(Error::InvalidInput("state eps differs from system eps".into()));
        }
        let n = self.substeps(dt_slow);
        let h = dt_slow / n as f64;
        let dt_fast = h / (self.eps * self.eps);
        for _ in 0..n {
            state.qbar = self.rk4(&state.qbar, state.t, h, &state.lambda, &state.coeffs)?;
            if !state.qbar.iter().all(|v| v.is_finite()) {
                return Err(Error::IntegrationDiverged {
                    kind: "multiscale",
                    step: state.driver.steps_taken(),
                    detail: "non-finite slow position".into(),
                });
            }
            state.driver.step(dt_fast)?;
            self.observe(&state.driver, &mut state.lambda, &mut state.coeffs);
            state.t += h;
        }
        Ok(())
    }

    /// Integrates to `t_final`, recording the wrapped position at t = 0 and
    /// every `output_stride` slow steps.
    pub fn simulate(
        &self,
        mut state: MultiscaleState<D>,
        dt_slow: f64,
        t_final: f64,
        output_stride: usize,
    ) -> Result<(Trajectory<D>, MultiscaleState<D>)> {
        let steps = slow_step_count(t_final, dt_slow)?;
        let dt = t_final / steps as f64;
        let stride = output_stride.max(1);
        let domain = *self.basis.domain();
        let mut traj = Trajectory::default();
        traj.push(state.t, domain.wrap(&state.qbar));
        for k in 1..=steps {
            self.step(&mut state, dt)?;
            if k % stride == 0 {
                traj.push(state.t, domain.wrap(&state.qbar));
            }
        }
        Ok((traj, state))
    }

    /// Runs the fast driver alone for `n` substeps of slow length `h`,
    /// recording `(lambda, c)` before each substep.
    pub fn drive_series(&self, driver: &mut FastDriver, n: usize, h: f64) -> Result<(Series, Series)> {
        let m = self.basis.len();
        let mut lam = Series::with_capacity(m, n);
        let mut cs = Series::with_capacity(m, n);
        let (mut l, mut c) = (vec![0.0; m], vec![0.0; m]);
        let dt_fast = h / (self.eps * self.eps);
        for _ in 0..n {
            self.observe(driver, &mut l, &mut c);
            lam.push(&l);
            cs.push(&c);
            driver.step(dt_fast)?;
        }
        Ok((lam, cs))
    }

    /// Integrates one particle through a precomputed `(lambda, c)` series
    /// (substep length `h`), recording the unwrapped position every
    /// `record_every` substeps including the start.
    pub fn advance_through(
        &self,
        q0: Vector<D>,
        lambda: &Series,
        coeffs: &Series,
        h: f64,
        record_every: usize,
    ) -> Result<Vec<Vector<D>>> {
        let mut q = q0;
        let every = record_every.max(1);
        let mut out = Vec::with_capacity(lambda.len() / every + 2);
        out.push(q);
        for k in 0..lambda.len() {
            q = self.rk4(&q, k as f64 * h, h, lambda.row(k), coeffs.row(k))?;
            if (k + 1) % every == 0 {
                out.push(q);
            }
        }
        Ok(out)
    }
}

pub(crate) fn slow_step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(Error::InvalidInput("t_final must be positive".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("step must be positive".into()));
    }
    Ok((t_final / dt - 1e-9).ceil().max(1.0) as usize)
}

/// Slow particle with its fast driver. `qbar` is kept unwrapped (lifted to
/// the covering space) so displacements can be measured; use
/// [`MultiscaleState::position`] for the wrapped position.
#[derive(Debug, Clone)]
pub struct MultiscaleState<const D: usize> {
    pub qbar: Vector<D>,
    pub driver: FastDriver,
    pub lambda: Vec<f64>,
    pub coeffs: Vec<f64>,
    pub t: f64,
    pub eps: f64,
}

impl<const D: usize> MultiscaleState<D> {
    pub fn position(&self, basis: &ModeBasis<D>) -> Vector<D> {
        basis.domain().wrap(&self.qbar)
    }
}

/// Recorded times and wrapped positions of one particle.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory<const D: usize> {
    pub times: Vec<f64>,
    pub positions: Vec<Vector<D>>,
}

impl<const D: usize> Trajectory<D> {
    pub fn push(&mut self, t: f64, q: Vector<D>) {
        self.times.push(t);
        self.positions.push(q);
    }
}

/// Settings for an ensemble of independent fast drivers.
#[derive(Debug, Clone)]
pub struct EnsembleRun<const D: usize> {
    pub size: usize,
    pub seed: u64,
    pub burn_in: usize,
    pub qbar0: Vector<D>,
    pub dt_slow: f64,
    pub t_final: f64,
}

/// Endpoint displacement `qbar(T) - qbar(0)` (unwrapped) of each member.
/// Members draw independent driver initial conditions from stream `member`
/// and burn in before the slow clock starts. Output order is member order.
pub fn ensemble_endpoints<const D: usize>(
    system: &MultiscaleSystem<D>,
    template: &FastDriver,
    run: &EnsembleRun<D>,
) -> Result<Vec<Vector<D>>> {
    let steps = slow_step_count(run.t_final, run.dt_slow)?;
    let dt = run.t_final / steps as f64;
    system.check_step(dt)?;
    (0..run.size)
        .into_par_iter()
        .map(|member| {
            let mut driver = FastDriver::randomized(template.kind().clone(), run.seed, member as u64)?;
            for _ in 0..run.burn_in {
                driver.step(system.dt_fast)?;
            }
            let mut state = system.state(run.qbar0, driver)?;
            for _ in 0..steps {
                system.step(&mut state, dt)?;
            }
            Ok(state.qbar - run.qbar0)
        })
        .collect()
}
