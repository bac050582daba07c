//! Fast dynamics feeding the slow particle system.
//!
//! Three drivers are provided: the Lorenz-63 flow (default, strongly
//! chaotic), the doubling map (discrete time, closed-form correlations),
//! and an Ornstein-Uhlenbeck surrogate. The OU surrogate is stochastic,
//! not chaotic; it is shipped only as an estimator oracle because its
//! Green-Kubo integrals are known in closed form.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::Series;

/// Largest fast step accepted for the explicit Lorenz integrator.
pub const LORENZ_MAX_DT: f64 = 0.02;
/// Default bound on the Lorenz state norm after burn-in.
pub const LORENZ_DEFAULT_BOUND: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DriverKind {
    Lorenz63 {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
    DoublingMap,
    OuSurrogate {
        /// Relaxation rate.
        gamma: f64,
        /// Noise amplitude.
        noise: f64,
        /// Number of independent components.
        #[serde(default = "default_ou_dim")]
        dim: usize,
    },
}

fn default_sigma() -> f64 {
    10.0
}
fn default_rho() -> f64 {
    28.0
}
fn default_beta() -> f64 {
    8.0 / 3.0
}
fn default_ou_dim() -> usize {
    1
}

impl DriverKind {
    pub fn lorenz63() -> Self {
        DriverKind::Lorenz63 {
            sigma: default_sigma(),
            rho: default_rho(),
            beta: default_beta(),
        }
    }

    pub fn ou(gamma: f64, noise: f64) -> Self {
        DriverKind::OuSurrogate { gamma, noise, dim: 1 }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DriverKind::Lorenz63 { .. } => "lorenz63",
            DriverKind::DoublingMap => "doubling_map",
            DriverKind::OuSurrogate { .. } => "ou_surrogate",
        }
    }

    pub fn state_dim(&self) -> usize {
        match self {
            DriverKind::Lorenz63 { .. } => 3,
            DriverKind::DoublingMap => 1,
            DriverKind::OuSurrogate { dim, .. } => *dim,
        }
    }

    /// True for drivers that advance one map iteration per step regardless of `dt`.
    pub fn is_discrete(&self) -> bool {
        matches!(self, DriverKind::DoublingMap)
    }

    pub fn max_dt(&self) -> f64 {
        match self {
            DriverKind::Lorenz63 { .. } => LORENZ_MAX_DT,
            _ => f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DriverKind::Lorenz63 { sigma, rho, beta } => {
                if ![sigma, rho, beta].iter().all(|v| v.is_finite() && *v > 0.0) {
                    return Err(Error::config("lorenz63 parameters must be positive and finite"));
                }
            }
            DriverKind::DoublingMap => {}
            DriverKind::OuSurrogate { gamma, noise, dim } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(Error::config("ou_surrogate requires gamma > 0"));
                }
                if !(noise.is_finite() && noise > 0.0) {
                    return Err(Error::config("ou_surrogate requires noise > 0"));
                }
                if dim == 0 {
                    return Err(Error::config("ou_surrogate requires dim >= 1"));
                }
            }
        }
        Ok(())
    }

    /// A reasonable starting state for this kind, randomized from `rng`.
    pub fn random_state<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match *self {
            DriverKind::Lorenz63 { .. } => (0..3).map(|_| 1.0 + rng.random_range(-1.0..1.0)).collect(),
            DriverKind::DoublingMap => vec![rng.random::<f64>()],
            DriverKind::OuSurrogate { gamma, noise, dim } => {
                let sd = noise / (2.0 * gamma).sqrt();
                (0..dim).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
            }
        }
    }
}

/// A fast dynamical system with its own random stream.
///
/// The stream is used by the OU surrogate (one standard normal per component
/// per step) and by the doubling map, which refills the low-order binary
/// digit shifted out on each iteration so the orbit does not collapse onto
/// zero after 64 steps.
#[derive(Debug, Clone)]
pub struct FastDriver {
    kind: DriverKind,
    state: Vec<f64>,
    /// Fixed-point representation of the doubling-map state in units of 2^-64.
    bits: u64,
    bitbuf: u64,
    bits_left: u32,
    rng: ChaCha8Rng,
    steps: u64,
    bound: f64,
}

impl FastDriver {
    pub fn new(kind: DriverKind, state: Vec<f64>, seed: u64, stream: u64) -> Result<Self> {
        kind.validate()?;
        if state.len() != kind.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: kind.state_dim(),
                got: state.len(),
            });
        }
        if !state.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{} initial state must be finite",
                kind.name()
            )));
        }
        let mut bits = 0;
        if kind.is_discrete() {
            let y = state[0];
            if !(0.0..1.0).contains(&y) {
                return Err(Error::InvalidInput(format!("doubling_map state {y} outside [0, 1)")));
            }
            bits = (y * TWO_POW_64) as u64;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let bound = match kind {
            DriverKind::Lorenz63 { .. } => LORENZ_DEFAULT_BOUND,
            _ => f64::INFINITY,
        };
        Ok(FastDriver {
            kind,
            state,
            bits,
            bitbuf: 0,
            bits_left: 0,
            rng,
            steps: 0,
            bound,
        })
    }

    /// Builds a driver whose initial state is drawn from its own stream.
    pub fn randomized(kind: DriverKind, seed: u64, stream: u64) -> Result<Self> {
        let mut d = FastDriver::new(kind.clone(), vec![0.0; kind.state_dim()], seed, stream)?;
        let s = kind.random_state(&mut d.rng);
        d.set_state(&s)?;
        Ok(d)
    }

    pub fn set_state(&mut self, state: &[f64]) -> Result<()> {
        if state.len() != self.kind.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.kind.state_dim(),
                got: state.len(),
            });
        }
        if self.kind.is_discrete() {
            let y = state[0];
            if !(0.0..1.0).contains(&y) {
                return Err(Error::InvalidInput(format!("doubling_map state {y} outside [0, 1)")));
            }
            self.bits = (y * TWO_POW_64) as u64;
        }
        self.state.copy_from_slice(state);
        Ok(())
    }

    /// Overrides the post-burn-in norm bound (Lorenz only).
    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }

    pub fn kind(&self) -> &DriverKind {
        &self.kind
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// Advances the driver by `dt_fast` units of fast time (one iteration for
    /// the doubling map).
    pub fn step(&mut self, dt_fast: f64) -> Result<()> {
        if !self.kind.is_discrete() && !(dt_fast > 0.0 && dt_fast <= self.kind.max_dt()) {
            return Err(Error::InvalidInput(format!(
                "{} fast step {dt_fast} outside (0, {}]",
                self.kind.name(),
                self.kind.max_dt()
            )));
        }
        match self.kind {
            DriverKind::Lorenz63 { sigma, rho, beta } => {
                let y = [self.state[0], self.state[1], self.state[2]];
                let next = rk4_lorenz(y, dt_fast, sigma, rho, beta);
                self.state.copy_from_slice(&next);
            }
            DriverKind::DoublingMap => {
                let bit = self.next_bit();
                self.bits = (self.bits << 1) | bit;
                self.state[0] = fixed_to_unit(self.bits);
            }
            DriverKind::OuSurrogate { gamma, noise, .. } => {
                let decay = (-gamma * dt_fast).exp();
                let sd = noise * ((1.0 - decay * decay) / (2.0 * gamma)).sqrt();
                for y in self.state.iter_mut() {
                    let z: f64 = self.rng.sample(StandardNormal);
                    *y = *y * decay + sd * z;
                }
            }
        }
        self.steps += 1;
        self.check()
    }

    fn next_bit(&mut self) -> u64 {
        if self.bits_left == 0 {
            self.bitbuf = self.rng.next_u64();
            self.bits_left = 64;
        }
        let b = self.bitbuf & 1;
        self.bitbuf >>= 1;
        self.bits_left -= 1;
        b
    }

    fn check(&self) -> Result<()> {
        if !self.state.iter().all(|v| v.is_finite()) {
            return Err(self.diverged("non-finite state".into()));
        }
        if self.bound.is_finite() {
            let norm = self.state.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > self.bound {
                return Err(self.diverged(format!("state norm {norm:.3} exceeds bound {}", self.bound)));
            }
        }
        Ok(())
    }

    fn diverged(&self, detail: String) -> Error {
        Error::IntegrationDiverged {
            kind: self.kind.name(),
            step: self.steps,
            detail,
        }
    }
}

const TWO_POW_64: f64 = 18_446_744_073_709_551_616.0;

fn fixed_to_unit(bits: u64) -> f64 {
    let y = bits as f64 / TWO_POW_64;
    if y >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else {
        y
    }
}

fn lorenz_rhs(y: [f64; 3], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    [
        sigma * (y[1] - y[0]),
        y[0] * (rho - y[2]) - y[1],
        y[0] * y[1] - beta * y[2],
    ]
}

fn rk4_lorenz(y: [f64; 3], h: f64, sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = lorenz_rhs(y, sigma, rho, beta);
    let k2 = lorenz_rhs(add(y, k1, h / 2.0), sigma, rho, beta);
    let k3 = lorenz_rhs(add(y, k2, h / 2.0), sigma, rho, beta);
    let k4 = lorenz_rhs(add(y, k3, h), sigma, rho, beta);
    let mut out = y;
    for i in 0..3 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

/// One scalar observable of the driver state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Coord(usize),
    Product(usize, usize),
}

impl Channel {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match *self {
            Channel::Coord(i) => y[i],
            Channel::Product(i, j) => y[i] * y[j],
        }
    }

    fn max_index(&self) -> usize {
        match *self {
            Channel::Coord(i) => i,
            Channel::Product(i, j) => i.max(j),
        }
    }
}

/// Maps a driver state to the observable vector `(v - center) * scale + offset`.
///
/// `offset` is zero in normal use; a nonzero offset plants a bias for
/// centering diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableMap {
    channels: Vec<Channel>,
    center: Vec<f64>,
    scale: Vec<f64>,
    offset: Vec<f64>,
    /// Largest |observable| seen during calibration, if calibrated.
    max_abs: Option<f64>,
}

impl ObservableMap {
    /// Observables used as-is.
    pub fn raw(channels: Vec<Channel>) -> Self {
        let m = channels.len();
        ObservableMap::affine(channels, vec![0.0; m], vec![1.0; m])
    }

    pub fn affine(channels: Vec<Channel>, center: Vec<f64>, scale: Vec<f64>) -> Self {
        assert_eq!(channels.len(), center.len());
        assert_eq!(channels.len(), scale.len());
        let m = channels.len();
        ObservableMap {
            channels,
            center,
            scale,
            offset: vec![0.0; m],
            max_abs: None,
        }
    }

    /// Centers and variance-normalizes each channel using a long trajectory
    /// of `driver` (the driver passed in is cloned, not advanced).
    pub fn calibrated(
        channels: Vec<Channel>,
        driver: &FastDriver,
        dt_fast: f64,
        burn_in: usize,
        n_samples: usize,
        stride: usize,
    ) -> Result<Self> {
        let raw = ObservableMap::raw(channels.clone());
        raw.check_driver(driver)?;
        let mut d = driver.clone();
        let samples = sample_invariant_measure(&mut d, &raw, dt_fast, n_samples.max(2), burn_in, stride)?;
        let center = samples.values.means();
        let sd = samples.values.std_devs();
        let scale: Vec<f64> = sd.iter().map(|s| if *s > 0.0 { 1.0 / s } else { 1.0 }).collect();
        let mut map = ObservableMap::affine(channels, center, scale);
        let mut max_abs: f64 = 0.0;
        for r in samples.values.rows() {
            for i in 0..map.dim() {
                max_abs = max_abs.max(((r[i] - map.center[i]) * map.scale[i]).abs());
            }
        }
        map.max_abs = Some(max_abs);
        Ok(map)
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        assert_eq!(offset.len(), self.channels.len());
        self.offset = offset;
        self
    }

    /// Multiplies every observable by `alpha`.
    pub fn scaled_by(mut self, alpha: f64) -> Self {
        for s in self.scale.iter_mut() {
            *s *= alpha;
        }
        for o in self.offset.iter_mut() {
            *o *= alpha;
        }
        self.max_abs = self.max_abs.map(|m| m * alpha.abs());
        self
    }

    pub fn dim(&self) -> usize {
        self.channels.len()
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn max_abs(&self) -> Option<f64> {
        self.max_abs
    }

    pub fn check_driver(&self, driver: &FastDriver) -> Result<()> {
        let n = driver.kind().state_dim();
        for ch in &self.channels {
            if ch.max_index() >= n {
                return Err(Error::config(format!(
                    "observable {:?} indexes past {} state dimension {n}",
                    ch,
                    driver.kind().name()
                )));
            }
        }
        Ok(())
    }

    pub fn eval_into(&self, y: &[f64], out: &mut [f64]) {
        for (i, ch) in self.channels.iter().enumerate() {
            out[i] = (ch.eval(y) - self.center[i]) * self.scale[i] + self.offset[i];
        }
    }

    pub fn eval(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(y, &mut out);
        out
    }
}

/// Ergodic samples of the observables with their sample means.
#[derive(Debug, Clone)]
pub struct InvariantSamples {
    pub values: Series,
    pub means: Vec<f64>,
    /// Fast-time spacing between consecutive samples (stride iterations for maps).
    pub spacing: f64,
}

/// Discards `burn_in` steps, then records the observables every `stride`
/// steps. The first recorded sample is the state right after burn-in.
pub fn sample_invariant_measure(
    driver: &mut FastDriver,
    map: &ObservableMap,
    dt_fast: f64,
    n_samples: usize,
    burn_in: usize,
    stride: usize,
) -> Result<InvariantSamples> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()));
    }
    map.check_driver(driver)?;
    for _ in 0..burn_in {
        driver.step(dt_fast)?;
    }
    let mut values = Series::with_capacity(map.dim(), n_samples);
    let mut buf = vec![0.0; map.dim()];
    for k in 0..n_samples {
        if k > 0 {
            for _ in 0..stride {
                driver.step(dt_fast)?;
            }
        }
        map.eval_into(driver.state(), &mut buf);
        values.push(&buf);
    }
    let means = values.means();
    let unit = if driver.kind().is_discrete() { 1.0 } else { dt_fast };
    Ok(InvariantSamples {
        values,
        means,
        spacing: unit * stride as f64,
    })
}
