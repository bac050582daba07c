//! Declarative experiment configuration (TOML).
//!
//! Every optional key stays `None` after parsing and is skipped on output,
//! so `toml::to_string(parse(text))` reproduces the original key set.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::acf::Truncation;
use crate::driver::{Channel, DriverKind, FastDriver, ObservableMap};
use crate::error::{Error, Result};
use crate::modes::{Domain, Mode, ModeBasis, Vector};
use crate::multiscale::{CoefficientChannels, MultiscaleSystem};
use crate::sde::Interpretation;
use crate::velocity::MeanVelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimulateMultiscale,
    EstimateCoefficients,
    SimulateSde,
    Converge,
    Eof,
    CenteringCheck,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 6] = [
        ExperimentKind::SimulateMultiscale,
        ExperimentKind::EstimateCoefficients,
        ExperimentKind::SimulateSde,
        ExperimentKind::Converge,
        ExperimentKind::Eof,
        ExperimentKind::CenteringCheck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::SimulateMultiscale => "simulate-multiscale",
            ExperimentKind::EstimateCoefficients => "estimate-coefficients",
            ExperimentKind::SimulateSde => "simulate-sde",
            ExperimentKind::Converge => "converge",
            ExperimentKind::Eof => "eof",
            ExperimentKind::CenteringCheck => "centering-check",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown experiment kind {s:?}")))
    }

    /// Blocks that must be present for this kind.
    pub fn required_blocks(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::SimulateMultiscale => &["driver", "observables", "modes", "velocity", "integration"],
            ExperimentKind::EstimateCoefficients => &["driver", "observables", "modes", "velocity", "estimation"],
            ExperimentKind::SimulateSde => &["driver", "observables", "modes", "velocity", "sde"],
            ExperimentKind::Converge => &["driver", "observables", "modes", "velocity", "integration", "converge"],
            ExperimentKind::Eof => &["driver", "observables", "modes", "velocity", "integration", "eof"],
            ExperimentKind::CenteringCheck => &["driver", "observables", "modes", "centering"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<ExperimentKind>,
    pub seed: u64,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub driver: Option<DriverBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observables: Option<ObservablesBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modes: Option<ModesBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub velocity: Option<MeanVelocityField>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub integration: Option<IntegrationBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimation: Option<EstimationBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sde: Option<SdeBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converge: Option<ConvergeBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eof: Option<EofBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub centering: Option<CenteringBlock>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverBlock {
    pub system: DriverKind,
    pub dt_fast: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Initial state of the long sampling trajectory; drawn from the seed if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_state: Option<Vec<f64>>,
}

impl DriverBlock {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(1000)
    }

    pub fn stride(&self) -> usize {
        self.stride.unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Channel values used as-is.
    Raw,
    /// Centered and scaled to unit variance from a calibration run.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesBlock {
    /// Channels such as `"x0"` or `"x0*x1"`, one per mode.
    pub lambda: Vec<String>,
    pub normalization: Normalization,
    /// Displacement-coefficient channels; absent means frozen displacement.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amplitude_cap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_stride: Option<usize>,
    /// Added to the normalized observables (plants a bias).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    /// Multiplies every observable.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale_by: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub wavevector: Vec<f64>,
    pub phase: f64,
    pub amplitude: f64,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoModes {
    pub count: usize,
    pub amplitude: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModesBlock {
    pub domain: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auto: Option<AutoModes>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Vec<ModeSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegrationBlock {
    pub eps: f64,
    pub dt_slow: f64,
    pub t_final: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationBlock {
    pub n_samples: usize,
    pub max_lag: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncation: Option<Truncation>,
    /// Probes per axis of the periodic lattice.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probes_per_axis: Option<usize>,
    /// Explicit probe axes (non-periodic lattice); overrides `probes_per_axis`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe_axes: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Closed-form coefficients of the frozen OU system.
    Analytic,
    /// Coefficients estimated on the probe lattice first.
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeBlock {
    pub interpretation: Interpretation,
    pub dt: f64,
    pub t_final: f64,
    pub reference: Reference,
    /// Coefficient file to read instead of estimating (`reference = "estimated"`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficients_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cdf_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeBlock {
    pub eps_list: Vec<f64>,
    pub reference: Reference,
    pub sde_dt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cdf_points: Option<usize>,
    /// Allowed growth of the KS distance between successive eps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EofBlock {
    pub n_traj: usize,
    pub record_every: usize,
    pub cutoff_period: f64,
    pub boxes: Vec<usize>,
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_count: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub increment_lag: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub write_trajectories: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CenteringBlock {
    pub n_samples: usize,
    pub probes_per_axis: usize,
    /// Subtract the sample mean of each observable before the check.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recenter: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub write_endpoints: Option<bool>,
}

/// Parses `"x3"` or `"x0*x1"`.
pub fn parse_channel(s: &str) -> Result<Channel> {
    let coord = |t: &str| -> Result<usize> {
        t.trim()
            .strip_prefix('x')
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::config(format!("bad observable channel {s:?} (expected x<i> or x<i>*x<j>)")))
    };
    match s.split_once('*') {
        Some((a, b)) => Ok(Channel::Product(coord(a)?, coord(b)?)),
        None => Ok(Channel::Coord(coord(s)?)),
    }
}

fn missing(key: &str, kind: ExperimentKind) -> Error {
    Error::config(format!(
        "missing key `{key}` required by experiment kind {}",
        kind.as_str()
    ))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves the experiment kind: an explicit `kind` argument must agree
    /// with the file's `kind` key when both are present.
    pub fn resolve_kind(&self, requested: Option<ExperimentKind>) -> Result<ExperimentKind> {
        match (requested, self.kind) {
            (Some(a), Some(b)) if a != b => Err(Error::config(format!(
                "requested kind {} but config declares {}",
                a.as_str(),
                b.as_str()
            ))),
            (Some(a), _) => Ok(a),
            (None, Some(b)) => Ok(b),
            (None, None) => Err(Error::config("missing key `kind`")),
        }
    }

    pub fn validate(&self, kind: ExperimentKind) -> Result<()> {
        if !(1..=3).contains(&self.dim) {
            return Err(Error::config(format!("dim = {} not in 1..=3", self.dim)));
        }
        for block in kind.required_blocks() {
            let present = match *block {
                "driver" => self.driver.is_some(),
                "observables" => self.observables.is_some(),
                "modes" => self.modes.is_some(),
                "velocity" => self.velocity.is_some(),
                "integration" => self.integration.is_some(),
                "estimation" => self.estimation.is_some(),
                "sde" => self.sde.is_some(),
                "converge" => self.converge.is_some(),
                "eof" => self.eof.is_some(),
                "centering" => self.centering.is_some(),
                _ => true,
            };
            if !present {
                return Err(missing(block, kind));
            }
        }
        if let Some(d) = &self.driver {
            d.system.validate()?;
            if !(d.dt_fast > 0.0) {
                return Err(Error::config("driver.dt_fast must be positive"));
            }
        }
        if let Some(v) = &self.velocity {
            v.validate(self.dim)?;
        }
        if let Some(c) = &self.converge {
            if c.eps_list.len() < 3 {
                return Err(Error::config("converge.eps_list needs at least 3 entries"));
            }
            if c.eps_list.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) || c.eps_list.windows(2).any(|w| w[1] >= w[0]) {
                return Err(Error::config("converge.eps_list must be strictly decreasing in (0, 1]"));
            }
            if c.reference == Reference::Estimated && self.estimation.is_none() {
                return Err(missing("estimation", kind));
            }
        }
        if let Some(s) = &self.sde {
            if s.reference == Reference::Estimated && s.coefficients_file.is_none() && self.estimation.is_none() {
                return Err(missing("estimation", kind));
            }
        }
        if let Some(e) = &self.eof {
            if e.boxes.len() != self.dim {
                return Err(Error::config("eof.boxes needs one count per dimension"));
            }
        }
        if kind == ExperimentKind::Eof && self.observables.as_ref().is_some_and(|o| o.coefficients.is_some()) {
            return Err(Error::config(
                "eof experiment uses frozen displacement; remove observables.coefficients",
            ));
        }
        Ok(())
    }

    pub fn driver_block(&self) -> Result<&DriverBlock> {
        self.driver
            .as_ref()
            .ok_or_else(|| Error::config("missing key `driver`"))
    }

    pub fn observables_block(&self) -> Result<&ObservablesBlock> {
        self.observables
            .as_ref()
            .ok_or_else(|| Error::config("missing key `observables`"))
    }

    pub fn ensemble_seed(&self) -> u64 {
        self.ensemble.as_ref().and_then(|e| e.seed).unwrap_or(self.seed)
    }

    pub fn ensemble_size(&self) -> usize {
        self.ensemble.as_ref().map_or(1, |e| e.size)
    }

    /// The long-trajectory driver used for calibration and sampling.
    pub fn sampling_driver(&self) -> Result<FastDriver> {
        let d = self.driver_block()?;
        let driver = match &d.initial_state {
            Some(s) => FastDriver::new(d.system.clone(), s.clone(), self.seed, u64::MAX)?,
            None => FastDriver::randomized(d.system.clone(), self.seed, u64::MAX)?,
        };
        Ok(driver)
    }

    fn build_map(&self, channels: &[String], driver: &FastDriver) -> Result<ObservableMap> {
        let d = self.driver_block()?;
        let o = self.observables_block()?;
        let channels = channels.iter().map(|c| parse_channel(c)).collect::<Result<Vec<_>>>()?;
        let map = match o.normalization {
            Normalization::Raw => ObservableMap::raw(channels),
            Normalization::Calibrated => ObservableMap::calibrated(
                channels,
                driver,
                d.dt_fast,
                d.burn_in(),
                o.calibration_samples.unwrap_or(100_000),
                o.calibration_stride.unwrap_or(1),
            )?,
        };
        map.check_driver(driver)?;
        Ok(map)
    }

    /// Observable map for `lambda` (with offset and scaling applied).
    pub fn lambda_map(&self) -> Result<ObservableMap> {
        let o = self.observables_block()?;
        let driver = self.sampling_driver()?;
        let mut map = self.build_map(&o.lambda, &driver)?;
        if let Some(off) = &o.offset {
            if off.len() != map.dim() {
                return Err(Error::config("observables.offset needs one entry per lambda channel"));
            }
            map = map.with_offset(off.clone());
        }
        if let Some(a) = o.scale_by {
            map = map.scaled_by(a);
        }
        Ok(map)
    }

    pub fn coefficient_channels(&self) -> Result<Option<CoefficientChannels>> {
        let o = self.observables_block()?;
        match &o.coefficients {
            None => Ok(None),
            Some(chs) => {
                let cap = o
                    .amplitude_cap
                    .ok_or_else(|| Error::config("observables.coefficients requires amplitude_cap"))?;
                let driver = self.sampling_driver()?;
                let map = self.build_map(chs, &driver)?;
                Ok(Some(CoefficientChannels::new(map, cap)?))
            }
        }
    }

    /// Bound on `|lambda_i|` for the step-size guard: the configured value,
    /// else 1.25x the largest calibrated value.
    pub fn lambda_bound(&self, map: &ObservableMap) -> Result<f64> {
        let o = self.observables_block()?;
        match (o.lambda_bound, map.max_abs()) {
            (Some(b), _) => Ok(b),
            (None, Some(m)) => Ok(1.25 * m),
            (None, None) => Err(Error::config(
                "observables.lambda_bound is required for raw observables",
            )),
        }
    }

    pub fn basis<const D: usize>(&self) -> Result<ModeBasis<D>> {
        let m = self
            .modes
            .as_ref()
            .ok_or_else(|| Error::config("missing key `modes`"))?;
        if m.domain.len() != D {
            return Err(Error::config(format!(
                "modes.domain has {} entries for dim {D}",
                m.domain.len()
            )));
        }
        let domain = Domain::new(Vector::<D>::from_column_slice(&m.domain))?;
        match (&m.auto, &m.mode) {
            (Some(a), None) => ModeBasis::auto(domain, a.count, a.amplitude, a.seed),
            (None, Some(list)) => {
                let modes = list
                    .iter()
                    .map(|s| {
                        if s.wavevector.len() != D || s.direction.len() != D {
                            return Err(Error::config("mode wavevector and direction need dim entries"));
                        }
                        Ok(Mode {
                            wavevector: Vector::<D>::from_column_slice(&s.wavevector),
                            phase: s.phase,
                            amplitude: s.amplitude,
                            direction: Vector::<D>::from_column_slice(&s.direction),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                ModeBasis::new(domain, modes)
            }
            _ => Err(Error::config("modes needs exactly one of `auto` or `mode`")),
        }
    }

    /// The fast-slow system at `eps` (defaults to `integration.eps`).
    pub fn system<const D: usize>(&self, eps: Option<f64>) -> Result<MultiscaleSystem<D>> {
        let map = self.lambda_map()?;
        let bound = self.lambda_bound(&map)?;
        let eps = match eps {
            Some(e) => e,
            None => {
                self.integration
                    .as_ref()
                    .ok_or_else(|| Error::config("missing key `integration`"))?
                    .eps
            }
        };
        MultiscaleSystem::new(
            self.basis()?,
            self.velocity.clone().unwrap_or(MeanVelocityField::Zero),
            map,
            self.coefficient_channels()?,
            eps,
            self.driver_block()?.dt_fast,
            bound,
        )
    }

    pub fn q0<const D: usize>(&self) -> Result<Vector<D>> {
        match self.integration.as_ref().and_then(|i| i.q0.as_ref()) {
            None => Ok(Vector::<D>::zeros()),
            Some(q) if q.len() == D => Ok(Vector::<D>::from_column_slice(q)),
            Some(_) => Err(Error::config("integration.q0 needs dim entries")),
        }
    }

    pub fn output_dir(&self) -> Option<&str> {
        self.output.as_ref().and_then(|o| o.dir.as_deref())
    }
}
