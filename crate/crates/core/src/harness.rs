//! End-to-end experiments behind the command-line tool.
//!
//! Every experiment writes CSV reports and a `manifest.json` into the output
//! directory. Reports depend only on the configuration and seed; the
//! manifest additionally records wall time.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::acf;
use crate::coefficients::{CoefficientTable, ProbeLattice, TableDrift, TableSigmaSlice};
use crate::config::{ExperimentConfig, ExperimentKind, Reference};
use crate::driver::{Channel, DriverKind, FastDriver};
use crate::eof::{self, BoxGrid, TrajectoryBatch};
use crate::error::{Error, Provenance, Result};
use crate::homogenization::{self, FastSamples};
use crate::linalg;
use crate::modes::{self, ModeBasis, Vector};
use crate::multiscale::{self, EnsembleRun, MultiscaleSystem};
use crate::sde::{self, Field, Interpretation, ModeField, SdeSpec, StratonovichDrift};
use crate::stats;
use crate::trajio;
use crate::velocity::MeanVelocityField;

/// Default slack on the KS monotonicity check.
pub const KS_SLACK: f64 = 1.5;
/// Default number of CDF grid points per coordinate.
pub const CDF_POINTS: usize = 41;

/// SplitMix64 finalizer: decorrelated seeds for sub-experiments.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SDE_SEED_TAG: u64 = 1;
const PARTICLE_SEED_TAG: u64 = 2;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Moments of an ensemble of endpoints, per coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointStats {
    pub n: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub var: Vec<f64>,
    pub var_se: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl EndpointStats {
    pub fn from_samples(samples: &[Vec<f64>]) -> Self {
        let d = samples.first().map_or(0, Vec::len);
        let m = stats::Moments::from_samples(d, samples.iter().map(Vec::as_slice));
        let mut var = Vec::with_capacity(d);
        let mut var_se = Vec::with_capacity(d);
        for k in 0..d {
            let xs: Vec<f64> = samples.iter().map(|s| s[k]).collect();
            let (v, se) = stats::variance_with_stderr(&xs);
            var.push(v);
            var_se.push(se);
        }
        EndpointStats {
            n: samples.len(),
            mean: m.mean().iter().copied().collect(),
            mean_se: m.mean_stderr().iter().copied().collect(),
            var,
            var_se,
            covariance: m.covariance(),
        }
    }

    fn write_rows(&self, out: &mut String, prefix: &str) {
        let d = self.mean.len();
        let _ = writeln!(out, "{prefix}n,{},", self.n);
        for k in 0..d {
            let _ = writeln!(out, "{prefix}mean_x{},{:?},{:?}", k + 1, self.mean[k], self.mean_se[k]);
        }
        for k in 0..d {
            let _ = writeln!(out, "{prefix}var_x{},{:?},{:?}", k + 1, self.var[k], self.var_se[k]);
        }
        for i in 0..d {
            for j in i + 1..d {
                let _ = writeln!(out, "{prefix}cov_x{}_x{},{:?},", i + 1, j + 1, self.covariance[(i, j)]);
            }
        }
    }
}

fn cdf_rows(out: &mut String, prefix: &str, samples: &[Vec<f64>], grids: &[Vec<f64>]) {
    let n = samples.len().max(1) as f64;
    for (k, grid) in grids.iter().enumerate() {
        let xs: Vec<f64> = samples.iter().map(|s| s[k]).collect();
        for (x, f) in grid.iter().zip(stats::ecdf_on_grid(&xs, grid)) {
            let se = (f * (1.0 - f) / n).sqrt();
            let _ = writeln!(out, "{prefix}cdf_x{}({x:?}),{f:?},{se:?}", k + 1);
        }
    }
}

fn pooled_grids(sets: &[&[Vec<f64>]], points: usize) -> Vec<Vec<f64>> {
    let d = sets.iter().find_map(|s| s.first()).map_or(0, Vec::len);
    (0..d)
        .map(|k| {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for s in sets {
                for v in s.iter() {
                    lo = lo.min(v[k]);
                    hi = hi.max(v[k]);
                }
            }
            stats::uniform_grid(lo, hi, points)
        })
        .collect()
}

fn to_rows<const D: usize>(v: &[Vector<D>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.as_slice().to_vec()).collect()
}

/// A named report file.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFile {
    pub name: String,
    pub contents: Vec<u8>,
}

impl ReportFile {
    fn text(name: &str, contents: String) -> Self {
        ReportFile {
            name: name.to_string(),
            contents: contents.into_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiscaleSummary {
    pub displacements: Vec<Vec<f64>>,
    pub stats: EndpointStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSummary {
    pub table: CoefficientTable,
    pub green_kubo: DMatrix<f64>,
    pub truncation_lag: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdeSummary {
    pub endpoints: Vec<Vec<f64>>,
    pub stats: EndpointStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub substeps: usize,
    pub displacements: Vec<Vec<f64>>,
    pub stats: EndpointStats,
    pub ks: f64,
    pub ks_critical: f64,
}

/// Weak-convergence comparison of multiscale ensembles against the SDE.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleReport {
    pub t_final: f64,
    pub reference: SdeSummary,
    pub rows: Vec<ConvergenceRow>,
    pub slack: f64,
    /// `ks[k+1] <= slack * max(ks[k], ks_critical[k])` for every k.
    pub monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EofSummary {
    pub principal_angle: f64,
    pub snapshot_values: Vec<f64>,
    pub retained_fraction: f64,
    pub max_interior_mean: f64,
    pub n_traj: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteringSummary {
    pub residual: f64,
    pub threshold: f64,
    pub argmax: Vec<f64>,
    pub sample_count: usize,
    pub lambda_std: f64,
    pub mode_norm: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Summary {
    Multiscale(MultiscaleSummary),
    Coefficients(CoefficientSummary),
    Sde(SdeSummary),
    Converge(EnsembleReport),
    Eof(EofSummary),
    Centering(CenteringSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub kind: ExperimentKind,
    pub summary: Summary,
    pub reports: Vec<ReportFile>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'a str,
    version: &'a str,
    kind: &'a str,
    config_sha256: String,
    seed: u64,
    ensemble_seed: u64,
    threads: usize,
    wall_time_seconds: f64,
    reports: Vec<&'a str>,
}

/// Applies CLI overrides to a copy of the configuration.
pub fn effective_config(cfg: &ExperimentConfig, opts: &RunOptions) -> ExperimentConfig {
    let mut cfg = cfg.clone();
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg
}

/// Runs the experiment and returns its reports without touching the disk.
pub fn execute(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<Outcome> {
    cfg.validate(kind)?;
    macro_rules! dispatch {
        ($f:ident) => {
            match cfg.dim {
                1 => $f::<1>(cfg),
                2 => $f::<2>(cfg),
                3 => $f::<3>(cfg),
                d => Err(Error::config(format!("dim = {d} not in 1..=3"))),
            }
        };
    }
    let (summary, reports) = match kind {
        ExperimentKind::SimulateMultiscale => dispatch!(run_multiscale),
        ExperimentKind::EstimateCoefficients => dispatch!(run_estimation),
        ExperimentKind::SimulateSde => dispatch!(run_sde),
        ExperimentKind::Converge => dispatch!(run_converge),
        ExperimentKind::Eof => dispatch!(run_eof),
        ExperimentKind::CenteringCheck => dispatch!(run_centering),
    }?;
    Ok(Outcome { kind, summary, reports })
}

/// Runs the experiment, writes reports and the manifest into the output
/// directory, and fails with `CheckFailed` when the experiment's own
/// acceptance check does not hold (reports are written first).
pub fn run_experiment(cfg: &ExperimentConfig, kind: ExperimentKind, opts: &RunOptions) -> Result<(Outcome, PathBuf)> {
    let cfg = effective_config(cfg, opts);
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let start = Instant::now();
    let threads = opts.threads.unwrap_or(0);
    let outcome = if threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
        pool.install(|| execute(&cfg, kind))?
    } else {
        execute(&cfg, kind)?
    };
    let wall = start.elapsed().as_secs_f64();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    for r in &outcome.reports {
        let p = out_dir.join(&r.name);
        std::fs::write(&p, &r.contents).map_err(|e| Error::io(&p, e))?;
    }
    let manifest = Manifest {
        tool: "fastslow",
        version: env!("CARGO_PKG_VERSION"),
        kind: kind.as_str(),
        config_sha256: hex::encode(Sha256::digest(cfg.to_toml().as_bytes())),
        seed: cfg.seed,
        ensemble_seed: cfg.ensemble_seed(),
        threads: if threads > 0 {
            threads
        } else {
            rayon::current_num_threads()
        },
        wall_time_seconds: wall,
        reports: outcome.reports.iter().map(|r| r.name.as_str()).collect(),
    };
    let p = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&p, json + "\n").map_err(|e| Error::io(&p, e))?;
    check_outcome(&outcome)?;
    Ok((outcome, out_dir))
}

fn check_outcome(outcome: &Outcome) -> Result<()> {
    match &outcome.summary {
        Summary::Centering(c) if !c.passed => Err(Error::CheckFailed(format!(
            "centering residual {:.4e} exceeds threshold {:.4e}",
            c.residual, c.threshold
        ))),
        Summary::Converge(r) if !r.monotone => Err(Error::CheckFailed(
            "KS distance to the SDE reference grows faster than the allowed slack".into(),
        )),
        _ => Ok(()),
    }
}

fn run_multiscale<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let system: MultiscaleSystem<D> = cfg
        .system(None)
        .within("multiscale_integrator", "simulate_multiscale")?;
    let integ = cfg.integration.as_ref().expect("validated");
    let stride = integ.output_stride.unwrap_or(1).max(1);
    let q0 = cfg.q0::<D>()?;
    let kind = cfg.driver_block()?.system.clone();
    let burn_in = cfg.driver_block()?.burn_in();
    let steps = multiscale_steps(integ.t_final, integ.dt_slow)?;
    if steps % stride != 0 {
        return Err(Error::config(format!(
            "output_stride {stride} does not divide the {steps} slow steps"
        )));
    }
    let seed = cfg.ensemble_seed();
    let runs = (0..cfg.ensemble_size())
        .into_par_iter()
        .map(|member| {
            let mut driver = FastDriver::randomized(kind.clone(), seed, member as u64)?;
            for _ in 0..burn_in {
                driver.step(system.dt_fast())?;
            }
            let state = system.state(q0, driver)?;
            let (traj, end) = system.simulate(state, integ.t_final / steps as f64, integ.t_final, stride)?;
            Ok((traj, end.qbar - q0))
        })
        .collect::<Result<Vec<_>>>()
        .within("multiscale_integrator", "simulate_multiscale")?;
    let displacements: Vec<Vec<f64>> = runs.iter().map(|(_, d)| d.as_slice().to_vec()).collect();
    let stats = EndpointStats::from_samples(&displacements);
    let batch = TrajectoryBatch::new(
        integ.t_final / steps as f64 * stride as f64,
        *system.basis().domain(),
        runs.into_iter().map(|(t, _)| t.positions).collect(),
    )?;
    let mut report = String::from("stat,value,stderr\n");
    let _ = writeln!(report, "eps,{:?},", system.eps());
    let _ = writeln!(report, "substeps,{},", system.substeps(integ.t_final / steps as f64));
    stats.write_rows(&mut report, "displacement_");
    let mut reports = vec![
        ReportFile::text("multiscale_report.csv", report),
        ReportFile {
            name: "trajectories.bin".into(),
            contents: trajio::to_binary(&batch),
        },
    ];
    if write_endpoints(cfg) {
        reports.push(ReportFile::text("endpoints.csv", endpoints_csv(&displacements)));
    }
    Ok((Summary::Multiscale(MultiscaleSummary { displacements, stats }), reports))
}

fn multiscale_steps(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final > 0.0 && dt > 0.0) {
        return Err(Error::config("t_final and dt_slow must be positive"));
    }
    Ok((t_final / dt - 1e-9).ceil().max(1.0) as usize)
}

fn write_endpoints(cfg: &ExperimentConfig) -> bool {
    cfg.output.as_ref().and_then(|o| o.write_endpoints).unwrap_or(false)
}

fn endpoints_csv(rows: &[Vec<f64>]) -> String {
    let d = rows.first().map_or(0, Vec::len);
    let mut out = String::from("member");
    for k in 1..=d {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in r {
            let _ = write!(out, ",{v:?}");
        }
        out.push('\n');
    }
    out
}

/// Long-trajectory samples of `(lambda, c)` for estimation and centering.
pub fn fast_samples<const D: usize>(cfg: &ExperimentConfig, n_samples: usize) -> Result<FastSamples> {
    let d = cfg.driver_block()?;
    let map = cfg.lambda_map()?;
    let coeffs = cfg.coefficient_channels()?;
    let mut driver = cfg.sampling_driver()?;
    homogenization::sample_fast(
        &mut driver,
        &map,
        coeffs.as_ref(),
        d.dt_fast,
        n_samples,
        d.burn_in(),
        d.stride(),
    )
}

/// Estimates the coefficient table configured in `[estimation]`.
pub fn estimate_table<const D: usize>(cfg: &ExperimentConfig) -> Result<CoefficientSummary> {
    let est = cfg
        .estimation
        .as_ref()
        .ok_or_else(|| Error::config("missing key `estimation`"))?;
    let basis: ModeBasis<D> = cfg.basis()?;
    let velocity = cfg.velocity.clone().unwrap_or(MeanVelocityField::Zero);
    let samples = fast_samples::<D>(cfg, est.n_samples).within("chaotic_drivers", "sample_invariant_measure")?;
    let lambda_acf = acf::autocorrelation(&samples.lambda, est.max_lag, samples.spacing)
        .within("chaotic_drivers", "autocorrelation")?;
    let truncation = est.truncation.unwrap_or_default();
    let gk = acf::green_kubo_integral(&lambda_acf, truncation).within("chaotic_drivers", "green_kubo_integral")?;
    let lattice = match &est.probe_axes {
        Some(axes) => ProbeLattice::new(axes.clone(), None)?,
        None => ProbeLattice::periodic_uniform(basis.domain().lengths.as_slice(), est.probes_per_axis.unwrap_or(4))?,
    };
    let probes = lattice.probes_static::<D>()?;
    let estimates =
        homogenization::estimate_coefficients(&basis, &velocity, &samples, &lambda_acf, truncation, &probes)
            .within("homogenization", "estimate_coefficients")?;
    let table = CoefficientTable::new(basis.len(), cfg.seed, lattice, &estimates)?;
    Ok(CoefficientSummary {
        table,
        green_kubo: gk.symmetrized(),
        truncation_lag: gk.lag,
    })
}

fn run_estimation<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let summary = estimate_table::<D>(cfg)?;
    let mut gk = String::from("i,j,value\n");
    for i in 0..summary.green_kubo.nrows() {
        for j in 0..summary.green_kubo.ncols() {
            let _ = writeln!(gk, "{},{},{:?}", i + 1, j + 1, summary.green_kubo[(i, j)]);
        }
    }
    let mut probes = String::from("probe,stat,value\n");
    for (p, rec) in summary.table.probes.iter().enumerate() {
        for (k, v) in rec.at.iter().enumerate() {
            let _ = writeln!(probes, "{p},at_x{},{v:?}", k + 1);
        }
        for (k, v) in rec.drift.iter().enumerate() {
            let _ = writeln!(probes, "{p},drift_x{},{v:?}", k + 1);
        }
        let d = rec.at.len();
        for i in 0..d {
            for j in 0..d {
                let _ = writeln!(
                    probes,
                    "{p},diffusion_{}{},{:?}",
                    i + 1,
                    j + 1,
                    rec.diffusion[i * d + j]
                );
            }
        }
    }
    let reports = vec![
        ReportFile::text("coefficients.txt", summary.table.to_text()),
        ReportFile::text("green_kubo.csv", gk),
        ReportFile::text("probes.csv", probes),
    ];
    Ok((Summary::Coefficients(summary), reports))
}

/// Diagonal Green-Kubo matrix of raw or affine OU coordinate observables:
/// `G_ii = scale_i^2 s^2 / (2 gamma^2)`.
pub fn ou_green_kubo(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let d = cfg.driver_block()?;
    let (gamma, noise) = match d.system {
        DriverKind::OuSurrogate { gamma, noise, .. } => (gamma, noise),
        _ => return Err(Error::config("analytic reference requires the ou_surrogate driver")),
    };
    let o = cfg.observables_block()?;
    if o.coefficients.is_some() {
        return Err(Error::config("analytic reference requires frozen displacement"));
    }
    if o.offset.as_ref().is_some_and(|v| v.iter().any(|x| *x != 0.0)) {
        return Err(Error::config("analytic reference requires zero observable offset"));
    }
    let map = cfg.lambda_map()?;
    let mut seen = Vec::new();
    for ch in map.channels() {
        match ch {
            Channel::Coord(i) if !seen.contains(i) => seen.push(*i),
            _ => {
                return Err(Error::config(
                    "analytic reference requires distinct coordinate channels",
                ))
            }
        }
    }
    Ok(map
        .scale()
        .iter()
        .map(|s| s * s * noise * noise / (2.0 * gamma * gamma))
        .collect())
}

/// Ito drift `u + sum_i G_ii (phi_i . grad) phi_i` of the frozen OU system.
struct AnalyticDrift<const D: usize> {
    basis: ModeBasis<D>,
    g: Vec<f64>,
    velocity: MeanVelocityField,
}

impl<const D: usize> sde::VectorField<D> for AnalyticDrift<D> {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        let mut u = self.velocity.eval(x, 0.0);
        for (m, g) in self.basis.modes().iter().zip(&self.g) {
            u += m.jacobian(x) * m.value(x) * *g;
        }
        Ok(u)
    }
}

/// Drift and noise fields of the homogenized SDE in the requested reading.
pub fn reference_fields<const D: usize>(
    cfg: &ExperimentConfig,
    reference: Reference,
    coefficients_file: Option<&str>,
    interpretation: Interpretation,
) -> Result<(Field<D>, Vec<Field<D>>)> {
    let (ito_drift, noise): (Field<D>, Vec<Field<D>>) = match reference {
        Reference::Analytic => {
            let g = ou_green_kubo(cfg)?;
            let basis: ModeBasis<D> = cfg.basis()?;
            let noise = basis
                .modes()
                .iter()
                .zip(&g)
                .map(|(m, g)| {
                    Arc::new(ModeField {
                        mode: m.clone(),
                        weight: (2.0 * g).sqrt(),
                    }) as Field<D>
                })
                .collect();
            let drift = AnalyticDrift {
                basis,
                g,
                velocity: cfg.velocity.clone().unwrap_or(MeanVelocityField::Zero),
            };
            (Arc::new(drift), noise)
        }
        Reference::Estimated => {
            let table = Arc::new(match coefficients_file {
                Some(path) => CoefficientTable::read(Path::new(path))?,
                None => estimate_table::<D>(cfg)?.table,
            });
            if table.d != D {
                return Err(Error::DimensionMismatch {
                    expected: D,
                    got: table.d,
                });
            }
            let noise = (0..D)
                .map(|j| {
                    Arc::new(TableSigmaSlice {
                        table: table.clone(),
                        index: j,
                        row: false,
                    }) as Field<D>
                })
                .collect();
            (Arc::new(TableDrift(table)), noise)
        }
    };
    let drift: Field<D> = match interpretation {
        Interpretation::Ito => ito_drift,
        Interpretation::Stratonovich => Arc::new(StratonovichDrift {
            ito_drift,
            noise: noise.clone(),
        }),
    };
    Ok((drift, noise))
}

fn run_sde<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let block = cfg.sde.as_ref().expect("validated");
    let (drift, noise) = reference_fields::<D>(
        cfg,
        block.reference,
        block.coefficients_file.as_deref(),
        block.interpretation,
    )?;
    let x0 = match &block.x0 {
        Some(v) if v.len() == D => Vector::<D>::from_column_slice(v),
        Some(_) => return Err(Error::config("sde.x0 needs dim entries")),
        None => Vector::<D>::zeros(),
    };
    let spec = SdeSpec {
        drift,
        noise,
        interpretation: block.interpretation,
        dt: block.dt,
        t_final: block.t_final,
        ensemble_size: cfg.ensemble_size(),
        seed: derive_seed(cfg.ensemble_seed(), SDE_SEED_TAG),
    };
    let endpoints = to_rows(&sde::simulate_sde_ensemble(&spec, &x0).within("sde_integrator", "simulate_sde_ensemble")?);
    let stats = EndpointStats::from_samples(&endpoints);
    let mut report = String::from("stat,value,stderr\n");
    let _ = writeln!(report, "interpretation,{},", block.interpretation.as_str());
    stats.write_rows(&mut report, "");
    let grids = pooled_grids(&[&endpoints], block.cdf_points.unwrap_or(CDF_POINTS));
    cdf_rows(&mut report, "", &endpoints, &grids);
    let mut reports = vec![ReportFile::text("sde_report.csv", report)];
    if write_endpoints(cfg) {
        reports.push(ReportFile::text("endpoints.csv", endpoints_csv(&endpoints)));
    }
    Ok((Summary::Sde(SdeSummary { endpoints, stats }), reports))
}

/// Multiscale ensembles at each eps against one homogenized SDE ensemble.
pub fn weak_convergence_test<const D: usize>(cfg: &ExperimentConfig) -> Result<EnsembleReport> {
    cfg.validate(ExperimentKind::Converge)?;
    let conv = cfg.converge.as_ref().expect("validated");
    let integ = cfg.integration.as_ref().expect("validated");
    let q0 = cfg.q0::<D>()?;
    let size = cfg.ensemble_size();
    let seed = cfg.ensemble_seed();
    let template = cfg.sampling_driver()?;
    let burn_in = cfg.driver_block()?.burn_in();

    let (drift, noise) = reference_fields::<D>(cfg, conv.reference, None, Interpretation::Ito)?;
    let spec = SdeSpec {
        drift,
        noise,
        interpretation: Interpretation::Ito,
        dt: conv.sde_dt,
        t_final: integ.t_final,
        ensemble_size: size,
        seed: derive_seed(seed, SDE_SEED_TAG),
    };
    let reference: Vec<Vec<f64>> = sde::simulate_sde_ensemble(&spec, &q0)
        .within("sde_integrator", "simulate_sde_ensemble")?
        .iter()
        .map(|x| (x - q0).as_slice().to_vec())
        .collect();
    let reference = SdeSummary {
        stats: EndpointStats::from_samples(&reference),
        endpoints: reference,
    };

    let mut rows = Vec::with_capacity(conv.eps_list.len());
    for &eps in &conv.eps_list {
        let system: MultiscaleSystem<D> = cfg.system(Some(eps))?;
        let run = EnsembleRun {
            size,
            seed,
            burn_in,
            qbar0: q0,
            dt_slow: integ.dt_slow,
            t_final: integ.t_final,
        };
        let displacements = to_rows(
            &multiscale::ensemble_endpoints(&system, &template, &run)
                .map_err(|e| match e {
                    Error::StepSizeGuard(msg) => Error::StepSizeGuard(format!("eps = {eps}: {msg}")),
                    other => other,
                })
                .within("multiscale_integrator", "simulate_multiscale")?,
        );
        let ks = stats::ks_distance_max(&displacements, &reference.endpoints)?;
        rows.push(ConvergenceRow {
            eps,
            substeps: system.substeps(integ.dt_slow),
            stats: EndpointStats::from_samples(&displacements),
            ks,
            ks_critical: stats::ks_critical_95(displacements.len(), reference.endpoints.len()),
            displacements,
        });
    }
    let slack = conv.slack.unwrap_or(KS_SLACK);
    let monotone = rows
        .windows(2)
        .all(|w| w[1].ks <= slack * w[0].ks.max(w[0].ks_critical));
    Ok(EnsembleReport {
        t_final: integ.t_final,
        reference,
        rows,
        slack,
        monotone,
    })
}

fn run_converge<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let report = weak_convergence_test::<D>(cfg)?;
    let conv = cfg.converge.as_ref().expect("validated");
    let mut csv = String::from("stat,value,stderr\n");
    let _ = writeln!(csv, "t_final,{:?},", report.t_final);
    let _ = writeln!(csv, "slack,{:?},", report.slack);
    let _ = writeln!(csv, "monotone,{},", u8::from(report.monotone));
    report.reference.stats.write_rows(&mut csv, "sde_");
    for row in &report.rows {
        let p = format!("eps={:?}_", row.eps);
        let _ = writeln!(csv, "{p}substeps,{},", row.substeps);
        row.stats.write_rows(&mut csv, &p);
        let _ = writeln!(csv, "{p}ks,{:?},", row.ks);
        let _ = writeln!(csv, "{p}ks_critical_95,{:?},", row.ks_critical);
    }
    let mut sets: Vec<&[Vec<f64>]> = vec![&report.reference.endpoints];
    sets.extend(report.rows.iter().map(|r| r.displacements.as_slice()));
    let grids = pooled_grids(&sets, conv.cdf_points.unwrap_or(CDF_POINTS));
    let mut cdf = String::from("stat,value,stderr\n");
    cdf_rows(&mut cdf, "sde_", &report.reference.endpoints, &grids);
    for row in &report.rows {
        cdf_rows(&mut cdf, &format!("eps={:?}_", row.eps), &row.displacements, &grids);
    }
    let reports = vec![
        ReportFile::text("converge_report.csv", csv),
        ReportFile::text("converge_cdf.csv", cdf),
    ];
    Ok((Summary::Converge(report), reports))
}

/// Trajectories of particles sharing one fast driver, unwrapped.
pub fn shared_driver_batch<const D: usize>(cfg: &ExperimentConfig) -> Result<TrajectoryBatch<D>> {
    let block = cfg.eof.as_ref().ok_or_else(|| Error::config("missing key `eof`"))?;
    let integ = cfg
        .integration
        .as_ref()
        .ok_or_else(|| Error::config("missing key `integration`"))?;
    let system: MultiscaleSystem<D> = cfg.system(None)?;
    let steps = multiscale_steps(integ.t_final, integ.dt_slow)?;
    let dt = integ.t_final / steps as f64;
    system.check_step(dt)?;
    let n_sub = system.substeps(dt);
    let h = dt / n_sub as f64;
    let mut driver = FastDriver::randomized(cfg.driver_block()?.system.clone(), cfg.ensemble_seed(), 0)?;
    for _ in 0..cfg.driver_block()?.burn_in() {
        driver.step(system.dt_fast())?;
    }
    let (lambda, coeffs) = system.drive_series(&mut driver, steps * n_sub, h)?;
    let domain = *system.basis().domain();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.ensemble_seed(), PARTICLE_SEED_TAG));
    let starts: Vec<Vector<D>> = (0..block.n_traj)
        .map(|_| Vector::<D>::from_fn(|k, _| rng.random::<f64>() * domain.lengths[k]))
        .collect();
    let every = block.record_every.max(1);
    let trajectories = starts
        .par_iter()
        .map(|q0| system.advance_through(*q0, &lambda, &coeffs, h, every))
        .collect::<Result<Vec<_>>>()
        .within("multiscale_integrator", "simulate_multiscale")?;
    TrajectoryBatch::new(h * every as f64, domain, trajectories)
}

fn run_eof<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let block = cfg.eof.as_ref().expect("validated");
    let basis: ModeBasis<D> = cfg.basis()?;
    let raw = shared_driver_batch::<D>(cfg)?;
    let filtered = eof::low_pass_filter(&raw, block.cutoff_period).within("eof_pipeline", "low_pass_filter")?;
    let zeta = eof::displacement_series(&raw, &filtered).within("eof_pipeline", "displacement_series")?;
    let mut counts = [1usize; D];
    counts.copy_from_slice(&block.boxes);
    let grid = BoxGrid::new(*basis.domain(), counts)?;
    let binned = eof::bin_and_covary(
        &raw,
        &filtered,
        &zeta,
        &grid,
        block.min_count.unwrap_or(10),
        block.increment_lag.unwrap_or(1),
    )?;
    let per_box = eof::box_eofs(&binned, block.k.min(D)).within("eof_pipeline", "compute_eofs")?;
    let snapshots = eof::box_field_snapshots(&filtered, &zeta, &grid);
    let snap = eof::snapshot_eofs(&snapshots, block.k).within("eof_pipeline", "compute_eofs")?;
    let planted = eof::planted_box_modes(&basis, &filtered, zeta.interior, &grid);
    let angle = linalg::max_principal_angle(&snap.modes, &planted);

    let mut report = String::from("stat,value,stderr\n");
    let _ = writeln!(report, "n_traj,{},", raw.n_traj());
    let _ = writeln!(report, "n_samples,{},", raw.n_samples());
    let _ = writeln!(report, "filter_window,{},", filtered.window);
    let _ = writeln!(report, "max_interior_mean,{:?},", zeta.max_interior_mean());
    let _ = writeln!(report, "principal_angle,{:?},", angle);
    let _ = writeln!(report, "retained_fraction,{:?},", snap.retained_fraction);
    for (i, v) in snap.values.iter().take(2 * block.k + 2).enumerate() {
        let _ = writeln!(report, "snapshot_value_{},{v:?},", i + 1);
    }
    let mut boxes = String::from("box,stat,value\n");
    for (b, e) in per_box.boxes.iter().enumerate() {
        let _ = writeln!(boxes, "{b},count,{}", e.count);
        for k in 0..D {
            let _ = writeln!(boxes, "{b},center_x{},{:?}", k + 1, e.center[k]);
            let _ = writeln!(boxes, "{b},mean_x{},{:?}", k + 1, e.mean[k]);
        }
        for i in 0..D {
            for j in 0..D {
                let _ = writeln!(boxes, "{b},cov_{}{},{:?}", i + 1, j + 1, e.covariance[(i, j)]);
                let _ = writeln!(
                    boxes,
                    "{b},increment_cov_{}{},{:?}",
                    i + 1,
                    j + 1,
                    e.increment_covariance[(i, j)]
                );
            }
        }
        match &e.eofs {
            None => {
                let _ = writeln!(boxes, "{b},empty,1");
            }
            Some(eofs) => {
                for (m, v) in eofs.values.iter().enumerate() {
                    let _ = writeln!(boxes, "{b},value_{},{v:?}", m + 1);
                }
                for m in 0..eofs.modes.ncols() {
                    for k in 0..D {
                        let _ = writeln!(boxes, "{b},mode_{}_x{},{:?}", m + 1, k + 1, eofs.modes[(k, m)]);
                    }
                }
                let _ = writeln!(boxes, "{b},retained_fraction,{:?}", eofs.retained_fraction);
            }
        }
    }
    let mut reports = vec![
        ReportFile::text("eof_report.csv", report),
        ReportFile::text("eof_boxes.csv", boxes),
    ];
    if block.write_trajectories.unwrap_or(false) {
        reports.push(ReportFile {
            name: "trajectories.bin".into(),
            contents: trajio::to_binary(&raw),
        });
    }
    let summary = EofSummary {
        principal_angle: angle,
        snapshot_values: snap.values.clone(),
        retained_fraction: snap.retained_fraction,
        max_interior_mean: zeta.max_interior_mean(),
        n_traj: raw.n_traj(),
        n_samples: raw.n_samples(),
    };
    Ok((Summary::Eof(summary), reports))
}

/// Empirical centering residual against `3 sigma_lambda |phi| / sqrt(N)`,
/// with `sigma_lambda` the norm of the observable standard deviations and
/// `|phi| = sqrt(sum_i sup|phi_i|^2) / (1 - sup|grad zeta|)`.
pub fn centering_check<const D: usize>(cfg: &ExperimentConfig) -> Result<CenteringSummary> {
    let block = cfg
        .centering
        .as_ref()
        .ok_or_else(|| Error::config("missing key `centering`"))?;
    let basis: ModeBasis<D> = cfg.basis()?;
    let coeffs = cfg.coefficient_channels()?;
    let grad_bound = coeffs.as_ref().map_or(0.0, |c| basis.gradient_bound(c.cap()));
    if grad_bound >= 1.0 {
        return Err(Error::NearSingular {
            min_singular: 0.0,
            x: Vec::new(),
            coeffs: vec![coeffs.as_ref().map_or(0.0, |c| c.cap())],
        });
    }
    let mut samples = fast_samples::<D>(cfg, block.n_samples).within("chaotic_drivers", "sample_invariant_measure")?;
    if block.recenter.unwrap_or(false) {
        samples.lambda = samples.lambda.centered();
    }
    let lattice = ProbeLattice::periodic_uniform(basis.domain().lengths.as_slice(), block.probes_per_axis)?;
    let probes = lattice.probes_static::<D>()?;
    let r = modes::centering_residual(&basis, &samples.lambda, samples.coeffs.as_ref(), &probes)
        .within("displacement_field", "centering_residual")?;
    let lambda_std = samples.lambda.std_devs().iter().map(|s| s * s).sum::<f64>().sqrt();
    let mode_norm = basis.modes().iter().map(|m| m.sup_norm().powi(2)).sum::<f64>().sqrt() / (1.0 - grad_bound);
    let threshold = 3.0 * lambda_std * mode_norm / (r.sample_count as f64).sqrt();
    Ok(CenteringSummary {
        residual: r.residual,
        threshold,
        argmax: r.argmax.as_slice().to_vec(),
        sample_count: r.sample_count,
        lambda_std,
        mode_norm,
        passed: r.residual <= threshold,
    })
}

fn run_centering<const D: usize>(cfg: &ExperimentConfig) -> Result<(Summary, Vec<ReportFile>)> {
    let c = centering_check::<D>(cfg)?;
    let mut report = String::from("stat,value,stderr\n");
    let _ = writeln!(report, "residual,{:?},", c.residual);
    let _ = writeln!(report, "threshold,{:?},", c.threshold);
    let _ = writeln!(report, "sample_count,{},", c.sample_count);
    let _ = writeln!(report, "lambda_std,{:?},", c.lambda_std);
    let _ = writeln!(report, "mode_norm,{:?},", c.mode_norm);
    for (k, v) in c.argmax.iter().enumerate() {
        let _ = writeln!(report, "argmax_x{},{v:?},", k + 1);
    }
    let _ = writeln!(report, "passed,{},", u8::from(c.passed));
    Ok((
        Summary::Centering(c),
        vec![ReportFile::text("centering_report.csv", report)],
    ))
}

/// Smallest singular value of `Id + grad zeta` over a grid of positions and
/// coefficient vectors on the cap sphere (and its coordinate axes).
pub fn min_jacobian_singular_value<const D: usize>(
    basis: &ModeBasis<D>,
    cap: f64,
    grid: usize,
    seed: u64,
) -> Result<f64> {
    let m = basis.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coeff_set: Vec<Vec<f64>> = Vec::new();
    for i in 0..m {
        for s in [-1.0, 1.0] {
            let mut c = vec![0.0; m];
            c[i] = s * cap;
            coeff_set.push(c);
        }
    }
    for _ in 0..32 {
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        coeff_set.push(v.iter().map(|x| x * cap / n).collect());
    }
    let lattice = ProbeLattice::periodic_uniform(basis.domain().lengths.as_slice(), grid)?;
    let mut worst = f64::INFINITY;
    for p in lattice.probes_static::<D>()? {
        for c in &coeff_set {
            worst = worst.min(basis.mean_map_jacobian(c, &p)?.min_singular_value);
        }
    }
    Ok(worst)
}
