//! Mode estimation from Lagrangian trajectories: temporal low-pass
//! filtering, displacement series, box binning and EOFs.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg;
use crate::modes::{Domain, ModeBasis, Vector};
use crate::stats::Moments;

/// Uniformly sampled trajectories of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryBatch<const D: usize> {
    pub dt: f64,
    pub domain: Domain<D>,
    pub trajectories: Vec<Vec<Vector<D>>>,
    /// Moving-average window that produced this batch (1 for raw data).
    pub window: usize,
}

impl<const D: usize> TrajectoryBatch<D> {
    pub fn new(dt: f64, domain: Domain<D>, trajectories: Vec<Vec<Vector<D>>>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput("trajectory dt must be positive".into()));
        }
        let len = trajectories.first().map_or(0, Vec::len);
        for (i, t) in trajectories.iter().enumerate() {
            if t.len() != len {
                return Err(Error::InvalidInput(format!(
                    "trajectory {i} has {} samples, expected {len}",
                    t.len()
                )));
            }
            if !t.iter().all(|q| q.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidInput(format!("trajectory {i} has non-finite positions")));
            }
        }
        Ok(TrajectoryBatch {
            dt,
            domain,
            trajectories,
            window: 1,
        })
    }

    pub fn n_traj(&self) -> usize {
        self.trajectories.len()
    }

    pub fn n_samples(&self) -> usize {
        self.trajectories.first().map_or(0, Vec::len)
    }

    fn aligned_with(&self, other: &TrajectoryBatch<D>) -> Result<()> {
        if self.n_traj() != other.n_traj() || self.n_samples() != other.n_samples() || self.dt != other.dt {
            return Err(Error::InvalidInput(format!(
                "batches misaligned: {}x{} vs {}x{}",
                self.n_traj(),
                self.n_samples(),
                other.n_traj(),
                other.n_samples()
            )));
        }
        Ok(())
    }
}

/// Lifts wrapped positions to the covering space: each step is replaced by
/// its shortest periodic image, so steps must stay below half a domain length.
pub fn unwrap_periodic<const D: usize>(batch: &TrajectoryBatch<D>) -> TrajectoryBatch<D> {
    let l = batch.domain.lengths;
    let trajectories = batch
        .trajectories
        .iter()
        .map(|traj| {
            let mut out: Vec<Vector<D>> = Vec::with_capacity(traj.len());
            for (s, q) in traj.iter().enumerate() {
                match s {
                    0 => out.push(*q),
                    _ => {
                        let step = Vector::<D>::from_fn(|k, _| {
                            let d = q[k] - traj[s - 1][k];
                            d - l[k] * (d / l[k]).round()
                        });
                        out.push(out[s - 1] + step);
                    }
                }
            }
            out
        })
        .collect();
    TrajectoryBatch {
        trajectories,
        ..batch.clone()
    }
}

/// Odd moving-average window for `cutoff_period`.
pub fn filter_window(cutoff_period: f64, dt: f64) -> Result<usize> {
    if !(cutoff_period >= 4.0 * dt) {
        return Err(Error::InvalidInput(format!(
            "cutoff period {cutoff_period} shorter than 4 samples of {dt}"
        )));
    }
    let w = (cutoff_period / dt).round() as usize;
    Ok(if w % 2 == 0 { w + 1 } else { w })
}

/// Centered moving average of `signal` (row-major, `dim` per sample) with
/// an odd window; near the ends the window shrinks symmetrically, so
/// affine signals pass unchanged everywhere.
pub fn moving_average(signal: &[f64], dim: usize, window: usize) -> Vec<f64> {
    let n = signal.len() / dim;
    let half = window / 2;
    let mut out = vec![0.0; n * dim];
    for t in 0..n {
        let h = half.min(t).min(n - 1 - t);
        let count = (2 * h + 1) as f64;
        for k in 0..dim {
            out[t * dim + k] = (t - h..=t + h).map(|s| signal[s * dim + k]).sum::<f64>() / count;
        }
    }
    out
}

/// Zero-phase temporal smoothing of every trajectory. Trajectories must be
/// unwrapped (continuous in the covering space).
pub fn low_pass_filter<const D: usize>(batch: &TrajectoryBatch<D>, cutoff_period: f64) -> Result<TrajectoryBatch<D>> {
    let window = filter_window(cutoff_period, batch.dt)?;
    if batch.n_samples() < window {
        return Err(Error::TooFewSamples {
            got: batch.n_samples(),
            need: window,
        });
    }
    let trajectories = batch
        .trajectories
        .par_iter()
        .map(|traj| {
            let flat: Vec<f64> = traj.iter().flat_map(|q| q.iter().copied()).collect();
            moving_average(&flat, D, window)
                .chunks(D)
                .map(Vector::<D>::from_column_slice)
                .collect()
        })
        .collect();
    Ok(TrajectoryBatch {
        dt: batch.dt,
        domain: batch.domain,
        trajectories,
        window,
    })
}

/// `zeta_t = raw - filtered` with a per-trajectory centering diagnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementBatch<const D: usize> {
    pub zeta: Vec<Vec<Vector<D>>>,
    /// Norm of the interior mean of `zeta`, per trajectory.
    pub interior_mean_norms: Vec<f64>,
    /// First and one-past-last interior sample.
    pub interior: (usize, usize),
}

impl<const D: usize> DisplacementBatch<D> {
    pub fn max_interior_mean(&self) -> f64 {
        self.interior_mean_norms.iter().fold(0.0f64, |m, v| m.max(*v))
    }

    /// True when every trajectory's interior mean is within `tolerance`.
    pub fn centered_within(&self, tolerance: f64) -> bool {
        self.max_interior_mean() <= tolerance
    }
}

pub fn displacement_series<const D: usize>(
    raw: &TrajectoryBatch<D>,
    filtered: &TrajectoryBatch<D>,
) -> Result<DisplacementBatch<D>> {
    raw.aligned_with(filtered)?;
    let n = raw.n_samples();
    let half = filtered.window / 2;
    let interior = if n > 2 * half { (half, n - half) } else { (0, n) };
    let zeta: Vec<Vec<Vector<D>>> = raw
        .trajectories
        .iter()
        .zip(&filtered.trajectories)
        .map(|(r, f)| r.iter().zip(f).map(|(a, b)| a - b).collect())
        .collect();
    let interior_mean_norms = zeta
        .iter()
        .map(|z| {
            let count = (interior.1 - interior.0).max(1) as f64;
            (z[interior.0..interior.1].iter().sum::<Vector<D>>() / count).norm()
        })
        .collect();
    Ok(DisplacementBatch {
        zeta,
        interior_mean_norms,
        interior,
    })
}

/// Regular partition of the periodic domain into boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxGrid<const D: usize> {
    pub domain: Domain<D>,
    pub counts: [usize; D],
}

impl<const D: usize> BoxGrid<D> {
    pub fn new(domain: Domain<D>, counts: [usize; D]) -> Result<Self> {
        if counts.iter().any(|c| *c == 0) {
            return Err(Error::config("box counts must be >= 1"));
        }
        Ok(BoxGrid { domain, counts })
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat index (last axis fastest) of the box containing `x` after wrapping.
    pub fn index(&self, x: &Vector<D>) -> usize {
        let w = self.domain.wrap(x);
        let mut idx = 0;
        for k in 0..D {
            let n = self.counts[k];
            let b = ((w[k] / self.domain.lengths[k]) * n as f64).floor() as usize;
            idx = idx * n + b.min(n - 1);
        }
        idx
    }

    pub fn center(&self, index: usize) -> Vector<D> {
        let mut c = Vector::<D>::zeros();
        let mut rest = index;
        for k in (0..D).rev() {
            let n = self.counts[k];
            let b = rest % n;
            rest /= n;
            c[k] = (b as f64 + 0.5) * self.domain.lengths[k] / n as f64;
        }
        c
    }
}

/// Per-box accumulated statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    /// Moments of `zeta`.
    pub displacement: Moments,
    /// Moments of `(q(t + lag) - q(t)) / sqrt(lag * dt)`; the covariance
    /// estimates `sigma sigma^T` for diffusive paths.
    pub increment: Moments,
    pub empty: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedStats<const D: usize> {
    pub grid: BoxGrid<D>,
    pub boxes: Vec<BoxStats>,
    pub increment_lag: usize,
}

/// Assigns each interior displacement sample to the box of its filtered
/// position. Boxes with fewer than `min_count` samples are flagged empty.
/// Increments use the raw (unwrapped) positions over `increment_lag` samples.
pub fn bin_and_covary<const D: usize>(
    raw: &TrajectoryBatch<D>,
    filtered: &TrajectoryBatch<D>,
    zeta: &DisplacementBatch<D>,
    grid: &BoxGrid<D>,
    min_count: u64,
    increment_lag: usize,
) -> Result<BinnedStats<D>> {
    raw.aligned_with(filtered)?;
    let lag = increment_lag.max(1);
    let scale = 1.0 / (lag as f64 * raw.dt).sqrt();
    let (lo, hi) = zeta.interior;
    let fresh = || vec![(Moments::new(D), Moments::new(D)); grid.len()];
    let per_traj: Vec<Vec<(Moments, Moments)>> = (0..raw.n_traj())
        .into_par_iter()
        .map(|i| {
            let mut acc = fresh();
            let (r, f, z) = (&raw.trajectories[i], &filtered.trajectories[i], &zeta.zeta[i]);
            for t in lo..hi {
                let b = grid.index(&f[t]);
                acc[b].0.push(z[t].as_slice());
                if t + lag < hi {
                    let inc = (r[t + lag] - r[t]) * scale;
                    acc[b].1.push(inc.as_slice());
                }
            }
            acc
        })
        .collect();
    let mut total = fresh();
    for part in &per_traj {
        for (t, p) in total.iter_mut().zip(part) {
            t.0.merge(&p.0);
            t.1.merge(&p.1);
        }
    }
    let boxes = total
        .into_iter()
        .map(|(displacement, increment)| BoxStats {
            empty: displacement.count() < min_count.max(2),
            displacement,
            increment,
        })
        .collect();
    Ok(BinnedStats {
        grid: *grid,
        boxes,
        increment_lag: lag,
    })
}

/// Leading eigenvectors of a symmetric covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Eofs {
    /// All eigenvalues, nonincreasing, negative rounding clipped to zero.
    pub values: Vec<f64>,
    /// `k` orthonormal modes as columns, largest-magnitude entry positive.
    pub modes: DMatrix<f64>,
    /// Share of total variance carried by the retained modes.
    pub retained_fraction: f64,
}

pub fn compute_eofs(covariance: &DMatrix<f64>, k: usize) -> Result<Eofs> {
    let n = covariance.nrows();
    if !covariance.is_square() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: covariance.ncols(),
        });
    }
    if k == 0 || k > n {
        return Err(Error::InvalidInput(format!(
            "cannot retain {k} modes of a {n}x{n} covariance"
        )));
    }
    let sym = (covariance + covariance.transpose()) * 0.5;
    let (values, mut vectors) = linalg::sym_eigen_sorted(&sym);
    linalg::canonical_signs(&mut vectors);
    let values: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let kept: f64 = values[..k].iter().sum();
    Ok(Eofs {
        retained_fraction: if total > 0.0 {
            (kept / total).clamp(0.0, 1.0)
        } else {
            0.0
        },
        modes: vectors.columns(0, k).into_owned(),
        values,
    })
}

/// EOFs of the mean-removed snapshots (rows of `snapshots`).
pub fn snapshot_eofs(snapshots: &[DVector<f64>], k: usize) -> Result<Eofs> {
    let n = snapshots.first().map_or(0, |s| s.len());
    if snapshots.len() < 2 {
        return Err(Error::TooFewSamples {
            got: snapshots.len(),
            need: 2,
        });
    }
    let mut m = Moments::new(n);
    for s in snapshots {
        m.push(s.as_slice());
    }
    compute_eofs(&m.covariance(), k)
}

/// Per-box EOF of the displacement covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxEof<const D: usize> {
    pub center: Vector<D>,
    pub count: u64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub increment_covariance: DMatrix<f64>,
    /// `None` for boxes flagged empty.
    pub eofs: Option<Eofs>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EofResult<const D: usize> {
    pub grid: BoxGrid<D>,
    pub boxes: Vec<BoxEof<D>>,
}

pub fn box_eofs<const D: usize>(binned: &BinnedStats<D>, k: usize) -> Result<EofResult<D>> {
    let boxes = binned
        .boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let covariance = b.displacement.covariance();
            Ok(BoxEof {
                center: binned.grid.center(i),
                count: b.displacement.count(),
                mean: b.displacement.mean().clone(),
                increment_covariance: b.increment.covariance(),
                eofs: if b.empty {
                    None
                } else {
                    Some(compute_eofs(&covariance, k)?)
                },
                covariance,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EofResult {
        grid: binned.grid,
        boxes,
    })
}

/// Box-averaged displacement field at each interior time, flattened as
/// `[box0_x, box0_y, box1_x, ...]`. Boxes with no particle at a time
/// contribute zero at that time.
pub fn box_field_snapshots<const D: usize>(
    filtered: &TrajectoryBatch<D>,
    zeta: &DisplacementBatch<D>,
    grid: &BoxGrid<D>,
) -> Vec<DVector<f64>> {
    let (lo, hi) = zeta.interior;
    (lo..hi)
        .into_par_iter()
        .map(|t| {
            let mut sums = vec![Vector::<D>::zeros(); grid.len()];
            let mut counts = vec![0usize; grid.len()];
            for (f, z) in filtered.trajectories.iter().zip(&zeta.zeta) {
                let b = grid.index(&f[t]);
                sums[b] += z[t];
                counts[b] += 1;
            }
            DVector::from_iterator(
                grid.len() * D,
                sums.iter()
                    .zip(&counts)
                    .flat_map(|(s, c)| (0..D).map(move |k| if *c > 0 { s[k] / *c as f64 } else { 0.0 })),
            )
        })
        .collect()
}

/// Box averages of each mode at the filtered particle positions, pooled over
/// interior times: one column per mode, in the snapshot layout.
pub fn planted_box_modes<const D: usize>(
    basis: &ModeBasis<D>,
    filtered: &TrajectoryBatch<D>,
    interior: (usize, usize),
    grid: &BoxGrid<D>,
) -> DMatrix<f64> {
    let m = basis.len();
    let mut out = DMatrix::zeros(grid.len() * D, m);
    let mut counts = vec![0usize; grid.len()];
    for traj in &filtered.trajectories {
        for q in &traj[interior.0..interior.1] {
            let b = grid.index(q);
            counts[b] += 1;
            for (i, mode) in basis.modes().iter().enumerate() {
                let v = mode.value(q);
                for k in 0..D {
                    out[(b * D + k, i)] += v[k];
                }
            }
        }
    }
    for (b, c) in counts.iter().enumerate() {
        if *c > 0 {
            for k in 0..D {
                for i in 0..m {
                    out[(b * D + k, i)] /= *c as f64;
                }
            }
        }
    }
    out
}
