//! Probe lattices, the coefficient file and multilinear interpolation of
//! estimated coefficients.
//!
//! The file is line-oriented text. Floats are written in Rust's shortest
//! round-trip form, so `parse(write(x)) == x` bit for bit.
//!
//! ```text
//! fastslow-coefficients 1
//! d 2
//! m 2
//! seed 7
//! sample_count 100000
//! truncation_lag 8.0
//! domain 6.283185307179586 6.283185307179586
//! periodic true
//! axis 0.0 3.141592653589793
//! axis 0.0 3.141592653589793
//! probes 4
//! probe 0.0 0.0
//! drift <d values>
//! diffusion <d*d values, row-major>
//! sigma <d*d values, row-major>
//! xi <count>
//! <d values>            (one line per retained xi)
//! ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::homogenization::CoefficientEstimate;
use crate::modes::{Matrix, Vector};
use crate::sde::VectorField;

pub const FORMAT_TAG: &str = "fastslow-coefficients";
pub const FORMAT_VERSION: u32 = 1;

/// Tensor-product grid of probe positions. Probes are enumerated with the
/// last axis varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeLattice {
    pub axes: Vec<Vec<f64>>,
    /// Domain side lengths when the lattice wraps periodically.
    pub periodic: Option<Vec<f64>>,
}

impl ProbeLattice {
    pub fn new(axes: Vec<Vec<f64>>, periodic: Option<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::config("probe lattice needs at least one axis"));
        }
        for (k, axis) in axes.iter().enumerate() {
            if axis.is_empty() {
                return Err(Error::config(format!("probe axis {k} is empty")));
            }
            if axis.iter().any(|v| !v.is_finite()) || axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config(format!(
                    "probe axis {k} must be finite and strictly increasing"
                )));
            }
        }
        if let Some(lengths) = &periodic {
            if lengths.len() != axes.len() {
                return Err(Error::DimensionMismatch {
                    expected: axes.len(),
                    got: lengths.len(),
                });
            }
            for (axis, l) in axes.iter().zip(lengths) {
                if !(*l > 0.0) || axis[axis.len() - 1] - axis[0] >= *l {
                    return Err(Error::config("periodic probe axis must span less than one period"));
                }
            }
        }
        Ok(ProbeLattice { axes, periodic })
    }

    /// `n` evenly spaced probes per axis over one period `[0, L)`.
    pub fn periodic_uniform(lengths: &[f64], n: usize) -> Result<Self> {
        let n = n.max(1);
        let axes = lengths
            .iter()
            .map(|l| (0..n).map(|i| l * i as f64 / n as f64).collect())
            .collect();
        ProbeLattice::new(axes, Some(lengths.to_vec()))
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for k in (0..self.dim().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * self.axes[k + 1].len();
        }
        strides
    }

    pub fn probe(&self, index: usize) -> Vec<f64> {
        let strides = self.strides();
        self.axes
            .iter()
            .zip(&strides)
            .map(|(axis, s)| axis[(index / s) % axis.len()])
            .collect()
    }

    pub fn probes(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.probe(i)).collect()
    }

    pub fn probes_static<const D: usize>(&self) -> Result<Vec<Vector<D>>> {
        if self.dim() != D {
            return Err(Error::DimensionMismatch {
                expected: D,
                got: self.dim(),
            });
        }
        Ok(self
            .probes()
            .iter()
            .map(|p| Vector::<D>::from_column_slice(p))
            .collect())
    }

    /// Flat probe indices and multilinear weights of the cell containing `x`.
    pub fn stencil(&self, x: &[f64]) -> Result<Vec<(usize, f64)>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let outside = || Error::OutsideLattice { x: x.to_vec() };
        let mut per_axis: Vec<[(usize, f64); 2]> = Vec::with_capacity(self.dim());
        for (k, axis) in self.axes.iter().enumerate() {
            let n = axis.len();
            let v = x[k];
            if !v.is_finite() {
                return Err(outside());
            }
            let pair = match &self.periodic {
                Some(lengths) => {
                    let l = lengths[k];
                    let v = axis[0] + (v - axis[0]).rem_euclid(l);
                    if n == 1 {
                        [(0, 1.0), (0, 0.0)]
                    } else if v >= axis[n - 1] {
                        let w = (v - axis[n - 1]) / (axis[0] + l - axis[n - 1]);
                        [(n - 1, 1.0 - w), (0, w)]
                    } else {
                        let i = axis.partition_point(|a| *a <= v) - 1;
                        let w = (v - axis[i]) / (axis[i + 1] - axis[i]);
                        [(i, 1.0 - w), (i + 1, w)]
                    }
                }
                None => {
                    let tol = 1e-12 * (1.0 + axis[n - 1].abs().max(axis[0].abs()));
                    if v < axis[0] - tol || v > axis[n - 1] + tol {
                        return Err(outside());
                    }
                    let v = v.clamp(axis[0], axis[n - 1]);
                    if n == 1 {
                        [(0, 1.0), (0, 0.0)]
                    } else {
                        let i = (axis.partition_point(|a| *a <= v) - 1).min(n - 2);
                        let w = (v - axis[i]) / (axis[i + 1] - axis[i]);
                        [(i, 1.0 - w), (i + 1, w)]
                    }
                }
            };
            per_axis.push(pair);
        }
        let strides = self.strides();
        let d = self.dim();
        let mut out = Vec::with_capacity(1 << d);
        for corner in 0..(1usize << d) {
            let mut index = 0;
            let mut weight = 1.0;
            for k in 0..d {
                let (i, w) = per_axis[k][(corner >> k) & 1];
                index += i * strides[k];
                weight *= w;
            }
            if weight != 0.0 {
                out.push((index, weight));
            }
        }
        Ok(out)
    }
}

/// One probe record in dimension-erased form (row-major matrices).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRecord {
    pub at: Vec<f64>,
    pub drift: Vec<f64>,
    pub diffusion: Vec<f64>,
    pub sigma: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
}

impl ProbeRecord {
    pub fn from_estimate<const D: usize>(e: &CoefficientEstimate<D>) -> Self {
        let row_major = |m: &Matrix<D>| {
            let mut v = Vec::with_capacity(D * D);
            for i in 0..D {
                for j in 0..D {
                    v.push(m[(i, j)]);
                }
            }
            v
        };
        ProbeRecord {
            at: e.at.as_slice().to_vec(),
            drift: e.drift.as_slice().to_vec(),
            diffusion: row_major(&e.diffusion_matrix),
            sigma: row_major(&e.sigma),
            xi: e.xi.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
    }
}

/// Contents of a coefficient file.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientTable {
    pub d: usize,
    pub m: usize,
    pub seed: u64,
    pub sample_count: usize,
    pub truncation_lag: f64,
    pub lattice: ProbeLattice,
    pub probes: Vec<ProbeRecord>,
}

fn push_floats(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

impl CoefficientTable {
    pub fn new<const D: usize>(
        m: usize,
        seed: u64,
        lattice: ProbeLattice,
        estimates: &[CoefficientEstimate<D>],
    ) -> Result<Self> {
        if lattice.dim() != D || lattice.len() != estimates.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: estimates.len(),
            });
        }
        Ok(CoefficientTable {
            d: D,
            m,
            seed,
            sample_count: estimates.first().map_or(0, |e| e.sample_count),
            truncation_lag: estimates.first().map_or(0.0, |e| e.truncation_lag),
            lattice,
            probes: estimates.iter().map(ProbeRecord::from_estimate).collect(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_TAG} {FORMAT_VERSION}");
        let _ = writeln!(out, "d {}", self.d);
        let _ = writeln!(out, "m {}", self.m);
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "sample_count {}", self.sample_count);
        let _ = writeln!(out, "truncation_lag {:?}", self.truncation_lag);
        match &self.lattice.periodic {
            Some(l) => {
                push_floats(&mut out, "domain", l);
                out.push_str("periodic true\n");
            }
            None => out.push_str("periodic false\n"),
        }
        for axis in &self.lattice.axes {
            push_floats(&mut out, "axis", axis);
        }
        let _ = writeln!(out, "probes {}", self.probes.len());
        for p in &self.probes {
            push_floats(&mut out, "probe", &p.at);
            push_floats(&mut out, "drift", &p.drift);
            push_floats(&mut out, "diffusion", &p.diffusion);
            push_floats(&mut out, "sigma", &p.sigma);
            let _ = writeln!(out, "xi {}", p.xi.len());
            for x in &p.xi {
                push_floats(&mut out, "", x);
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = Lines::new(text);
        let (tag, version) = lines.pair()?;
        if tag != FORMAT_TAG {
            return Err(lines.error(format!("expected {FORMAT_TAG}, found {tag:?}")));
        }
        if version != FORMAT_VERSION.to_string() {
            return Err(lines.error(format!("unsupported version {version}")));
        }
        let d: usize = lines.keyed("d")?;
        let m: usize = lines.keyed("m")?;
        let seed: u64 = lines.keyed("seed")?;
        let sample_count: usize = lines.keyed("sample_count")?;
        let truncation_lag: f64 = lines.keyed("truncation_lag")?;
        let domain = if lines.peek_key() == Some("domain") {
            Some(lines.floats("domain", Some(d))?)
        } else {
            None
        };
        let periodic: String = lines.keyed("periodic")?;
        let periodic = match (periodic.as_str(), domain) {
            ("true", Some(l)) => Some(l),
            ("false", None) => None,
            _ => return Err(lines.error("periodic flag inconsistent with domain line".into())),
        };
        let axes = (0..d).map(|_| lines.floats("axis", None)).collect::<Result<Vec<_>>>()?;
        let lattice = ProbeLattice::new(axes, periodic).map_err(|e| lines.error(e.to_string()))?;
        let n: usize = lines.keyed("probes")?;
        if n != lattice.len() {
            return Err(lines.error(format!("{n} probes for a lattice of {}", lattice.len())));
        }
        let mut probes = Vec::with_capacity(n);
        for _ in 0..n {
            let at = lines.floats("probe", Some(d))?;
            let drift = lines.floats("drift", Some(d))?;
            let diffusion = lines.floats("diffusion", Some(d * d))?;
            let sigma = lines.floats("sigma", Some(d * d))?;
            let count: usize = lines.keyed("xi")?;
            let xi = (0..count)
                .map(|_| lines.floats("", Some(d)))
                .collect::<Result<Vec<_>>>()?;
            probes.push(ProbeRecord {
                at,
                drift,
                diffusion,
                sigma,
                xi,
            });
        }
        let end = lines.next_line()?;
        if end.trim() != "end" {
            return Err(lines.error("missing end marker".into()));
        }
        Ok(CoefficientTable {
            d,
            m,
            seed,
            sample_count,
            truncation_lag,
            lattice,
            probes,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CoefficientTable::parse(&text)
    }

    fn blend(&self, x: &[f64], pick: impl Fn(&ProbeRecord) -> &[f64]) -> Result<Vec<f64>> {
        let stencil = self.lattice.stencil(x)?;
        let len = pick(&self.probes[0]).len();
        let mut out = vec![0.0; len];
        for (i, w) in stencil {
            for (o, v) in out.iter_mut().zip(pick(&self.probes[i])) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.blend(x, |p| &p.drift)
    }

    /// Row-major sigma at `x`, interpolated entrywise.
    pub fn sigma_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.blend(x, |p| &p.sigma)
    }

    pub fn diffusion_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.blend(x, |p| &p.diffusion)
    }
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    peeked: Option<(usize, &'a str)>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines {
            inner: text.lines().enumerate(),
            peeked: None,
            line: 0,
        }
    }

    fn error(&self, msg: String) -> Error {
        Error::Format { line: self.line, msg }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        let next = match self.peeked.take() {
            Some(p) => Some(p),
            None => self.inner.next(),
        };
        match next {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(Error::Format {
                line: self.line + 1,
                msg: "unexpected end of file".into(),
            }),
        }
    }

    fn peek_key(&mut self) -> Option<&'a str> {
        if self.peeked.is_none() {
            self.peeked = self.inner.next();
        }
        self.peeked.and_then(|(_, l)| l.split_whitespace().next())
    }

    fn pair(&mut self) -> Result<(String, String)> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace();
        match (it.next(), it.next(), it.next()) {
            (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
            _ => Err(self.error(format!("expected `key value`, found {l:?}"))),
        }
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (k, v) = self.pair()?;
        if k != key {
            return Err(self.error(format!("expected key {key:?}, found {k:?}")));
        }
        v.parse().map_err(|_| self.error(format!("bad value {v:?} for {key}")))
    }

    fn floats(&mut self, key: &str, expect: Option<usize>) -> Result<Vec<f64>> {
        let l = self.next_line()?;
        let mut it = l.split_whitespace().peekable();
        if !key.is_empty() {
            if it.next() != Some(key) {
                return Err(self.error(format!("expected key {key:?}")));
            }
        }
        let values = it
            .map(|t| t.parse::<f64>().map_err(|_| self.error(format!("bad number {t:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(n) = expect {
            if values.len() != n {
                return Err(self.error(format!("{key}: expected {n} values, found {}", values.len())));
            }
        }
        Ok(values)
    }
}

/// Interpolated drift `U(x)` from a coefficient table.
#[derive(Debug, Clone)]
pub struct TableDrift(pub Arc<CoefficientTable>);

impl<const D: usize> VectorField<D> for TableDrift {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        Ok(Vector::<D>::from_column_slice(&self.0.drift_at(x.as_slice())?))
    }
}

/// Row (`row = true`) or column `index` of the interpolated sigma.
#[derive(Debug, Clone)]
pub struct TableSigmaSlice {
    pub table: Arc<CoefficientTable>,
    pub index: usize,
    pub row: bool,
}

impl<const D: usize> VectorField<D> for TableSigmaSlice {
    fn eval(&self, x: &Vector<D>) -> Result<Vector<D>> {
        let s = self.table.sigma_at(x.as_slice())?;
        Ok(Vector::<D>::from_fn(|k, _| {
            if self.row {
                s[self.index * D + k]
            } else {
                s[k * D + self.index]
            }
        }))
    }
}
