/// Row-major multichannel time series: `len()` rows of `dim()` values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    dim: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn new(dim: usize) -> Self {
        Series { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Series {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    /// Panics if `data.len()` is not a multiple of `dim`.
    pub fn from_flat(dim: usize, data: Vec<f64>) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "ragged series");
        Series { dim, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Self {
        let mut s = Series::new(dim);
        for r in rows {
            s.push(r.as_ref());
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.dim, "row width");
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.data[t * d..(t + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        self.rows().map(move |r| r[i])
    }

    pub fn means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for r in self.rows() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Unbiased per-channel standard deviations.
    pub fn std_devs(&self) -> Vec<f64> {
        let means = self.means();
        let mut ss = vec![0.0; self.dim];
        for r in self.rows() {
            for i in 0..self.dim {
                let d = r[i] - means[i];
                ss[i] += d * d;
            }
        }
        let denom = (self.len().max(2) - 1) as f64;
        ss.iter().map(|s| (s / denom).sqrt()).collect()
    }

    pub fn centered(&self) -> Series {
        let means = self.means();
        let mut out = self.clone();
        for t in 0..out.len() {
            for (v, m) in out.row_mut(t).iter_mut().zip(&means) {
                *v -= m;
            }
        }
        out
    }

    pub fn scaled(&self, alpha: f64) -> Series {
        Series {
            dim: self.dim,
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
