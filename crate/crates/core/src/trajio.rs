//! Trajectory batch files: CSV (`traj_id,t,x1..xd`) and a little-endian
//! binary record.
//!
//! Binary layout: `b"HTRJ"`, `u32` version, `u32` d, `u64` n_traj,
//! `u64` n_samples, `f64` dt, `d` x `f64` domain lengths, then positions as
//! `f64` in trajectory-major, sample, coordinate order.

use std::fmt::Write as _;
use std::path::Path;

use crate::eof::TrajectoryBatch;
use crate::error::{Error, Result};
use crate::modes::{Domain, Vector};

pub const MAGIC: &[u8; 4] = b"HTRJ";
pub const VERSION: u32 = 1;

pub fn to_binary<const D: usize>(batch: &TrajectoryBatch<D>) -> Vec<u8> {
    let mut out = Vec::with_capacity(36 + 8 * D * (1 + batch.n_traj() * batch.n_samples()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(D as u32).to_le_bytes());
    out.extend_from_slice(&(batch.n_traj() as u64).to_le_bytes());
    out.extend_from_slice(&(batch.n_samples() as u64).to_le_bytes());
    out.extend_from_slice(&batch.dt.to_le_bytes());
    for l in batch.domain.lengths.iter() {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for traj in &batch.trajectories {
        for q in traj {
            for v in q.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self.bytes.get(self.pos..end).ok_or(Error::Format {
            line: 0,
            msg: format!("truncated trajectory record at byte {}", self.pos),
        })?;
        self.pos = end;
        Ok(slice.try_into().expect("slice length"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn from_binary<const D: usize>(bytes: &[u8]) -> Result<TrajectoryBatch<D>> {
    let bad = |msg: String| Error::Format { line: 0, msg };
    let mut r = Reader { bytes, pos: 0 };
    if &r.take::<4>()? != MAGIC {
        return Err(bad("not a trajectory record".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported trajectory record version {version}")));
    }
    let d = r.u32()? as usize;
    if d != D {
        return Err(Error::DimensionMismatch { expected: D, got: d });
    }
    let n_traj = r.u64()? as usize;
    let n_samples = r.u64()? as usize;
    let expected = 36 + 8 * D + 8 * D * n_traj.saturating_mul(n_samples);
    if bytes.len() != expected {
        return Err(bad(format!(
            "record has {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let dt = r.f64()?;
    let mut lengths = Vector::<D>::zeros();
    for k in 0..D {
        lengths[k] = r.f64()?;
    }
    let mut trajectories = Vec::with_capacity(n_traj);
    for _ in 0..n_traj {
        let mut traj = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let mut q = Vector::<D>::zeros();
            for k in 0..D {
                q[k] = r.f64()?;
            }
            traj.push(q);
        }
        trajectories.push(traj);
    }
    TrajectoryBatch::new(dt, Domain::new(lengths)?, trajectories)
}

pub fn write_binary<const D: usize>(batch: &TrajectoryBatch<D>, path: &Path) -> Result<()> {
    std::fs::write(path, to_binary(batch)).map_err(|e| Error::io(path, e))
}

pub fn read_binary<const D: usize>(path: &Path) -> Result<TrajectoryBatch<D>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_binary(&bytes)
}

pub fn to_csv<const D: usize>(batch: &TrajectoryBatch<D>) -> String {
    let mut out = String::from("traj_id,t");
    for k in 1..=D {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for (i, traj) in batch.trajectories.iter().enumerate() {
        for (s, q) in traj.iter().enumerate() {
            let _ = write!(out, "{i},{:?}", s as f64 * batch.dt);
            for v in q.iter() {
                let _ = write!(out, ",{v:?}");
            }
            out.push('\n');
        }
    }
    out
}

/// Parses CSV rows grouped by `traj_id` (ids `0..n` in any row order,
/// samples in time order). The sampling interval is read from the times.
pub fn from_csv<const D: usize>(text: &str, domain: Domain<D>) -> Result<TrajectoryBatch<D>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Format {
        line: 1,
        msg: "empty trajectory file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != D + 2 || cols[0] != "traj_id" || cols[1] != "t" {
        return Err(Error::Format {
            line: 1,
            msg: format!("expected header traj_id,t,x1..x{D}"),
        });
    }
    let mut trajectories: Vec<Vec<Vector<D>>> = Vec::new();
    let mut times: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Format { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != D + 2 {
            return Err(bad(format!("expected {} fields, found {}", D + 2, fields.len())));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| bad(format!("bad traj_id {:?}", fields[0])))?;
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number {s:?}")));
        let t = num(fields[1])?;
        let mut q = Vector::<D>::zeros();
        for k in 0..D {
            q[k] = num(fields[k + 2])?;
        }
        if id >= trajectories.len() {
            trajectories.resize(id + 1, Vec::new());
            times.resize(id + 1, Vec::new());
        }
        trajectories[id].push(q);
        times[id].push(t);
    }
    let dt = match times.first() {
        Some(t) if t.len() >= 2 => t[1] - t[0],
        _ => {
            return Err(Error::Format {
                line: 0,
                msg: "need at least two samples per trajectory".into(),
            })
        }
    };
    for t in &times {
        for (s, w) in t.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                return Err(Error::Format {
                    line: 0,
                    msg: format!("nonuniform sampling at sample {}", s + 1),
                });
            }
        }
    }
    TrajectoryBatch::new(dt, domain, trajectories)
}
