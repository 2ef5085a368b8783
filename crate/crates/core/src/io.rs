//! File formats: `HWTRJ1` trajectories, CSV tables, atomic writes.
//!
//! Trajectory layout (little-endian): magic `HWTRJ1`; `u32` version;
//! `u32` components, cells, snapshots; `f64` dx, dt; `u32` count followed by that
//! many `f64` initial-condition parameters; snapshot data row-major as
//! (time, cell, component). Version 2 appends a boundary-flux block: `u32`
//! save stride, `f64` start time, `u32` steps, then per step the effective
//! left/right fluxes and the start-of-step left/right fluxes (`4 C` values).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array3, Axis};

use crate::error::{Error, Result};
use crate::grid::State;
use crate::networks::Reader;
use crate::stepper::{BoundaryFluxes, RolloutRecord};

pub const TRAJECTORY_MAGIC: &[u8; 6] = b"HWTRJ1";

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let res = (|| -> Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res
}

/// Boundary fluxes logged per step.
#[derive(Debug, Clone, PartialEq)]
pub struct FluxLogBlock {
    pub save_every: usize,
    pub t0: f64,
    pub effective: Vec<BoundaryFluxes>,
    pub time_level: Vec<BoundaryFluxes>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dx: f64,
    pub dt: f64,
    pub ic_params: Vec<f64>,
    /// `(snapshots, N, C)`.
    pub snapshots: Array3<f64>,
    pub flux_log: Option<FluxLogBlock>,
}

impl Trajectory {
    pub fn n_snapshots(&self) -> usize {
        self.snapshots.dim().0
    }

    pub fn n_cells(&self) -> usize {
        self.snapshots.dim().1
    }

    pub fn n_components(&self) -> usize {
        self.snapshots.dim().2
    }

    pub fn snapshot(&self, m: usize) -> ndarray::ArrayView2<'_, f64> {
        self.snapshots.index_axis(Axis(0), m)
    }

    pub fn from_record(rec: &RolloutRecord, ic_params: Vec<f64>) -> Result<Self> {
        let first = rec.snapshots.first().ok_or_else(|| Error::invalid("empty record"))?;
        let (n, c) = first.u.dim();
        let mut snaps = Array3::zeros((rec.snapshots.len(), n, c));
        for (m, s) in rec.snapshots.iter().enumerate() {
            snaps.index_axis_mut(Axis(0), m).assign(&s.u);
        }
        Ok(Trajectory {
            dx: rec.dx,
            dt: rec.dt,
            ic_params,
            snapshots: snaps,
            flux_log: Some(FluxLogBlock {
                save_every: rec.save_every,
                t0: first.t,
                effective: rec.boundary_flux_log.clone(),
                time_level: rec.time_level_flux_log.clone(),
            }),
        })
    }

    /// Rebuilds a rollout record; needs the flux block.
    pub fn to_record(&self) -> Result<RolloutRecord> {
        let log = self
            .flux_log
            .as_ref()
            .ok_or_else(|| Error::invalid("trajectory carries no boundary-flux log"))?;
        let n_steps = log.effective.len();
        let snapshots = (0..self.n_snapshots())
            .map(|m| {
                let step = (m * log.save_every).min(n_steps);
                State::new(self.snapshot(m).to_owned(), log.t0 + step as f64 * self.dt)
            })
            .collect();
        Ok(RolloutRecord {
            snapshots,
            boundary_flux_log: log.effective.clone(),
            time_level_flux_log: log.time_level.clone(),
            dt: self.dt,
            dx: self.dx,
            save_every: log.save_every,
            failure: None,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let (m, n, c) = self.snapshots.dim();
        let mut out = Vec::with_capacity(64 + 8 * (m * n * c));
        out.extend_from_slice(TRAJECTORY_MAGIC);
        let version: u32 = if self.flux_log.is_some() { 2 } else { 1 };
        for v in [version, c as u32, n as u32, m as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.dx.to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        out.extend_from_slice(&(self.ic_params.len() as u32).to_le_bytes());
        for v in &self.ic_params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in self.snapshots.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(log) = &self.flux_log {
            out.extend_from_slice(&(log.save_every as u32).to_le_bytes());
            out.extend_from_slice(&log.t0.to_le_bytes());
            out.extend_from_slice(&(log.effective.len() as u32).to_le_bytes());
            for (e, t) in log.effective.iter().zip(&log.time_level) {
                for v in e.left.iter().chain(&e.right).chain(&t.left).chain(&t.right) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(TRAJECTORY_MAGIC.len(), "magic")? != TRAJECTORY_MAGIC {
            return Err(Error::Format { offset: 0, reason: "bad magic, not an HWTRJ1 trajectory".into() });
        }
        let at = r.offset();
        let version = r.u32("version")?;
        if !(1..=2).contains(&version) {
            return Err(Error::Format { offset: at as u64, reason: format!("unsupported version {version}") });
        }
        let c = r.u32("component count")? as usize;
        let n = r.u32("cell count")? as usize;
        let m = r.u32("snapshot count")? as usize;
        if !(1..=3).contains(&c) {
            return r.fail(format!("component count {c} out of range"));
        }
        let dx = r.f64("dx")?;
        let dt = r.f64("dt")?;
        let np = r.u32("parameter count")? as usize;
        let ic_params = r.f64s(np, "initial-condition parameters")?;
        let total = m.checked_mul(n).and_then(|v| v.checked_mul(c));
        let Some(total) = total else { return r.fail("snapshot dimensions overflow") };
        let data = r.f64s(total, "snapshot data")?;
        let snapshots = Array3::from_shape_vec((m, n, c), data).expect("length checked");
        let flux_log = if version == 2 {
            let save_every = r.u32("save stride")? as usize;
            let t0 = r.f64("start time")?;
            let steps = r.u32("step count")? as usize;
            let Some(vals) = steps.checked_mul(4 * c) else { return r.fail("step count overflows") };
            let raw = r.f64s(vals, "boundary fluxes")?;
            let mut effective = Vec::with_capacity(steps);
            let mut time_level = Vec::with_capacity(steps);
            for chunk in raw.chunks_exact(4 * c) {
                let part = |k: usize| chunk[k * c..(k + 1) * c].to_vec();
                effective.push(BoundaryFluxes { left: part(0), right: part(1) });
                time_level.push(BoundaryFluxes { left: part(2), right: part(3) });
            }
            Some(FluxLogBlock { save_every, t0, effective, time_level })
        } else {
            None
        };
        if r.remaining() != 0 {
            return r.fail(format!("{} trailing bytes", r.remaining()));
        }
        Ok(Trajectory { dx, dt, ic_params, snapshots, flux_log })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trajectory::decode(&std::fs::read(path)?)
    }
}

/// One CSV field.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn csv_string<I>(header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = Vec<Cell>>,
{
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        for (k, cell) in row.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            match cell {
                Cell::Int(i) => write!(s, "{i}").unwrap(),
                Cell::Float(f) => s.push_str(&format_float(*f)),
                Cell::Text(t) => s.push_str(t),
            }
        }
        s.push('\n');
    }
    s
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<Cell>>,
{
    write_atomic(path, csv_string(header, rows).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, BoundaryCondition};
    use crate::physics::{ClassicalWeights, Rusanov, System};
    use crate::stepper::{rollout_strided, SpatialOperator};
    use ndarray::Array2;

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, 0.0, std::f64::consts::E] {
            let s = format_float(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits(), "{s}");
        }
        let s = csv_string(&["N", "mse"], vec![vec![Cell::from(32usize), Cell::from(0.5)]]);
        assert_eq!(s, "N,mse\n32,5.0000000000000000e-1\n");
    }

    #[test]
    fn trajectory_round_trip() {
        let g = make_grid(0.0, 1.0, 16).unwrap();
        let op = SpatialOperator::new(
            g.clone(),
            BoundaryCondition::NoFlux,
            System::Burgers,
            Box::new(ClassicalWeights::default()),
            Box::new(Rusanov),
        );
        let st = State::new(Array2::from_shape_fn((16, 1), |(i, _)| if i < 8 { 1.0 } else { 0.2 }), 0.0);
        let rec = rollout_strided(&op, &st, 7, 0.01, 3).unwrap();
        let traj = Trajectory::from_record(&rec, vec![1.0, 0.2]).unwrap();
        let bytes = traj.encode();
        let back = Trajectory::decode(&bytes).unwrap();
        assert_eq!(back, traj);
        let rec2 = back.to_record().unwrap();
        assert_eq!(rec2.snapshots.len(), rec.snapshots.len());
        for (a, b) in rec.snapshots.iter().zip(&rec2.snapshots) {
            assert_eq!(a.u, b.u);
            assert!((a.t - b.t).abs() < 1e-15);
        }
        assert_eq!(rec2.boundary_flux_log, rec.boundary_flux_log);

        let plain = Trajectory { flux_log: None, ..traj.clone() };
        assert_eq!(Trajectory::decode(&plain.encode()).unwrap(), plain);

        for cut in [0, 5, 9, 30, bytes.len() - 4] {
            assert!(matches!(Trajectory::decode(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[6] = 9;
        match Trajectory::decode(&bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
