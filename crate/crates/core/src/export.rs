//! CSV, JSON and binary artifacts.
//!
//! Floats are written with Rust's shortest round-trip formatting, so equal
//! values always produce equal bytes.
//!
//! Binary ensemble layout (little endian):
//!
//! ```text
//! magic    8 bytes  "STORUS01"
//! grid_n   u32
//! n_steps  u64
//! dt       f64
//! seed     u64
//! n_paths  u64
//! per path:   path_index u64, snapshot_every u64, n_snapshots u64
//! per snapshot: step u64, time f64, then grid_n² (x, y) pairs of g, then of g̃
//! ```

use std::io::{Read, Write};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{CoupledPath, DiffeoState, Snapshot};
use crate::metrics::DistanceDiagnostics;
use crate::rotation::RotationDiagnostics;

pub const ENSEMBLE_MAGIC: &[u8; 8] = b"STORUS01";

/// `t,label_i,label_j,pos_1,pos_2` for every stored state of `g` (and `g̃`
/// with `flow = 1`).
pub fn write_snapshots_csv(path: &CoupledPath, mut w: impl Write) -> Result<()> {
    writeln!(w, "t,flow,label_i,label_j,pos_1,pos_2")?;
    for snap in &path.snapshots {
        for (flow, st) in [(0, &snap.g), (1, &snap.g_tilde)] {
            let n = st.grid_n();
            for (idx, p) in st.positions().iter().enumerate() {
                writeln!(w, "{},{},{},{},{},{}", st.time(), flow, idx / n, idx % n, p[0], p[1])?;
            }
        }
    }
    Ok(())
}

fn flag(b: bool) -> u8 {
    u8::from(b)
}

pub fn write_distance_csv(rows: &[DistanceDiagnostics], mut w: impl Write) -> Result<()> {
    writeln!(
        w,
        "t,rho,rho_ext,sigma_sq,b,ng_dot_delta_u,delta_u_norm,sup_pointwise,cutlocus,event_r,event_2r,event_sqrt2r"
    )?;
    for d in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            d.t,
            d.rho,
            d.rho_ext,
            d.sigma_sq,
            d.b,
            d.ng_dot_delta_u,
            d.delta_u_norm,
            d.sup_pointwise,
            flag(d.cutlocus_flag),
            flag(d.event_r),
            flag(d.event_2r),
            flag(d.event_sqrt2r)
        )?;
    }
    Ok(())
}

pub fn write_rotation_csv(rows: &[RotationDiagnostics], mut w: impl Write) -> Result<()> {
    writeln!(w, "t,x,rho_point,qv_rate_analytic")?;
    for d in rows {
        writeln!(w, "{},{},{},{}", d.t, d.x, d.rho_point, d.qv_rate_analytic)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, mut w: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleHeader {
    pub grid_n: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub n_paths: usize,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Write paths that share grid, step count, `dt` and seed.
pub fn write_ensemble(paths: &[CoupledPath], mut w: impl Write) -> Result<()> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidParameter("ensemble needs at least one path".into()))?;
    for p in paths {
        if p.grid_n() != first.grid_n() || p.n_steps != first.n_steps || p.dt != first.dt || p.seed != first.seed {
            return Err(Error::InvalidParameter("ensemble paths must share grid, steps, dt and seed".into()));
        }
    }
    w.write_all(ENSEMBLE_MAGIC)?;
    w.write_all(&(first.grid_n() as u32).to_le_bytes())?;
    put_u64(&mut w, first.n_steps as u64)?;
    put_f64(&mut w, first.dt)?;
    put_u64(&mut w, first.seed)?;
    put_u64(&mut w, paths.len() as u64)?;
    for p in paths {
        put_u64(&mut w, p.path_index)?;
        put_u64(&mut w, p.snapshot_every as u64)?;
        put_u64(&mut w, p.snapshots.len() as u64)?;
        for s in &p.snapshots {
            put_u64(&mut w, s.step as u64)?;
            put_f64(&mut w, s.g.time())?;
            for st in [&s.g, &s.g_tilde] {
                for q in st.positions() {
                    put_f64(&mut w, q[0])?;
                    put_f64(&mut w, q[1])?;
                }
            }
        }
    }
    Ok(())
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b)?;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

pub fn read_ensemble(r: impl Read) -> Result<(EnsembleHeader, Vec<CoupledPath>)> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != ENSEMBLE_MAGIC {
        return Err(Error::InvalidParameter("not an ensemble file (bad magic)".into()));
    }
    let grid_n = u32::from_le_bytes(r.bytes()?) as usize;
    let header = EnsembleHeader {
        grid_n,
        n_steps: r.u64()? as usize,
        dt: r.f64()?,
        seed: r.u64()?,
        n_paths: r.u64()? as usize,
    };
    let mut paths = Vec::with_capacity(header.n_paths);
    for _ in 0..header.n_paths {
        let path_index = r.u64()?;
        let snapshot_every = r.u64()? as usize;
        let n_snap = r.u64()? as usize;
        let mut snapshots = Vec::with_capacity(n_snap);
        for _ in 0..n_snap {
            let step = r.u64()? as usize;
            let time = r.f64()?;
            let mut states = Vec::with_capacity(2);
            for _ in 0..2 {
                let pos = (0..grid_n * grid_n)
                    .map(|_| Ok([r.f64()?, r.f64()?]))
                    .collect::<Result<Vec<_>>>()?;
                states.push(DiffeoState::from_positions(grid_n, pos, time)?);
            }
            let g_tilde = states.pop().expect("two states read");
            let g = states.pop().expect("two states read");
            snapshots.push(Snapshot { step, g, g_tilde });
        }
        paths.push(CoupledPath {
            dt: header.dt,
            seed: header.seed,
            path_index,
            n_steps: header.n_steps,
            snapshot_every,
            snapshots,
        });
    }
    Ok((header, paths))
}
