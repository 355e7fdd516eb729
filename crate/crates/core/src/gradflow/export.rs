use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::Trajectory;
use crate::error::{Error, Result};

/// `traj_alpha<α>_seed<seed>`, with α in shortest round-trip scientific form.
pub fn trajectory_file_stem(alpha: f64, seed: u64) -> String {
    format!("traj_alpha{alpha:e}_seed{seed}")
}

/// Columns `t, loss, u_0, v_0, m_0, u_1, ...` (plus `epoch` first for SGD runs).
pub fn write_trajectory_csv(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let p = traj.q.len();
    let with_epoch = traj.snapshots.iter().any(|s| s.epoch.is_some());
    let mut header = String::new();
    if with_epoch {
        header.push_str("epoch,");
    }
    header.push_str("t,loss");
    for i in 0..p {
        header.push_str(&format!(",u_{i},v_{i},m_{i}"));
    }
    let mut out = header;
    out.push('\n');
    for s in &traj.snapshots {
        if with_epoch {
            out.push_str(&format!("{},", s.epoch.unwrap_or(0)));
        }
        out.push_str(&format!("{:e},{:e}", s.t, s.loss));
        for i in 0..p {
            out.push_str(&format!(",{:e},{:e},{:e}", s.theta.u[i], s.theta.v[i], s.log_w[i]));
        }
        out.push('\n');
    }
    w.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Line<'a> {
    t: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    loss: f64,
    u: &'a [f64],
    v: &'a [f64],
    m: Vec<Option<f64>>,
    g: &'a [f64],
}

/// One JSON object per snapshot; `m` entries are `null` where `u + v ≤ 0`.
pub fn write_trajectory_jsonl(traj: &Trajectory, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in &traj.snapshots {
        let line = Line {
            t: s.t,
            epoch: s.epoch,
            loss: s.loss,
            u: &s.theta.u,
            v: &s.theta.v,
            m: s.log_w.iter().map(|m| m.is_finite().then_some(*m)).collect(),
            g: s.g.as_slice(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
