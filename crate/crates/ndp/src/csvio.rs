//! CSV readers and writers for the file interfaces.
//!
//! Floating-point values are written with 17 significant digits so files
//! round-trip losslessly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{NdpError, Result};
use crate::gp::FunctionDraw;
use crate::tasks::{BoTrace, MarginalisationReport, RegretRow};
use crate::tensor::Tensor;
use crate::train::StepRecord;

/// 17-significant-digit decimal.
pub fn g17(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    Ok(())
}

fn dim_header(d: usize, name: &str) -> String {
    (0..d).map(|c| format!("{name}_{c}")).collect::<Vec<_>>().join(",")
}

/// Dataset export: `dim_0..dim_{D-1},y`, one row per point.
pub fn write_dataset_csv(path: &Path, draw: &FunctionDraw) -> Result<()> {
    let d = draw.dim();
    let mut out = format!("{},y\n", dim_header(d, "dim"));
    for i in 0..draw.len() {
        for c in 0..d {
            let _ = write!(out, "{},", g17(draw.x.get2(i, c)));
        }
        let _ = writeln!(out, "{}", g17(draw.y[i]));
    }
    write_file(path, &out)
}

/// Read a dataset written by [`write_dataset_csv`] (used for context files).
pub fn read_dataset_csv(path: &Path) -> Result<FunctionDraw> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| NdpError::InvalidArgument(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.last() != Some(&"y") || cols.len() < 2 {
        return Err(NdpError::InvalidArgument(format!(
            "{}: expected header dim_0..dim_k,y, got {header}",
            path.display()
        )));
    }
    let d = cols.len() - 1;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d + 1 {
            return Err(NdpError::InvalidArgument(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 2,
                d + 1,
                fields.len()
            )));
        }
        for f in &fields[..d] {
            xs.push(parse_f64(f, path, lineno + 2)?);
        }
        ys.push(parse_f64(fields[d], path, lineno + 2)?);
    }
    let n = ys.len();
    FunctionDraw::new(Tensor::from_vec(&[n, d], xs)?, ys)
}

fn parse_f64(s: &str, path: &Path, lineno: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| {
        NdpError::InvalidArgument(format!("{}:{}: bad number {s:?}", path.display(), lineno))
    })
}

/// Sample dump: `sample_id,point_id,dim_0..dim_{D-1},y`.
pub fn write_samples_csv(path: &Path, draws: &[FunctionDraw]) -> Result<()> {
    let d = draws.first().map(|dr| dr.dim()).unwrap_or(1);
    let mut out = format!("sample_id,point_id,{},y\n", dim_header(d, "dim"));
    for (s, draw) in draws.iter().enumerate() {
        for i in 0..draw.len() {
            let _ = write!(out, "{s},{i},");
            for c in 0..d {
                let _ = write!(out, "{},", g17(draw.x.get2(i, c)));
            }
            let _ = writeln!(out, "{}", g17(draw.y[i]));
        }
    }
    write_file(path, &out)
}

/// Per-step trajectory dump: `t,point_id,dim_0..dim_{D-1},y`.
pub fn write_trajectory_csv(path: &Path, states: &[(usize, FunctionDraw)]) -> Result<()> {
    let d = states.first().map(|(_, dr)| dr.dim()).unwrap_or(1);
    let mut out = format!("t,point_id,{},y\n", dim_header(d, "dim"));
    for (t, draw) in states {
        for i in 0..draw.len() {
            let _ = write!(out, "{t},{i},");
            for c in 0..d {
                let _ = write!(out, "{},", g17(draw.x.get2(i, c)));
            }
            let _ = writeln!(out, "{}", g17(draw.y[i]));
        }
    }
    write_file(path, &out)
}

/// Loss trace: `step,epoch,lr,loss`.
pub fn write_loss_trace_csv(path: &Path, trace: &[StepRecord]) -> Result<()> {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in trace {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.epoch, g17(r.lr), g17(r.loss));
    }
    write_file(path, &out)
}

/// Optimisation traces: `seed,iter,x_0..x_{D-1},y,best,regret` (regret blank
/// when the optimum is unknown; initial-design rows have negative iters).
pub fn write_bo_traces_csv(path: &Path, traces: &[BoTrace]) -> Result<()> {
    let d = traces
        .first()
        .and_then(|t| t.records.first())
        .map(|r| r.x.len())
        .unwrap_or(1);
    let mut out = format!("seed,iter,{},y,best,regret\n", dim_header(d, "x"));
    for t in traces {
        for r in &t.records {
            let _ = write!(out, "{},{},", t.seed, r.iter);
            for c in 0..d {
                let _ = write!(out, "{},", g17(r.x[c]));
            }
            let _ = write!(out, "{},{},", g17(r.y), g17(r.best));
            match r.regret {
                Some(reg) => {
                    let _ = writeln!(out, "{}", g17(reg));
                }
                None => {
                    let _ = writeln!(out);
                }
            }
        }
    }
    write_file(path, &out)
}

/// Aggregated regret: `iter,median,lo,hi`.
pub fn write_regret_csv(path: &Path, rows: &[RegretRow]) -> Result<()> {
    let mut out = String::from("iter,median,lo,hi\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iter, g17(r.median), g17(r.lo), g17(r.hi));
    }
    write_file(path, &out)
}

/// Marginalisation histogram: `lengthscale,count`.
pub fn write_histogram_csv(path: &Path, report: &MarginalisationReport) -> Result<()> {
    let mut out = String::from("lengthscale,count\n");
    for (ls, c) in report.grid.iter().zip(&report.counts) {
        let _ = writeln!(out, "{},{}", g17(*ls), c);
    }
    write_file(path, &out)
}

/// Schedule dump: `t,beta,alpha_bar,gamma`.
pub fn write_schedule_csv(path: &Path, sched: &crate::schedule::NoiseSchedule) -> Result<()> {
    write_file(path, &sched.csv())
}
