//! Run artifacts: `steps.csv`, `metrics.json` and `lfs.csv`, with readers
//! for each. Powers are written in kW; floats use the shortest
//! representation that parses back to the same value.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{RunMetrics, RunResult};
use crate::odcp::OdcpStatus;

pub const STEPS_FILE: &str = "steps.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const LFS_FILE: &str = "lfs.csv";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

/// One row of `steps.csv` as read back.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    pub k: usize,
    pub t_s: f64,
    pub r_kw: f64,
    pub r_m_kw: f64,
    pub p_t_kw: f64,
    pub losses_kw: f64,
    pub rmse: f64,
    pub score_so_far: f64,
    pub score_defined: bool,
    pub odcp_status: OdcpStatus,
    /// `(bus, kW)` per DER.
    pub z_kw: Vec<(usize, f64)>,
}

/// One row of `lfs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LfRow {
    pub k: usize,
    pub t_s: f64,
    pub bus: usize,
    pub lambda_hat: f64,
    pub lambda_true: f64,
}

fn status_name(s: OdcpStatus) -> &'static str {
    match s {
        OdcpStatus::Optimal => "optimal",
        OdcpStatus::ClampedInfeasible => "clamped_infeasible",
    }
}

fn parse_status(s: &str) -> Option<OdcpStatus> {
    match s {
        "optimal" => Some(OdcpStatus::Optimal),
        "clamped_infeasible" => Some(OdcpStatus::ClampedInfeasible),
        _ => None,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> OutputError + '_ {
    move |source| OutputError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, message: impl Into<String>) -> OutputError {
    OutputError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_steps_csv(run: &RunResult, w: impl Write) -> Result<(), csv::Error> {
    let kw = run.s_base_kva;
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = [
        "k",
        "t_s",
        "r_kw",
        "r_m_kw",
        "p_t_kw",
        "losses_kw",
        "rmse",
        "score_so_far",
        "score_defined",
        "odcp_status",
    ]
    .iter()
    .map(ToString::to_string)
    .collect();
    header.extend(run.der_buses.iter().map(|b| format!("z_bus{b}_kw")));
    out.write_record(&header)?;
    for s in &run.steps {
        let mut row = vec![
            s.k.to_string(),
            s.t.to_string(),
            (s.r * kw).to_string(),
            (s.r_m * kw).to_string(),
            (s.p_t * kw).to_string(),
            (s.losses * kw).to_string(),
            s.rmse.to_string(),
            s.score_so_far.to_string(),
            s.score_defined.to_string(),
            status_name(s.odcp_status).to_string(),
        ];
        row.extend(s.z.iter().map(|z| (z * kw).to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_lfs_csv(run: &RunResult, w: impl Write) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for s in &run.steps {
        for (i, (h, t)) in s.lambda_hat.iter().zip(&s.lambda_true).enumerate() {
            out.serialize(LfRow {
                k: s.k,
                t_s: s.t,
                bus: i + 1,
                lambda_hat: *h,
                lambda_true: *t,
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Writes the three run artifacts into `dir`, which must exist.
pub fn write_run(run: &RunResult, dir: &Path) -> Result<(), OutputError> {
    let steps = dir.join(STEPS_FILE);
    let f = File::create(&steps).map_err(io_err(&steps))?;
    write_steps_csv(run, BufWriter::new(f)).map_err(csv_err(&steps))?;

    let lfs = dir.join(LFS_FILE);
    let f = File::create(&lfs).map_err(io_err(&lfs))?;
    write_lfs_csv(run, BufWriter::new(f)).map_err(csv_err(&lfs))?;

    let metrics = dir.join(METRICS_FILE);
    let f = File::create(&metrics).map_err(io_err(&metrics))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, &run.metrics).map_err(|source| OutputError::Json {
        path: metrics.display().to_string(),
        source,
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(io_err(&metrics))?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<RunMetrics, OutputError> {
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| OutputError::Json {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_lfs_csv(path: &Path) -> Result<Vec<LfRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    r.deserialize()
        .collect::<Result<Vec<LfRow>, _>>()
        .map_err(csv_err(path))
}

pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>, OutputError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.clone();
    if header.len() < 10 || &header[0] != "k" {
        return Err(fmt_err(path, "unexpected header"));
    }
    let mut der_buses = Vec::new();
    for h in header.iter().skip(10) {
        let bus = h
            .strip_prefix("z_bus")
            .and_then(|s| s.strip_suffix("_kw"))
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| fmt_err(path, format!("bad column `{h}`")))?;
        der_buses.push(bus);
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let bad = |col: &str| fmt_err(path, format!("row {}: bad `{col}`", line + 1));
        let f = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&header[i]));
        rows.push(StepRow {
            k: rec[0].parse().map_err(|_| bad("k"))?,
            t_s: f(1)?,
            r_kw: f(2)?,
            r_m_kw: f(3)?,
            p_t_kw: f(4)?,
            losses_kw: f(5)?,
            rmse: f(6)?,
            score_so_far: f(7)?,
            score_defined: rec[8].parse().map_err(|_| bad("score_defined"))?,
            odcp_status: parse_status(&rec[9]).ok_or_else(|| bad("odcp_status"))?,
            z_kw: der_buses
                .iter()
                .enumerate()
                .map(|(j, &b)| f(10 + j).map(|z| (b, z)))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}
