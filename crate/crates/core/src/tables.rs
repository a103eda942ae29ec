//! CSV tables exchanged with the command line: measurement streams,
//! estimate trajectories, loss-factor tables and controller comparisons.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::MeasurementPair;
use crate::lossfactors::LossFactorSet;

#[derive(Debug, Error)]
pub enum TableError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: {message}")]
    Format { row: usize, message: String },
}

fn format_err(row: usize, message: impl Into<String>) -> TableError {
    TableError::Format {
        row,
        message: message.into(),
    }
}

fn parse_f64(s: &str, row: usize) -> Result<f64, TableError> {
    s.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| format_err(row, format!("`{s}` is not a finite number")))
}

/// Reads `step, dp_1, …, dp_N, dpt` rows (header required) and returns the
/// step labels with their measurement pairs.
pub fn read_measurements(r: impl Read) -> Result<(Vec<u64>, Vec<MeasurementPair>), TableError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(r);
    let width = reader.headers()?.len();
    if width < 3 {
        return Err(format_err(0, "need step, at least one ΔP column and ΔPt"));
    }
    let mut steps = Vec::new();
    let mut pairs = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != width {
            return Err(format_err(row, format!("expected {width} columns, got {}", rec.len())));
        }
        let step = rec[0]
            .trim()
            .parse::<u64>()
            .map_err(|_| format_err(row, format!("bad step `{}`", &rec[0])))?;
        let delta_p = (1..width - 1)
            .map(|i| parse_f64(&rec[i], row))
            .collect::<Result<Vec<_>, _>>()?;
        steps.push(step);
        pairs.push(MeasurementPair {
            delta_p,
            delta_pt: parse_f64(&rec[width - 1], row)?,
        });
    }
    Ok((steps, pairs))
}

pub fn write_measurements(
    w: impl Write,
    steps: &[u64],
    pairs: &[MeasurementPair],
) -> Result<(), TableError> {
    let n = pairs.first().map_or(0, |p| p.delta_p.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string()];
    header.extend((1..=n).map(|i| format!("dp_{i}")));
    header.push("dpt".into());
    out.write_record(&header)?;
    for (s, p) in steps.iter().zip(pairs) {
        let mut row = vec![s.to_string()];
        row.extend(p.delta_p.iter().map(ToString::to_string));
        row.push(p.delta_pt.to_string());
        out.write_record(&row)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Λ̂ after a given step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub step: u64,
    pub updated: bool,
    pub lambda_hat: Vec<f64>,
}

pub fn write_estimates(w: impl Write, rows: &[EstimateRow]) -> Result<(), TableError> {
    let n = rows.first().map_or(0, |r| r.lambda_hat.len());
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["step".to_string(), "updated".to_string()];
    header.extend((1..=n).map(|i| format!("lambda_{i}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), r.updated.to_string()];
        rec.extend(r.lambda_hat.iter().map(ToString::to_string));
        out.write_record(&rec)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_estimates(r: impl Read) -> Result<Vec<EstimateRow>, TableError> {
    let mut reader = csv::Reader::from_reader(r);
    let width = reader.headers()?.len();
    let mut rows = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        rows.push(EstimateRow {
            step: rec[0]
                .parse()
                .map_err(|_| format_err(row, "bad step"))?,
            updated: rec[1]
                .parse()
                .map_err(|_| format_err(row, "bad `updated` flag"))?,
            lambda_hat: (2..width)
                .map(|i| parse_f64(&rec[i], row))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok(rows)
}

/// One bus of a loss-factor table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFactorRow {
    pub bus: usize,
    pub active: f64,
    pub reactive: f64,
    pub total: f64,
}

pub fn loss_factor_rows(set: &LossFactorSet) -> Vec<LossFactorRow> {
    (0..set.total.len())
        .map(|i| LossFactorRow {
            bus: i + 1,
            active: set.active[i],
            reactive: set.reactive[i],
            total: set.total[i],
        })
        .collect()
}

pub fn write_rows<T: Serialize>(w: impl Write, rows: &[T]) -> Result<(), TableError> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(r: impl Read) -> Result<Vec<T>, TableError> {
    let mut reader = csv::Reader::from_reader(r);
    Ok(reader.deserialize().collect::<Result<Vec<T>, _>>()?)
}

/// One controller's line of `compare.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub controller: String,
    pub avg_score: f64,
    pub final_score: f64,
    pub avg_rmse: f64,
    pub max_rmse: f64,
    pub score_flagged: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measurements_round_trip() {
        let pairs = vec![
            MeasurementPair {
                delta_p: vec![0.1, -0.2],
                delta_pt: 0.05,
            },
            MeasurementPair {
                delta_p: vec![1e-7, 3.0],
                delta_pt: -1.5,
            },
        ];
        let mut buf = Vec::new();
        write_measurements(&mut buf, &[4, 5], &pairs).unwrap();
        let (steps, back) = read_measurements(buf.as_slice()).unwrap();
        assert_eq!(steps, vec![4, 5]);
        assert_eq!(back, pairs);
    }

    #[test]
    fn ragged_measurements_are_rejected() {
        let text = "step,dp_1,dp_2,dpt\n0,1,2,3\n1,1,2\n";
        assert!(read_measurements(text.as_bytes()).is_err());
        let text = "step,dp_1,dpt\n0,1,nan\n";
        assert!(matches!(
            read_measurements(text.as_bytes()),
            Err(TableError::Format { row: 1, .. })
        ));
    }

    #[test]
    fn estimates_and_lfs_round_trip() {
        let rows = vec![EstimateRow {
            step: 3,
            updated: true,
            lambda_hat: vec![0.1, 0.2, 1.0 / 3.0],
        }];
        let mut buf = Vec::new();
        write_estimates(&mut buf, &rows).unwrap();
        assert_eq!(read_estimates(buf.as_slice()).unwrap(), rows);

        let lfs = loss_factor_rows(&LossFactorSet {
            active: vec![0.1, 0.2],
            reactive: vec![0.01, 0.02],
            total: vec![0.3, 0.4],
        });
        let mut buf = Vec::new();
        write_rows(&mut buf, &lfs).unwrap();
        assert_eq!(read_rows::<LossFactorRow>(buf.as_slice()).unwrap(), lfs);
    }
}
