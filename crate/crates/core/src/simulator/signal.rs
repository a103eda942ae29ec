//! Regulation-signal sources: recorded traces and a synthetic generator.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ChaCha stream reserved for the synthetic signal.
pub const SIGNAL_STREAM: u64 = 2;

/// First-order autoregressive signal parameters, per-unit and seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    /// Stationary standard deviation.
    pub std: f64,
    /// Correlation time (s); `inf` gives a constant signal.
    pub corr_time: f64,
    /// Symmetric clip level. `None` means the fleet's regulation capacity.
    #[serde(default)]
    pub clip: Option<f64>,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            std: 0.15,
            corr_time: 30.0,
            clip: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("cannot read signal trace {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("signal trace row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("signal trace is empty")]
    Empty,
    #[error("signal trace time is not increasing at row {row}")]
    NonMonotone { row: usize },
    #[error("invalid synthetic signal parameters: {0}")]
    BadParams(String),
}

/// Zero-mean mean-reverting sequence sampled every `dt` seconds and clipped
/// to `±clip`. The generator is ChaCha8 seeded with `seed` on
/// [`SIGNAL_STREAM`].
pub fn synthetic_signal(
    std: f64,
    corr_time: f64,
    clip: f64,
    dt: f64,
    seed: u64,
    n_steps: usize,
) -> Result<Vec<f64>, SignalError> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(SignalError::BadParams(format!("std = {std}")));
    }
    if !(corr_time > 0.0) {
        return Err(SignalError::BadParams(format!("corr_time = {corr_time}")));
    }
    if !(clip > 0.0) {
        return Err(SignalError::BadParams(format!("clip = {clip}")));
    }
    if !(dt > 0.0) {
        return Err(SignalError::BadParams(format!("dt = {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SIGNAL_STREAM);
    let a = (-dt / corr_time).exp();
    let innovation = std * (1.0 - a * a).sqrt();
    let mut x: f64 = std * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    let mut out = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        out.push(x.clamp(-clip, clip));
        let e: f64 = StandardNormal.sample(&mut rng);
        x = a * x + innovation * e;
    }
    Ok(out)
}

/// Reads a `(t_s, r)` CSV (optional header row) and resamples it to `dt`
/// by zero-order hold, starting at the first timestamp.
pub fn load_signal_trace(path: impl AsRef<Path>, dt: f64) -> Result<Vec<f64>, SignalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SignalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_signal_trace(&text, dt)
}

pub fn parse_signal_trace(text: &str, dt: f64) -> Result<Vec<f64>, SignalError> {
    if !(dt > 0.0) {
        return Err(SignalError::BadParams(format!("dt = {dt}")));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 1;
        let rec = rec.map_err(|e| SignalError::Parse {
            row,
            message: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(SignalError::Parse {
                row,
                message: "expected two columns".into(),
            });
        }
        let t = rec[0].parse::<f64>();
        if idx == 0 && t.is_err() {
            continue;
        }
        let parse = |s: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| SignalError::Parse {
                    row,
                    message: format!("`{s}` is not a number"),
                })
        };
        let t = parse(&rec[0])?;
        let r = parse(&rec[1])?;
        if let Some(&(prev, _)) = rows.last() {
            if t <= prev {
                return Err(SignalError::NonMonotone { row });
            }
        }
        rows.push((t, r));
    }
    let (t0, _) = *rows.first().ok_or(SignalError::Empty)?;
    let t_end = rows.last().unwrap().0;
    let slack = 1e-9 * dt;
    let mut out = Vec::new();
    let mut j = 0;
    let mut k = 0usize;
    loop {
        let tau = t0 + k as f64 * dt;
        if tau > t_end + slack {
            break;
        }
        while j + 1 < rows.len() && rows[j + 1].0 <= tau + slack {
            j += 1;
        }
        out.push(rows[j].1);
        k += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_is_silent() {
        let s = synthetic_signal(0.0, 30.0, 1.0, 2.0, 1, 50).unwrap();
        assert!(s.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn seeded_determinism() {
        let a = synthetic_signal(0.2, 30.0, 0.5, 2.0, 9, 200).unwrap();
        let b = synthetic_signal(0.2, 30.0, 0.5, 2.0, 9, 200).unwrap();
        let c = synthetic_signal(0.2, 30.0, 0.5, 2.0, 10, 200).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.iter().all(|x| x.abs() <= 0.5));
    }

    #[test]
    fn long_correlation_time_is_nearly_constant() {
        let s = synthetic_signal(0.1, 1e9, 10.0, 2.0, 4, 1000).unwrap();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let var: f64 = s.iter().map(|x| (x - mean).powi(2)).sum();
        let lag1: f64 = s.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        assert!(lag1 / var > 0.99, "lag1 {}", lag1 / var);
        let s = synthetic_signal(0.1, f64::INFINITY, 10.0, 2.0, 4, 100).unwrap();
        assert!(s.iter().all(|x| *x == s[0]));
    }

    #[test]
    fn trace_at_native_rate_is_verbatim() {
        let s = parse_signal_trace("t_s,r_kw\n0,1\n2,2\n4,3\n", 2.0).unwrap();
        assert_eq!(s, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn trace_decimation() {
        let text: String = (0..10).map(|t| format!("{t},{}\n", t * 10)).collect();
        let s = parse_signal_trace(&text, 2.0).unwrap();
        assert_eq!(s, vec![0.0, 20.0, 40.0, 60.0, 80.0]);
    }

    #[test]
    fn trace_errors() {
        assert!(matches!(parse_signal_trace("", 2.0), Err(SignalError::Empty)));
        assert!(matches!(
            parse_signal_trace("0,1\n2,1\n2,3\n", 2.0),
            Err(SignalError::NonMonotone { row: 3 })
        ));
        assert!(matches!(
            parse_signal_trace("0,1\n2,x\n", 2.0),
            Err(SignalError::Parse { row: 2, .. })
        ));
    }
}
