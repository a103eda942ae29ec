//! Regulation performance score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("series have lengths {0} and {1}")]
pub struct LengthMismatch(pub usize, pub usize);

/// Running score `S[k] = 1 − Σ_{l≤k}|r_m[l] − r[l]| / Σ_{l≤k}|r[l]|`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub values: Vec<f64>,
    /// `false` where nothing had been requested yet and the value is 1 by
    /// convention.
    pub defined: Vec<bool>,
}

impl ScoreSeries {
    pub fn all_defined(&self) -> bool {
        self.defined.iter().all(|d| *d)
    }

    pub fn mean(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

pub fn performance_score(r: &[f64], r_m: &[f64]) -> Result<ScoreSeries, LengthMismatch> {
    if r.len() != r_m.len() {
        return Err(LengthMismatch(r.len(), r_m.len()));
    }
    let mut err = 0.0;
    let mut req = 0.0;
    let mut values = Vec::with_capacity(r.len());
    let mut defined = Vec::with_capacity(r.len());
    for (req_k, got_k) in r.iter().zip(r_m) {
        err += (got_k - req_k).abs();
        req += req_k.abs();
        if req > 0.0 {
            values.push(1.0 - err / req);
            defined.push(true);
        } else {
            values.push(1.0);
            defined.push(false);
        }
    }
    Ok(ScoreSeries { values, defined })
}
