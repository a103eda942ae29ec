//! Measurement-based estimation of total loss factors.
//!
//! The feeder-head response to a change in net injections is modelled as
//! `ΔPᵗ ≈ (Λ − 1)ᵀ ΔP`. A weighted least-squares solve over a window of
//! measurement pairs seeds the estimate; each new pair then updates it with a
//! rank-one recursive step that discounts old data by the forgetting factor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_GAMMA: f64 = 0.97;
pub const DEFAULT_RIDGE: f64 = 1e-8;
pub const DEFAULT_EXCITATION_FLOOR: f64 = 1e-6;
/// Largest eigenvalue ratio of the weighted information matrix accepted by
/// [`batch_wls_init`].
pub const MAX_CONDITION: f64 = 1e13;

/// One observation: the change in net injections and the resulting change
/// in feeder-head power, both per-unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub delta_p: Vec<f64>,
    pub delta_pt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    pub lambda_hat: DVector<f64>,
    /// Inverse of the weighted information matrix.
    pub r_matrix: DMatrix<f64>,
    pub gamma: f64,
    pub updates_seen: usize,
    pub excitation_floor: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("empty measurement history")]
    EmptyHistory,
    #[error("forgetting factor must lie in (0, 1], got {0}")]
    BadGamma(f64),
    #[error("ridge must be non-negative, got {0}")]
    BadRidge(f64),
    #[error("measurement {index} has {got} entries, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("measurement {0} is not finite")]
    NonFinite(usize),
    #[error("weighted information matrix is singular (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
}

fn check_gamma(gamma: f64) -> Result<(), EstimatorError> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(EstimatorError::BadGamma(gamma))
    }
}

/// Weighted least-squares estimate over `history` (oldest first).
///
/// The newest pair carries weight 1 and the pair `j` steps older carries
/// `gamma^j`, the same discounting the recursive update applies. `ridge` is
/// added to the diagonal of the information matrix before inversion.
pub fn batch_wls_init(
    history: &[MeasurementPair],
    gamma: f64,
    ridge: f64,
) -> Result<EstimatorState, EstimatorError> {
    check_gamma(gamma)?;
    if !(ridge >= 0.0) {
        return Err(EstimatorError::BadRidge(ridge));
    }
    let first = history.first().ok_or(EstimatorError::EmptyHistory)?;
    let n = first.delta_p.len();
    let k = history.len();

    let mut info = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    for (idx, m) in history.iter().enumerate() {
        if m.delta_p.len() != n {
            return Err(EstimatorError::DimensionMismatch {
                index: idx,
                expected: n,
                got: m.delta_p.len(),
            });
        }
        if !m.delta_pt.is_finite() || m.delta_p.iter().any(|x| !x.is_finite()) {
            return Err(EstimatorError::NonFinite(idx));
        }
        let w = gamma.powi((k - 1 - idx) as i32);
        let x = DVector::from_column_slice(&m.delta_p);
        info.ger(w, &x, &x, 1.0);
        rhs.axpy(w * m.delta_pt, &x, 1.0);
    }
    for i in 0..n {
        info[(i, i)] += ridge;
    }

    let eig = info.symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 0.0) || max / min > MAX_CONDITION {
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        return Err(EstimatorError::Singular { condition });
    }
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let r_matrix =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let r_matrix = symmetrize(r_matrix);
    let lambda_hat = DVector::from_element(n, 1.0) + &r_matrix * rhs;

    Ok(EstimatorState {
        lambda_hat,
        r_matrix,
        gamma,
        updates_seen: 0,
        excitation_floor: DEFAULT_EXCITATION_FLOOR,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

impl EstimatorState {
    pub fn n(&self) -> usize {
        self.lambda_hat.len()
    }

    pub fn lambda(&self) -> &[f64] {
        self.lambda_hat.as_slice()
    }

    /// Folds one measurement into the estimate. Returns `false` (and leaves
    /// the state untouched) when the injection change is below the
    /// excitation floor or not usable.
    pub fn update(&mut self, m: &MeasurementPair) -> bool {
        if m.delta_p.len() != self.n()
            || !m.delta_pt.is_finite()
            || m.delta_p.iter().any(|x| !x.is_finite())
        {
            log::warn!("dropping malformed measurement");
            return false;
        }
        let excitation = m.delta_p.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if excitation < self.excitation_floor {
            return false;
        }
        let x = DVector::from_column_slice(&m.delta_p);
        let rx = &self.r_matrix * &x;
        let denom = self.gamma + x.dot(&rx);
        let mut r_new = &self.r_matrix - (&rx * rx.transpose()) / denom;
        r_new /= self.gamma;
        let r_new = symmetrize(r_new);

        let ones = DVector::from_element(self.n(), 1.0);
        let innovation = m.delta_pt - x.dot(&(&self.lambda_hat - ones));
        self.lambda_hat += (&r_new * &x) * innovation;
        self.r_matrix = r_new;
        self.updates_seen += 1;
        true
    }
}

/// Value-returning form of [`EstimatorState::update`].
pub fn rwls_update(state: &EstimatorState, m: &MeasurementPair) -> EstimatorState {
    let mut next = state.clone();
    next.update(m);
    next
}

/// Runs the estimator over a recorded stream: a batch solve over the first
/// `warmup` pairs, then one recursive update per remaining pair. Returns the
/// estimate after the warm-up and after every later pair, each with a flag
/// telling whether that pair changed the state.
pub fn estimate_stream(
    pairs: &[MeasurementPair],
    warmup: usize,
    gamma: f64,
    ridge: f64,
) -> Result<Vec<(bool, Vec<f64>)>, EstimatorError> {
    if warmup == 0 || warmup > pairs.len() {
        return Err(EstimatorError::EmptyHistory);
    }
    let mut state = batch_wls_init(&pairs[..warmup], gamma, ridge)?;
    let mut out = Vec::with_capacity(pairs.len() - warmup + 1);
    out.push((true, state.lambda().to_vec()));
    for m in &pairs[warmup..] {
        let used = state.update(m);
        out.push((used, state.lambda().to_vec()));
    }
    Ok(out)
}

/// Root-mean-square difference between two loss-factor vectors.
pub fn lf_rmse(lambda_hat: &[f64], lambda_true: &[f64]) -> Result<f64, EstimatorError> {
    if lambda_hat.len() != lambda_true.len() {
        return Err(EstimatorError::LengthMismatch(
            lambda_hat.len(),
            lambda_true.len(),
        ));
    }
    if lambda_hat.is_empty() {
        return Ok(0.0);
    }
    let ss: f64 = lambda_hat
        .iter()
        .zip(lambda_true)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / lambda_hat.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn synthetic(lambda: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<MeasurementPair> {
        (0..k)
            .map(|_| {
                let dp: Vec<f64> = lambda.iter().map(|_| rng.random_range(-0.01..0.01)).collect();
                let dpt = dp.iter().zip(lambda).map(|(x, l)| x * (l - 1.0)).sum();
                MeasurementPair {
                    delta_p: dp,
                    delta_pt: dpt,
                }
            })
            .collect()
    }

    #[test]
    fn exact_recovery_from_noiseless_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let truth: Vec<f64> = (0..8).map(|_| rng.random_range(-0.3..0.1)).collect();
        let hist = synthetic(&truth, truth.len() + 20, &mut rng);
        let st = batch_wls_init(&hist, 0.97, 0.0).unwrap();
        for (a, b) in st.lambda().iter().zip(&truth) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn single_measurement_with_ridge_matches_dense_solve() {
        let hist = vec![MeasurementPair {
            delta_p: vec![0.02, -0.01, 0.005],
            delta_pt: -0.03,
        }];
        let ridge = 1e-3;
        let st = batch_wls_init(&hist, 0.9, ridge).unwrap();
        // (x xᵀ + ridge I)⁻¹ x b, computed by LU.
        let x = DVector::from_vec(hist[0].delta_p.clone());
        let m = &x * x.transpose() + DMatrix::identity(3, 3) * ridge;
        let sol = m.lu().solve(&(&x * hist[0].delta_pt)).unwrap();
        for i in 0..3 {
            assert!((st.lambda_hat[i] - 1.0 - sol[i]).abs() < 1e-12);
        }
        // The regularized solution lies along x.
        let along = sol.dot(&x) / x.norm_squared();
        assert!((&x * along - &sol).norm() < 1e-12);
    }

    #[test]
    fn zero_excitation_is_singular() {
        let hist = vec![
            MeasurementPair {
                delta_p: vec![0.0; 4],
                delta_pt: 0.0
            };
            10
        ];
        assert!(matches!(
            batch_wls_init(&hist, 0.97, 0.0),
            Err(EstimatorError::Singular { .. })
        ));
    }

    #[test]
    fn zero_change_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hist = synthetic(&[0.1, 0.2, 0.3], 10, &mut rng);
        let st = batch_wls_init(&hist, 0.97, 0.0).unwrap();
        let next = rwls_update(
            &st,
            &MeasurementPair {
                delta_p: vec![0.0; 3],
                delta_pt: 0.5,
            },
        );
        assert_eq!(next, st);
    }

    #[test]
    fn unit_loss_factors_from_zero_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hist = synthetic(&[1.0; 5], 30, &mut rng);
        let st = batch_wls_init(&hist, 0.95, 0.0).unwrap();
        assert!(st.lambda().iter().all(|l| *l == 1.0));
    }

    #[test]
    fn bad_arguments() {
        assert_eq!(batch_wls_init(&[], 0.9, 0.0), Err(EstimatorError::EmptyHistory));
        let h = vec![MeasurementPair {
            delta_p: vec![1.0],
            delta_pt: 0.0,
        }];
        assert_eq!(batch_wls_init(&h, 0.0, 0.0), Err(EstimatorError::BadGamma(0.0)));
        assert_eq!(batch_wls_init(&h, 1.5, 0.0), Err(EstimatorError::BadGamma(1.5)));
        assert_eq!(batch_wls_init(&h, 1.0, -1.0), Err(EstimatorError::BadRidge(-1.0)));
    }

    #[test]
    fn rmse_values() {
        assert_eq!(lf_rmse(&[0.1, 0.2], &[0.1, 0.2]).unwrap(), 0.0);
        let r = lf_rmse(&[0.11, 0.21, 0.31], &[0.1, 0.2, 0.3]).unwrap();
        assert!((r - 0.01).abs() < 1e-12);
        assert_eq!(lf_rmse(&[0.0], &[0.0, 1.0]), Err(EstimatorError::LengthMismatch(1, 2)));
    }
}
