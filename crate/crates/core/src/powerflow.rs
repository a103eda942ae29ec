//! Polar Newton-Raphson AC power flow with slack, PQ and PV buses.
//!
//! PV buses hold their voltage magnitude with unlimited reactive support; the
//! reactive power they produce is reported in
//! [`PowerFlowSolution::q_injected_pv`].

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BusKind, NetworkModel};

/// Net injections at buses 1..=N (index `i` is bus `i + 1`), per-unit.
///
/// At PV buses the `q` entry is the uncontrolled part of the reactive
/// injection; the voltage controller adds whatever it needs on top.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectionSet {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

impl InjectionSet {
    pub fn zeros(n: usize) -> Self {
        Self {
            p: vec![0.0; n],
            q: vec![0.0; n],
        }
    }

    /// Injections with every load at its nominal value and every DER at its
    /// nominal output.
    pub fn nominal(model: &NetworkModel) -> Self {
        let g = model.nominal_generation();
        Self {
            p: model
                .nominal_load_p()
                .iter()
                .zip(&g)
                .map(|(d, g)| g - d)
                .collect(),
            q: model.nominal_load_q().iter().map(|d| -d).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFlowSolution {
    /// Voltage angles of buses 0..=N (rad).
    pub theta: Vec<f64>,
    /// Voltage magnitudes of buses 0..=N (p.u.).
    pub v: Vec<f64>,
    /// Active power drawn from the bulk grid at the feeder head.
    pub p_t: f64,
    pub q_t: f64,
    /// Total losses, `p_t + Σ p`.
    pub losses: f64,
    /// Reactive support produced at each non-slack bus; zero except at PV buses.
    pub q_injected_pv: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest absolute power mismatch at the last iterate (p.u.).
    pub max_mismatch: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub enum StartPoint<'a> {
    #[default]
    Flat,
    Warm(&'a PowerFlowSolution),
}

#[derive(Clone, Copy, Debug)]
pub struct SolveOptions<'a> {
    /// Convergence threshold on the largest power mismatch (p.u.).
    pub tol: f64,
    pub max_iter: usize,
    pub start: StartPoint<'a>,
}

impl Default for SolveOptions<'_> {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
            start: StartPoint::Flat,
        }
    }
}

impl<'a> SolveOptions<'a> {
    pub fn warm(start: &'a PowerFlowSolution) -> Self {
        Self {
            start: StartPoint::Warm(start),
            ..Self::default()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("injection vectors have length {got}, the network has {expected} non-slack buses")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("warm start has {got} buses, the network has {expected}")]
    BadWarmStart { expected: usize, got: usize },
    #[error("non-finite injection at bus {0}")]
    NonFinite(usize),
    #[error("tolerance must be positive")]
    BadTolerance,
    #[error("singular Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
}

/// A feeder prepared for repeated solves: the bus admittance matrix and the
/// bus classification are computed once.
#[derive(Clone, Debug)]
pub struct Plant {
    g: DMatrix<f64>,
    b: DMatrix<f64>,
    kinds: Vec<BusKind>,
    v_set: Vec<f64>,
    /// Non-slack buses in state order, then the subset carrying a |V| unknown.
    angle_buses: Vec<usize>,
    mag_buses: Vec<usize>,
}

impl Plant {
    pub fn new(model: &NetworkModel) -> Self {
        let nb = model.buses.len();
        let mut y = DMatrix::<Complex64>::zeros(nb, nb);
        for br in &model.branches {
            let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
            let (f, t) = (br.from.0, br.to.0);
            y[(f, f)] += ys;
            y[(t, t)] += ys;
            y[(f, t)] -= ys;
            y[(t, f)] -= ys;
        }
        let kinds: Vec<BusKind> = model.buses.iter().map(|b| b.kind).collect();
        let v_set = model
            .buses
            .iter()
            .map(|b| match b.kind {
                BusKind::Pq => 1.0,
                _ => b.v_setpoint.unwrap_or(1.0),
            })
            .collect();
        let angle_buses: Vec<usize> = (1..nb).collect();
        let mag_buses: Vec<usize> = (1..nb).filter(|&i| kinds[i] == BusKind::Pq).collect();
        Self {
            g: y.map(|c| c.re),
            b: y.map(|c| c.im),
            kinds,
            v_set,
            angle_buses,
            mag_buses,
        }
    }

    /// Number of non-slack buses.
    pub fn n(&self) -> usize {
        self.kinds.len() - 1
    }

    fn calc_injections(&self, theta: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nb = theta.len();
        let mut p = vec![0.0; nb];
        let mut q = vec![0.0; nb];
        for i in 0..nb {
            let (mut pi, mut qi) = (0.0, 0.0);
            for j in 0..nb {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                if gij == 0.0 && bij == 0.0 {
                    continue;
                }
                let (s, c) = (theta[i] - theta[j]).sin_cos();
                pi += v[j] * (gij * c + bij * s);
                qi += v[j] * (gij * s - bij * c);
            }
            p[i] = v[i] * pi;
            q[i] = v[i] * qi;
        }
        (p, q)
    }

    fn jacobian(&self, theta: &[f64], v: &[f64], p: &[f64], q: &[f64]) -> DMatrix<f64> {
        let na = self.angle_buses.len();
        let nm = self.mag_buses.len();
        let mut jac = DMatrix::zeros(na + nm, na + nm);
        // Position of each PQ bus's Q row and |V| column.
        let mut mag_idx = vec![None; theta.len()];
        for (k, &bus) in self.mag_buses.iter().enumerate() {
            mag_idx[bus] = Some(na + k);
        }

        for (ri, &i) in self.angle_buses.iter().enumerate() {
            for (cj, &j) in self.angle_buses.iter().enumerate() {
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                let (dp_dth, dq_dth);
                if i == j {
                    dp_dth = -q[i] - bij * v[i] * v[i];
                    dq_dth = p[i] - gij * v[i] * v[i];
                } else {
                    if gij == 0.0 && bij == 0.0 {
                        continue;
                    }
                    let (s, c) = (theta[i] - theta[j]).sin_cos();
                    dp_dth = v[i] * v[j] * (gij * s - bij * c);
                    dq_dth = -v[i] * v[j] * (gij * c + bij * s);
                }
                jac[(ri, cj)] = dp_dth;
                if let Some(r) = mag_idx[i] {
                    jac[(r, cj)] = dq_dth;
                }
            }
            for &j in &self.mag_buses {
                let cj = mag_idx[j].expect("PQ bus has a |V| column");
                let (gij, bij) = (self.g[(i, j)], self.b[(i, j)]);
                let (dp_dv, dq_dv);
                if i == j {
                    dp_dv = p[i] / v[i] + gij * v[i];
                    dq_dv = q[i] / v[i] - bij * v[i];
                } else {
                    if gij == 0.0 && bij == 0.0 {
                        continue;
                    }
                    let (s, c) = (theta[i] - theta[j]).sin_cos();
                    dp_dv = v[i] * (gij * c + bij * s);
                    dq_dv = v[i] * (gij * s - bij * c);
                }
                jac[(ri, cj)] = dp_dv;
                if let Some(r) = mag_idx[i] {
                    jac[(r, cj)] = dq_dv;
                }
            }
        }
        jac
    }

    /// Newton-Raphson solve. Non-convergence is reported through
    /// `converged = false` with the last iterate; a singular Jacobian is an
    /// error.
    pub fn solve(
        &self,
        inj: &InjectionSet,
        opts: &SolveOptions<'_>,
    ) -> Result<PowerFlowSolution, PowerFlowError> {
        let n = self.n();
        let nb = n + 1;
        if inj.p.len() != n || inj.q.len() != n {
            return Err(PowerFlowError::DimensionMismatch {
                expected: n,
                got: inj.p.len().max(inj.q.len()),
            });
        }
        if let Some(i) = (0..n).find(|&i| !inj.p[i].is_finite() || !inj.q[i].is_finite()) {
            return Err(PowerFlowError::NonFinite(i + 1));
        }
        if !(opts.tol > 0.0) {
            return Err(PowerFlowError::BadTolerance);
        }

        let (mut theta, mut v) = match opts.start {
            StartPoint::Flat => (vec![0.0; nb], vec![1.0; nb]),
            StartPoint::Warm(s) => {
                if s.theta.len() != nb || s.v.len() != nb {
                    return Err(PowerFlowError::BadWarmStart {
                        expected: nb,
                        got: s.theta.len(),
                    });
                }
                (s.theta.clone(), s.v.clone())
            }
        };
        theta[0] = 0.0;
        for i in 0..nb {
            if self.kinds[i] != BusKind::Pq {
                v[i] = self.v_set[i];
            }
        }

        let p_spec = |i: usize| inj.p[i - 1];
        let q_spec = |i: usize| inj.q[i - 1];
        let na = self.angle_buses.len();
        let mut iterations = 0;
        let mut converged = false;
        let mut max_mismatch;

        loop {
            let (p, q) = self.calc_injections(&theta, &v);
            let mut f = DVector::zeros(na + self.mag_buses.len());
            for (k, &i) in self.angle_buses.iter().enumerate() {
                f[k] = p_spec(i) - p[i];
            }
            for (k, &i) in self.mag_buses.iter().enumerate() {
                f[na + k] = q_spec(i) - q[i];
            }
            max_mismatch = f.amax();
            if max_mismatch <= opts.tol {
                converged = true;
                break;
            }
            if iterations >= opts.max_iter || !max_mismatch.is_finite() {
                break;
            }
            let jac = self.jacobian(&theta, &v, &p, &q);
            let dx = jac
                .lu()
                .solve(&f)
                .filter(|dx| dx.iter().all(|x| x.is_finite()))
                .ok_or(PowerFlowError::SingularJacobian {
                    iteration: iterations + 1,
                })?;
            iterations += 1;
            for (k, &i) in self.angle_buses.iter().enumerate() {
                theta[i] += dx[k];
            }
            for (k, &i) in self.mag_buses.iter().enumerate() {
                v[i] += dx[na + k];
            }
        }

        let (p, q) = self.calc_injections(&theta, &v);
        let p_t = p[0];
        let q_t = q[0];
        let losses = p_t + inj.p.iter().sum::<f64>();
        let q_injected_pv = (1..nb)
            .map(|i| {
                if self.kinds[i] == BusKind::Pv {
                    q[i] - q_spec(i)
                } else {
                    0.0
                }
            })
            .collect();
        if !converged {
            log::warn!("power flow did not converge: mismatch {max_mismatch:e} after {iterations} iterations");
        }
        Ok(PowerFlowSolution {
            theta,
            v,
            p_t,
            q_t,
            losses,
            q_injected_pv,
            iterations,
            converged,
            max_mismatch,
        })
    }
}

/// Solves the AC power flow of `model` under the net injections `inj`.
pub fn solve_power_flow(
    model: &NetworkModel,
    inj: &InjectionSet,
    opts: &SolveOptions<'_>,
) -> Result<PowerFlowSolution, PowerFlowError> {
    Plant::new(model).solve(inj, opts)
}

/// Feeder-head active power and total losses.
pub fn feeder_head(
    model: &NetworkModel,
    inj: &InjectionSet,
    opts: &SolveOptions<'_>,
) -> Result<(f64, f64), PowerFlowError> {
    let s = solve_power_flow(model, inj, opts)?;
    Ok((s.p_t, s.losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::parse_network;

    fn two_bus() -> NetworkModel {
        // 10 kV, 1 MVA: Zbase = 100 ohm, so 1+j1 ohm = 0.01+j0.01 p.u.
        parse_network(
            "Sbase_kVA = 1000\nVbase_kV = 10\n[buses]\n0,slack,0,0,1.0\n1,pq,0,0,\n\
             [branches]\n0,1,1,1\n[ders]\n",
        )
        .unwrap()
    }

    #[test]
    fn zero_injection_is_flat() {
        let m = NetworkModel::baran_wu_33();
        let s = solve_power_flow(&m, &InjectionSet::zeros(m.n()), &SolveOptions::default())
            .unwrap();
        assert!(s.converged);
        assert!(s.v.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(s.p_t.abs() < 1e-12 && s.losses.abs() < 1e-12);
        assert_eq!(feeder_head(&m, &InjectionSet::zeros(m.n()), &SolveOptions::default()).unwrap(), (s.p_t, s.losses));
    }

    #[test]
    fn dimension_mismatch() {
        let m = two_bus();
        let err = solve_power_flow(&m, &InjectionSet::zeros(3), &SolveOptions::default());
        assert!(matches!(err, Err(PowerFlowError::DimensionMismatch { .. })));
    }

    #[test]
    fn pv_bus_holds_setpoint_and_reports_support() {
        let m = NetworkModel::baran_wu_33();
        let inj = InjectionSet::nominal(&m);
        let s = solve_power_flow(&m, &inj, &SolveOptions::default()).unwrap();
        assert!(s.converged);
        assert!((s.v[11] - 1.0).abs() <= 1e-10);
        assert!(s.q_injected_pv[10] > 0.0);
        assert!(s.q_injected_pv.iter().enumerate().all(|(i, q)| i == 10 || *q == 0.0));
        let sum_p: f64 = inj.p.iter().sum();
        assert!((s.losses - (s.p_t + sum_p)).abs() < 1e-9);
    }

    #[test]
    fn non_convergence_is_flagged() {
        let m = two_bus();
        let inj = InjectionSet {
            p: vec![-0.1],
            q: vec![-0.05],
        };
        let s = solve_power_flow(
            &m,
            &inj,
            &SolveOptions {
                max_iter: 1,
                tol: 1e-14,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        assert!(!s.converged);
        assert_eq!(s.iterations, 1);
    }

    #[test]
    fn warm_start_converges_faster() {
        let m = NetworkModel::baran_wu_33();
        let inj = InjectionSet::nominal(&m);
        let flat = solve_power_flow(&m, &inj, &SolveOptions::default()).unwrap();
        let warm = solve_power_flow(&m, &inj, &SolveOptions::warm(&flat)).unwrap();
        assert!(warm.iterations <= 1);
        for (a, b) in flat.v.iter().zip(&warm.v) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}
