//! Closed-loop regulation simulation.
//!
//! Each interval: realise noisy loads, read the regulation request, dispatch
//! the DERs with the configured controller, solve the plant, score the
//! feeder-head response against the request and feed the new measurement
//! pair to the loss-factor estimator.
//!
//! All randomness comes from ChaCha8 seeded with [`ScenarioConfig::seed`]:
//! stream [`LOAD_STREAM`] for load noise, [`signal::SIGNAL_STREAM`] for the
//! synthetic signal and [`SENSOR_STREAM`] for optional measurement noise.

pub mod output;
pub mod score;
pub mod signal;

use std::path::PathBuf;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{
    batch_wls_init, lf_rmse, EstimatorError, EstimatorState, MeasurementPair, DEFAULT_GAMMA,
    DEFAULT_RIDGE,
};
use crate::lossfactors::{active_lfs, actual_total_lfs, LossFactorError, DEFAULT_DELTA};
use crate::network::NetworkModel;
use crate::odcp::{
    capacity_participation, pf_allocate, solve_odcp, OdcpError, OdcpInput, OdcpStatus,
    DEFAULT_RHO, DEFAULT_TOL,
};
use crate::powerflow::{InjectionSet, Plant, PowerFlowError, PowerFlowSolution, SolveOptions};

pub use score::{performance_score, ScoreSeries};
pub use signal::{load_signal_trace, synthetic_signal, SignalError, SyntheticParams};

pub const LOAD_STREAM: u64 = 1;
pub const SENSOR_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Controller {
    /// Loss-aware dispatch with recursively estimated loss factors.
    LfEstimated,
    /// Loss-aware dispatch with perturbation loss factors at the current
    /// nominal point.
    LfActual,
    /// Lossless participation-factor allocation.
    PfBaseline,
    /// Loss-aware dispatch with active loss factors frozen at t = 0.
    ModelActiveLf,
}

impl Controller {
    pub const ALL: [Controller; 4] = [
        Controller::LfEstimated,
        Controller::LfActual,
        Controller::PfBaseline,
        Controller::ModelActiveLf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Controller::LfEstimated => "lf_estimated",
            Controller::LfActual => "lf_actual",
            Controller::PfBaseline => "pf_baseline",
            Controller::ModelActiveLf => "model_active_lf",
        }
    }
}

impl FromStr for Controller {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Controller::ALL
            .into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| format!("unknown controller `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalSource {
    /// CSV of `(t_s, r_kW)` rows.
    TraceFile(PathBuf),
    Synthetic(SyntheticParams),
}

/// Linear scaling of every nominal load between `start_s` and `end_s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub start_s: f64,
    pub end_s: f64,
    pub fraction: f64,
}

impl Ramp {
    pub fn scale_at(&self, t: f64) -> f64 {
        if t <= self.start_s {
            1.0
        } else if t >= self.end_s {
            1.0 + self.fraction
        } else {
            1.0 + self.fraction * (t - self.start_s) / (self.end_s - self.start_s)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Dispatch interval (s).
    pub dt: f64,
    /// Scored horizon (s), after the warm-up.
    pub duration: f64,
    /// Relative standard deviation of the active-load noise.
    pub sigma: f64,
    pub gamma: f64,
    pub rho: f64,
    /// Noise-only intervals used to seed the estimator.
    pub warmup_steps: usize,
    pub seed: u64,
    pub signal: SignalSource,
    pub ramp: Option<Ramp>,
    pub controller: Controller,
    /// Diagonal regularisation of the warm-up least-squares solve.
    pub ridge: f64,
    /// Perturbation step of the loss-factor oracle (p.u.).
    pub lf_delta: f64,
    /// Standard deviation of additive feeder-head measurement noise (p.u.).
    pub sensor_noise: f64,
    /// Apply the load noise to reactive loads as well (constant power factor).
    pub reactive_noise: bool,
    /// Feeder file; the bundled 33-bus feeder when absent.
    pub feeder: Option<PathBuf>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 2.0,
            duration: 300.0,
            sigma: 0.01,
            gamma: DEFAULT_GAMMA,
            rho: DEFAULT_RHO,
            warmup_steps: 100,
            seed: 0,
            signal: SignalSource::Synthetic(SyntheticParams::default()),
            ramp: None,
            controller: Controller::LfEstimated,
            ridge: DEFAULT_RIDGE,
            lf_delta: DEFAULT_DELTA,
            sensor_noise: 0.0,
            reactive_noise: false,
            feeder: None,
        }
    }
}

impl ScenarioConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be non-negative, got {}", self.duration));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be non-negative, got {}", self.rho));
        }
        if !(self.sensor_noise >= 0.0 && self.sensor_noise.is_finite()) {
            return bad(format!("sensor_noise must be non-negative, got {}", self.sensor_noise));
        }
        if !(self.lf_delta > 0.0) {
            return bad(format!("lf_delta must be positive, got {}", self.lf_delta));
        }
        if self.controller == Controller::LfEstimated && self.warmup_steps < 2 {
            return bad("the estimator needs at least 2 warm-up steps".into());
        }
        if let Some(r) = &self.ramp {
            if !(r.end_s > r.start_s && r.fraction.is_finite()) {
                return bad("ramp needs end_s > start_s and a finite fraction".into());
            }
        }
        Ok(())
    }
}

/// Telemetry of one scored interval. Powers per-unit; `z` lists the DER
/// dispatch in fleet order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub r: f64,
    /// Regulation delivered according to the plant, `P^{t0} − P^t`.
    pub r_m: f64,
    pub z: Vec<f64>,
    pub p_t: f64,
    pub losses: f64,
    /// Loss factors the controller holds after this interval.
    pub lambda_hat: Vec<f64>,
    /// Perturbation loss factors at this interval's nominal point.
    pub lambda_true: Vec<f64>,
    pub rmse: f64,
    pub score_so_far: f64,
    pub score_defined: bool,
    pub odcp_status: OdcpStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub controller: Controller,
    pub steps: usize,
    pub avg_score: f64,
    pub final_score: f64,
    /// Set when some score values are 1 only because nothing had been
    /// requested yet.
    pub score_flagged: bool,
    pub avg_rmse: f64,
    pub max_rmse: f64,
    /// RMSE of the controller's loss factors at t = 0.
    pub initial_rmse: f64,
    /// RMSE of the active loss factors taken as total loss factors at t = 0.
    pub model_initial_rmse: f64,
    pub clamped_steps: usize,
    pub score_series: Vec<f64>,
    pub rmse_series: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub metrics: RunMetrics,
    pub steps: Vec<StepRecord>,
    /// Buses hosting the DERs, in the order of `StepRecord::z`.
    pub der_buses: Vec<usize>,
    pub s_base_kva: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("signal provides {available} samples, the run needs {needed}")]
    TraceExhausted { needed: usize, available: usize },
    #[error("power flow failed at {phase} step {step}")]
    PowerFlow {
        phase: &'static str,
        step: usize,
        #[source]
        source: PowerFlowError,
    },
    #[error("power flow did not converge at {phase} step {step}")]
    NotConverged { phase: &'static str, step: usize },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    LossFactors(#[from] LossFactorError),
    #[error("dispatch failed at step {step}")]
    Odcp {
        step: usize,
        #[source]
        source: OdcpError,
    },
}

/// Regulation request sequence for `cfg`, per-unit.
pub fn regulation_signal(model: &NetworkModel, cfg: &ScenarioConfig) -> Result<Vec<f64>, SimError> {
    let n = cfg.steps();
    let r = match &cfg.signal {
        SignalSource::TraceFile(path) => load_signal_trace(path, cfg.dt)?
            .into_iter()
            .map(|kw| kw / model.s_base_kva)
            .collect::<Vec<_>>(),
        SignalSource::Synthetic(p) => {
            let clip = p.clip.unwrap_or_else(|| model.fleet_regulation_capacity());
            synthetic_signal(p.std, p.corr_time, clip, cfg.dt, cfg.seed, n)?
        }
    };
    if r.len() < n {
        return Err(SimError::TraceExhausted {
            needed: n,
            available: r.len(),
        });
    }
    Ok(r[..n].to_vec())
}

/// Operating-point data that only changes when the nominal loads do.
struct NominalPoint {
    scale: f64,
    p_t0: f64,
    lambda: Vec<f64>,
}

struct Loop<'a> {
    model: &'a NetworkModel,
    cfg: &'a ScenarioConfig,
    plant: Plant,
    load_rng: ChaCha8Rng,
    sensor_rng: ChaCha8Rng,
    pd_nom: Vec<f64>,
    qd_nom: Vec<f64>,
    pg0: Vec<f64>,
    last: Option<PowerFlowSolution>,
}

impl Loop<'_> {
    fn loads(&mut self, scale: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.pd_nom.len();
        let mut p = Vec::with_capacity(n);
        let mut q = Vec::with_capacity(n);
        for i in 0..n {
            let nu: f64 = self.cfg.sigma * Distribution::<f64>::sample(&StandardNormal, &mut self.load_rng);
            p.push(self.pd_nom[i] * scale * (1.0 + nu));
            let qf = if self.cfg.reactive_noise { 1.0 + nu } else { 1.0 };
            q.push(self.qd_nom[i] * scale * qf);
        }
        (p, q)
    }

    fn nominal_injection(&self, scale: f64) -> InjectionSet {
        InjectionSet {
            p: (0..self.pd_nom.len())
                .map(|i| self.pg0[i] - self.pd_nom[i] * scale)
                .collect(),
            q: self.qd_nom.iter().map(|q| -q * scale).collect(),
        }
    }

    fn solve(
        &mut self,
        inj: &InjectionSet,
        phase: &'static str,
        step: usize,
    ) -> Result<PowerFlowSolution, SimError> {
        let opts = match &self.last {
            Some(s) => SolveOptions::warm(s),
            None => SolveOptions::default(),
        };
        let s = self
            .plant
            .solve(inj, &opts)
            .map_err(|source| SimError::PowerFlow {
                phase,
                step,
                source,
            })?;
        if !s.converged {
            return Err(SimError::NotConverged { phase, step });
        }
        self.last = Some(s.clone());
        Ok(s)
    }

    fn measure(&mut self, p_t: f64) -> f64 {
        if self.cfg.sensor_noise > 0.0 {
            let e: f64 = StandardNormal.sample(&mut self.sensor_rng);
            p_t + self.cfg.sensor_noise * e
        } else {
            p_t
        }
    }

    fn nominal_point(&self, scale: f64) -> Result<NominalPoint, SimError> {
        let inj = self.nominal_injection(scale);
        let s = self
            .plant
            .solve(&inj, &SolveOptions::default())
            .map_err(|source| SimError::PowerFlow {
                phase: "nominal",
                step: 0,
                source,
            })?;
        if !s.converged {
            return Err(SimError::NotConverged {
                phase: "nominal",
                step: 0,
            });
        }
        let lambda = actual_total_lfs(self.model, &inj, self.cfg.lf_delta)?;
        Ok(NominalPoint {
            scale,
            p_t0: s.p_t,
            lambda,
        })
    }
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Runs the warm-up and `cfg.steps()` scored intervals on `model`.
pub fn run_closed_loop(model: &NetworkModel, cfg: &ScenarioConfig) -> Result<RunResult, SimError> {
    cfg.validate()?;
    let violations = crate::network::validate(model);
    if !violations.is_empty() {
        return Err(SimError::InvalidConfig(format!(
            "feeder: {}",
            violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; ")
        )));
    }
    let n = model.n();
    let n_steps = cfg.steps();
    let signal = regulation_signal(model, cfg)?;

    let mut load_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    load_rng.set_stream(LOAD_STREAM);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    sensor_rng.set_stream(SENSOR_STREAM);
    let mut lp = Loop {
        model,
        cfg,
        plant: Plant::new(model),
        load_rng,
        sensor_rng,
        pd_nom: model.nominal_load_p(),
        qd_nom: model.nominal_load_q(),
        pg0: model.nominal_generation(),
        last: None,
    };
    let (lower, upper) = model.regulation_bounds();
    let der_buses: Vec<usize> = model.ders.iter().map(|d| d.bus.0).collect();
    let pf = capacity_participation(&upper);

    // Warm-up: loads fluctuate, DERs hold their nominal output.
    let mut history = Vec::with_capacity(cfg.warmup_steps);
    let mut prev_p: Option<Vec<f64>> = None;
    let mut prev_pt_meas = 0.0;
    let mut prev_pd = lp.pd_nom.clone();
    for j in 0..cfg.warmup_steps {
        let (pd, qd) = lp.loads(1.0);
        let inj = InjectionSet {
            p: sub(&lp.pg0, &pd),
            q: qd.iter().map(|q| -q).collect(),
        };
        let s = lp.solve(&inj, "warm-up", j)?;
        let pt_meas = lp.measure(s.p_t);
        if let Some(pp) = &prev_p {
            history.push(MeasurementPair {
                delta_p: sub(&inj.p, pp),
                delta_pt: pt_meas - prev_pt_meas,
            });
        }
        prev_p = Some(inj.p);
        prev_pt_meas = pt_meas;
        prev_pd = pd;
    }
    if prev_p.is_none() {
        // No warm-up: start from the nominal operating point.
        let inj = lp.nominal_injection(1.0);
        let s = lp.solve(&inj, "warm-up", 0)?;
        prev_pt_meas = lp.measure(s.p_t);
        prev_p = Some(inj.p);
    }
    let mut prev_p = prev_p.expect("set above");

    let mut nominal = lp.nominal_point(1.0)?;
    let model_active = active_lfs(model, &lp.nominal_injection(1.0), cfg.lf_delta)?;
    let model_initial_rmse = lf_rmse(&model_active, &nominal.lambda)?;

    let mut estimator: Option<EstimatorState> = match cfg.controller {
        Controller::LfEstimated => Some(batch_wls_init(&history, cfg.gamma, cfg.ridge)?),
        _ => None,
    };
    let zeros = vec![0.0; n];
    let held = |est: &Option<EstimatorState>, nominal: &NominalPoint| -> Vec<f64> {
        match cfg.controller {
            Controller::LfEstimated => est.as_ref().expect("estimator").lambda().to_vec(),
            Controller::LfActual => nominal.lambda.clone(),
            Controller::ModelActiveLf => model_active.clone(),
            Controller::PfBaseline => zeros.clone(),
        }
    };
    let initial_rmse = lf_rmse(&held(&estimator, &nominal), &nominal.lambda)?;
    log::info!(
        "{}: warm-up done, initial LF RMSE {initial_rmse:.5} (model-based {model_initial_rmse:.5})",
        cfg.controller.name()
    );

    let mut z_prev = vec![0.0; n];
    let mut steps = Vec::with_capacity(n_steps);
    let mut r_series = Vec::with_capacity(n_steps);
    let mut rm_series = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let t = k as f64 * cfg.dt;
        let scale = cfg.ramp.as_ref().map_or(1.0, |r| r.scale_at(t));
        if scale != nominal.scale {
            nominal = lp.nominal_point(scale)?;
        }
        let (pd, qd) = lp.loads(scale);
        let r = signal[k];
        let lambda_ctrl = held(&estimator, &nominal);

        let input = OdcpInput {
            lambda_hat: lambda_ctrl,
            p_g0_now: lp.pg0.clone(),
            p_g0_prev: lp.pg0.clone(),
            p_d_now: pd.clone(),
            p_d_prev: prev_pd.clone(),
            p_d0_now: lp.pd_nom.iter().map(|p| p * scale).collect(),
            p_g_prev: z_prev.clone(),
            p_t_prev: prev_pt_meas,
            p_t0_now: nominal.p_t0,
            r,
            lower: lower.clone(),
            upper: upper.clone(),
            rho: cfg.rho,
        };
        let sol = match cfg.controller {
            Controller::PfBaseline => pf_allocate(&input, &pf),
            _ => solve_odcp(&input, DEFAULT_TOL),
        }
        .map_err(|source| SimError::Odcp { step: k, source })?;

        let p_inj: Vec<f64> = (0..n).map(|i| lp.pg0[i] + sol.z[i] - pd[i]).collect();
        let inj = InjectionSet {
            p: p_inj,
            q: qd.iter().map(|q| -q).collect(),
        };
        let s = lp.solve(&inj, "scored", k)?;
        let r_m = nominal.p_t0 - s.p_t;
        let pt_meas = lp.measure(s.p_t);

        if let Some(est) = estimator.as_mut() {
            est.update(&MeasurementPair {
                delta_p: sub(&inj.p, &prev_p),
                delta_pt: pt_meas - prev_pt_meas,
            });
        }
        let lambda_hat = held(&estimator, &nominal);
        let rmse = lf_rmse(&lambda_hat, &nominal.lambda)?;

        r_series.push(r);
        rm_series.push(r_m);
        let score = performance_score(&r_series, &rm_series).expect("equal lengths");
        steps.push(StepRecord {
            k,
            t,
            r,
            r_m,
            z: der_buses.iter().map(|&b| sol.z[b - 1]).collect(),
            p_t: s.p_t,
            losses: s.losses,
            lambda_hat,
            lambda_true: nominal.lambda.clone(),
            rmse,
            score_so_far: *score.values.last().expect("non-empty"),
            score_defined: *score.defined.last().expect("non-empty"),
            odcp_status: sol.status,
        });

        prev_p = inj.p;
        prev_pt_meas = pt_meas;
        prev_pd = pd;
        z_prev = sol.z;
    }

    let score = performance_score(&r_series, &rm_series).expect("equal lengths");
    let rmse_series: Vec<f64> = steps.iter().map(|s| s.rmse).collect();
    let metrics = RunMetrics {
        controller: cfg.controller,
        steps: n_steps,
        avg_score: score.mean(),
        final_score: score.values.last().copied().unwrap_or(1.0),
        score_flagged: !score.all_defined(),
        avg_rmse: if rmse_series.is_empty() {
            initial_rmse
        } else {
            rmse_series.iter().sum::<f64>() / rmse_series.len() as f64
        },
        max_rmse: rmse_series.iter().copied().fold(initial_rmse, f64::max),
        initial_rmse,
        model_initial_rmse,
        clamped_steps: steps
            .iter()
            .filter(|s| s.odcp_status == OdcpStatus::ClampedInfeasible)
            .count(),
        score_series: score.values,
        rmse_series,
    };
    Ok(RunResult {
        metrics,
        steps,
        der_buses,
        s_base_kva: model.s_base_kva,
    })
}
