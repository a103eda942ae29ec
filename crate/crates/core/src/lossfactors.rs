//! Loss factors from perturbing the plant.
//!
//! `actual_total_lfs` keeps the voltage controllers in the loop, so the
//! reactive response of PV buses is folded into the result. `active_lfs` and
//! `reactive_lfs` freeze every reactive injection at its base-case value and
//! treat all buses as PQ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{BusKind, NetworkModel};
use crate::powerflow::{InjectionSet, Plant, PowerFlowError, PowerFlowSolution, SolveOptions};

pub const DEFAULT_DELTA: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFactorSet {
    pub active: Vec<f64>,
    pub reactive: Vec<f64>,
    pub total: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossFactorError {
    #[error("perturbation step must be positive, got {0}")]
    BadDelta(f64),
    #[error("base case did not converge")]
    BaseNotConverged,
    #[error("perturbed solve at bus {bus} did not converge")]
    PerturbedNotConverged { bus: usize },
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
}

fn converged_base(plant: &Plant, inj: &InjectionSet) -> Result<PowerFlowSolution, LossFactorError> {
    let base = plant.solve(inj, &SolveOptions::default())?;
    if !base.converged {
        return Err(LossFactorError::BaseNotConverged);
    }
    Ok(base)
}

/// Central differences of the losses with respect to one injection
/// component (`reactive = false` for P, `true` for Q) at every bus.
fn central_differences(
    plant: &Plant,
    base_inj: &InjectionSet,
    base: &PowerFlowSolution,
    delta: f64,
    reactive: bool,
) -> Result<Vec<f64>, LossFactorError> {
    let opts = SolveOptions::warm(base);
    let losses = |inj: &InjectionSet, bus: usize| -> Result<f64, LossFactorError> {
        let s = plant.solve(inj, &opts)?;
        if !s.converged {
            return Err(LossFactorError::PerturbedNotConverged { bus });
        }
        Ok(s.losses)
    };
    let mut out = Vec::with_capacity(base_inj.len());
    let mut inj = base_inj.clone();
    for i in 0..base_inj.len() {
        let slot = if reactive { &mut inj.q[i] } else { &mut inj.p[i] };
        let x0 = *slot;
        *slot = x0 + delta;
        let up = losses(&inj, i + 1)?;
        let slot = if reactive { &mut inj.q[i] } else { &mut inj.p[i] };
        *slot = x0 - delta;
        let down = losses(&inj, i + 1)?;
        let slot = if reactive { &mut inj.q[i] } else { &mut inj.p[i] };
        *slot = x0;
        out.push((up - down) / (2.0 * delta));
    }
    Ok(out)
}

/// The feeder with voltage control switched off and the injections that
/// reproduce the base operating point: each PV bus keeps the reactive power
/// its controller was producing.
fn frozen_reactive(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    base: &PowerFlowSolution,
) -> (NetworkModel, InjectionSet) {
    let mut inj = base_inj.clone();
    for b in model.buses.iter().filter(|b| b.kind == BusKind::Pv) {
        let i = b.id.0 - 1;
        inj.q[i] += base.q_injected_pv[i];
    }
    (model.without_voltage_control(), inj)
}

fn check_delta(delta: f64) -> Result<(), LossFactorError> {
    if delta > 0.0 && delta.is_finite() {
        Ok(())
    } else {
        Err(LossFactorError::BadDelta(delta))
    }
}

/// Total loss factors with the voltage controllers responding.
pub fn actual_total_lfs(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    delta: f64,
) -> Result<Vec<f64>, LossFactorError> {
    check_delta(delta)?;
    let plant = Plant::new(model);
    let base = converged_base(&plant, base_inj)?;
    central_differences(&plant, base_inj, &base, delta, false)
}

/// Partial derivatives of the losses with respect to active injections,
/// reactive injections frozen.
pub fn active_lfs(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    delta: f64,
) -> Result<Vec<f64>, LossFactorError> {
    frozen_lfs(model, base_inj, delta, false)
}

/// Partial derivatives of the losses with respect to reactive injections.
pub fn reactive_lfs(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    delta: f64,
) -> Result<Vec<f64>, LossFactorError> {
    frozen_lfs(model, base_inj, delta, true)
}

fn frozen_lfs(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    delta: f64,
    reactive: bool,
) -> Result<Vec<f64>, LossFactorError> {
    check_delta(delta)?;
    let base = converged_base(&Plant::new(model), base_inj)?;
    let (frozen, inj) = frozen_reactive(model, base_inj, &base);
    let plant = Plant::new(&frozen);
    let base = converged_base(&plant, &inj)?;
    central_differences(&plant, &inj, &base, delta, reactive)
}

/// All three loss-factor vectors at one operating point.
pub fn loss_factor_set(
    model: &NetworkModel,
    base_inj: &InjectionSet,
    delta: f64,
) -> Result<LossFactorSet, LossFactorError> {
    check_delta(delta)?;
    let plant = Plant::new(model);
    let base = converged_base(&plant, base_inj)?;
    let total = central_differences(&plant, base_inj, &base, delta, false)?;
    let (frozen, inj) = frozen_reactive(model, base_inj, &base);
    let fplant = Plant::new(&frozen);
    let fbase = converged_base(&fplant, &inj)?;
    let active = central_differences(&fplant, &inj, &fbase, delta, false)?;
    let reactive = central_differences(&fplant, &inj, &fbase, delta, true)?;
    Ok(LossFactorSet {
        active,
        reactive,
        total,
    })
}
