//! Loss-aware coordination of distributed energy resources (DERs) on a radial
//! distribution feeder for frequency regulation.
//!
//! The crate contains the feeder model ([`network`]), an AC power-flow plant
//! ([`powerflow`]), perturbation-based loss factors ([`lossfactors`]), the
//! recursive loss-factor estimator ([`estimator`]), the per-interval dispatch
//! problem ([`odcp`]) and the closed-loop simulator ([`simulator`]). [`tables`] holds the CSV formats
//! shared with the command line.

pub mod estimator;
pub mod lossfactors;
pub mod network;
pub mod odcp;
pub mod powerflow;
pub mod simulator;
pub mod tables;
