//! Multi-area power-system frequency simulation with droop, ACE-based AGC
//! and interaction-variable based enhanced AGC (E-AGC).
//!
//! All electrical quantities are in per unit on the scenario's power base;
//! time is in seconds.

pub mod cli;
pub mod control;
pub mod intv;
pub mod models;
pub mod network;
pub mod sim;
