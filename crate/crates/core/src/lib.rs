//! Grid model, machine capability, AC power flow and the two-operating-point
//! hydrogen OPF for networks with electrolyzers.

pub mod capability;
pub mod network;
pub mod opf;
pub mod powerflow;
