//! Simulation of low-voltage grids with PV inverters under correct and
//! misconfigured cosφ(P) control, and a two-stage detector for those
//! misconfigurations: a grid-specific SVM on daily substation data and a
//! grid-agnostic R-Transformer on single-bus meter voltages.

pub mod der;
pub mod eval;
pub mod features;
pub mod grid;
pub mod load_estimation;
pub mod nn;
pub mod orchestrator;
pub mod rng;
pub mod rt;
pub mod scenario;
pub mod svm;

pub use der::{ControlCurveVariant, CosPhiCurve, PvInverter};
pub use grid::{BusId, ComplexValue, GridError, GridFile, NetworkTopology, ValidatedTopology};
