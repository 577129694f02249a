//! Radial low-voltage network model.
//!
//! A [`NetworkTopology`] is a bare list of lines between buses. Before it can
//! be solved it has to pass [`validate_topology`], which checks that the lines
//! form a tree rooted at the slack bus and fixes the parent/child orientation
//! and sweep order used by the power-flow solver.

mod file;
pub mod generate;
mod powerflow;

use std::collections::{HashSet, VecDeque};
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use file::{BusEntry, GridFile, GridFingerprint, LineEntry};
pub use powerflow::{
    aggregate_substation, solve_power_flow, solve_power_flow_with, PowerFlowOptions,
    PowerFlowResult, SubstationRecord,
};

/// Per-unit complex quantity (voltage, current or power).
pub type ComplexValue = Complex64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BusId(pub usize);

impl BusId {
    pub const SLACK: BusId = BusId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for BusId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Line {
    pub from: BusId,
    pub to: BusId,
    /// Series resistance in pu.
    pub r: f64,
    /// Series reactance in pu.
    pub x: f64,
}

impl Line {
    pub fn new(from: usize, to: usize, r: f64, x: f64) -> Self {
        Line {
            from: BusId(from),
            to: BusId(to),
            r,
            x,
        }
    }

    pub fn impedance(&self) -> ComplexValue {
        Complex64::new(self.r, self.x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    pub bus_count: usize,
    pub lines: Vec<Line>,
    /// Base voltage in volts.
    pub base_voltage: f64,
    /// Base power in kVA.
    pub base_power: f64,
}

#[derive(Debug, Error)]
pub enum GridError {
    #[error("network contains a cycle")]
    CycleDetected,
    #[error("bus {0} is not reachable from the slack bus")]
    DisconnectedBus(BusId),
    #[error("duplicate line between buses {0} and {1}")]
    DuplicateLine(BusId, BusId),
    #[error("line {index} is invalid: {reason}")]
    InvalidLine { index: usize, reason: String },
    #[error("invalid bus set: {0}")]
    InvalidBuses(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(
        "power flow did not converge after {iterations} iterations (residual {residual:e} pu)"
    )]
    NonConvergence { residual: f64, iterations: usize },
    #[error("grid file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("grid file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A topology that has been checked to be a spanning tree rooted at bus 0.
///
/// `order` lists buses in breadth-first order from the slack, children sorted
/// by line index, so that both sweeps visit buses in a fixed order.
#[derive(Clone, Debug)]
pub struct ValidatedTopology {
    topology: NetworkTopology,
    parent: Vec<Option<BusId>>,
    /// Index into `topology.lines` of the line connecting a bus to its parent.
    parent_line: Vec<Option<usize>>,
    order: Vec<BusId>,
    feeders: Vec<BusId>,
    feeder_of: Vec<Option<usize>>,
}

impl ValidatedTopology {
    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn bus_count(&self) -> usize {
        self.topology.bus_count
    }

    pub fn parent(&self, bus: BusId) -> Option<BusId> {
        self.parent[bus.0]
    }

    pub fn parent_line(&self, bus: BusId) -> Option<usize> {
        self.parent_line[bus.0]
    }

    /// Buses in sweep order, slack first.
    pub fn order(&self) -> &[BusId] {
        &self.order
    }

    /// First-hop buses (children of the slack), ascending by bus id.
    pub fn feeders(&self) -> &[BusId] {
        &self.feeders
    }

    /// Position in [`Self::feeders`] of the feeder a bus hangs off.
    pub fn feeder_of(&self, bus: BusId) -> Option<usize> {
        self.feeder_of[bus.0]
    }

    pub fn depth(&self, bus: BusId) -> usize {
        let mut d = 0;
        let mut b = bus;
        while let Some(p) = self.parent(b) {
            d += 1;
            b = p;
        }
        d
    }
}

/// Check that `topology` is a tree rooted at the slack bus and fix its
/// orientation.
pub fn validate_topology(topology: NetworkTopology) -> Result<ValidatedTopology, GridError> {
    let n = topology.bus_count;
    if n == 0 {
        return Err(GridError::InvalidBuses("topology has no buses".into()));
    }
    if !(topology.base_voltage > 0.0 && topology.base_voltage.is_finite()) {
        return Err(GridError::InvalidInput(
            "base voltage must be positive".into(),
        ));
    }
    if !(topology.base_power > 0.0 && topology.base_power.is_finite()) {
        return Err(GridError::InvalidInput(
            "base power must be positive".into(),
        ));
    }

    let mut seen = HashSet::new();
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (index, line) in topology.lines.iter().enumerate() {
        let (a, b) = (line.from.0, line.to.0);
        if a >= n || b >= n {
            return Err(GridError::InvalidLine {
                index,
                reason: format!("bus index out of range (bus_count {n})"),
            });
        }
        if a == b {
            return Err(GridError::InvalidLine {
                index,
                reason: "line connects a bus to itself".into(),
            });
        }
        if !line.r.is_finite() || !line.x.is_finite() || line.r < 0.0 {
            return Err(GridError::InvalidLine {
                index,
                reason: "r must be finite and nonnegative, x finite".into(),
            });
        }
        if !seen.insert((a.min(b), a.max(b))) {
            return Err(GridError::DuplicateLine(BusId(a.min(b)), BusId(a.max(b))));
        }
        adjacency[a].push((b, index));
        adjacency[b].push((a, index));
    }

    let mut parent = vec![None; n];
    let mut parent_line = vec![None; n];
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(bus) = queue.pop_front() {
        order.push(BusId(bus));
        for &(next, line) in &adjacency[bus] {
            if parent_line[bus] == Some(line) {
                continue;
            }
            if visited[next] {
                return Err(GridError::CycleDetected);
            }
            visited[next] = true;
            parent[next] = Some(BusId(bus));
            parent_line[next] = Some(line);
            queue.push_back(next);
        }
    }
    if let Some(missing) = visited.iter().position(|v| !v) {
        return Err(GridError::DisconnectedBus(BusId(missing)));
    }

    let mut feeders: Vec<BusId> = (1..n)
        .filter(|&b| parent[b] == Some(BusId::SLACK))
        .map(BusId)
        .collect();
    feeders.sort();
    let mut feeder_of = vec![None; n];
    for &bus in order.iter().skip(1) {
        let p = parent[bus.0].expect("non-slack bus has a parent");
        feeder_of[bus.0] = if p == BusId::SLACK {
            feeders.iter().position(|&f| f == bus)
        } else {
            feeder_of[p.0]
        };
    }

    Ok(ValidatedTopology {
        topology,
        parent,
        parent_line,
        order,
        feeders,
        feeder_of,
    })
}
