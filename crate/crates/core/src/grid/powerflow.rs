//! Backward-forward sweep power flow for radial networks.
//!
//! Loads are constant-power. Each iteration computes load currents from the
//! present voltages, accumulates branch currents from the leaves toward the
//! slack and then walks back out updating voltages with the branch drops.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::{BusId, ComplexValue, GridError, ValidatedTopology};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PowerFlowOptions {
    /// Stop once the largest per-bus voltage change drops below this (pu).
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-8,
            max_iterations: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerFlowResult {
    pub voltages: Vec<ComplexValue>,
    /// Current per line, indexed like `topology.lines`, flowing from the
    /// parent bus toward the child bus.
    pub line_currents: Vec<ComplexValue>,
    pub losses: ComplexValue,
    pub iterations: usize,
    /// Largest per-bus voltage change of the final iteration.
    pub residual: f64,
}

impl PowerFlowResult {
    /// Complex power delivered by the slack bus into the network.
    pub fn slack_power(&self, topo: &ValidatedTopology) -> ComplexValue {
        let i_out: Complex64 = topo
            .feeders()
            .iter()
            .map(|&f| self.line_currents[topo.parent_line(f).expect("feeder line")])
            .sum();
        self.voltages[0] * i_out.conj()
    }
}

/// Solve with default options. `demand` is the net consumption per bus in pu
/// (consumption positive, generation negative); `demand[0]` is ignored.
pub fn solve_power_flow(
    topo: &ValidatedTopology,
    demand: &[ComplexValue],
    slack_voltage: f64,
) -> Result<PowerFlowResult, GridError> {
    solve_power_flow_with(topo, demand, slack_voltage, PowerFlowOptions::default())
}

pub fn solve_power_flow_with(
    topo: &ValidatedTopology,
    demand: &[ComplexValue],
    slack_voltage: f64,
    options: PowerFlowOptions,
) -> Result<PowerFlowResult, GridError> {
    let n = topo.bus_count();
    if demand.len() != n {
        return Err(GridError::InvalidInput(format!(
            "expected {n} bus injections, got {}",
            demand.len()
        )));
    }
    if demand
        .iter()
        .any(|s| !s.re.is_finite() || !s.im.is_finite())
    {
        return Err(GridError::InvalidInput("non-finite injection".into()));
    }
    if !(slack_voltage > 0.0 && slack_voltage.is_finite()) {
        return Err(GridError::InvalidInput(
            "slack voltage must be positive".into(),
        ));
    }

    let lines = &topo.topology().lines;
    let order = topo.order();
    let v0 = Complex64::new(slack_voltage, 0.0);
    let mut voltages = vec![v0; n];
    let mut branch = vec![Complex64::new(0.0, 0.0); n];

    let mut residual = f64::INFINITY;
    for iteration in 1..=options.max_iterations {
        backward_sweep(topo, demand, &voltages, &mut branch);

        residual = 0.0;
        for &bus in order.iter().skip(1) {
            let parent = topo.parent(bus).expect("non-slack bus has a parent");
            let z = lines[topo.parent_line(bus).expect("parent line")].impedance();
            let v_new = voltages[parent.0] - z * branch[bus.0];
            residual = residual.max((v_new - voltages[bus.0]).norm());
            voltages[bus.0] = v_new;
        }
        if !residual.is_finite() {
            return Err(GridError::NonConvergence {
                residual,
                iterations: iteration,
            });
        }
        if residual < options.tolerance {
            // Currents consistent with the final voltages.
            backward_sweep(topo, demand, &voltages, &mut branch);
            let mut line_currents = vec![Complex64::new(0.0, 0.0); lines.len()];
            let mut losses = Complex64::new(0.0, 0.0);
            for &bus in order.iter().skip(1) {
                let idx = topo.parent_line(bus).expect("parent line");
                let i = branch[bus.0];
                line_currents[idx] = i;
                losses += lines[idx].impedance() * i.norm_sqr();
            }
            return Ok(PowerFlowResult {
                voltages,
                line_currents,
                losses,
                iterations: iteration,
                residual,
            });
        }
    }
    Err(GridError::NonConvergence {
        residual,
        iterations: options.max_iterations,
    })
}

/// Fill `branch[b]` with the current entering bus `b` from its parent.
fn backward_sweep(
    topo: &ValidatedTopology,
    demand: &[ComplexValue],
    voltages: &[ComplexValue],
    branch: &mut [ComplexValue],
) {
    for &bus in topo.order().iter().skip(1) {
        branch[bus.0] = (demand[bus.0] / voltages[bus.0]).conj();
    }
    for &bus in topo.order().iter().skip(1).rev() {
        if let Some(parent) = topo.parent(bus) {
            if parent != BusId::SLACK {
                let i = branch[bus.0];
                branch[parent.0] += i;
            }
        }
    }
}

/// Substation-side measurement channels for one solved operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstationRecord {
    pub p_total: f64,
    pub q_total: f64,
    pub i_slack: f64,
    pub v_slack: f64,
    /// Active power per first-hop feeder, ordered like `feeders()`.
    pub feeder_p: Vec<f64>,
    pub feeder_q: Vec<f64>,
}

impl SubstationRecord {
    /// Channel names for a topology in the order used by [`Self::values`].
    pub fn channel_names(topo: &ValidatedTopology) -> Vec<String> {
        let mut names: Vec<String> = ["p_total", "q_total", "i_slack", "v_slack"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        names.extend(topo.feeders().iter().map(|f| format!("p_feeder_{f}")));
        names.extend(topo.feeders().iter().map(|f| format!("q_feeder_{f}")));
        names
    }

    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.p_total, self.q_total, self.i_slack, self.v_slack];
        v.extend_from_slice(&self.feeder_p);
        v.extend_from_slice(&self.feeder_q);
        v
    }

    pub fn channel_count(feeders: usize) -> usize {
        4 + 2 * feeders
    }
}

pub fn aggregate_substation(
    result: &PowerFlowResult,
    topo: &ValidatedTopology,
) -> SubstationRecord {
    let v0 = result.voltages[0];
    let mut i_total = Complex64::new(0.0, 0.0);
    let mut feeder_p = Vec::with_capacity(topo.feeders().len());
    let mut feeder_q = Vec::with_capacity(topo.feeders().len());
    for &f in topo.feeders() {
        let i = result.line_currents[topo.parent_line(f).expect("feeder line")];
        i_total += i;
        let s = v0 * i.conj();
        feeder_p.push(s.re);
        feeder_q.push(s.im);
    }
    let s_total = v0 * i_total.conj();
    SubstationRecord {
        p_total: s_total.re,
        q_total: s_total.im,
        i_slack: i_total.norm(),
        v_slack: v0.norm(),
        feeder_p,
        feeder_q,
    }
}
