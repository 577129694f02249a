//! Random radial LV grids with overhead-line impedances.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::file::{BusEntry, GridFile, LineEntry};
use super::{validate_topology, BusId, GridError};
use crate::der::PvInverter;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGenParams {
    pub buses: usize,
    pub feeders: usize,
    pub pv_buses: usize,
    pub seed: u64,
    #[serde(default = "default_pv_range")]
    pub pv_rated_kw: (f64, f64),
    /// Per-segment resistance range in pu.
    #[serde(default = "default_r_range")]
    pub r_pu: (f64, f64),
    /// Reactance-to-resistance ratio range.
    #[serde(default = "default_xr_range")]
    pub x_over_r: (f64, f64),
}

fn default_pv_range() -> (f64, f64) {
    (20.0, 35.0)
}

fn default_r_range() -> (f64, f64) {
    (0.01, 0.03)
}

fn default_xr_range() -> (f64, f64) {
    (0.6, 1.2)
}

impl GridGenParams {
    pub fn new(buses: usize, feeders: usize, pv_buses: usize, seed: u64) -> Self {
        GridGenParams {
            buses,
            feeders,
            pv_buses,
            seed,
            pv_rated_kw: default_pv_range(),
            r_pu: default_r_range(),
            x_over_r: default_xr_range(),
        }
    }
}

/// Draw a radial grid: `feeders` chains leave the slack bus, remaining buses
/// extend a chain (mostly at its tail, sometimes as a side branch), and PV
/// inverters sit on the deeper half of the buses.
pub fn generate_radial_grid(params: &GridGenParams) -> Result<GridFile, GridError> {
    let n = params.buses;
    if n < 2 {
        return Err(GridError::InvalidInput(
            "a grid needs at least 2 buses".into(),
        ));
    }
    let feeders = params.feeders.clamp(1, n - 1);
    if params.pv_buses > n - 1 {
        return Err(GridError::InvalidInput(format!(
            "cannot place {} PV units on {} load buses",
            params.pv_buses,
            n - 1
        )));
    }
    let mut rng = rng::substream(params.seed, "grid", &[n as u64, feeders as u64]);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); feeders];
    let mut lines = Vec::with_capacity(n - 1);
    for bus in 1..n {
        let f = (bus - 1) % feeders;
        let parent = match members[f].last() {
            None => 0,
            Some(&tail) => {
                if rng.random::<f64>() < 0.7 {
                    tail
                } else {
                    members[f][rng.random_range(0..members[f].len())]
                }
            }
        };
        let r = rng.random_range(params.r_pu.0..=params.r_pu.1);
        let x = r * rng.random_range(params.x_over_r.0..=params.x_over_r.1);
        let scale = if parent == 0 { 0.5 } else { 1.0 };
        lines.push(LineEntry {
            from: parent,
            to: bus,
            r_pu: r * scale,
            x_pu: x * scale,
        });
        members[f].push(bus);
    }

    let mut grid = GridFile {
        base_voltage_v: 400.0,
        base_power_kva: 100.0,
        buses: (0..n).map(|id| BusEntry { id }).collect(),
        lines,
        inverters: Vec::new(),
    };

    let topo = validate_topology(grid.topology()?)?;
    let mut by_depth: Vec<usize> = (1..n).collect();
    by_depth.sort_by_key(|&b| (std::cmp::Reverse(topo.depth(BusId(b))), b));
    let pool_len = ((n - 1) / 2).max(params.pv_buses);
    let mut pool: Vec<usize> = by_depth[..pool_len].to_vec();
    pool.shuffle(&mut rng);
    let mut chosen: Vec<usize> = pool[..params.pv_buses].to_vec();
    chosen.sort_unstable();
    grid.inverters = chosen
        .into_iter()
        .map(|b| {
            let kw = rng.random_range(params.pv_rated_kw.0..=params.pv_rated_kw.1);
            PvInverter::new(b, (kw * 10.0).round() / 10.0)
        })
        .collect();
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let p = GridGenParams::new(12, 3, 2, 9);
        let a = generate_radial_grid(&p).unwrap();
        let b = generate_radial_grid(&p).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let (topo, inv) = a.validated().unwrap();
        assert_eq!(topo.feeders().len(), 3);
        assert_eq!(inv.len(), 2);
    }

    #[test]
    fn rejects_single_bus() {
        assert!(generate_radial_grid(&GridGenParams::new(1, 1, 0, 0)).is_err());
    }
}
