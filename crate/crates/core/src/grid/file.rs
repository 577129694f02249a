use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{validate_topology, BusId, GridError, Line, NetworkTopology, ValidatedTopology};
use crate::der::PvInverter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BusEntry {
    pub id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineEntry {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

/// On-disk grid description, including the PV inverters attached to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub base_voltage_v: f64,
    pub base_power_kva: f64,
    pub buses: Vec<BusEntry>,
    pub lines: Vec<LineEntry>,
    #[serde(default)]
    pub inverters: Vec<PvInverter>,
}

/// Hex SHA-256 of the canonical JSON encoding of a [`GridFile`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GridFingerprint(pub String);

impl fmt::Display for GridFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl GridFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid file serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn topology(&self) -> Result<NetworkTopology, GridError> {
        let n = self.buses.len();
        let mut ids: Vec<usize> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(GridError::InvalidBuses(
                "bus ids must be unique and cover 0..bus_count".into(),
            ));
        }
        Ok(NetworkTopology {
            bus_count: n,
            lines: self
                .lines
                .iter()
                .map(|l| Line::new(l.from, l.to, l.r_pu, l.x_pu))
                .collect(),
            base_voltage: self.base_voltage_v,
            base_power: self.base_power_kva,
        })
    }

    /// Validate the topology and inverter entries together.
    pub fn validated(&self) -> Result<(ValidatedTopology, Vec<PvInverter>), GridError> {
        let topo = validate_topology(self.topology()?)?;
        let mut seen = std::collections::HashSet::new();
        for inv in &self.inverters {
            if inv.bus == BusId::SLACK || inv.bus.0 >= topo.bus_count() {
                return Err(GridError::InvalidInput(format!(
                    "inverter bus {} is not a load bus",
                    inv.bus
                )));
            }
            if !seen.insert(inv.bus) {
                return Err(GridError::InvalidInput(format!(
                    "more than one inverter at bus {}",
                    inv.bus
                )));
            }
            inv.validate()
                .map_err(|e| GridError::InvalidInput(e.to_string()))?;
        }
        Ok((topo, self.inverters.clone()))
    }

    pub fn fingerprint(&self) -> GridFingerprint {
        let canonical = serde_json::to_string(self).expect("grid file serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        GridFingerprint(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
        "base_voltage_v": 400.0,
        "base_power_kva": 100.0,
        "buses": [{"id": 0}, {"id": 1}, {"id": 2}],
        "lines": [
            {"from": 0, "to": 1, "r_pu": 0.01, "x_pu": 0.005},
            {"from": 1, "to": 2, "r_pu": 0.02, "x_pu": 0.01}
        ],
        "inverters": [
            {"bus": 2, "rated_kw": 10.0, "variant": "Correct",
             "curve": {"knee_p": 0.5, "end_p": 1.0, "cosphi_end": 0.9}}
        ]
    }"#;

    #[test]
    fn parses_and_validates() {
        let g: GridFile = serde_json::from_str(SAMPLE).unwrap();
        let (topo, inv) = g.validated().unwrap();
        assert_eq!(topo.bus_count(), 3);
        assert_eq!(inv[0].bus, BusId(2));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let g: GridFile = serde_json::from_str(SAMPLE).unwrap();
        let mut h = g.clone();
        assert_eq!(g.fingerprint(), h.fingerprint());
        h.lines[0].r_pu = 0.011;
        assert_ne!(g.fingerprint(), h.fingerprint());
    }

    #[test]
    fn loader_rejects_cycles() {
        let mut g: GridFile = serde_json::from_str(SAMPLE).unwrap();
        g.lines.push(LineEntry {
            from: 2,
            to: 0,
            r_pu: 0.01,
            x_pu: 0.01,
        });
        assert!(matches!(g.validated(), Err(GridError::CycleDetected)));
    }

    #[test]
    fn inverter_on_slack_rejected() {
        let mut g: GridFile = serde_json::from_str(SAMPLE).unwrap();
        g.inverters[0].bus = BusId(0);
        assert!(g.validated().is_err());
    }
}
