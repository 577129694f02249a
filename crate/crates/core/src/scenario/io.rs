//! CSV/JSON persistence of measurement sets.
//!
//! Layout of an output directory:
//!
//! ```text
//! metadata.json
//! substation_day000.csv   timestamp + substation channels, high resolution
//! meters_day000.csv       timestamp + one column per bus id, meter cadence
//! pv_day000.csv           timestamp + one column per inverter bus, known PV kW
//! ```
//!
//! Timestamps are integer seconds since midnight of day 0. Floats are written
//! in shortest round-trip form so a reload is bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{DayMeasurements, MeasurementMetadata, MeasurementSet, ScenarioError};
use crate::grid::BusId;

fn io_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn write_table(
    path: &Path,
    header: &[String],
    timestamps: &[u64],
    columns: &[&[f64]],
) -> Result<(), ScenarioError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    let mut record = Vec::with_capacity(columns.len() + 1);
    for (k, ts) in timestamps.iter().enumerate() {
        record.clear();
        record.push(ts.to_string());
        record.extend(columns.iter().map(|c| c[k].to_string()));
        w.write_record(&record).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Returns the header (without the timestamp column) and the value rows.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), ScenarioError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r
        .headers()
        .map_err(|e| io_err(path, e))?
        .iter()
        .skip(1)
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = rec
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|e| io_err(path, e)))
            .collect::<Result<Vec<_>, _>>()?;
        if row.len() != header.len() {
            return Err(io_err(path, "ragged row"));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_measurement_set(set: &MeasurementSet, dir: &Path) -> Result<(), ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = &set.metadata;
    let meta_path = dir.join("metadata.json");
    let json = serde_json::to_string_pretty(meta).map_err(|e| io_err(&meta_path, e))?;
    fs::write(&meta_path, json + "\n").map_err(|e| io_err(&meta_path, e))?;

    for d in &set.days {
        let day0 = u64::from(d.day) * 86_400;
        let hi = u64::from(meta.highres_step_s);
        let hi_ts: Vec<u64> = (0..d.substation.nrows() as u64)
            .map(|k| day0 + k * hi)
            .collect();

        let mut header = vec!["timestamp".to_string()];
        header.extend(meta.channel_names.iter().cloned());
        let cols: Vec<Vec<f64>> = d
            .substation
            .columns()
            .into_iter()
            .map(|c| c.to_vec())
            .collect();
        let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
        write_table(
            &dir.join(format!("substation_day{:03}.csv", d.day)),
            &header,
            &hi_ts,
            &col_refs,
        )?;

        let lo = u64::from(meta.meter_step_s);
        let slots = d.meters.values().next().map_or(0, Vec::len);
        let lo_ts: Vec<u64> = (0..slots as u64).map(|k| day0 + k * lo).collect();
        let mut header = vec!["timestamp".to_string()];
        header.extend(d.meters.keys().map(|b| b.to_string()));
        let col_refs: Vec<&[f64]> = d.meters.values().map(Vec::as_slice).collect();
        write_table(
            &dir.join(format!("meters_day{:03}.csv", d.day)),
            &header,
            &lo_ts,
            &col_refs,
        )?;

        let mut header = vec!["timestamp".to_string()];
        header.extend(d.pv_kw.keys().map(|b| b.to_string()));
        let col_refs: Vec<&[f64]> = d.pv_kw.values().map(Vec::as_slice).collect();
        write_table(
            &dir.join(format!("pv_day{:03}.csv", d.day)),
            &header,
            &hi_ts,
            &col_refs,
        )?;
    }
    Ok(())
}

fn bus_columns(
    path: &Path,
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
) -> Result<BTreeMap<BusId, Vec<f64>>, ScenarioError> {
    let mut out = BTreeMap::new();
    for (c, name) in header.iter().enumerate() {
        let bus: usize = name.parse().map_err(|e| io_err(path, e))?;
        out.insert(BusId(bus), rows.iter().map(|r| r[c]).collect());
    }
    Ok(out)
}

pub fn read_measurement_set(dir: &Path) -> Result<MeasurementSet, ScenarioError> {
    let meta_path = dir.join("metadata.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let metadata: MeasurementMetadata =
        serde_json::from_str(&text).map_err(|e| io_err(&meta_path, e))?;

    let mut days = Vec::with_capacity(metadata.days as usize);
    for day in metadata.first_day..metadata.first_day + metadata.days {
        let path = dir.join(format!("substation_day{day:03}.csv"));
        let (header, rows) = read_table(&path)?;
        if header != metadata.channel_names {
            return Err(io_err(&path, "channel names differ from metadata"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let substation = Array2::from_shape_vec((rows.len(), header.len()), flat)
            .map_err(|e| io_err(&path, e))?;

        let path = dir.join(format!("meters_day{day:03}.csv"));
        let (header, rows) = read_table(&path)?;
        let meters = bus_columns(&path, header, rows)?;

        let path = dir.join(format!("pv_day{day:03}.csv"));
        let (header, rows) = read_table(&path)?;
        let pv_kw = bus_columns(&path, header, rows)?;

        days.push(DayMeasurements {
            day,
            substation,
            meters,
            pv_kw,
        });
    }
    Ok(MeasurementSet { metadata, days })
}
