//! Fixtures shared by the benchmarks.

use demads_core::grid::generate::{generate_radial_grid, GridGenParams};
use demads_core::grid::ValidatedTopology;
use demads_core::rng;
use num_complex::Complex64;
use rand::Rng as _;

/// A generated radial grid and a feasible net demand for every bus.
pub fn loaded_grid(buses: usize, seed: u64) -> (ValidatedTopology, Vec<Complex64>) {
    let grid = generate_radial_grid(&GridGenParams::new(buses, 3.min(buses - 1), 1, seed))
        .expect("generator parameters are valid");
    let (topo, _) = grid.validated().expect("generated grids validate");
    let mut r = rng::substream(seed, "bench-demand", &[]);
    let demand = (0..buses)
        .map(|b| {
            if b == 0 {
                Complex64::default()
            } else {
                Complex64::new(r.random_range(0.0..0.02), r.random_range(0.0..0.005))
            }
        })
        .collect();
    (topo, demand)
}

/// Two overlapping Gaussian-ish blobs in `dim` dimensions, labels ±1.
pub fn blobs(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<i8>) {
    let mut r = rng::substream(seed, "bench-blobs", &[]);
    (0..n)
        .map(|i| {
            let y: i8 = if i % 2 == 0 { 1 } else { -1 };
            let x = (0..dim)
                .map(|_| f64::from(y) * 0.8 + r.random_range(-1.5..1.5))
                .collect();
            (x, y)
        })
        .unzip()
}

/// A day of meter voltages with a midday bump.
pub fn voltage_day(len: usize) -> Vec<f64> {
    (0..len)
        .map(|k| {
            let t = k as f64 / len as f64;
            1.0 + 0.01 * (-((t - 0.5) * 6.0).powi(2)).exp()
        })
        .collect()
}
