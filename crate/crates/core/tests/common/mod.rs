#![allow(dead_code)]

pub mod feeders;
pub mod oracle;
pub mod sweep;

use mbbsim::dynamics::{run, TimeSeriesRecord};
use mbbsim::{NetworkModel, Scenario, SimulationConfig};

pub fn run_case(scenario: &Scenario, config: SimulationConfig) -> Vec<TimeSeriesRecord> {
    let model = NetworkModel::builtin();
    run(&model, scenario, &config).unwrap_or_else(|e| panic!("{} failed: {e}", scenario.name))
}

/// Mean of `f` over records with `t` in `[t0, t1)`.
pub fn window_mean(records: &[TimeSeriesRecord], t0: f64, t1: f64, f: impl Fn(&TimeSeriesRecord) -> f64) -> f64 {
    let xs: Vec<f64> = records.iter().filter(|r| r.t >= t0 && r.t < t1).map(f).collect();
    assert!(!xs.is_empty(), "no samples in [{t0}, {t1})");
    xs.iter().sum::<f64>() / xs.len() as f64
}
