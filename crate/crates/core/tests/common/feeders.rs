//! Test feeders: a two-bus line with a closed-form answer and randomized
//! radial configurations of the built-in system.

use std::collections::BTreeMap;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::sweep::Sweep;
use mbbsim::network::{
    Bus, BranchKind, BranchSpec, LineImpedance, Load, NetworkModel, SwitchState, SystemDescription,
};
use mbbsim::powerflow::{InjectionSpec, OperatingState, PowerFlowSolution, SolveOptions, SourceSpec};
use mbbsim::{build_network, find_islands, solve_island, Phase, PhaseSet, PhasorSet};

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn slack(bus: &str, emf: PhasorSet) -> SourceSpec {
    SourceSpec { device: "slack".into(), bus: bus.into(), emf, impedance: c(0.0, 0.0), frequency: 60.0 }
}

/// Receiving-end voltage of a lossy line feeding a constant-power load,
/// from the high-voltage root of the quadratic in |V2|^2.
pub fn two_bus_closed_form(v1: Complex64, z: Complex64, s: Complex64) -> Complex64 {
    let rot = v1 / v1.norm();
    let v1m = v1.norm();
    let k = z * s.conj();
    let b = v1m * v1m - 2.0 * k.re;
    let w = (b + (b * b - 4.0 * k.norm_sqr()).sqrt()) / 2.0;
    rot * (w + z.conj() * s) / v1m
}

pub fn two_bus_model(z: Complex64, loads: [(f64, f64); 3]) -> NetworkModel {
    let mut m = [[c(0.0, 0.0); 3]; 3];
    for (k, row) in m.iter_mut().enumerate() {
        row[k] = z;
    }
    let desc = SystemDescription {
        buses: vec![
            Bus { id: "s".into(), nominal_voltage: 4160.0, phases: PhaseSet::ABC },
            Bus { id: "r".into(), nominal_voltage: 4160.0, phases: PhaseSet::ABC },
        ],
        branches: vec![BranchSpec {
            id: "s-r".into(),
            from: "s".into(),
            to: "r".into(),
            phases: PhaseSet::ABC,
            kind: BranchKind::Line { length_ft: 5280.0 },
            line_impedance: Some(LineImpedance::OhmsPerMile(m)),
            length_ft: None,
            series_impedance: None,
        }],
        loads: Phase::ALL
            .iter()
            .map(|&p| Load::single_phase(&format!("l{p}"), "r", p, loads[p.index()].0, loads[p.index()].1))
            .collect(),
        ..Default::default()
    };
    build_network(&desc).expect("two-bus model")
}

pub struct Config {
    pub model: NetworkModel,
    pub state: OperatingState,
    pub loads: BTreeMap<String, [Complex64; 3]>,
    pub source_bus: String,
    pub emf: PhasorSet,
}

pub fn random_config(rng: &mut ChaCha8Rng) -> Config {
    let mut model = NetworkModel::builtin();
    let mut switches = SwitchState::default();
    let source_bus = ["grid", "650", "6501"][rng.random_range(0..3)].to_string();
    let via_grid = source_bus == "grid";
    let (to_mg0, to_mg1) = match rng.random_range(0..3) {
        0 => (true, false),
        1 => (false, true),
        _ => (true, true),
    };
    switches.set("grid-pcc", via_grid);
    switches.set("pcc-650", via_grid && to_mg0);
    switches.set("pcc-6501", via_grid && to_mg1);
    for feeder in ["", "1"] {
        for (from, to) in [("632", "633"), ("632", "645"), ("671", "692")] {
            switches.set(&format!("{from}{feeder}-{to}{feeder}"), rng.random_bool(0.7));
        }
    }
    for cap in &mut model.capacitors {
        cap.status = rng.random_bool(0.5);
    }
    let mut taps = BTreeMap::new();
    for (br, _) in model.regulators() {
        taps.insert(br.id.clone(), [0; 3].map(|_| rng.random_range(-8..=8)));
    }
    let mut loads: BTreeMap<String, [Complex64; 3]> = BTreeMap::new();
    for l in &model.loads {
        if !rng.random_bool(0.85) {
            continue;
        }
        let k = rng.random_range(0.2..1.0);
        let e = loads.entry(l.bus.clone()).or_insert([c(0.0, 0.0); 3]);
        for (p, pw) in &l.per_phase {
            e[p.index()] += c(pw.kw, pw.kvar) * (1e3 * k);
        }
    }
    let v = rng.random_range(0.98..1.05) * 4160.0 / 3f64.sqrt();
    let emf = PhasorSet::balanced(v, rng.random_range(-0.5..0.5));
    Config { model, state: OperatingState { switches, taps }, loads, source_bus, emf }
}

impl Config {
    pub fn solve(&self, opts: SolveOptions<'_>) -> PowerFlowSolution {
        let islands = find_islands(&self.model, &self.state.switches);
        let island = islands.iter().find(|i| i.contains(&self.source_bus)).expect("source island");
        let mut inj = InjectionSpec::default();
        for (bus, s) in self.loads.iter().filter(|(b, _)| island.contains(b)) {
            inj.add_load(bus, PhasorSet(*s));
        }
        inj.sources.push(slack(&self.source_bus, self.emf));
        solve_island(&self.model, island, &self.state, &inj, opts).unwrap_or_else(|e| panic!("{e}"))
    }

    /// Largest per-unit difference between Newton and the sweep.
    pub fn sweep_error(&self) -> f64 {
        let sol = self.solve(SolveOptions { tolerance: 1e-4, ..Default::default() });
        let sweep = Sweep {
            model: &self.model,
            closed: self.state.switches.iter().map(|(k, v)| (k.to_string(), v)).collect(),
            taps: self.state.taps.clone(),
            loads: self.loads.clone(),
            source_bus: self.source_bus.clone(),
            source_emf: self.emf.0,
        };
        let (oracle, _) = sweep.solve(1e-13, 500);
        assert_eq!(oracle.len(), sol.bus_voltages.len(), "island size");
        let mut worst: f64 = 0.0;
        for (bus, want) in &oracle {
            let vln = self.model.bus(bus).unwrap().nominal_ln();
            let got = sol.bus_voltages[bus];
            for (g, w) in got.0.iter().zip(want) {
                worst = worst.max((g - w).norm() / vln);
            }
        }
        worst
    }
}

/// Largest per-unit error of the solver on the two-bus line over a few
/// load patterns.
pub fn two_bus_error() -> f64 {
    let z = c(0.35, 0.8);
    let mut worst: f64 = 0.0;
    for loads in [
        [(300.0, 150.0); 3],
        [(500.0, 200.0), (120.0, 40.0), (0.0, 0.0)],
        [(50.0, -80.0), (700.0, 300.0), (260.0, 0.0)],
    ] {
        let model = two_bus_model(z, loads);
        let emf = PhasorSet::balanced(2401.777, 0.3);
        let island = find_islands(&model, &SwitchState::default()).remove(0);
        let mut inj = InjectionSpec::from_model_loads(&model);
        inj.sources.push(slack("s", emf));
        let opts = SolveOptions { tolerance: 1e-6, ..Default::default() };
        let sol = solve_island(&model, &island, &OperatingState::default(), &inj, opts).expect("converges");
        let vr = sol.bus_voltages["r"];
        for p in Phase::ALL {
            let (kw, kvar) = loads[p.index()];
            let want = two_bus_closed_form(emf[p], z, c(kw * 1e3, kvar * 1e3));
            worst = worst.max((vr[p] - want).norm() / 2401.777);
        }
    }
    worst
}
