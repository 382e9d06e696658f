//! Hybrid time-domain engine.
//!
//! Device states advance on a fixed step with their measurements held from
//! the previous network solution. The network itself has no dynamic states:
//! after the devices move, every energized island is solved algebraically.

use std::collections::{BTreeMap, BTreeSet};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{
    btb_step, diesel_step, grid_following_step, grid_forming_step, grid_forming_voltage_step, pv_step, v2g_dispatch,
    BtbState, DeviceError, DeviceKind, DieselState, GridFollowingState, GridFormingParams, GridFormingState, PvParams,
    PvState, V2gCommand,
};
use crate::exec::{self, ExecutionMode};
use crate::metrics::{sequence_components, vuf, UnbalanceMetrics};
use crate::network::{find_islands, regulator_step, BusId, Island, NetworkModel, RegulatorSettings};
use crate::phasor::{Phase, PhasorSet};
use crate::powerflow::{
    pu_to_ohms, solve_island, InjectionSpec, OperatingState, PowerFlowError, PowerFlowSolution, SolveOptions,
    SourceSpec, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE_W,
};
use crate::scenarios::Scenario;

/// Power through a regulator below which its taps stay locked (kW).
pub const REGULATOR_LOCK_KW: f64 = 1.0;

const INIT_ITERATIONS: usize = 200;
/// Solver tolerance (W) while searching for the initial equilibrium.
const INIT_TOLERANCE_W: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dt: f64,
    pub t_end: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_decimation")]
    pub decimation: usize,
    #[serde(default)]
    pub execution: ExecutionMode,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE_W
}
fn default_max_iter() -> usize {
    DEFAULT_MAX_ITER
}
fn default_decimation() -> usize {
    10
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            dt: 0.001,
            t_end: 1.0,
            tolerance: DEFAULT_TOLERANCE_W,
            max_iter: DEFAULT_MAX_ITER,
            decimation: default_decimation(),
            execution: ExecutionMode::default(),
        }
    }
}

impl SimulationConfig {
    /// Defaults with the run length taken from `scenario`.
    pub fn for_scenario(scenario: &Scenario) -> Self {
        SimulationConfig { t_end: scenario.t_end, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.dt > 0.0 && self.dt <= 0.01) {
            return Err(format!("dt must lie in (0, 0.01] s, got {}", self.dt));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(format!("t_end must be positive, got {}", self.t_end));
        }
        if self.decimation == 0 {
            return Err("decimation must be at least 1".into());
        }
        if !(self.tolerance > 0.0) || self.max_iter == 0 {
            return Err("solver tolerance and iteration limit must be positive".into());
        }
        Ok(())
    }

    /// Number of steps needed to reach `t_end`.
    pub fn steps(&self) -> u64 {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(flatten)]
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum EventAction {
    LoadStatus { load: String, on: bool },
    /// New three-phase total, keeping the phase split; also switches the load on.
    LoadPower { load: String, kw: f64, kvar: f64 },
    Switch { branch: String, closed: bool },
    /// Diesel setpoint or PV available power.
    DeviceSetpoint { device: String, p_kw: f64 },
    BtbTransfer { device: String, p_kw: f64 },
    V2g { device: String, p_kw: f64 },
}

impl EventAction {
    /// `(kind, id)` of the object the action targets.
    pub fn target(&self) -> (&'static str, &str) {
        match self {
            EventAction::LoadStatus { load, .. } | EventAction::LoadPower { load, .. } => ("load", load),
            EventAction::Switch { branch, .. } => ("switch", branch),
            EventAction::DeviceSetpoint { device, .. }
            | EventAction::BtbTransfer { device, .. }
            | EventAction::V2g { device, .. } => ("device", device),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceRecord {
    pub p_kw: f64,
    pub q_kvar: f64,
    pub rating_kva: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BtbRecord {
    pub vdc: f64,
    pub vdc_pu: f64,
    /// Delivered to the remote side, kW.
    pub transferred_kw: f64,
    /// Drawn from the MG side, kW.
    pub mg_side_kw: f64,
    pub dc_net_power_w: f64,
    pub dc_energy_j: f64,
    pub dc_energy_in_j: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesRecord {
    pub t: f64,
    /// Line-to-neutral voltages (V) of energized buses.
    pub bus_voltages: BTreeMap<BusId, PhasorSet>,
    /// Terminal powers; a BTB contributes `<id>.mg` and `<id>.remote`.
    pub devices: BTreeMap<String, DeviceRecord>,
    /// Per-phase terminal power (VA) of each grid-forming source.
    pub source_phase_power: BTreeMap<String, PhasorSet>,
    /// Island frequency keyed by the island's grid-forming device.
    pub frequencies: BTreeMap<String, f64>,
    pub btb: BTreeMap<String, BtbRecord>,
    /// `None` when the bus is dead or the ratio is undefined.
    pub vuf: Vec<(BusId, Option<UnbalanceMetrics>)>,
    pub pf_iterations: usize,
    pub pf_mismatch_w: f64,
    /// Largest per-island power-balance residual magnitude, VA.
    pub balance_residual_va: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortKind {
    InvalidInput,
    InitialConditionFailure,
    MidRunDivergence,
    DeviceAbort,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{kind:?} at t = {t} s: {message}")]
pub struct SimulationError {
    pub kind: AbortKind,
    pub t: f64,
    pub message: String,
    /// Records produced before the failure.
    pub records: Vec<TimeSeriesRecord>,
}

impl SimulationError {
    fn new(kind: AbortKind, t: f64, message: impl Into<String>) -> Self {
        SimulationError { kind, t, message: message.into(), records: Vec::new() }
    }
}

#[derive(Debug, Clone)]
enum Dynamic {
    Forming { state: GridFormingState, params: GridFormingParams },
    Pv { state: PvState, params: PvParams },
    Diesel(DieselState),
    V2g { state: GridFollowingState, phase: Phase },
    Btb { state: BtbState, remote: BusId },
}

#[derive(Debug, Clone)]
struct Unit {
    id: String,
    bus: BusId,
    dynamic: Dynamic,
}

/// A running simulation.
#[derive(Debug, Clone)]
pub struct Simulation {
    model: NetworkModel,
    config: SimulationConfig,
    op: OperatingState,
    units: Vec<Unit>,
    islands: Vec<Island>,
    dead: BTreeSet<BusId>,
    monitored: Vec<BusId>,
    events: Vec<Event>,
    next_event: usize,
    steps: u64,
    voltages: BTreeMap<BusId, PhasorSet>,
    solutions: Vec<PowerFlowSolution>,
    /// Terminal power of each grid-forming unit, kW + j kVAR.
    measured: BTreeMap<String, Complex64>,
    next_regulator: f64,
}

impl Simulation {
    /// Applies the scenario to `base` and brings the system to its initial
    /// steady state.
    pub fn new(base: &NetworkModel, scenario: &Scenario, config: SimulationConfig) -> Result<Self, SimulationError> {
        config.validate().map_err(|e| SimulationError::new(AbortKind::InvalidInput, 0.0, e))?;
        let model = scenario
            .apply(base)
            .map_err(|e| SimulationError::new(AbortKind::InvalidInput, 0.0, e.to_string()))?;
        let mut events = scenario.events.clone();
        events.sort_by(|a, b| a.time.total_cmp(&b.time));
        let units = model
            .devices
            .iter()
            .filter(|d| d.in_service)
            .map(|d| Unit { id: d.id.clone(), bus: d.bus.clone(), dynamic: initial_dynamic(&d.kind) })
            .collect();
        let interval = model.regulators().map(|(_, s)| s.control_interval).fold(f64::INFINITY, f64::min);
        let mut sim = Simulation {
            op: OperatingState::from_model(&model),
            model,
            config,
            units,
            islands: Vec::new(),
            dead: scenario.dead_buses.iter().cloned().collect(),
            monitored: scenario.monitored_buses.clone(),
            events,
            next_event: 0,
            steps: 0,
            voltages: BTreeMap::new(),
            solutions: Vec::new(),
            measured: BTreeMap::new(),
            next_regulator: interval,
        };
        sim.apply_due_events(0.0).map_err(|mut e| {
            e.kind = AbortKind::InvalidInput;
            e
        })?;
        sim.refresh_islands();
        sim.initialize()?;
        Ok(sim)
    }

    pub fn time(&self) -> f64 {
        self.steps as f64 * self.config.dt
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn islands(&self) -> &[Island] {
        &self.islands
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn operating_state(&self) -> &OperatingState {
        &self.op
    }

    pub fn solutions(&self) -> &[PowerFlowSolution] {
        &self.solutions
    }

    fn refresh_islands(&mut self) {
        self.islands = find_islands(&self.model, &self.op.switches);
    }

    fn grid_forming_of(&self, island: &Island) -> Option<&Unit> {
        island.grid_forming_device().and_then(|id| self.units.iter().find(|u| u.id == id))
    }

    fn frequency_at(&self, bus: &str) -> f64 {
        self.islands
            .iter()
            .find(|i| i.contains(bus))
            .and_then(|i| self.grid_forming_of(i))
            .map(|u| match &u.dynamic {
                Dynamic::Forming { state, .. } => state.frequency,
                _ => crate::devices::NOMINAL_FREQUENCY,
            })
            .unwrap_or(crate::devices::NOMINAL_FREQUENCY)
    }

    /// Islands that need a power-flow solution.
    fn live_islands(&self) -> Result<Vec<&Island>, SimulationError> {
        let mut out = Vec::new();
        for island in &self.islands {
            if island.grid_forming.is_empty() {
                if island.member_buses.iter().all(|b| self.dead.contains(b)) {
                    continue;
                }
                let head = island.member_buses.iter().next().cloned().unwrap_or_default();
                return Err(SimulationError::new(
                    AbortKind::MidRunDivergence,
                    self.time(),
                    PowerFlowError::NoGridFormingDevice(head).to_string(),
                ));
            }
            out.push(island);
        }
        Ok(out)
    }

    fn injections(&self) -> InjectionSpec {
        let mut spec = InjectionSpec::from_model_loads(&self.model);
        let energized: BTreeSet<&str> = self
            .islands
            .iter()
            .filter(|i| !i.grid_forming.is_empty())
            .flat_map(|i| i.member_buses.iter().map(String::as_str))
            .collect();
        let balanced = |p_kw: f64, q_kvar: f64| {
            let s = Complex64::new(p_kw, q_kvar) * (1e3 / 3.0);
            PhasorSet::new(s, s, s)
        };
        for u in &self.units {
            match &u.dynamic {
                Dynamic::Forming { state, params } => {
                    let bus = self.model.bus(&u.bus).expect("validated");
                    let vln = bus.nominal_ln();
                    spec.sources.push(SourceSpec {
                        device: u.id.clone(),
                        bus: u.bus.clone(),
                        emf: PhasorSet::balanced(state.emf_pu * vln, 0.0),
                        impedance: pu_to_ohms(params.source_impedance_pu, bus.nominal_voltage),
                        frequency: state.frequency,
                    });
                }
                Dynamic::Pv { state, .. } if energized.contains(u.bus.as_str()) => {
                    spec.add_generation(&u.bus, balanced(state.p_out, 0.0))
                }
                Dynamic::Diesel(state) if energized.contains(u.bus.as_str()) => {
                    spec.add_generation(&u.bus, balanced(state.p_out, 0.0))
                }
                Dynamic::V2g { state, phase } if energized.contains(u.bus.as_str()) => {
                    let mut s = PhasorSet::ZERO;
                    s[*phase] = Complex64::new(state.p, state.q) * 1e3;
                    spec.add_generation(&u.bus, s);
                }
                Dynamic::Btb { state, remote } => {
                    if energized.contains(u.bus.as_str()) {
                        spec.add_generation(&u.bus, balanced(state.converter_mg.p, state.converter_mg.q));
                    }
                    if energized.contains(remote.as_str()) {
                        spec.add_generation(remote, balanced(state.converter_remote.p, state.converter_remote.q));
                    }
                }
                _ => {}
            }
        }
        spec.generation.retain(|_, s| s.0.iter().any(|x| x.norm() > 0.0));
        spec
    }

    /// Solves all live islands and stores voltages and measurements.
    fn solve(&mut self) -> Result<(), SimulationError> {
        self.solve_with(self.config.tolerance)
    }

    fn solve_with(&mut self, tolerance: f64) -> Result<(), SimulationError> {
        let spec = self.injections();
        let live: Vec<Island> = self.live_islands()?.into_iter().cloned().collect();
        let opts = SolveOptions {
            tolerance,
            max_iter: self.config.max_iter,
            initial: Some(&self.voltages),
        };
        let (model, op) = (&self.model, &self.op);
        let results = exec::map(self.config.execution, &live, |island| {
            let mut local = InjectionSpec {
                generation: spec.generation.iter().filter(|(b, _)| island.contains(b)).map(|(b, s)| (b.clone(), *s)).collect(),
                loads: spec.loads.iter().filter(|(b, _)| island.contains(b)).map(|(b, s)| (b.clone(), *s)).collect(),
                sources: spec.sources.iter().filter(|s| island.contains(&s.bus)).cloned().collect(),
            };
            local.sources.retain(|s| island.grid_forming.contains(&s.device));
            solve_island(model, island, op, &local, opts)
        });
        let t = self.time();
        let mut voltages = BTreeMap::new();
        let mut solutions = Vec::with_capacity(results.len());
        for r in results {
            let sol = r.map_err(|e| SimulationError::new(AbortKind::MidRunDivergence, t, e.to_string()))?;
            voltages.extend(sol.bus_voltages.iter().map(|(k, v)| (k.clone(), *v)));
            for (dev, s) in &sol.source_power {
                self.measured.insert(dev.clone(), s.sum() / 1e3);
            }
            solutions.push(sol);
        }
        self.voltages = voltages;
        self.solutions = solutions;
        Ok(())
    }

    fn terminal_pu(&self, bus: &str) -> f64 {
        let nominal = self.model.bus(bus).map(|b| b.nominal_ln()).unwrap_or(1.0);
        self.voltages.get(bus).map(|v| sequence_components(v).v1.norm() / nominal).unwrap_or(0.0)
    }

    /// Iterates power flow and device equilibria until the operating point
    /// stops moving.
    fn initialize(&mut self) -> Result<(), SimulationError> {
        let fail = |m: String| SimulationError::new(AbortKind::InitialConditionFailure, 0.0, m);
        for u in &mut self.units {
            match &mut u.dynamic {
                Dynamic::Pv { state, params } => {
                    state.available_power = params.available_at(0.0);
                    state.p_out = state.available_power.min(state.rating).max(0.0);
                }
                Dynamic::Diesel(state) => state.p_out = state.p_setpoint.clamp(0.0, state.rating),
                Dynamic::V2g { state, .. } => *state = state.clone().settle(),
                _ => {}
            }
        }
        for _ in 0..32 {
            self.solve().map_err(|e| fail(e.message))?;
            if !self.regulate_taps() {
                break;
            }
        }
        let mut converged = false;
        for _ in 0..INIT_ITERATIONS {
            let mut moved: f64 = 0.0;
            let freqs: Vec<(String, f64)> = self
                .units
                .iter()
                .filter(|u| matches!(u.dynamic, Dynamic::Btb { .. }))
                .map(|u| (u.id.clone(), self.frequency_at(&u.bus)))
                .collect();
            let terminal: BTreeMap<String, f64> =
                self.units.iter().map(|u| (u.id.clone(), self.terminal_pu(&u.bus))).collect();
            for u in &mut self.units {
                match &mut u.dynamic {
                    Dynamic::Forming { state, params } => {
                        let s = self.measured.get(&u.id).copied().unwrap_or_default();
                        if params.p_nominal_kw.is_none() {
                            state.p_nominal = s.re;
                        }
                        if params.q_nominal_kvar.is_none() {
                            state.q_nominal = s.im;
                        }
                        let f = state.droop_frequency(s.re.clamp(-state.rating, state.rating));
                        moved = moved.max((f - state.frequency).abs());
                        state.frequency = f;
                        state.active_power = s.re;
                        state.reactive_power = s.im;
                        if state.regulate_terminal {
                            let v = terminal[&u.id];
                            let err = state.voltage_target(s.im) - v;
                            moved = moved.max(err.abs());
                            if v > 0.0 {
                                state.emf_pu += err;
                            }
                        }
                    }
                    Dynamic::Btb { state, .. } => {
                        let f = freqs.iter().find(|(id, _)| *id == u.id).map(|x| x.1).unwrap_or(60.0);
                        let before = state.converter_mg.p;
                        state.settle(f);
                        moved = moved.max((state.converter_mg.p - before).abs() * 1e-3);
                    }
                    _ => {}
                }
            }
            self.solve_with(INIT_TOLERANCE_W).map_err(|e| fail(e.message))?;
            log::trace!("initial equilibrium residual {moved:e}");
            if moved < 1e-9 {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(fail("device equilibrium iteration did not settle".into()));
        }
        self.check_bounds().map_err(|e| fail(e.to_string()))?;
        Ok(())
    }

    /// One regulator decision for every regulator; returns whether a tap moved.
    fn regulate_taps(&mut self) -> bool {
        let mut moved = false;
        let regs: Vec<(String, RegulatorSettings, String)> = self
            .model
            .regulators()
            .map(|(b, s)| (b.id.clone(), s.clone(), b.from_bus.clone()))
            .collect();
        for (id, mut settings, from) in regs {
            let Some(v) = self.voltages.get(&settings.controlled_bus).copied() else { continue };
            let through = self
                .solutions
                .iter()
                .find_map(|s| s.branch_currents.get(&id))
                .zip(self.voltages.get(&from))
                .map(|(i, vf)| vf.power_with(i).sum().re / 1e3)
                .unwrap_or(0.0);
            if through < REGULATOR_LOCK_KW {
                continue;
            }
            settings.current_taps = self.op.taps.get(&id).copied().unwrap_or(settings.current_taps);
            let next = regulator_step(&settings, &v);
            if next.current_taps != settings.current_taps {
                moved = true;
                self.op.taps.insert(id, next.current_taps);
            }
        }
        moved
    }

    fn apply_due_events(&mut self, t: f64) -> Result<(), SimulationError> {
        let eps = 1e-6 * self.config.dt;
        let mut topology = false;
        while let Some(ev) = self.events.get(self.next_event) {
            if ev.time > t + eps {
                break;
            }
            let ev = ev.clone();
            self.next_event += 1;
            topology |= self.apply_event(&ev, t)?;
        }
        if topology {
            self.refresh_islands();
        }
        Ok(())
    }

    /// Applies one action; returns whether island membership may change.
    fn apply_event(&mut self, ev: &Event, t: f64) -> Result<bool, SimulationError> {
        let bad = |m: String| SimulationError::new(AbortKind::DeviceAbort, t, m);
        log::debug!("t={t:.4}: {:?}", ev.action);
        match &ev.action {
            EventAction::LoadStatus { load, on } => {
                let l = self.model.loads.iter_mut().find(|l| l.id == *load).ok_or_else(|| bad(format!("unknown load {load}")))?;
                l.status = *on;
                Ok(true)
            }
            EventAction::LoadPower { load, kw, kvar } => {
                let l = self.model.loads.iter_mut().find(|l| l.id == *load).ok_or_else(|| bad(format!("unknown load {load}")))?;
                *l = l.with_total(*kw, *kvar);
                l.status = true;
                Ok(true)
            }
            EventAction::Switch { branch, closed } => {
                if !self.model.branch(branch).is_some_and(|b| b.is_switch()) {
                    return Err(bad(format!("unknown switch {branch}")));
                }
                self.op.switches.set(branch, *closed);
                Ok(true)
            }
            EventAction::DeviceSetpoint { device, p_kw } => {
                let u = self.unit_mut(device).ok_or_else(|| bad(format!("unknown device {device}")))?;
                match &mut u.dynamic {
                    Dynamic::Diesel(s) => s.p_setpoint = *p_kw,
                    Dynamic::Pv { params, .. } => params.schedule = vec![(0.0, *p_kw)],
                    Dynamic::V2g { state, .. } => state.p_setpoint = *p_kw,
                    Dynamic::Btb { state, .. } => state.p_transfer_setpoint = *p_kw,
                    Dynamic::Forming { state, .. } => state.p_nominal = *p_kw,
                }
                Ok(false)
            }
            EventAction::BtbTransfer { device, p_kw } => {
                let u = self.unit_mut(device).ok_or_else(|| bad(format!("unknown device {device}")))?;
                match &mut u.dynamic {
                    Dynamic::Btb { state, .. } => {
                        if p_kw.abs() > state.rating {
                            return Err(bad(format!("{device}: transfer {p_kw} kW exceeds rating")));
                        }
                        state.p_transfer_setpoint = *p_kw;
                        Ok(false)
                    }
                    _ => Err(bad(format!("{device} is not a back-to-back converter"))),
                }
            }
            EventAction::V2g { device, p_kw } => {
                let u = self.unit_mut(device).ok_or_else(|| bad(format!("unknown device {device}")))?;
                match &mut u.dynamic {
                    Dynamic::V2g { state, .. } => {
                        *state = v2g_dispatch(device, V2gCommand { p_kw: *p_kw }, state).map_err(|e| bad(e.to_string()))?;
                        Ok(false)
                    }
                    _ => Err(bad(format!("{device} is not a V2G unit"))),
                }
            }
        }
    }

    fn unit_mut(&mut self, id: &str) -> Option<&mut Unit> {
        self.units.iter_mut().find(|u| u.id == id)
    }

    fn check_bounds(&self) -> Result<(), DeviceError> {
        for u in &self.units {
            if let Dynamic::Forming { state, params } = &u.dynamic {
                if !(state.frequency >= params.f_min && state.frequency <= params.f_max) {
                    return Err(DeviceError::FrequencyOutOfBounds {
                        device: u.id.clone(),
                        hz: state.frequency,
                        min: params.f_min,
                        max: params.f_max,
                    });
                }
            }
        }
        Ok(())
    }

    /// Advances by one step of `config.dt`.
    pub fn step(&mut self) -> Result<(), SimulationError> {
        let dt = self.config.dt;
        let t = (self.steps + 1) as f64 * dt;

        self.apply_due_events(t)?;

        let freqs: BTreeMap<String, f64> = self
            .units
            .iter()
            .filter(|u| matches!(u.dynamic, Dynamic::Btb { .. }))
            .map(|u| (u.id.clone(), self.frequency_at(&u.bus)))
            .collect();
        let terminal: BTreeMap<String, f64> = self
            .units
            .iter()
            .filter(|u| matches!(u.dynamic, Dynamic::Forming { .. }))
            .map(|u| (u.id.clone(), self.terminal_pu(&u.bus)))
            .collect();
        let abort = |e: DeviceError| SimulationError::new(AbortKind::DeviceAbort, t, e.to_string());
        for u in &mut self.units {
            match &mut u.dynamic {
                Dynamic::Forming { state, .. } => {
                    let s = self.measured.get(&u.id).copied().unwrap_or_default();
                    let next = grid_forming_step(state, s.re, dt).map_err(abort)?;
                    *state = grid_forming_voltage_step(&next, s.im, terminal[&u.id], dt).map_err(abort)?;
                }
                Dynamic::Pv { state, params } => *state = pv_step(state, params.available_at(t), dt).map_err(abort)?,
                Dynamic::Diesel(state) => *state = diesel_step(state, dt).map_err(abort)?,
                Dynamic::V2g { state, .. } => *state = grid_following_step(state, dt).map_err(abort)?,
                Dynamic::Btb { state, .. } => {
                    let f = freqs[&u.id];
                    *state = btb_step(state, f, dt).map_err(|e| match e {
                        DeviceError::DcOvervoltage { vdc, pu, .. } => {
                            abort(DeviceError::DcOvervoltage { device: u.id.clone(), vdc, pu })
                        }
                        DeviceError::DcUndervoltage { vdc, pu, .. } => {
                            abort(DeviceError::DcUndervoltage { device: u.id.clone(), vdc, pu })
                        }
                        other => abort(other),
                    })?;
                }
            }
        }
        self.check_bounds().map_err(abort)?;

        if t + 1e-6 * dt >= self.next_regulator {
            self.regulate_taps();
            let interval = self.model.regulators().map(|(_, s)| s.control_interval).fold(f64::INFINITY, f64::min);
            self.next_regulator += interval;
        }

        self.steps += 1;
        self.solve()
    }

    /// Snapshot of the current state.
    pub fn record(&self) -> TimeSeriesRecord {
        let mut devices = BTreeMap::new();
        let mut frequencies = BTreeMap::new();
        let mut btb = BTreeMap::new();
        for u in &self.units {
            match &u.dynamic {
                Dynamic::Forming { state, .. } => {
                    let s = self.measured.get(&u.id).copied().unwrap_or_default();
                    devices.insert(u.id.clone(), DeviceRecord { p_kw: s.re, q_kvar: s.im, rating_kva: state.rating });
                    if self.islands.iter().any(|i| i.grid_forming_device() == Some(u.id.as_str())) {
                        frequencies.insert(u.id.clone(), state.frequency);
                    }
                }
                Dynamic::Pv { state, .. } => {
                    devices.insert(u.id.clone(), DeviceRecord { p_kw: state.p_out, q_kvar: 0.0, rating_kva: state.rating });
                }
                Dynamic::Diesel(state) => {
                    devices.insert(u.id.clone(), DeviceRecord { p_kw: state.p_out, q_kvar: 0.0, rating_kva: state.rating });
                }
                Dynamic::V2g { state, .. } => {
                    devices.insert(u.id.clone(), DeviceRecord { p_kw: state.p, q_kvar: state.q, rating_kva: state.rating });
                }
                Dynamic::Btb { state, .. } => {
                    let rec = |c: &GridFollowingState| DeviceRecord { p_kw: c.p, q_kvar: c.q, rating_kva: c.rating };
                    devices.insert(format!("{}.mg", u.id), rec(&state.converter_mg));
                    devices.insert(format!("{}.remote", u.id), rec(&state.converter_remote));
                    btb.insert(
                        u.id.clone(),
                        BtbRecord {
                            vdc: state.vdc,
                            vdc_pu: state.vdc_pu(),
                            transferred_kw: state.transferred_kw(),
                            mg_side_kw: state.mg_side_kw(),
                            dc_net_power_w: state.dc_net_power,
                            dc_energy_j: state.dc_energy,
                            dc_energy_in_j: state.dc_energy_in,
                        },
                    );
                }
            }
        }
        let vuf = self
            .monitored
            .iter()
            .map(|b| (b.clone(), self.voltages.get(b).and_then(|v| vuf(v).ok())))
            .collect();
        let source_phase_power = self.solutions.iter().flat_map(|s| s.source_power.clone()).collect();
        let balance_residual_va = self
            .solutions
            .iter()
            .map(|s| s.power_balance_residual(&self.model).norm())
            .fold(0.0, f64::max);
        TimeSeriesRecord {
            t: self.time(),
            bus_voltages: self.voltages.clone(),
            devices,
            source_phase_power,
            frequencies,
            btb,
            vuf,
            pf_iterations: self.solutions.iter().map(|s| s.iterations).max().unwrap_or(0),
            pf_mismatch_w: self.solutions.iter().map(|s| s.mismatch).fold(0.0, f64::max),
            balance_residual_va,
        }
    }
}

fn initial_dynamic(kind: &DeviceKind) -> Dynamic {
    match kind {
        DeviceKind::GridForming(p) => Dynamic::Forming { state: GridFormingState::from_params(p), params: p.clone() },
        DeviceKind::Pv(p) => Dynamic::Pv {
            state: PvState { available_power: 0.0, p_out: 0.0, rating: p.rating_kw, time_constant: p.time_constant_s },
            params: p.clone(),
        },
        DeviceKind::Diesel(p) => Dynamic::Diesel(DieselState {
            p_setpoint: p.p_setpoint_kw,
            p_out: 0.0,
            governor_time_constant: p.governor_time_constant_s,
            rating: p.rating_kva,
        }),
        DeviceKind::V2g(p) => {
            let mut s = GridFollowingState::new(p.rating_kva, p.time_constant_s);
            s.p_setpoint = p.p_setpoint_kw;
            s.q_setpoint = p.q_setpoint_kvar;
            Dynamic::V2g { state: s, phase: p.phase }
        }
        DeviceKind::Btb(p) => Dynamic::Btb { state: BtbState::from_params(p), remote: p.remote_bus.clone() },
    }
}

/// Runs `scenario` on `model` and returns the decimated record stream,
/// including the initial state at t = 0.
pub fn run(
    model: &NetworkModel,
    scenario: &Scenario,
    config: &SimulationConfig,
) -> Result<Vec<TimeSeriesRecord>, SimulationError> {
    let mut sim = Simulation::new(model, scenario, *config)?;
    let mut records = vec![sim.record()];
    let n = config.steps();
    for k in 1..=n {
        if let Err(mut e) = sim.step() {
            log::error!("{e}");
            e.records = records;
            return Err(e);
        }
        if k % config.decimation as u64 == 0 || k == n {
            records.push(sim.record());
        }
    }
    Ok(records)
}

/// Runs independent jobs, in parallel when `mode` allows.
pub fn run_batch(
    model: &NetworkModel,
    jobs: &[(Scenario, SimulationConfig)],
    mode: ExecutionMode,
) -> Vec<Result<Vec<TimeSeriesRecord>, SimulationError>> {
    exec::map(mode, jobs, |(scenario, config)| run(model, scenario, config))
}

/// Largest |S|/rating over all rated devices in a record.
pub fn max_loading(record: &TimeSeriesRecord) -> f64 {
    record
        .devices
        .values()
        .filter(|d| d.rating_kva.is_finite() && d.rating_kva > 0.0)
        .map(|d| d.p_kw.hypot(d.q_kvar) / d.rating_kva)
        .fold(0.0, f64::max)
}
