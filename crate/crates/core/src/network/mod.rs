//! Static electrical model: buses, branches with full phase-impedance
//! matrices, loads, shunt capacitors, switches and device placement.
//!
//! A [`NetworkModel`] is immutable once built. Mutable operating quantities
//! (switch positions, regulator taps, load status) live in the simulation.

mod ieee13;
mod regulator;
mod topology;

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{DeviceKind, DeviceSpec};
use crate::phasor::{Phase, PhaseSet};

pub use ieee13::{line_configuration, twin_feeder_description, LINE_CONFIGURATIONS};
pub use regulator::{regulator_step, RegulatorSettings};
pub use topology::{find_islands, Island, SwitchState};

/// Three-phase power base used for every per-unit quantity.
pub const S_BASE_VA: f64 = 1.0e6;

pub const FEET_PER_MILE: f64 = 5280.0;

/// Series resistance given to a closed switch with no impedance of its own.
pub const IDEAL_SWITCH_OHMS: f64 = 1.0e-4;

pub type BusId = String;
pub type BranchId = String;

/// 3×3 complex matrix indexed by phase.
pub type PhaseMatrix = [[Complex64; 3]; 3];

pub fn zero_matrix() -> PhaseMatrix {
    [[Complex64::new(0.0, 0.0); 3]; 3]
}

pub fn diagonal_matrix(z: Complex64, phases: PhaseSet) -> PhaseMatrix {
    let mut m = zero_matrix();
    for p in phases.iter() {
        m[p.index()][p.index()] = z;
    }
    m
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("duplicate bus id \"{0}\"")]
    DuplicateBus(BusId),
    #[error("duplicate {kind} id \"{id}\"")]
    DuplicateId { kind: &'static str, id: String },
    #[error("{context} references unknown bus \"{bus}\"")]
    UnknownBus { context: String, bus: BusId },
    #[error("branch \"{0}\" connects a bus to itself")]
    SelfLoop(BranchId),
    #[error("branch \"{branch}\" has nonzero impedance on absent phase {phase}")]
    AbsentPhaseImpedance { branch: BranchId, phase: Phase },
    #[error("{context} uses phase {phase} which bus \"{bus}\" does not carry")]
    PhaseMismatch { context: String, bus: BusId, phase: Phase },
    #[error("branch \"{branch}\": {reason}")]
    InvalidBranch { branch: BranchId, reason: String },
    #[error("unknown line configuration \"{0}\"")]
    UnknownConfiguration(String),
    #[error("switch state names \"{0}\", which is not a switch branch")]
    NotASwitch(BranchId),
    #[error("load \"{0}\": {1}")]
    InvalidLoad(String, String),
    #[error("device \"{0}\": {1}")]
    InvalidDevice(String, String),
    #[error("capacitor \"{0}\": rating must be positive")]
    InvalidCapacitor(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: BusId,
    /// Line-to-line nominal voltage in volts.
    pub nominal_voltage: f64,
    pub phases: PhaseSet,
}

impl Bus {
    pub fn nominal_ln(&self) -> f64 {
        self.nominal_voltage / 3f64.sqrt()
    }
}

/// Grounded-wye/grounded-wye two-winding transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerData {
    pub rating_kva: f64,
    pub primary_voltage: f64,
    pub secondary_voltage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BranchKind {
    Line { length_ft: f64 },
    Transformer(TransformerData),
    Regulator(RegulatorSettings),
    Switch { normally_closed: bool },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub id: BranchId,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub phases: PhaseSet,
    pub kind: BranchKind,
    /// Ohms for lines, switches and regulators; per-unit leakage on the
    /// transformer's own rating for transformers.
    pub impedance: PhaseMatrix,
}

impl Branch {
    pub fn is_switch(&self) -> bool {
        matches!(self.kind, BranchKind::Switch { .. })
    }
}

/// Load power per phase in kW / kVAR.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhasePower {
    pub kw: f64,
    pub kvar: f64,
}

impl PhasePower {
    pub fn new(kw: f64, kvar: f64) -> Self {
        PhasePower { kw, kvar }
    }

    pub fn to_va(self) -> Complex64 {
        Complex64::new(self.kw * 1e3, self.kvar * 1e3)
    }

    pub fn is_zero(&self) -> bool {
        self.kw == 0.0 && self.kvar == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadModel {
    #[default]
    ConstantPower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Load {
    pub id: String,
    pub bus: BusId,
    pub per_phase: BTreeMap<Phase, PhasePower>,
    #[serde(default)]
    pub model: LoadModel,
    #[serde(default = "default_true")]
    pub status: bool,
}

impl Load {
    pub fn balanced(id: &str, bus: &str, total_kw: f64, total_kvar: f64) -> Self {
        let per = PhasePower::new(total_kw / 3.0, total_kvar / 3.0);
        Load {
            id: id.to_string(),
            bus: bus.to_string(),
            per_phase: Phase::ALL.iter().map(|&p| (p, per)).collect(),
            model: LoadModel::ConstantPower,
            status: true,
        }
    }

    pub fn single_phase(id: &str, bus: &str, phase: Phase, kw: f64, kvar: f64) -> Self {
        Load {
            id: id.to_string(),
            bus: bus.to_string(),
            per_phase: [(phase, PhasePower::new(kw, kvar))].into_iter().collect(),
            model: LoadModel::ConstantPower,
            status: true,
        }
    }

    pub fn total(&self) -> PhasePower {
        self.per_phase.values().fold(PhasePower::default(), |acc, p| {
            PhasePower::new(acc.kw + p.kw, acc.kvar + p.kvar)
        })
    }

    /// Rescales to a new three-phase total while keeping the phase split.
    pub fn with_total(&self, kw: f64, kvar: f64) -> Load {
        let n = self.per_phase.len().max(1) as f64;
        let mut out = self.clone();
        for v in out.per_phase.values_mut() {
            *v = PhasePower::new(kw / n, kvar / n);
        }
        out
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShuntCapacitor {
    pub id: String,
    pub bus: BusId,
    /// Three-phase rating in kVAR at nominal voltage.
    pub rating_kvar: f64,
    #[serde(default = "default_true")]
    pub status: bool,
}

/// Line impedance given either by a standard configuration code or by an
/// explicit per-mile matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineImpedance {
    Configuration(String),
    OhmsPerMile(PhaseMatrix),
}

/// One branch as written in a system description file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub id: BranchId,
    pub from: BusId,
    pub to: BusId,
    pub phases: PhaseSet,
    pub kind: BranchKind,
    /// Lines and switched line sections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub line_impedance: Option<LineImpedance>,
    /// Length for switched line sections.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_ft: Option<f64>,
    /// Transformer leakage (per-unit on its rating) or regulator series
    /// impedance (ohms), applied per phase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub series_impedance: Option<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwitchPosition {
    Open,
    Closed,
}

/// Serialized form of a system: the JSON system description file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SystemDescription {
    #[serde(default)]
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<BranchSpec>,
    #[serde(default)]
    pub loads: Vec<Load>,
    #[serde(default)]
    pub capacitors: Vec<ShuntCapacitor>,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    /// Initial positions overriding each switch's normal state.
    #[serde(default)]
    pub switches: BTreeMap<BranchId, SwitchPosition>,
}

#[derive(Debug, Clone)]
pub struct NetworkModel {
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    pub loads: Vec<Load>,
    pub capacitors: Vec<ShuntCapacitor>,
    pub devices: Vec<DeviceSpec>,
    initial_switches: SwitchState,
    bus_index: HashMap<BusId, usize>,
    branch_index: HashMap<BranchId, usize>,
}

impl NetworkModel {
    pub fn builtin() -> NetworkModel {
        build_network(&twin_feeder_description()).expect("built-in system is valid")
    }

    pub fn bus(&self, id: &str) -> Option<&Bus> {
        self.bus_index.get(id).map(|&i| &self.buses[i])
    }

    pub fn bus_idx(&self, id: &str) -> Option<usize> {
        self.bus_index.get(id).copied()
    }

    pub fn branch(&self, id: &str) -> Option<&Branch> {
        self.branch_index.get(id).map(|&i| &self.branches[i])
    }

    pub fn branch_idx(&self, id: &str) -> Option<usize> {
        self.branch_index.get(id).copied()
    }

    pub fn load(&self, id: &str) -> Option<&Load> {
        self.loads.iter().find(|l| l.id == id)
    }

    pub fn device(&self, id: &str) -> Option<&DeviceSpec> {
        self.devices.iter().find(|d| d.id == id)
    }

    pub fn switch_ids(&self) -> impl Iterator<Item = &str> {
        self.branches.iter().filter(|b| b.is_switch()).map(|b| b.id.as_str())
    }

    /// Switch positions at construction time.
    pub fn initial_switches(&self) -> &SwitchState {
        &self.initial_switches
    }

    pub fn regulators(&self) -> impl Iterator<Item = (&Branch, &RegulatorSettings)> {
        self.branches.iter().filter_map(|b| match &b.kind {
            BranchKind::Regulator(s) => Some((b, s)),
            _ => None,
        })
    }

    /// Converts back to the description schema.
    pub fn to_description(&self) -> SystemDescription {
        let branches = self
            .branches
            .iter()
            .map(|b| {
                let (line_impedance, length_ft, series_impedance) = match &b.kind {
                    BranchKind::Line { length_ft } => {
                        let per_mile = scale_matrix(&b.impedance, FEET_PER_MILE / length_ft);
                        (Some(LineImpedance::OhmsPerMile(per_mile)), None, None)
                    }
                    BranchKind::Switch { .. } => {
                        if is_zero_matrix(&b.impedance) {
                            (None, None, None)
                        } else {
                            // Switched section: recorded per 1000 ft.
                            let per_mile = scale_matrix(&b.impedance, FEET_PER_MILE / 1000.0);
                            (Some(LineImpedance::OhmsPerMile(per_mile)), Some(1000.0), None)
                        }
                    }
                    BranchKind::Transformer(_) | BranchKind::Regulator(_) => {
                        let p = b.phases.iter().next().unwrap_or(Phase::A).index();
                        (None, None, Some(b.impedance[p][p]))
                    }
                };
                BranchSpec {
                    id: b.id.clone(),
                    from: b.from_bus.clone(),
                    to: b.to_bus.clone(),
                    phases: b.phases,
                    kind: b.kind.clone(),
                    line_impedance,
                    length_ft,
                    series_impedance,
                }
            })
            .collect();
        SystemDescription {
            buses: self.buses.clone(),
            branches,
            loads: self.loads.clone(),
            capacitors: self.capacitors.clone(),
            devices: self.devices.clone(),
            switches: self
                .initial_switches
                .iter()
                .map(|(k, closed)| {
                    let pos = if closed { SwitchPosition::Closed } else { SwitchPosition::Open };
                    (k.to_string(), pos)
                })
                .collect(),
        }
    }
}

pub fn scale_matrix(m: &PhaseMatrix, k: f64) -> PhaseMatrix {
    let mut out = *m;
    for row in out.iter_mut() {
        for v in row.iter_mut() {
            *v *= k;
        }
    }
    out
}

pub fn is_zero_matrix(m: &PhaseMatrix) -> bool {
    m.iter().flatten().all(|v| v.norm() == 0.0)
}

fn check_absent_phases(id: &str, m: &PhaseMatrix, phases: PhaseSet) -> Result<(), NetworkError> {
    for p in Phase::ALL {
        if phases.contains(p) {
            continue;
        }
        let i = p.index();
        if (0..3).any(|j| m[i][j].norm() != 0.0 || m[j][i].norm() != 0.0) {
            return Err(NetworkError::AbsentPhaseImpedance { branch: id.to_string(), phase: p });
        }
    }
    Ok(())
}

fn resolve_line(spec: &BranchSpec, length_ft: f64) -> Result<PhaseMatrix, NetworkError> {
    let per_mile = match spec.line_impedance.as_ref() {
        Some(LineImpedance::Configuration(code)) => {
            line_configuration(code).ok_or_else(|| NetworkError::UnknownConfiguration(code.clone()))?
        }
        Some(LineImpedance::OhmsPerMile(m)) => *m,
        None => {
            return Err(NetworkError::InvalidBranch {
                branch: spec.id.clone(),
                reason: "line needs an impedance".into(),
            })
        }
    };
    check_absent_phases(&spec.id, &per_mile, spec.phases)?;
    Ok(scale_matrix(&per_mile, length_ft / FEET_PER_MILE))
}

/// Validates a description and builds the immutable model.
pub fn build_network(desc: &SystemDescription) -> Result<NetworkModel, NetworkError> {
    let mut bus_index = HashMap::new();
    for (i, b) in desc.buses.iter().enumerate() {
        if bus_index.insert(b.id.clone(), i).is_some() {
            return Err(NetworkError::DuplicateBus(b.id.clone()));
        }
        if !(b.nominal_voltage > 0.0) {
            return Err(NetworkError::InvalidBranch {
                branch: b.id.clone(),
                reason: "bus nominal voltage must be positive".into(),
            });
        }
    }
    let lookup = |context: &str, bus: &str| -> Result<&Bus, NetworkError> {
        bus_index.get(bus).map(|&i| &desc.buses[i]).ok_or_else(|| NetworkError::UnknownBus {
            context: context.to_string(),
            bus: bus.to_string(),
        })
    };
    let check_phases = |context: &str, bus: &Bus, phases: PhaseSet| -> Result<(), NetworkError> {
        match phases.iter().find(|p| !bus.phases.contains(*p)) {
            Some(phase) => Err(NetworkError::PhaseMismatch {
                context: context.to_string(),
                bus: bus.id.clone(),
                phase,
            }),
            None => Ok(()),
        }
    };

    let mut branches = Vec::with_capacity(desc.branches.len());
    let mut branch_index = HashMap::new();
    for spec in &desc.branches {
        let ctx = format!("branch \"{}\"", spec.id);
        let from = lookup(&ctx, &spec.from)?;
        let to = lookup(&ctx, &spec.to)?;
        if spec.from == spec.to {
            return Err(NetworkError::SelfLoop(spec.id.clone()));
        }
        if spec.phases.is_empty() {
            return Err(NetworkError::InvalidBranch { branch: spec.id.clone(), reason: "no phases".into() });
        }
        check_phases(&ctx, from, spec.phases)?;
        check_phases(&ctx, to, spec.phases)?;
        let impedance = match &spec.kind {
            BranchKind::Line { length_ft } => {
                if !(*length_ft > 0.0) {
                    return Err(NetworkError::InvalidBranch {
                        branch: spec.id.clone(),
                        reason: "line length must be positive".into(),
                    });
                }
                resolve_line(spec, *length_ft)?
            }
            BranchKind::Switch { .. } => match spec.line_impedance {
                Some(_) => resolve_line(spec, spec.length_ft.unwrap_or(FEET_PER_MILE))?,
                None => zero_matrix(),
            },
            BranchKind::Transformer(t) => {
                if !(t.rating_kva > 0.0 && t.primary_voltage > 0.0 && t.secondary_voltage > 0.0) {
                    return Err(NetworkError::InvalidBranch {
                        branch: spec.id.clone(),
                        reason: "transformer ratings must be positive".into(),
                    });
                }
                let z = spec.series_impedance.unwrap_or(Complex64::new(0.01, 0.02));
                diagonal_matrix(z, spec.phases)
            }
            BranchKind::Regulator(settings) => {
                lookup(&ctx, &settings.controlled_bus)?;
                if settings.current_taps.iter().any(|t| t.unsigned_abs() > settings.tap_count / 2) {
                    return Err(NetworkError::InvalidBranch {
                        branch: spec.id.clone(),
                        reason: "tap position outside range".into(),
                    });
                }
                let z = spec.series_impedance.unwrap_or(Complex64::new(0.0, 0.01));
                diagonal_matrix(z, spec.phases)
            }
        };
        if branch_index.insert(spec.id.clone(), branches.len()).is_some() {
            return Err(NetworkError::DuplicateId { kind: "branch", id: spec.id.clone() });
        }
        branches.push(Branch {
            id: spec.id.clone(),
            from_bus: spec.from.clone(),
            to_bus: spec.to.clone(),
            phases: spec.phases,
            kind: spec.kind.clone(),
            impedance,
        });
    }

    let mut ids = HashMap::new();
    for load in &desc.loads {
        let ctx = format!("load \"{}\"", load.id);
        if ids.insert(load.id.clone(), ()).is_some() {
            return Err(NetworkError::DuplicateId { kind: "load", id: load.id.clone() });
        }
        let bus = lookup(&ctx, &load.bus)?;
        let phases: Vec<Phase> = load.per_phase.keys().copied().collect();
        check_phases(&ctx, bus, PhaseSet::from_phases(&phases))?;
        if load.per_phase.values().any(|p| !p.kw.is_finite() || !p.kvar.is_finite()) {
            return Err(NetworkError::InvalidLoad(load.id.clone(), "non-finite power".into()));
        }
    }
    for cap in &desc.capacitors {
        lookup(&format!("capacitor \"{}\"", cap.id), &cap.bus)?;
        if !(cap.rating_kvar > 0.0) {
            return Err(NetworkError::InvalidCapacitor(cap.id.clone()));
        }
    }
    let mut dev_ids = HashMap::new();
    for dev in &desc.devices {
        let ctx = format!("device \"{}\"", dev.id);
        if dev_ids.insert(dev.id.clone(), ()).is_some() {
            return Err(NetworkError::DuplicateId { kind: "device", id: dev.id.clone() });
        }
        let bus = lookup(&ctx, &dev.bus)?;
        match &dev.kind {
            DeviceKind::V2g(p) => check_phases(&ctx, bus, PhaseSet::single(p.phase))?,
            DeviceKind::Btb(p) => {
                let remote = lookup(&ctx, &p.remote_bus)?;
                if p.remote_bus == dev.bus {
                    return Err(NetworkError::InvalidDevice(dev.id.clone(), "both terminals on one bus".into()));
                }
                check_phases(&ctx, remote, PhaseSet::ABC)?;
                check_phases(&ctx, bus, PhaseSet::ABC)?;
            }
            _ => check_phases(&ctx, bus, PhaseSet::ABC)?,
        }
        dev.kind.validate().map_err(|e| NetworkError::InvalidDevice(dev.id.clone(), e))?;
    }

    let mut initial = SwitchState::default();
    for b in &branches {
        if let BranchKind::Switch { normally_closed } = b.kind {
            initial.set(&b.id, normally_closed);
        }
    }
    for (id, pos) in &desc.switches {
        match branch_index.get(id) {
            Some(&i) if branches[i].is_switch() => initial.set(id, *pos == SwitchPosition::Closed),
            _ => return Err(NetworkError::NotASwitch(id.clone())),
        }
    }

    Ok(NetworkModel {
        buses: desc.buses.clone(),
        branches,
        loads: desc.loads.clone(),
        capacitors: desc.capacitors.clone(),
        devices: desc.devices.clone(),
        initial_switches: initial,
        bus_index,
        branch_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus() -> SystemDescription {
        SystemDescription {
            buses: vec![
                Bus { id: "1".into(), nominal_voltage: 4160.0, phases: PhaseSet::ABC },
                Bus { id: "2".into(), nominal_voltage: 4160.0, phases: PhaseSet::ABC },
            ],
            branches: vec![BranchSpec {
                id: "1-2".into(),
                from: "1".into(),
                to: "2".into(),
                phases: PhaseSet::ABC,
                kind: BranchKind::Line { length_ft: 1000.0 },
                line_impedance: Some(LineImpedance::Configuration("601".into())),
                length_ft: None,
                series_impedance: None,
            }],
            ..Default::default()
        }
    }

    #[test]
    fn empty_description_gives_empty_model() {
        let m = build_network(&SystemDescription::default()).unwrap();
        assert!(m.buses.is_empty());
        assert!(m.branches.is_empty());
    }

    #[test]
    fn branch_to_undefined_bus_is_rejected() {
        let mut d = two_bus();
        d.branches[0].to = "999".into();
        assert!(matches!(build_network(&d), Err(NetworkError::UnknownBus { bus, .. }) if bus == "999"));
    }

    #[test]
    fn duplicate_bus_is_rejected() {
        let mut d = two_bus();
        d.buses.push(d.buses[0].clone());
        assert_eq!(build_network(&d).unwrap_err(), NetworkError::DuplicateBus("1".into()));
    }

    #[test]
    fn absent_phase_impedance_is_rejected() {
        let mut d = two_bus();
        d.branches[0].phases = PhaseSet::from_phases(&[Phase::A, Phase::B]);
        let err = build_network(&d).unwrap_err();
        assert_eq!(err, NetworkError::AbsentPhaseImpedance { branch: "1-2".into(), phase: Phase::C });
    }

    #[test]
    fn self_loop_is_rejected() {
        let mut d = two_bus();
        d.branches[0].to = "1".into();
        assert_eq!(build_network(&d).unwrap_err(), NetworkError::SelfLoop("1-2".into()));
    }

    #[test]
    fn branch_phases_must_exist_at_buses() {
        let mut d = two_bus();
        d.buses[1].phases = PhaseSet::single(Phase::A);
        assert!(matches!(build_network(&d), Err(NetworkError::PhaseMismatch { .. })));
    }

    #[test]
    fn line_impedance_scales_with_length() {
        let m = build_network(&two_bus()).unwrap();
        let z = m.branch("1-2").unwrap().impedance[0][0];
        let per_mile = line_configuration("601").unwrap()[0][0];
        assert!((z - per_mile * (1000.0 / 5280.0)).norm() < 1e-15);
    }

    #[test]
    fn switch_state_must_name_a_switch() {
        let mut d = two_bus();
        d.switches.insert("1-2".into(), SwitchPosition::Open);
        assert_eq!(build_network(&d).unwrap_err(), NetworkError::NotASwitch("1-2".into()));
    }
}
