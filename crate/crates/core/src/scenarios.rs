//! Scenario definitions: topology and device changes relative to a base
//! system, plus a timed event script.
//!
//! A scenario file is JSON:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "name": "my-case",
//!   "base_system": "builtin",
//!   "switch_overrides": { "632-645": false },
//!   "load_overrides": [ { "load": "load_634", "kw": 1236.0, "kvar": 290.0 } ],
//!   "device_overrides": [ { "id": "grid_source", "in_service": false } ],
//!   "events": [ { "time": 2.0, "action": "load_status", "load": "load_6701", "on": true } ],
//!   "t_end": 14.0,
//!   "monitored_buses": ["650", "6501"],
//!   "dead_buses": []
//! }
//! ```
//!
//! `base_system` is either `"builtin"` or `{ "file": "<path>" }` pointing at
//! a system description. See `docs/scenario-format.md` for every field.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{BtbMode, DeviceKind, GridFormingParams};
use crate::dynamics::{Event, EventAction};
use crate::network::{build_network, NetworkError, NetworkModel, SwitchPosition, SwitchState, SystemDescription};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: cannot read: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("unsupported format_version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("unknown {kind} \"{id}\"")]
    UnknownTarget { kind: &'static str, id: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSystem {
    #[default]
    Builtin,
    File(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadOverride {
    pub load: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<bool>,
    /// New three-phase total; the phase split is kept.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kvar: Option<f64>,
}

impl LoadOverride {
    pub fn off(load: &str) -> Self {
        LoadOverride { load: load.into(), status: Some(false), kw: None, kvar: None }
    }

    pub fn power(load: &str, kw: f64, kvar: f64) -> Self {
        LoadOverride { load: load.into(), status: None, kw: Some(kw), kvar: Some(kvar) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceOverride {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_service: Option<bool>,
    /// Replaces the whole parameter block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DeviceKind>,
}

impl DeviceOverride {
    pub fn out_of_service(id: &str) -> Self {
        DeviceOverride { id: id.into(), in_service: Some(false), kind: None }
    }

    pub fn replace(id: &str, kind: DeviceKind) -> Self {
        DeviceOverride { id: id.into(), in_service: None, kind: Some(kind) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub format_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub base_system: BaseSystem,
    #[serde(default)]
    pub switch_overrides: SwitchState,
    #[serde(default)]
    pub load_overrides: Vec<LoadOverride>,
    #[serde(default)]
    pub device_overrides: Vec<DeviceOverride>,
    #[serde(default)]
    pub events: Vec<Event>,
    pub t_end: f64,
    #[serde(default)]
    pub monitored_buses: Vec<String>,
    /// Buses intentionally left without a source.
    #[serde(default)]
    pub dead_buses: Vec<String>,
}

impl Scenario {
    pub fn new(name: &str, t_end: f64) -> Self {
        Scenario {
            format_version: FORMAT_VERSION,
            name: name.into(),
            description: String::new(),
            base_system: BaseSystem::Builtin,
            switch_overrides: SwitchState::default(),
            load_overrides: Vec::new(),
            device_overrides: Vec::new(),
            events: Vec::new(),
            t_end,
            monitored_buses: Vec::new(),
            dead_buses: Vec::new(),
        }
    }

    /// The base model this scenario refers to.
    pub fn resolve_base(&self) -> Result<NetworkModel, ScenarioError> {
        match &self.base_system {
            BaseSystem::Builtin => Ok(NetworkModel::builtin()),
            BaseSystem::File(path) => load_system(path),
        }
    }

    /// Builds the model with all overrides applied.
    pub fn apply(&self, base: &NetworkModel) -> Result<NetworkModel, ScenarioError> {
        let mut desc = base.to_description();
        for (id, closed) in self.switch_overrides.iter() {
            let pos = if closed { SwitchPosition::Closed } else { SwitchPosition::Open };
            desc.switches.insert(id.to_string(), pos);
        }
        for o in &self.load_overrides {
            let load = desc
                .loads
                .iter_mut()
                .find(|l| l.id == o.load)
                .ok_or_else(|| ScenarioError::UnknownTarget { kind: "load", id: o.load.clone() })?;
            if o.kw.is_some() || o.kvar.is_some() {
                let total = load.total();
                *load = load.with_total(o.kw.unwrap_or(total.kw), o.kvar.unwrap_or(total.kvar));
            }
            if let Some(s) = o.status {
                load.status = s;
            }
        }
        for o in &self.device_overrides {
            let dev = desc
                .devices
                .iter_mut()
                .find(|d| d.id == o.id)
                .ok_or_else(|| ScenarioError::UnknownTarget { kind: "device", id: o.id.clone() })?;
            if let Some(s) = o.in_service {
                dev.in_service = s;
            }
            if let Some(k) = &o.kind {
                if std::mem::discriminant(k) != std::mem::discriminant(&dev.kind) {
                    return Err(ScenarioError::Invalid(format!("override changes the type of device \"{}\"", o.id)));
                }
                dev.kind = k.clone();
            }
        }
        Ok(build_network(&desc)?)
    }

    /// Full referential and range validation against `base`.
    pub fn validate(&self, base: &NetworkModel) -> Result<(), ScenarioError> {
        if self.format_version != FORMAT_VERSION {
            return Err(ScenarioError::Version(self.format_version));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(ScenarioError::Invalid(format!("t_end must be positive, got {}", self.t_end)));
        }
        let model = self.apply(base)?;
        for bus in self.monitored_buses.iter().chain(&self.dead_buses) {
            if model.bus(bus).is_none() {
                return Err(ScenarioError::UnknownTarget { kind: "bus", id: bus.clone() });
            }
        }
        let mut last = f64::NEG_INFINITY;
        for ev in &self.events {
            if !(ev.time >= 0.0 && ev.time <= self.t_end) {
                return Err(ScenarioError::Invalid(format!("event time {} outside [0, {}]", ev.time, self.t_end)));
            }
            if ev.time < last {
                return Err(ScenarioError::Invalid("events must be sorted by time".into()));
            }
            last = ev.time;
            let (kind, id) = ev.action.target();
            let found = match kind {
                "load" => model.load(id).is_some(),
                "switch" => model.branch(id).is_some_and(|b| b.is_switch()),
                _ => model.device(id).is_some(),
            };
            if !found {
                return Err(ScenarioError::UnknownTarget { kind, id: id.to_string() });
            }
            check_event_against_device(&model, &ev.action)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        fs::write(path, self.to_json() + "\n")
            .map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })
    }
}

fn check_event_against_device(model: &NetworkModel, action: &EventAction) -> Result<(), ScenarioError> {
    let kind_of = |id: &str| model.device(id).map(|d| &d.kind);
    match action {
        EventAction::V2g { device, p_kw } => match kind_of(device) {
            Some(DeviceKind::V2g(p)) if p_kw.abs() <= p.rating_kva => Ok(()),
            Some(DeviceKind::V2g(p)) => Err(ScenarioError::Invalid(format!(
                "V2G command {p_kw} kW on \"{device}\" exceeds {} kVA",
                p.rating_kva
            ))),
            _ => Err(ScenarioError::Invalid(format!("\"{device}\" is not a V2G unit"))),
        },
        EventAction::BtbTransfer { device, p_kw } => match kind_of(device) {
            Some(DeviceKind::Btb(p)) if p_kw.abs() <= p.rating_kva => Ok(()),
            Some(DeviceKind::Btb(_)) => Err(ScenarioError::Invalid(format!("transfer {p_kw} kW exceeds rating"))),
            _ => Err(ScenarioError::Invalid(format!("\"{device}\" is not a back-to-back converter"))),
        },
        _ => Ok(()),
    }
}

fn read(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|e| ScenarioError::Io { path: path.to_path_buf(), message: e.to_string() })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Reads and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, ScenarioError> {
    let mut scenario: Scenario = parse(path, &read(path)?)?;
    if let BaseSystem::File(p) = &scenario.base_system {
        if p.is_relative() {
            let dir = path.parent().unwrap_or(Path::new("."));
            scenario.base_system = BaseSystem::File(dir.join(p));
        }
    }
    let base = scenario.resolve_base()?;
    scenario.validate(&base)?;
    Ok(scenario)
}

/// Reads a system description file and builds the model.
pub fn load_system(path: &Path) -> Result<NetworkModel, ScenarioError> {
    let desc: SystemDescription = parse(path, &read(path)?)?;
    Ok(build_network(&desc)?)
}

/// Built-in scenario names with one-line descriptions.
pub const BUILTIN: [(&str, &str); 3] = [
    ("case-a", "Islanded MG0 with balanced data-centre load beside an unbalanced MG1; no BTB exchange"),
    ("case-b", "Grid-tied MG0 with single-phase V2G export of 50/100/200 kW through the BTB"),
    ("case-c", "Grid-tied MG0 serving a stepped EV charging load, importing by frequency support"),
];

pub fn builtin(name: &str) -> Option<Scenario> {
    match name {
        "case-a" => Some(build_case_a()),
        "case-b" => Some(build_case_b()),
        "case-c" => Some(build_case_c()),
        _ => None,
    }
}

const MG1_SINGLE_PHASE: [&str; 4] = ["load_6451", "load_6461", "load_6111", "load_6521"];
const MG1_BALANCED: [&str; 4] = ["load_6341", "load_6701", "load_6751", "load_6801"];
const MG1_DEVICES: [&str; 3] = ["bess_6801", "pv_6751", "dg_6331"];

fn switches(entries: &[(&str, bool)]) -> SwitchState {
    let mut s = SwitchState::default();
    for (id, closed) in entries {
        s.set(id, *closed);
    }
    s
}

fn load_event(time: f64, load: &str) -> Event {
    Event { time, action: EventAction::LoadStatus { load: load.into(), on: true } }
}

fn battery(rating_kva: f64, energy_kwh: f64) -> GridFormingParams {
    GridFormingParams::battery(rating_kva, energy_kwh)
}

/// MG1 BESS rating in case A; the 3 MVA default cannot carry the final MG1 load.
pub const CASE_A_MG1_BESS_KVA: f64 = 4500.0;
/// MG1 BESS source impedance (pu on 1 MVA) in case A.
pub const CASE_A_MG1_SOURCE_Z: Complex64 = Complex64::new(0.0, 0.035);
/// MG0 diesel share of the rated MG0 load in case A.
pub const CASE_A_DG_SHARE: f64 = 0.6;

/// Data-centre isolation: MG0 and MG1 islanded from the grid, joined only
/// through the BTB, which holds zero transfer.
pub fn build_case_a() -> Scenario {
    let mut s = Scenario::new("case-a", 14.0);
    s.description = BUILTIN[0].1.into();
    s.switch_overrides = switches(&[("grid-pcc", false), ("pcc-650", false), ("pcc-6501", true), ("632-645", false)]);

    let data_centre_kw = 1236.0;
    s.load_overrides.push(LoadOverride::power("load_634", data_centre_kw, 290.0));
    for l in ["load_645", "load_646", "load_6701", "load_6341"].into_iter().chain(MG1_SINGLE_PHASE) {
        s.load_overrides.push(LoadOverride::off(l));
    }

    let mg0_load_kw = data_centre_kw + 200.0 + 843.0 + 1155.0;
    let dg = crate::devices::DieselParams {
        rating_kva: 3000.0,
        p_setpoint_kw: CASE_A_DG_SHARE * mg0_load_kw,
        governor_time_constant_s: 0.5,
    };
    s.device_overrides.push(DeviceOverride::replace("dg_633", DeviceKind::Diesel(dg)));
    let mut mg1 = battery(CASE_A_MG1_BESS_KVA, 4500.0);
    mg1.source_impedance_pu = CASE_A_MG1_SOURCE_Z;
    s.device_overrides.push(DeviceOverride::replace("bess_6801", DeviceKind::GridForming(mg1)));
    for d in ["grid_source", "v2g_645", "v2g_646", "pv_6751", "dg_6331"] {
        s.device_overrides.push(DeviceOverride::out_of_service(d));
    }

    // The last entry is 6451; the published list names 6521 twice.
    for (t, l) in [
        (2.0, "load_6701"),
        (4.0, "load_6341"),
        (6.0, "load_6111"),
        (8.0, "load_6521"),
        (10.0, "load_6461"),
        (12.0, "load_6451"),
    ] {
        s.events.push(load_event(t, l));
    }
    s.monitored_buses = vec!["680".into(), "6801".into(), "650".into(), "6501".into()];
    s
}

/// Case B BESS rating; 2 MVA cannot carry the remaining MG0 load.
pub const CASE_B_BESS_KVA: f64 = 4000.0;
/// BESS source impedance (pu on 1 MVA) calibrated for the MG0 unbalance level.
pub const CASE_B_SOURCE_Z: Complex64 = Complex64::new(0.0, 0.027);

fn mg1_dark(s: &mut Scenario) {
    for l in MG1_BALANCED.into_iter().chain(MG1_SINGLE_PHASE) {
        s.load_overrides.push(LoadOverride::off(l));
    }
    for d in MG1_DEVICES {
        s.device_overrides.push(DeviceOverride::out_of_service(d));
    }
}

/// V2G export: MG0 grid-tied through the BTB, phase-B residential load and
/// V2G units on the 645 lateral.
pub fn build_case_b() -> Scenario {
    let mut s = Scenario::new("case-b", 10.0);
    s.description = BUILTIN[1].1.into();
    s.switch_overrides = switches(&[
        ("grid-pcc", true),
        ("pcc-650", false),
        ("pcc-6501", false),
        ("632-633", false),
        ("671-692", false),
    ]);
    for l in ["load_670", "load_634", "load_675"] {
        s.load_overrides.push(LoadOverride::off(l));
    }
    mg1_dark(&mut s);
    let mut bess = battery(CASE_B_BESS_KVA, 4000.0);
    bess.source_impedance_pu = CASE_B_SOURCE_Z;
    s.device_overrides.push(DeviceOverride::replace("bess_680", DeviceKind::GridForming(bess)));
    for d in ["pv_675", "dg_633"] {
        s.device_overrides.push(DeviceOverride::out_of_service(d));
    }

    let btb = |time: f64, p_kw: f64| Event { time, action: EventAction::BtbTransfer { device: "btb".into(), p_kw } };
    let v2g = |time: f64, dev: &str, p_kw: f64| Event {
        time,
        action: EventAction::V2g { device: dev.into(), p_kw },
    };
    s.events = vec![
        btb(4.0, 50.0),
        v2g(4.0, "v2g_645", 50.0),
        btb(6.0, 100.0),
        v2g(6.0, "v2g_646", 50.0),
        btb(8.0, 200.0),
        v2g(8.0, "v2g_645", 100.0),
        v2g(8.0, "v2g_646", 100.0),
    ];
    s.monitored_buses = vec!["680".into(), "650".into(), "pcc".into()];
    s
}

/// Case C droop gain: 3465 kW above the nominal point gives 59.1 Hz.
pub const CASE_C_DROOP_HZ_PER_KW: f64 = 2.597e-4;
/// BESS output (kW) at which MG0 runs at 60 Hz in case C.
pub const CASE_C_P_NOMINAL_KW: f64 = -1150.0;
/// Frequency-support threshold f_nom − deadband (Hz).
pub const CASE_C_SUPPORT_THRESHOLD_HZ: f64 = 59.25;
pub const CASE_C_SUPPORT_GAIN_KW_PER_HZ: f64 = 1000.0;
/// PV power available during case C (kW).
pub const CASE_C_PV_KW: f64 = 1000.0;
/// BESS terminal voltage setpoint (pu) in case C.
pub const CASE_C_V_SETPOINT: f64 = 0.965;
pub const CASE_C_SOURCE_Z: Complex64 = Complex64::new(0.0, 0.05);

/// Evacuation charging: EV load at 680 steps up while the BTB imports once
/// MG0 frequency sags below the support threshold.
pub fn build_case_c() -> Scenario {
    let mut s = Scenario::new("case-c", 20.0);
    s.description = BUILTIN[2].1.into();
    s.switch_overrides = switches(&[
        ("grid-pcc", true),
        ("pcc-650", false),
        ("pcc-6501", false),
        ("632-633", false),
        ("632-645", false),
    ]);
    for l in ["load_670", "load_675", "load_634", "load_645", "load_646", "load_680"] {
        s.load_overrides.push(LoadOverride::off(l));
    }
    mg1_dark(&mut s);

    let mut bess = battery(4000.0, 4000.0);
    bess.droop_hz_per_kw = CASE_C_DROOP_HZ_PER_KW;
    bess.p_nominal_kw = Some(CASE_C_P_NOMINAL_KW);
    bess.v_setpoint_pu = CASE_C_V_SETPOINT;
    bess.source_impedance_pu = CASE_C_SOURCE_Z;
    s.device_overrides.push(DeviceOverride::replace("bess_680", DeviceKind::GridForming(bess)));
    let pv = crate::devices::PvParams { rating_kw: 1600.0, schedule: vec![(0.0, CASE_C_PV_KW)], time_constant_s: 0.1 };
    s.device_overrides.push(DeviceOverride::replace("pv_675", DeviceKind::Pv(pv)));
    let mut btb = crate::devices::BtbParams::new("pcc");
    btb.mode = BtbMode::FrequencySupport {
        gain_kw_per_hz: CASE_C_SUPPORT_GAIN_KW_PER_HZ,
        deadband_hz: crate::devices::NOMINAL_FREQUENCY - CASE_C_SUPPORT_THRESHOLD_HZ,
    };
    s.device_overrides.push(DeviceOverride::replace("btb", DeviceKind::Btb(btb)));
    for d in ["dg_633", "v2g_645", "v2g_646"] {
        s.device_overrides.push(DeviceOverride::out_of_service(d));
    }

    let ev = |time: f64, kw: f64| Event {
        time,
        action: EventAction::LoadPower { load: "load_680".into(), kw, kvar: kw * 660.0 / 1155.0 },
    };
    s.events = vec![ev(5.0, 1155.0), ev(10.0, 2310.0), ev(15.0, 3465.0)];
    s.monitored_buses = vec!["680".into(), "650".into(), "pcc".into()];
    s
}
