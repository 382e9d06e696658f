//! Dynamic models of the power-conversion equipment.
//!
//! Every device is described by a serializable parameter block
//! ([`DeviceSpec`]) and, during a run, by a dynamic state that the
//! simulation loop advances once per time step. First-order lags use the
//! exact exponential update for an input held over the step; the DC link
//! uses trapezoidal integration of its stored energy.

mod btb;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::BusId;
use crate::phasor::Phase;

pub use btb::{btb_step, dc_link_rate, BtbMode, BtbParams, BtbState};

pub const NOMINAL_FREQUENCY: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("{device}: measured power {measured_kw:.3} kW exceeds rating {rating_kva:.1} kVA")]
    RatingExceeded { device: String, measured_kw: f64, rating_kva: f64 },
    #[error("{device}: DC-link overvoltage {vdc:.1} V ({pu:.4} pu)")]
    DcOvervoltage { device: String, vdc: f64, pu: f64 },
    #[error("{device}: DC-link undervoltage {vdc:.1} V ({pu:.4} pu)")]
    DcUndervoltage { device: String, vdc: f64, pu: f64 },
    #[error("{device}: frequency {hz:.4} Hz outside [{min}, {max}] Hz")]
    FrequencyOutOfBounds { device: String, hz: f64, min: f64, max: f64 },
    #[error("{device}: command {command_kw} kW exceeds {rating_kva} kVA rating")]
    CommandExceedsRating { device: String, command_kw: f64, rating_kva: f64 },
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
}

fn check_dt(dt: f64) -> Result<(), DeviceError> {
    if dt > 0.0 && dt.is_finite() {
        Ok(())
    } else {
        Err(DeviceError::InvalidStep(dt))
    }
}

/// Exact response of `tau·x' = target − x` over `dt` with `target` held.
pub fn first_order(x: f64, target: f64, tau: f64, dt: f64) -> f64 {
    if tau <= 0.0 {
        return target;
    }
    target + (x - target) * (-dt / tau).exp()
}

/// Scales `(p, q)` onto the rating circle if it lies outside it.
pub fn saturate(p: f64, q: f64, rating: f64) -> (f64, f64, bool) {
    let s = p.hypot(q);
    if s > rating && s > 0.0 {
        let k = rating / s;
        (p * k, q * k, true)
    } else {
        (p, q, false)
    }
}

// ---------------------------------------------------------------------------
// Parameter blocks
// ---------------------------------------------------------------------------

fn default_f_nominal() -> f64 {
    NOMINAL_FREQUENCY
}
fn default_v_setpoint() -> f64 {
    1.0
}
fn default_q_droop() -> f64 {
    0.05
}
fn default_tau_f() -> f64 {
    0.2
}
fn default_f_min() -> f64 {
    55.0
}
fn default_f_max() -> f64 {
    65.0
}
fn default_source_z() -> Complex64 {
    Complex64::new(0.0, 0.05)
}

mod unlimited {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Grid-forming source: balanced EMF behind a series impedance, with P–f
/// and Q–V droop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFormingParams {
    /// `null` in files for an unlimited source.
    #[serde(with = "unlimited")]
    pub rating_kva: f64,
    /// Zero for an unlimited source such as the utility grid.
    #[serde(default)]
    pub energy_capacity_kwh: f64,
    #[serde(default)]
    pub initial_energy_kwh: f64,
    #[serde(default = "default_f_nominal")]
    pub f_nominal: f64,
    /// Frequency droop gain m_p in Hz per kW.
    #[serde(default)]
    pub droop_hz_per_kw: f64,
    /// Power at which the unit runs at nominal frequency. `None` takes the
    /// output found by the initial power flow.
    #[serde(default)]
    pub p_nominal_kw: Option<f64>,
    #[serde(default = "default_v_setpoint")]
    pub v_setpoint_pu: f64,
    /// Terminal-voltage reduction per unit of reactive output on the
    /// device rating.
    #[serde(default = "default_q_droop")]
    pub q_droop_pu: f64,
    /// Regulate the terminal voltage; otherwise the EMF stays at the
    /// setpoint.
    #[serde(default = "in_service_default")]
    pub regulate_terminal: bool,
    #[serde(default)]
    pub q_nominal_kvar: Option<f64>,
    /// Series source impedance in per-unit on 1 MVA, identical on each phase.
    #[serde(default = "default_source_z")]
    pub source_impedance_pu: Complex64,
    #[serde(default = "default_tau_f")]
    pub filter_time_constant_s: f64,
    #[serde(default = "default_f_min")]
    pub f_min: f64,
    #[serde(default = "default_f_max")]
    pub f_max: f64,
}

impl GridFormingParams {
    pub fn battery(rating_kva: f64, energy_kwh: f64) -> Self {
        GridFormingParams {
            rating_kva,
            energy_capacity_kwh: energy_kwh,
            initial_energy_kwh: 0.5 * energy_kwh,
            f_nominal: NOMINAL_FREQUENCY,
            droop_hz_per_kw: 0.5 / rating_kva,
            p_nominal_kw: None,
            v_setpoint_pu: 1.0,
            q_droop_pu: default_q_droop(),
            regulate_terminal: true,
            q_nominal_kvar: None,
            source_impedance_pu: default_source_z(),
            filter_time_constant_s: default_tau_f(),
            f_min: default_f_min(),
            f_max: default_f_max(),
        }
    }

    /// Stiff utility source at nominal frequency and 1.0 pu.
    pub fn stiff_grid(source_impedance_pu: Complex64) -> Self {
        GridFormingParams {
            rating_kva: f64::INFINITY,
            energy_capacity_kwh: 0.0,
            initial_energy_kwh: 0.0,
            droop_hz_per_kw: 0.0,
            p_nominal_kw: Some(0.0),
            q_droop_pu: 0.0,
            regulate_terminal: false,
            q_nominal_kvar: Some(0.0),
            source_impedance_pu,
            ..GridFormingParams::battery(1.0, 0.0)
        }
    }
}

fn default_pv_tau() -> f64 {
    0.1
}

/// Available PV power as a piecewise-constant schedule of `(t, kW)` points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvParams {
    pub rating_kw: f64,
    pub schedule: Vec<(f64, f64)>,
    #[serde(default = "default_pv_tau")]
    pub time_constant_s: f64,
}

impl PvParams {
    pub fn available_at(&self, t: f64) -> f64 {
        self.schedule
            .iter()
            .take_while(|(ts, _)| *ts <= t)
            .last()
            .map(|&(_, p)| p)
            .unwrap_or(0.0)
    }
}

fn default_governor_tau() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DieselParams {
    pub rating_kva: f64,
    pub p_setpoint_kw: f64,
    #[serde(default = "default_governor_tau")]
    pub governor_time_constant_s: f64,
}

fn default_v2g_tau() -> f64 {
    0.1
}

/// Single-phase vehicle battery aggregate, grid-following.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2gParams {
    pub rating_kva: f64,
    pub phase: Phase,
    #[serde(default)]
    pub p_setpoint_kw: f64,
    #[serde(default)]
    pub q_setpoint_kvar: f64,
    #[serde(default = "default_v2g_tau")]
    pub time_constant_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DeviceKind {
    GridForming(GridFormingParams),
    Pv(PvParams),
    Diesel(DieselParams),
    V2g(V2gParams),
    Btb(BtbParams),
}

impl DeviceKind {
    pub fn is_grid_forming(&self) -> bool {
        matches!(self, DeviceKind::GridForming(_))
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be positive"))
            }
        };
        match self {
            DeviceKind::GridForming(p) => {
                positive("rating_kva", p.rating_kva)?;
                if p.droop_hz_per_kw < 0.0 {
                    return Err("droop gain must be non-negative".into());
                }
                if p.f_min >= p.f_max {
                    return Err("f_min must be below f_max".into());
                }
                Ok(())
            }
            DeviceKind::Pv(p) => positive("rating_kw", p.rating_kw),
            DeviceKind::Diesel(p) => {
                positive("rating_kva", p.rating_kva)?;
                if p.p_setpoint_kw < 0.0 || p.p_setpoint_kw > p.rating_kva {
                    return Err("setpoint outside [0, rating]".into());
                }
                Ok(())
            }
            DeviceKind::V2g(p) => positive("rating_kva", p.rating_kva),
            DeviceKind::Btb(p) => p.validate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub id: String,
    pub bus: BusId,
    #[serde(default = "crate::devices::in_service_default")]
    pub in_service: bool,
    #[serde(flatten)]
    pub kind: DeviceKind,
}

pub(crate) fn in_service_default() -> bool {
    true
}

impl DeviceSpec {
    pub fn new(id: &str, bus: &str, kind: DeviceKind) -> Self {
        DeviceSpec { id: id.to_string(), bus: bus.to_string(), in_service: true, kind }
    }
}

// ---------------------------------------------------------------------------
// Grid-forming
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GridFormingState {
    pub frequency: f64,
    pub f_nominal: f64,
    pub voltage_setpoint: f64,
    /// Filtered EMF magnitude in per-unit.
    pub emf_pu: f64,
    pub active_power: f64,
    pub reactive_power: f64,
    pub droop_gain: f64,
    pub p_nominal: f64,
    pub q_nominal: f64,
    pub q_droop: f64,
    pub regulate_terminal: bool,
    pub time_constant: f64,
    pub rating: f64,
    pub energy: f64,
    pub rating_exceeded: bool,
}

impl GridFormingState {
    pub fn from_params(p: &GridFormingParams) -> Self {
        GridFormingState {
            frequency: p.f_nominal,
            f_nominal: p.f_nominal,
            voltage_setpoint: p.v_setpoint_pu,
            emf_pu: p.v_setpoint_pu,
            active_power: 0.0,
            reactive_power: 0.0,
            droop_gain: p.droop_hz_per_kw,
            p_nominal: p.p_nominal_kw.unwrap_or(0.0),
            q_nominal: p.q_nominal_kvar.unwrap_or(0.0),
            q_droop: p.q_droop_pu,
            regulate_terminal: p.regulate_terminal,
            time_constant: p.filter_time_constant_s,
            rating: p.rating_kva,
            energy: p.initial_energy_kwh,
            rating_exceeded: false,
        }
    }

    /// Steady-state droop frequency for an output of `p_kw`.
    pub fn droop_frequency(&self, p_kw: f64) -> f64 {
        self.f_nominal - self.droop_gain * (p_kw - self.p_nominal)
    }

    /// Terminal voltage target for a reactive output of `q_kvar`.
    pub fn voltage_target(&self, q_kvar: f64) -> f64 {
        if self.rating.is_finite() {
            self.voltage_setpoint - self.q_droop * (q_kvar - self.q_nominal) / self.rating
        } else {
            self.voltage_setpoint
        }
    }
}

/// Advances the P–f droop by `dt` given the measured output `measured_p`.
///
/// The returned state carries `rating_exceeded` when the measurement was
/// beyond the rating; the droop then acts on the clamped value.
pub fn grid_forming_step(
    state: &GridFormingState,
    measured_p: f64,
    dt: f64,
) -> Result<GridFormingState, DeviceError> {
    check_dt(dt)?;
    let mut next = state.clone();
    let clamped = measured_p.clamp(-state.rating, state.rating);
    next.rating_exceeded = clamped != measured_p;
    let target = state.droop_frequency(clamped);
    next.frequency = first_order(state.frequency, target, state.time_constant, dt);
    next.active_power = measured_p;
    next.energy = state.energy - measured_p * dt / 3600.0;
    Ok(next)
}

/// Advances the Q–V loop: the EMF integrates the error between the droop
/// target and the measured positive-sequence terminal voltage (pu).
pub fn grid_forming_voltage_step(
    state: &GridFormingState,
    measured_q: f64,
    terminal_pu: f64,
    dt: f64,
) -> Result<GridFormingState, DeviceError> {
    check_dt(dt)?;
    let mut next = state.clone();
    next.reactive_power = measured_q;
    next.emf_pu = if state.regulate_terminal {
        let gain = if state.time_constant > 0.0 { 1.0 - (-dt / state.time_constant).exp() } else { 1.0 };
        state.emf_pu + gain * (state.voltage_target(measured_q) - terminal_pu)
    } else {
        state.voltage_setpoint
    };
    Ok(next)
}

// ---------------------------------------------------------------------------
// Grid-following
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct GridFollowingState {
    pub p_setpoint: f64,
    pub q_setpoint: f64,
    pub p: f64,
    pub q: f64,
    pub response_time_constant: f64,
    pub rating: f64,
    pub saturated: bool,
}

impl GridFollowingState {
    pub fn new(rating: f64, tau: f64) -> Self {
        GridFollowingState {
            p_setpoint: 0.0,
            q_setpoint: 0.0,
            p: 0.0,
            q: 0.0,
            response_time_constant: tau,
            rating,
            saturated: false,
        }
    }

    /// Places the output at its (saturated) setpoint.
    pub fn settle(mut self) -> Self {
        let (p, q, sat) = saturate(self.p_setpoint, self.q_setpoint, self.rating);
        self.p = p;
        self.q = q;
        self.saturated = sat;
        self
    }
}

pub fn grid_following_step(state: &GridFollowingState, dt: f64) -> Result<GridFollowingState, DeviceError> {
    check_dt(dt)?;
    let tau = state.response_time_constant;
    let p = first_order(state.p, state.p_setpoint, tau, dt);
    let q = first_order(state.q, state.q_setpoint, tau, dt);
    let (p, q, saturated) = saturate(p, q, state.rating);
    Ok(GridFollowingState { p, q, saturated, ..state.clone() })
}

/// Discharge command for a vehicle battery aggregate; `+` injects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct V2gCommand {
    pub p_kw: f64,
}

pub fn v2g_dispatch(
    device: &str,
    command: V2gCommand,
    state: &GridFollowingState,
) -> Result<GridFollowingState, DeviceError> {
    if command.p_kw.abs().hypot(state.q_setpoint) > state.rating || !command.p_kw.is_finite() {
        return Err(DeviceError::CommandExceedsRating {
            device: device.to_string(),
            command_kw: command.p_kw,
            rating_kva: state.rating,
        });
    }
    Ok(GridFollowingState { p_setpoint: command.p_kw, ..state.clone() })
}

// ---------------------------------------------------------------------------
// PV and diesel
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PvState {
    pub available_power: f64,
    pub p_out: f64,
    pub rating: f64,
    pub time_constant: f64,
}

pub fn pv_step(state: &PvState, available_power: f64, dt: f64) -> Result<PvState, DeviceError> {
    check_dt(dt)?;
    let cap = available_power.min(state.rating).max(0.0);
    let p_out = first_order(state.p_out, cap, state.time_constant, dt).clamp(0.0, cap.max(0.0));
    Ok(PvState { available_power, p_out, ..state.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DieselState {
    pub p_setpoint: f64,
    pub p_out: f64,
    pub governor_time_constant: f64,
    pub rating: f64,
}

pub fn diesel_step(state: &DieselState, dt: f64) -> Result<DieselState, DeviceError> {
    check_dt(dt)?;
    let target = state.p_setpoint.clamp(0.0, state.rating);
    let p_out = first_order(state.p_out, target, state.governor_time_constant, dt).clamp(0.0, state.rating);
    Ok(DieselState { p_out, ..state.clone() })
}
