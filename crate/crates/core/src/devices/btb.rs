//! Back-to-back converter: two AC/DC stages sharing a DC-link capacitor.
//!
//! One converter regulates the DC-link voltage with a PI loop; the other
//! controls the transferred power. In fixed-transfer mode the remote-side
//! converter follows a power setpoint and the MG-side converter holds the
//! link. In frequency-support mode the roles swap: the MG-side converter
//! imports power in proportion to the local under-frequency and the
//! remote-side converter holds the link.

use serde::{Deserialize, Serialize};

use super::{check_dt, grid_following_step, DeviceError, GridFollowingState, NOMINAL_FREQUENCY};
use crate::network::BusId;

fn default_rating() -> f64 {
    3500.0
}
fn default_vdc() -> f64 {
    8000.0
}
fn default_capacitance() -> f64 {
    0.1
}
fn default_kp() -> f64 {
    10.0
}
fn default_ki() -> f64 {
    200.0
}
fn default_tau() -> f64 {
    0.05
}
fn unity() -> f64 {
    1.0
}
fn default_vmin() -> f64 {
    0.8
}
fn default_vmax() -> f64 {
    1.2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BtbMode {
    #[default]
    FixedTransfer,
    /// Import `gain·(f_nom − deadband − f)` when the local frequency sags
    /// below `f_nom − deadband`.
    FrequencySupport { gain_kw_per_hz: f64, deadband_hz: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BtbParams {
    /// Bus of the remote-side converter (grid or neighbouring microgrid).
    pub remote_bus: BusId,
    #[serde(default = "default_rating")]
    pub rating_kva: f64,
    #[serde(default = "default_vdc")]
    pub vdc_nominal: f64,
    #[serde(default = "default_capacitance")]
    pub capacitance_f: f64,
    #[serde(default = "default_kp")]
    pub kp_kw_per_v: f64,
    #[serde(default = "default_ki")]
    pub ki_kw_per_vs: f64,
    /// Signed transfer, `+` from the MG side to the remote side.
    #[serde(default)]
    pub transfer_setpoint_kw: f64,
    #[serde(default)]
    pub mode: BtbMode,
    #[serde(default = "default_tau")]
    pub converter_time_constant_s: f64,
    #[serde(default = "unity")]
    pub efficiency_mg: f64,
    #[serde(default = "unity")]
    pub efficiency_remote: f64,
    #[serde(default)]
    pub q_mg_kvar: f64,
    #[serde(default)]
    pub q_remote_kvar: f64,
    #[serde(default = "default_vmin")]
    pub vdc_min_pu: f64,
    #[serde(default = "default_vmax")]
    pub vdc_max_pu: f64,
}

impl BtbParams {
    pub fn new(remote_bus: &str) -> Self {
        BtbParams {
            remote_bus: remote_bus.to_string(),
            rating_kva: default_rating(),
            vdc_nominal: default_vdc(),
            capacitance_f: default_capacitance(),
            kp_kw_per_v: default_kp(),
            ki_kw_per_vs: default_ki(),
            transfer_setpoint_kw: 0.0,
            mode: BtbMode::FixedTransfer,
            converter_time_constant_s: default_tau(),
            efficiency_mg: 1.0,
            efficiency_remote: 1.0,
            q_mg_kvar: 0.0,
            q_remote_kvar: 0.0,
            vdc_min_pu: default_vmin(),
            vdc_max_pu: default_vmax(),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        if !(self.rating_kva > 0.0 && self.vdc_nominal > 0.0 && self.capacitance_f > 0.0) {
            return Err("rating, DC voltage and capacitance must be positive".into());
        }
        if !(self.efficiency_mg > 0.0 && self.efficiency_mg <= 1.0)
            || !(self.efficiency_remote > 0.0 && self.efficiency_remote <= 1.0)
        {
            return Err("efficiencies must lie in (0, 1]".into());
        }
        if self.transfer_setpoint_kw.abs() > self.rating_kva {
            return Err("transfer setpoint exceeds rating".into());
        }
        if self.q_mg_kvar.abs() >= self.rating_kva || self.q_remote_kvar.abs() >= self.rating_kva {
            return Err("reactive setpoint must be below rating".into());
        }
        Ok(())
    }
}

/// Dynamic state. `converter_mg.p` and `converter_remote.p` are AC-side
/// injections into each converter's own bus (`+` = generation there).
#[derive(Debug, Clone, PartialEq)]
pub struct BtbState {
    pub vdc: f64,
    pub vdc_nominal: f64,
    pub capacitance: f64,
    /// Stored DC energy ½·C·vdc² in joules; authoritative over `vdc`.
    pub dc_energy: f64,
    /// Net DC-side power into the link at the current instant (W).
    pub dc_net_power: f64,
    /// Running integral of the net DC power (J).
    pub dc_energy_in: f64,
    pub p_transfer_setpoint: f64,
    pub mode: BtbMode,
    pub converter_mg: GridFollowingState,
    pub converter_remote: GridFollowingState,
    pub dc_pi_integrator: f64,
    pub kp: f64,
    pub ki: f64,
    pub rating: f64,
    pub efficiency_mg: f64,
    pub efficiency_remote: f64,
    pub vdc_min_pu: f64,
    pub vdc_max_pu: f64,
    pub f_nominal: f64,
}

/// DC-side power for an AC-side power absorbed by a converter.
fn dc_of_absorbed(p_ac: f64, eta: f64) -> (f64, f64) {
    if p_ac >= 0.0 {
        (p_ac * eta, eta)
    } else {
        (p_ac / eta, 1.0 / eta)
    }
}

/// Instantaneous dV/dt of the link in V/s for terminal powers in kW.
pub fn dc_link_rate(vdc: f64, capacitance: f64, p_in_kw: f64, p_out_kw: f64) -> f64 {
    (p_in_kw - p_out_kw) * 1e3 / (capacitance * vdc)
}

impl BtbState {
    pub fn from_params(p: &BtbParams) -> Self {
        let mut conv = GridFollowingState::new(p.rating_kva, p.converter_time_constant_s);
        conv.q_setpoint = p.q_mg_kvar;
        let converter_mg = conv.clone().settle();
        conv.q_setpoint = p.q_remote_kvar;
        let converter_remote = conv.settle();
        let mut s = BtbState {
            vdc: p.vdc_nominal,
            vdc_nominal: p.vdc_nominal,
            capacitance: p.capacitance_f,
            dc_energy: 0.5 * p.capacitance_f * p.vdc_nominal * p.vdc_nominal,
            dc_net_power: 0.0,
            dc_energy_in: 0.0,
            p_transfer_setpoint: p.transfer_setpoint_kw,
            mode: p.mode,
            converter_mg,
            converter_remote,
            dc_pi_integrator: 0.0,
            kp: p.kp_kw_per_v,
            ki: p.ki_kw_per_vs,
            rating: p.rating_kva,
            efficiency_mg: p.efficiency_mg,
            efficiency_remote: p.efficiency_remote,
            vdc_min_pu: p.vdc_min_pu,
            vdc_max_pu: p.vdc_max_pu,
            f_nominal: NOMINAL_FREQUENCY,
        };
        s.settle(NOMINAL_FREQUENCY);
        s
    }

    pub fn vdc_pu(&self) -> f64 {
        self.vdc / self.vdc_nominal
    }

    /// Power delivered to the remote side (kW); negative means import.
    pub fn transferred_kw(&self) -> f64 {
        self.converter_remote.p
    }

    /// Power drawn from the MG-side bus (kW).
    pub fn mg_side_kw(&self) -> f64 {
        -self.converter_mg.p
    }

    /// Import command of the frequency-support law at `frequency`.
    pub fn support_command(&self, frequency: f64) -> f64 {
        match self.mode {
            BtbMode::FixedTransfer => 0.0,
            BtbMode::FrequencySupport { gain_kw_per_hz, deadband_hz } => {
                (gain_kw_per_hz * (self.f_nominal - deadband_hz - frequency)).max(0.0)
            }
        }
    }

    fn regulating_is_mg(&self) -> bool {
        matches!(self.mode, BtbMode::FixedTransfer)
    }

    fn regulating_limit(&self) -> f64 {
        let q = if self.regulating_is_mg() { self.converter_mg.q } else { self.converter_remote.q };
        (self.rating * self.rating - q * q).max(0.0).sqrt()
    }

    /// Net DC power (W) when the regulating converter absorbs `u` kW and
    /// the controlling converter injects `controlled_p` kW; also returns
    /// d(net)/du.
    fn net_dc_power(&self, u: f64, controlled_p: f64) -> (f64, f64) {
        if self.regulating_is_mg() {
            let (p1, d1) = dc_of_absorbed(u, self.efficiency_mg);
            let (p2, _) = dc_of_absorbed(-controlled_p, self.efficiency_remote);
            ((p1 + p2) * 1e3, d1 * 1e3)
        } else {
            let (p1, _) = dc_of_absorbed(-controlled_p, self.efficiency_mg);
            let (p2, d2) = dc_of_absorbed(u, self.efficiency_remote);
            ((p1 + p2) * 1e3, d2 * 1e3)
        }
    }

    fn controlling(&self) -> &GridFollowingState {
        if self.regulating_is_mg() {
            &self.converter_remote
        } else {
            &self.converter_mg
        }
    }

    fn controlling_target(&self, frequency: f64) -> f64 {
        match self.mode {
            BtbMode::FixedTransfer => self.p_transfer_setpoint,
            BtbMode::FrequencySupport { .. } => self.support_command(frequency),
        }
    }

    /// Puts the converter in equilibrium at nominal DC voltage.
    pub fn settle(&mut self, frequency: f64) {
        let target = self.controlling_target(frequency);
        let ctrl = {
            let mut c = self.controlling().clone();
            c.p_setpoint = target;
            c.settle()
        };
        // Solve net_dc_power(u, ctrl.p) = 0 for u; piecewise-linear in u.
        let mut u = ctrl.p;
        for _ in 0..4 {
            let (net, d) = self.net_dc_power(u, ctrl.p);
            u -= net / d;
        }
        let u = u.clamp(-self.regulating_limit(), self.regulating_limit());
        if self.regulating_is_mg() {
            self.converter_remote = ctrl;
            self.converter_mg.p = -u;
            self.converter_mg.p_setpoint = -u;
        } else {
            self.converter_mg = ctrl;
            self.converter_remote.p = -u;
            self.converter_remote.p_setpoint = -u;
        }
        self.dc_pi_integrator = if self.ki > 0.0 { u / self.ki } else { 0.0 };
        self.vdc = self.vdc_nominal;
        self.dc_energy = 0.5 * self.capacitance * self.vdc * self.vdc;
        self.dc_net_power = self.net_dc_power(u, self.controlling().p).0;
    }
}

/// Advances the converter by `dt`.
///
/// `local_frequency` is the MG-side island frequency, used only in
/// frequency-support mode.
pub fn btb_step(state: &BtbState, local_frequency: f64, dt: f64) -> Result<BtbState, DeviceError> {
    check_dt(dt)?;
    if !(state.vdc > 0.0) {
        return Err(DeviceError::DcUndervoltage { device: "btb".into(), vdc: state.vdc, pu: state.vdc_pu() });
    }
    let mut next = state.clone();

    // Power-controlling converter.
    let mut ctrl = state.controlling().clone();
    ctrl.p_setpoint = state.controlling_target(local_frequency);
    let ctrl = grid_following_step(&ctrl, dt)?;

    // DC-regulating converter: implicit trapezoidal step on the stored
    // energy with the PI output evaluated at the end-of-step voltage.
    let limit = state.regulating_limit();
    let e0 = state.vdc_nominal - state.vdc;
    let half = 0.5 * dt;
    let pi = |v: f64| -> (f64, f64, bool) {
        let e = state.vdc_nominal - v;
        let integ = state.dc_pi_integrator + half * (e0 + e);
        let raw = state.kp * e + state.ki * integ;
        let u = raw.clamp(-limit, limit);
        (u, integ, u != raw)
    };
    let c = state.capacitance;
    let w0 = state.dc_energy;
    let mut v = state.vdc;
    for _ in 0..30 {
        let (u, _, sat) = pi(v);
        let (net, dnet_du) = state.net_dc_power(u, ctrl.p);
        let g = 0.5 * c * v * v - w0 - half * (state.dc_net_power + net);
        let du_dv = if sat { 0.0 } else { -(state.kp + state.ki * half) };
        let dg = c * v - half * dnet_du * du_dv;
        let step = g / dg;
        v -= step;
        if step.abs() <= 1e-12 * state.vdc_nominal {
            break;
        }
    }
    let (u, integ, sat) = pi(v);
    let (net, _) = state.net_dc_power(u, ctrl.p);
    let increment = half * (state.dc_net_power + net);
    next.dc_energy = w0 + increment;
    next.dc_energy_in = state.dc_energy_in + increment;
    next.dc_net_power = net;
    next.vdc = (2.0 * next.dc_energy / c).max(0.0).sqrt();
    next.dc_pi_integrator = if sat { state.dc_pi_integrator } else { integ };

    if state.regulating_is_mg() {
        next.converter_remote = ctrl;
        next.converter_mg.p = -u;
        next.converter_mg.p_setpoint = -u;
        next.converter_mg.saturated = sat;
    } else {
        next.converter_mg = ctrl;
        next.converter_remote.p = -u;
        next.converter_remote.p_setpoint = -u;
        next.converter_remote.saturated = sat;
    }

    let pu = next.vdc_pu();
    if pu > state.vdc_max_pu {
        return Err(DeviceError::DcOvervoltage { device: "btb".into(), vdc: next.vdc, pu });
    }
    if pu < state.vdc_min_pu {
        return Err(DeviceError::DcUndervoltage { device: "btb".into(), vdc: next.vdc, pu });
    }
    Ok(next)
}
