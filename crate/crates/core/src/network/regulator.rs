use serde::{Deserialize, Serialize};

use crate::phasor::PhasorSet;

/// Step-voltage regulator with per-phase independent taps and remote
/// voltage sensing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorSettings {
    pub controlled_bus: String,
    /// Total number of steps across the full range (32 → ±16).
    pub tap_count: u32,
    /// Regulation range as a fraction of nominal (0.1 → ±10 %).
    pub range: f64,
    /// Band width in volts on the 120 V base.
    pub bandwidth: f64,
    /// Band centre in volts on the 120 V base.
    pub setpoint: f64,
    /// Potential-transformer ratio from line-to-neutral volts to the 120 V base.
    pub pt_ratio: f64,
    pub current_taps: [i32; 3],
    /// Seconds between tap decisions.
    #[serde(default = "default_interval")]
    pub control_interval: f64,
}

fn default_interval() -> f64 {
    0.1
}

impl RegulatorSettings {
    pub fn standard(controlled_bus: &str, pt_ratio: f64) -> Self {
        RegulatorSettings {
            controlled_bus: controlled_bus.to_string(),
            tap_count: 32,
            range: 0.1,
            bandwidth: 2.0,
            setpoint: 120.0,
            pt_ratio,
            current_taps: [0; 3],
            control_interval: default_interval(),
        }
    }

    pub fn max_tap(&self) -> i32 {
        (self.tap_count / 2) as i32
    }

    pub fn step_size(&self) -> f64 {
        self.range / self.max_tap() as f64
    }

    /// Output/input voltage ratio per phase.
    pub fn ratios(&self) -> [f64; 3] {
        self.current_taps.map(|t| 1.0 + self.step_size() * t as f64)
    }
}

/// One control decision: each phase moves at most one step toward the band.
pub fn regulator_step(settings: &RegulatorSettings, measured_voltage: &PhasorSet) -> RegulatorSettings {
    let mut next = settings.clone();
    let lo = settings.setpoint - settings.bandwidth / 2.0;
    let hi = settings.setpoint + settings.bandwidth / 2.0;
    let max = settings.max_tap();
    for (i, tap) in next.current_taps.iter_mut().enumerate() {
        let v = measured_voltage.0[i].norm() / settings.pt_ratio;
        if v == 0.0 {
            continue;
        }
        if v < lo {
            *tap = (*tap + 1).min(max);
        } else if v > hi {
            *tap = (*tap - 1).max(-max);
        }
    }
    next
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor::{phasor, Phase};

    fn base() -> f64 {
        4160.0 / 3f64.sqrt()
    }

    fn settings() -> RegulatorSettings {
        RegulatorSettings::standard("6801", base() / 120.0)
    }

    #[test]
    fn in_band_leaves_taps() {
        let s = settings();
        let out = regulator_step(&s, &PhasorSet::balanced(base(), 0.0));
        assert_eq!(out.current_taps, [0, 0, 0]);
    }

    #[test]
    fn undervoltage_on_one_phase_raises_that_tap() {
        // 0.92 pu → 110.4 V, below the 119 V lower band edge.
        let mut v = PhasorSet::balanced(base(), 0.0);
        v[Phase::A] = phasor(0.92 * base(), 0.0);
        let out = regulator_step(&settings(), &v);
        assert_eq!(out.current_taps, [1, 0, 0]);
    }

    #[test]
    fn band_edges() {
        let s = settings();
        let just_inside = PhasorSet::balanced(base() * 119.01 / 120.0, 0.0);
        assert_eq!(regulator_step(&s, &just_inside).current_taps, [0, 0, 0]);
        let over = PhasorSet::balanced(base() * 121.5 / 120.0, 0.0);
        assert_eq!(regulator_step(&s, &over).current_taps, [-1, -1, -1]);
    }

    #[test]
    fn taps_saturate_at_range() {
        let mut s = settings();
        s.current_taps = [16, 16, 16];
        let out = regulator_step(&s, &PhasorSet::balanced(0.9 * base(), 0.0));
        assert_eq!(out.current_taps, [16, 16, 16]);
        assert!((out.ratios()[0] - 1.1).abs() < 1e-12);
    }
}
