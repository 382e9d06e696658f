//! Power-quality measurements: symmetrical components, voltage unbalance
//! factors, per-unit RMS magnitudes and limit-crossing reports.
//!
//! Unbalance factors are computed from line-to-neutral phasors.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::TimeSeriesRecord;
use crate::phasor::PhasorSet;

/// Relative size of |V1| (against the largest phase magnitude) below which
/// unbalance ratios are not defined.
pub const DEGENERATE_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("positive-sequence voltage {v1:e} is too small for unbalance ratios")]
    DegenerateReference { v1: f64 },
    #[error("limit must be non-negative, got {0}")]
    InvalidLimit(f64),
    #[error("base voltage must be positive, got {0}")]
    InvalidBase(f64),
}

/// Fortescue rotation operator a = e^{j2π/3}.
pub fn rotation_operator() -> Complex64 {
    Complex64::from_polar(1.0, 2.0 * PI / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceComponents {
    pub v0: Complex64,
    pub v1: Complex64,
    pub v2: Complex64,
}

impl SequenceComponents {
    /// Reconstructs the phase phasors.
    pub fn to_phases(&self) -> PhasorSet {
        let a = rotation_operator();
        let a2 = a * a;
        PhasorSet::new(
            self.v0 + self.v1 + self.v2,
            self.v0 + a2 * self.v1 + a * self.v2,
            self.v0 + a * self.v1 + a2 * self.v2,
        )
    }
}

pub fn sequence_components(v: &PhasorSet) -> SequenceComponents {
    let a = rotation_operator();
    let a2 = a * a;
    let [va, vb, vc] = v.0;
    SequenceComponents {
        v0: (va + vb + vc) / 3.0,
        v1: (va + a * vb + a2 * vc) / 3.0,
        v2: (va + a2 * vb + a * vc) / 3.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnbalanceMetrics {
    /// Negative-sequence unbalance, percent.
    pub vuf2: f64,
    /// Zero-sequence unbalance, percent.
    pub vuf0: f64,
}

pub fn vuf(v: &PhasorSet) -> Result<UnbalanceMetrics, MetricsError> {
    let seq = sequence_components(v);
    let v1 = seq.v1.norm();
    let scale = v.magnitudes().into_iter().fold(0.0, f64::max);
    if !(v1 > DEGENERATE_RATIO * scale) || v1 == 0.0 {
        return Err(MetricsError::DegenerateReference { v1 });
    }
    Ok(UnbalanceMetrics { vuf2: seq.v2.norm() / v1 * 100.0, vuf0: seq.v0.norm() / v1 * 100.0 })
}

/// Per-phase magnitude over the line-to-neutral base derived from a
/// line-to-line `base`.
pub fn rms_pu(v: &PhasorSet, base: f64) -> Result<[f64; 3], MetricsError> {
    if !(base > 0.0) {
        return Err(MetricsError::InvalidBase(base));
    }
    let ln = base / 3f64.sqrt();
    Ok(v.magnitudes().map(|m| m / ln))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnbalanceQuantity {
    Vuf2,
    Vuf0,
}

impl UnbalanceQuantity {
    pub fn name(self) -> &'static str {
        match self {
            UnbalanceQuantity::Vuf2 => "vuf2",
            UnbalanceQuantity::Vuf0 => "vuf0",
        }
    }

    pub fn of(self, m: &UnbalanceMetrics) -> f64 {
        match self {
            UnbalanceQuantity::Vuf2 => m.vuf2,
            UnbalanceQuantity::Vuf0 => m.vuf0,
        }
    }
}

/// One interval in which a quantity stayed above the limit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub bus: String,
    pub quantity: UnbalanceQuantity,
    pub start: f64,
    pub end: f64,
    pub peak: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub limit: f64,
    pub crossings: Vec<Crossing>,
}

impl ThresholdReport {
    pub fn is_empty(&self) -> bool {
        self.crossings.is_empty()
    }

    pub fn for_bus<'a>(&'a self, bus: &'a str) -> impl Iterator<Item = &'a Crossing> + 'a {
        self.crossings.iter().filter(move |c| c.bus == bus)
    }
}

/// Builds the report from `(t, bus, metrics)` samples in time order.
pub fn threshold_report_from_samples<'a, I>(samples: I, limit: f64) -> Result<ThresholdReport, MetricsError>
where
    I: IntoIterator<Item = (f64, &'a str, Option<UnbalanceMetrics>)>,
{
    if !(limit >= 0.0) {
        return Err(MetricsError::InvalidLimit(limit));
    }
    let mut open: BTreeMap<(String, UnbalanceQuantity), Crossing> = BTreeMap::new();
    let mut done = Vec::new();
    for (t, bus, m) in samples {
        for q in [UnbalanceQuantity::Vuf2, UnbalanceQuantity::Vuf0] {
            let key = (bus.to_string(), q);
            match m.map(|m| q.of(&m)).filter(|v| *v > limit) {
                Some(v) => {
                    let c = open.entry(key).or_insert_with(|| Crossing {
                        bus: bus.to_string(),
                        quantity: q,
                        start: t,
                        end: t,
                        peak: v,
                    });
                    c.end = t;
                    c.peak = c.peak.max(v);
                }
                None => {
                    if let Some(c) = open.remove(&key) {
                        done.push(c);
                    }
                }
            }
        }
    }
    done.extend(open.into_values());
    done.sort_by(|a, b| {
        (a.bus.as_str(), a.quantity)
            .cmp(&(b.bus.as_str(), b.quantity))
            .then(a.start.total_cmp(&b.start))
    });
    Ok(ThresholdReport { limit, crossings: done })
}

/// Intervals where VUF₂ or VUF₀ exceed `limit` percent, per monitored bus.
pub fn threshold_report(series: &[TimeSeriesRecord], limit: f64) -> Result<ThresholdReport, MetricsError> {
    threshold_report_from_samples(
        series.iter().flat_map(|r| r.vuf.iter().map(move |(bus, m)| (r.t, bus.as_str(), *m))),
        limit,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor::phasor;

    fn deg(d: f64) -> f64 {
        d.to_radians()
    }

    #[test]
    fn balanced_positive_sequence() {
        let s = sequence_components(&PhasorSet::balanced(1.0, 0.0));
        assert!((s.v1 - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(s.v0.norm() < 1e-15 && s.v2.norm() < 1e-15);
    }

    #[test]
    fn pure_zero_sequence() {
        let one = Complex64::new(1.0, 0.0);
        let s = sequence_components(&PhasorSet::new(one, one, one));
        assert!((s.v0 - one).norm() < 1e-15);
        assert!(s.v1.norm() < 1e-15 && s.v2.norm() < 1e-15);
        assert!(vuf(&PhasorSet::new(one, one, one)).is_err());
    }

    #[test]
    fn reversed_rotation_is_negative_sequence() {
        let v = PhasorSet::new(phasor(1.0, 0.0), phasor(1.0, deg(120.0)), phasor(1.0, deg(-120.0)));
        let s = sequence_components(&v);
        assert!((s.v2 - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert!(s.v0.norm() < 1e-15 && s.v1.norm() < 1e-15);
    }

    #[test]
    fn zero_voltage_is_degenerate() {
        assert!(matches!(vuf(&PhasorSet::ZERO), Err(MetricsError::DegenerateReference { .. })));
    }

    #[test]
    fn rms_pu_cases() {
        let base = 4160.0;
        let v = PhasorSet::balanced(base / 3f64.sqrt(), 0.3);
        for m in rms_pu(&v, base).unwrap() {
            assert!((m - 1.0).abs() < 1e-15);
        }
        assert_eq!(rms_pu(&PhasorSet::ZERO, base).unwrap(), [0.0; 3]);
        assert!(rms_pu(&v, 0.0).is_err());
    }

    fn samples(values: &[(f64, f64)]) -> Vec<(f64, &'static str, Option<UnbalanceMetrics>)> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(v2, v0))| (i as f64, "650", Some(UnbalanceMetrics { vuf2: v2, vuf0: v0 })))
            .collect()
    }

    #[test]
    fn report_intervals() {
        let s = samples(&[(0.0, 0.0), (3.0, 1.0), (4.0, 2.5), (1.0, 0.5), (2.5, 0.0)]);
        let r = threshold_report_from_samples(s, 2.0).unwrap();
        let v2: Vec<_> = r.crossings.iter().filter(|c| c.quantity == UnbalanceQuantity::Vuf2).collect();
        assert_eq!(v2.len(), 2);
        assert_eq!((v2[0].start, v2[0].end, v2[0].peak), (1.0, 2.0, 4.0));
        assert_eq!((v2[1].start, v2[1].end), (4.0, 4.0));
        let v0: Vec<_> = r.crossings.iter().filter(|c| c.quantity == UnbalanceQuantity::Vuf0).collect();
        assert_eq!(v0.len(), 1);
        assert_eq!(v0[0].start, 2.0);
    }

    #[test]
    fn report_limits() {
        let balanced = samples(&[(0.0, 0.0), (0.0, 0.0)]);
        assert!(threshold_report_from_samples(balanced, 2.0).unwrap().is_empty());
        let small = samples(&[(0.1, 0.05), (0.2, 0.07), (0.1, 0.01)]);
        let r = threshold_report_from_samples(small.clone(), 0.0).unwrap();
        assert_eq!(r.crossings.len(), 2);
        assert!(r.crossings.iter().all(|c| c.start == 0.0 && c.end == 2.0));
        assert!(threshold_report_from_samples(small.clone(), 1000.0).unwrap().is_empty());
        assert!(threshold_report_from_samples(small, -1.0).is_err());
    }
}
