//! Phase labels and per-phase complex quantities.

use std::f64::consts::PI;
use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

/// One conductor of a three-phase system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Phase::ALL.get(i).copied()
    }

    /// Nominal angle of this phase in a positive-sequence set.
    pub fn nominal_angle(self) -> f64 {
        match self {
            Phase::A => 0.0,
            Phase::B => -2.0 * PI / 3.0,
            Phase::C => 2.0 * PI / 3.0,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::A => "A",
            Phase::B => "B",
            Phase::C => "C",
        };
        f.write_str(s)
    }
}

/// A single phasor stored in rectangular form.
pub type Phasor = Complex64;

/// Builds a phasor from magnitude and angle (radians).
pub fn phasor(magnitude: f64, angle: f64) -> Phasor {
    Complex64::from_polar(magnitude, angle)
}

/// Set of phase phasors. Absent phases are held at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhasorSet(pub [Complex64; 3]);

impl PhasorSet {
    pub const ZERO: PhasorSet = PhasorSet([Complex64::new(0.0, 0.0); 3]);

    pub fn new(a: Complex64, b: Complex64, c: Complex64) -> Self {
        PhasorSet([a, b, c])
    }

    /// Positive-sequence set with phase A at `angle`.
    pub fn balanced(magnitude: f64, angle: f64) -> Self {
        PhasorSet(Phase::ALL.map(|p| phasor(magnitude, angle + p.nominal_angle())))
    }

    pub fn from_polar(mags: [f64; 3], angles: [f64; 3]) -> Self {
        PhasorSet([
            phasor(mags[0], angles[0]),
            phasor(mags[1], angles[1]),
            phasor(mags[2], angles[2]),
        ])
    }

    pub fn magnitudes(&self) -> [f64; 3] {
        self.0.map(|v| v.norm())
    }

    pub fn angles(&self) -> [f64; 3] {
        self.0.map(|v| v.arg())
    }

    pub fn scale(&self, k: f64) -> Self {
        PhasorSet(self.0.map(|v| v * k))
    }

    pub fn rotate(&self, theta: f64) -> Self {
        let r = Complex64::from_polar(1.0, theta);
        PhasorSet(self.0.map(|v| v * r))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    /// Element-wise `v * conj(i)`.
    pub fn power_with(&self, current: &PhasorSet) -> PhasorSet {
        PhasorSet([
            self.0[0] * current.0[0].conj(),
            self.0[1] * current.0[1].conj(),
            self.0[2] * current.0[2].conj(),
        ])
    }

    pub fn sum(&self) -> Complex64 {
        self.0[0] + self.0[1] + self.0[2]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Phase, Complex64)> + '_ {
        Phase::ALL.iter().map(move |&p| (p, self.0[p.index()]))
    }
}

impl Index<Phase> for PhasorSet {
    type Output = Complex64;
    fn index(&self, p: Phase) -> &Complex64 {
        &self.0[p.index()]
    }
}

impl IndexMut<Phase> for PhasorSet {
    fn index_mut(&mut self, p: Phase) -> &mut Complex64 {
        &mut self.0[p.index()]
    }
}

impl Add for PhasorSet {
    type Output = PhasorSet;
    fn add(self, o: PhasorSet) -> PhasorSet {
        PhasorSet([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl Sub for PhasorSet {
    type Output = PhasorSet;
    fn sub(self, o: PhasorSet) -> PhasorSet {
        PhasorSet([self.0[0] - o.0[0], self.0[1] - o.0[1], self.0[2] - o.0[2]])
    }
}

impl Mul<Complex64> for PhasorSet {
    type Output = PhasorSet;
    fn mul(self, k: Complex64) -> PhasorSet {
        PhasorSet(self.0.map(|v| v * k))
    }
}

/// Set of phases carried by a bus or a branch, kept sorted A<B<C.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);
    pub const EMPTY: PhaseSet = PhaseSet(0);

    pub fn from_phases(phases: &[Phase]) -> Self {
        PhaseSet(phases.iter().fold(0, |m, p| m | (1 << p.index())))
    }

    pub fn single(p: Phase) -> Self {
        PhaseSet(1 << p.index())
    }

    pub fn contains(&self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn is_superset(&self, other: PhaseSet) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn intersect(&self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 & other.0)
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = Phase> + '_ {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn to_vec(&self) -> Vec<Phase> {
        self.iter().collect()
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl Serialize for PhaseSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for PhaseSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut phases = Vec::new();
        for ch in s.chars() {
            let p = match ch.to_ascii_uppercase() {
                'A' => Phase::A,
                'B' => Phase::B,
                'C' => Phase::C,
                other => {
                    return Err(serde::de::Error::custom(format!(
                        "invalid phase letter '{other}' in \"{s}\""
                    )))
                }
            };
            phases.push(p);
        }
        Ok(PhaseSet::from_phases(&phases))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_order_is_stable() {
        assert!(Phase::A < Phase::B && Phase::B < Phase::C);
        assert_eq!(Phase::ALL.len(), 3);
        for p in Phase::ALL {
            assert_eq!(Phase::from_index(p.index()), Some(p));
        }
    }

    #[test]
    fn phase_set_parses_and_prints() {
        let s: PhaseSet = serde_json::from_str("\"CB\"").unwrap();
        assert_eq!(s.to_string(), "BC");
        assert!(PhaseSet::ABC.is_superset(s));
        assert!(!s.contains(Phase::A));
        assert!(serde_json::from_str::<PhaseSet>("\"AX\"").is_err());
    }

    #[test]
    fn balanced_set_has_nominal_angles() {
        let v = PhasorSet::balanced(2.0, 0.0);
        assert!((v[Phase::B].arg() + 2.0 * PI / 3.0).abs() < 1e-12);
        assert!((v.sum()).norm() < 1e-12);
    }
}
