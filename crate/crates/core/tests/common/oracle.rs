//! Unbalance factors computed without the Fortescue matrix.

use num_complex::Complex64;

use mbbsim::PhasorSet;

/// Negative-sequence ratio from line-to-line magnitudes only.
pub fn vuf2_from_line_magnitudes(v: &PhasorSet) -> f64 {
    let [a, b, c] = v.0;
    let ll = [(a - b).norm_sqr(), (b - c).norm_sqr(), (c - a).norm_sqr()];
    let s: f64 = ll.iter().sum();
    let beta = ll.iter().map(|x| x * x).sum::<f64>() / (s * s);
    let r = (3.0 - 6.0 * beta).max(0.0).sqrt();
    100.0 * ((1.0 - r) / (1.0 + r)).sqrt()
}

/// Zero-sequence ratio with the rotation written out in real arithmetic.
pub fn vuf0_direct(v: &PhasorSet) -> f64 {
    let h = 3f64.sqrt() / 2.0;
    let [a, b, c] = v.0;
    let rot = |z: Complex64, s: f64| Complex64::new(-0.5 * z.re - s * h * z.im, s * h * z.re - 0.5 * z.im);
    let v1 = (a + rot(b, 1.0) + rot(c, -1.0)) / 3.0;
    let v0 = (a + b + c) / 3.0;
    100.0 * v0.norm() / v1.norm()
}

