//! The group `G = R^2 x R+`, its hyperbolic metric, Haar measures, and the
//! distinguished left-invariant vector fields with their flows.
//!
//! Points are `(x1, x2, a)` with `a > 0`, multiplied by
//! `(x1, x2, a) . (y1, y2, b) = (x1 + a y1, x2 + a y2, a b)`. The identity is
//! `(0, 0, 1)`. The metric is that of the three-dimensional hyperbolic
//! half-space,
//!
//! ```text
//! cosh r(x1, x2, a) = (a + 1/a + (x1^2 + x2^2)/a) / 2 ,
//! ```
//!
//! where `r(p) = d(p, e)`; it is invariant under left translation. The right
//! Haar measure is `a^{-1} dx1 dx2 da`, which is Lebesgue measure in the
//! logarithmic coordinates `(x1, x2, u = log a)` used throughout for
//! integration and sampling.

use crate::error::CoreError;
use crate::Result;
use serde::{Deserialize, Serialize};

/// Heights outside this window are rejected at construction so that all
/// downstream exponentials stay finite in `f64`.
const HEIGHT_MIN: f64 = 1e-300;
const HEIGHT_MAX: f64 = 1e300;

/// A point `(x1, x2, a)` of `G` with `a > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupPoint {
    pub x1: f64,
    pub x2: f64,
    a: f64,
}

/// The same point in the coordinates `(x1, x2, u = log a)` in which the
/// right Haar measure is Lebesgue measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogCoords {
    pub x1: f64,
    pub x2: f64,
    pub u: f64,
}

/// Selector for the left-invariant fields `X0 = a d/da`, `X1 = a d/dx1`,
/// `X2 = a d/dx2` spanning the Lie algebra.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldIndex {
    X0,
    X1,
    X2,
}

impl FieldIndex {
    /// All three fields, in index order.
    pub const ALL: [FieldIndex; 3] = [FieldIndex::X0, FieldIndex::X1, FieldIndex::X2];

    /// Numeric index 0, 1 or 2.
    pub fn as_usize(self) -> usize {
        match self {
            FieldIndex::X0 => 0,
            FieldIndex::X1 => 1,
            FieldIndex::X2 => 2,
        }
    }

    /// Parses 0, 1 or 2.
    pub fn from_usize(i: usize) -> Result<Self> {
        match i {
            0 => Ok(FieldIndex::X0),
            1 => Ok(FieldIndex::X1),
            2 => Ok(FieldIndex::X2),
            _ => Err(CoreError::InvalidParameter(format!("field index {i} not in {{0,1,2}}"))),
        }
    }
}

impl GroupPoint {
    /// Builds a point, validating that all coordinates are finite and the
    /// height lies in `[1e-300, 1e300]`.
    pub fn new(x1: f64, x2: f64, a: f64) -> Result<Self> {
        if !x1.is_finite() || !x2.is_finite() || !a.is_finite() {
            return Err(CoreError::InvalidPoint(format!("non-finite coordinates ({x1}, {x2}, {a})")));
        }
        if !(HEIGHT_MIN..=HEIGHT_MAX).contains(&a) {
            return Err(CoreError::InvalidPoint(format!("height {a} outside [1e-300, 1e300]")));
        }
        Ok(GroupPoint { x1, x2, a })
    }

    /// The identity `(0, 0, 1)`.
    pub fn identity() -> Self {
        GroupPoint { x1: 0.0, x2: 0.0, a: 1.0 }
    }

    /// The height coordinate `a`.
    pub fn a(&self) -> f64 {
        self.a
    }

    /// Group product `(x1 + a y1, x2 + a y2, a b)`.
    pub fn multiply(&self, q: &GroupPoint) -> GroupPoint {
        GroupPoint { x1: self.x1 + self.a * q.x1, x2: self.x2 + self.a * q.x2, a: self.a * q.a }
    }

    /// Group inverse `(-x1/a, -x2/a, 1/a)`.
    pub fn inverse(&self) -> GroupPoint {
        GroupPoint { x1: -self.x1 / self.a, x2: -self.x2 / self.a, a: 1.0 / self.a }
    }

    /// `cosh` of the distance to the identity.
    pub fn cosh_r(&self) -> f64 {
        let s = self.x1 * self.x1 + self.x2 * self.x2;
        (self.a + (1.0 + s) / self.a) / 2.0
    }

    /// Distance to the identity.
    pub fn r(&self) -> f64 {
        arcosh(self.cosh_r())
    }

    /// Modular function `delta(x1, x2, a) = a^{-2}`, the density of the left
    /// Haar measure against the right one.
    pub fn modular(&self) -> f64 {
        1.0 / (self.a * self.a)
    }

    /// Conversion to `(x1, x2, log a)`.
    pub fn to_log(&self) -> LogCoords {
        LogCoords { x1: self.x1, x2: self.x2, u: self.a.ln() }
    }

    /// Euclidean norm of `(x1, x2, log a)`; comparable to `r` near the
    /// identity.
    pub fn log_norm(&self) -> f64 {
        let u = self.a.ln();
        (self.x1 * self.x1 + self.x2 * self.x2 + u * u).sqrt()
    }
}

impl LogCoords {
    pub fn new(x1: f64, x2: f64, u: f64) -> Self {
        LogCoords { x1, x2, u }
    }

    /// Conversion back to `(x1, x2, a = e^u)`.
    pub fn to_point(&self) -> GroupPoint {
        GroupPoint { x1: self.x1, x2: self.x2, a: self.u.exp() }
    }
}

/// `arcosh(c) = log(c + sqrt(c^2 - 1))`, with a series for `c - 1 < 1e-8`
/// to avoid cancellation near the identity and a logarithmic form for very
/// large arguments where `c^2` would overflow.
pub fn arcosh(c: f64) -> f64 {
    debug_assert!(c >= 1.0 - 1e-12, "arcosh argument {c} below 1");
    let c = c.max(1.0);
    let eps = c - 1.0;
    if eps < 1e-8 {
        // arcosh(1 + eps) = sqrt(2 eps) (1 - eps/12 + 3 eps^2/160 - ...)
        (2.0 * eps).sqrt() * (1.0 - eps / 12.0)
    } else if c > 1e150 {
        std::f64::consts::LN_2 + c.ln()
    } else {
        (c + (c * c - 1.0).sqrt()).ln()
    }
}

/// Left-invariant distance `d(p, q) = r(p^{-1} q)`, computed directly from
/// the coordinates:
///
/// ```text
/// cosh d(p, q) = ( a_q/a_p + a_p/a_q + |q~ - p~|^2 / (a_p a_q) ) / 2 .
/// ```
pub fn distance(p: &GroupPoint, q: &GroupPoint) -> f64 {
    let d1 = q.x1 - p.x1;
    let d2 = q.x2 - p.x2;
    let c = (q.a / p.a + p.a / q.a + (d1 * d1 + d2 * d2) / (p.a * q.a)) / 2.0;
    arcosh(c)
}

/// The flow `exp(t X_i)`: `(t, 0, 1)`, `(0, t, 1)` or `(0, 0, e^t)`.
pub fn flow(i: FieldIndex, t: f64) -> GroupPoint {
    match i {
        FieldIndex::X0 => GroupPoint { x1: 0.0, x2: 0.0, a: t.exp() },
        FieldIndex::X1 => GroupPoint { x1: t, x2: 0.0, a: 1.0 },
        FieldIndex::X2 => GroupPoint { x1: 0.0, x2: t, a: 1.0 },
    }
}

/// Central-difference derivative along the left-invariant field `X_i`:
/// `(f(p exp(h X_i)) - f(p exp(-h X_i))) / 2h`. This is the universal
/// differentiation oracle used by the verification suites.
pub fn field_derivative<F: Fn(&GroupPoint) -> f64>(
    i: FieldIndex,
    f: F,
    p: &GroupPoint,
    h: f64,
) -> Result<f64> {
    let fp = f(&p.multiply(&flow(i, h)));
    let fm = f(&p.multiply(&flow(i, -h)));
    if !fp.is_finite() || !fm.is_finite() {
        return Err(CoreError::NonFinite(format!("stencil values ({fp}, {fm}) at step {h}")));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Default step for [`field_derivative`].
pub const FD_STEP: f64 = 1e-5;

/// Richardson-extrapolated central difference along `X_i`: combines steps
/// `h` and `h/2` for an `O(h^4)` truncation error.
pub fn field_derivative_richardson<F: Fn(&GroupPoint) -> f64>(
    i: FieldIndex,
    f: F,
    p: &GroupPoint,
    h: f64,
) -> Result<f64> {
    let d_h = field_derivative(i, &f, p, h)?;
    let d_h2 = field_derivative(i, &f, p, h / 2.0)?;
    Ok((4.0 * d_h2 - d_h) / 3.0)
}

/// Central-difference derivative along the right-invariant field `X_i^r`:
/// `(f(exp(h X_i) p) - f(exp(-h X_i) p)) / 2h`.
pub fn right_field_derivative<F: Fn(&GroupPoint) -> f64>(
    i: FieldIndex,
    f: F,
    p: &GroupPoint,
    h: f64,
) -> Result<f64> {
    let fp = f(&flow(i, h).multiply(p));
    let fm = f(&flow(i, -h).multiply(p));
    if !fp.is_finite() || !fm.is_finite() {
        return Err(CoreError::NonFinite(format!("stencil values ({fp}, {fm}) at step {h}")));
    }
    Ok((fp - fm) / (2.0 * h))
}

/// Closed form of the derivatives of `r` along the fields, valid away from
/// the identity: `X0 r = (a - cosh r)/sinh r` and `X_i r = x_i / sinh r`
/// for `i = 1, 2`.
pub fn field_derivative_of_r(i: FieldIndex, p: &GroupPoint) -> f64 {
    let r = p.r();
    let sh = r.sinh();
    match i {
        FieldIndex::X0 => (p.a - p.cosh_r()) / sh,
        FieldIndex::X1 => p.x1 / sh,
        FieldIndex::X2 => p.x2 / sh,
    }
}

/// Measure of the hyperbolic ball of radius `r` about the identity, by
/// quadrature of the exact slice areas over `u = log a`:
/// at height `a = e^u` the slice is the disc of area
/// `pi (sinh^2 r - (e^u - cosh r)^2)`.
///
/// Fails with a quadrature error when the requested tolerance cannot be
/// certified.
pub fn ball_volume(r: f64, tol: f64) -> Result<f64> {
    if r <= 0.0 || !r.is_finite() {
        return Err(CoreError::InvalidParameter(format!("ball radius {r} must be positive")));
    }
    let ch = r.cosh();
    let sh2 = r.sinh() * r.sinh();
    let slice = |u: f64| {
        let d = u.exp() - ch;
        std::f64::consts::PI * (sh2 - d * d).max(0.0)
    };
    let q = crate::quad::integrate1(&slice, -r, r, tol, 2_000)?;
    Ok(q.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn product_rule_and_identity() {
        let p = GroupPoint::new(1.0, 2.0, 2.0).unwrap();
        let q = GroupPoint::new(3.0, 4.0, 5.0).unwrap();
        let pq = p.multiply(&q);
        assert_eq!((pq.x1, pq.x2, pq.a()), (7.0, 10.0, 10.0));
        let e = GroupPoint::identity();
        assert_eq!(e.multiply(&p), p);
        assert_eq!(p.multiply(&e), p);
    }

    #[test]
    fn inverse_solves_product() {
        let e = GroupPoint::identity();
        assert_eq!(e.inverse(), e);
        let p = GroupPoint::new(0.0, 0.0, 2.0).unwrap().inverse();
        assert_eq!((p.x1, p.x2, p.a()), (0.0, 0.0, 0.5));
        let q = GroupPoint::new(2.0, 0.0, 4.0).unwrap().inverse();
        assert_eq!((q.x1, q.x2, q.a()), (-0.5, 0.0, 0.25));
    }

    #[test]
    fn construction_rejects_bad_points() {
        assert!(GroupPoint::new(f64::NAN, 0.0, 1.0).is_err());
        assert!(GroupPoint::new(0.0, 0.0, 0.0).is_err());
        assert!(GroupPoint::new(0.0, 0.0, -1.0).is_err());
        assert!(GroupPoint::new(0.0, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn distance_examples() {
        let e = GroupPoint::identity();
        assert_eq!(distance(&e, &e), 0.0);
        let p = GroupPoint::new(0.0, 0.0, std::f64::consts::E).unwrap();
        assert_abs_diff_eq!(distance(&p, &e), 1.0, epsilon = 1e-12);
        let q = GroupPoint::new(1.0, 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(distance(&q, &e), 2.0f64.acosh(), epsilon = 1e-12);
        assert_abs_diff_eq!(q.r(), 1.3169578969248166, epsilon = 1e-9);
    }

    #[test]
    fn arcosh_near_one_is_accurate() {
        // Compare the series branch against the log form at the crossover.
        for &eps in &[1e-12, 1e-9, 1e-8, 2e-8] {
            let c: f64 = 1.0 + eps;
            let exact = (c + (c * c - 1.0).sqrt()).ln();
            // The direct form itself loses digits here, so compare loosely
            // and also check monotonicity of the series branch.
            assert_abs_diff_eq!(arcosh(c), exact, epsilon = 1e-7 * exact.max(1e-300));
        }
        assert!(arcosh(1.0) == 0.0);
        assert_abs_diff_eq!(arcosh(1e200), 1e200f64.ln() + std::f64::consts::LN_2, epsilon = 1e-10);
    }

    #[test]
    fn modular_examples() {
        let e = GroupPoint::identity();
        assert_eq!(e.modular(), 1.0);
        let p = GroupPoint::new(3.0, 5.0, 2.0).unwrap();
        assert_eq!(p.modular(), 0.25);
    }

    #[test]
    fn flow_examples() {
        let f2 = flow(FieldIndex::X2, 0.25);
        assert_eq!((f2.x1, f2.x2, f2.a()), (0.0, 0.25, 1.0));
        let f0 = flow(FieldIndex::X0, 2.0f64.ln());
        assert_abs_diff_eq!(f0.a(), 2.0, epsilon = 1e-15);
        for i in FieldIndex::ALL {
            assert_eq!(flow(i, 0.0), GroupPoint::identity());
        }
    }

    #[test]
    fn field_derivative_examples() {
        // On the a-axis r = log a, so X0 r = 1.
        let p = GroupPoint::new(0.0, 0.0, (2.0f64).exp()).unwrap();
        let d = field_derivative_richardson(FieldIndex::X0, |q| q.r(), &p, 1e-4).unwrap();
        assert_abs_diff_eq!(d, 1.0, epsilon = 1e-6);

        // X1 r at (1,1,1): x1 / sinh(arcosh 2) = 1/sqrt(3).
        let q = GroupPoint::new(1.0, 1.0, 1.0).unwrap();
        let d = field_derivative_richardson(FieldIndex::X1, |w| w.r(), &q, 1e-4).unwrap();
        assert_abs_diff_eq!(d, 1.0 / 3.0f64.sqrt(), epsilon = 1e-6);

        // Derivative of a constant vanishes.
        for i in FieldIndex::ALL {
            let d = field_derivative(i, |_| 4.25, &q, FD_STEP).unwrap();
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn field_derivative_rejects_non_finite() {
        let p = GroupPoint::identity();
        let res = field_derivative(FieldIndex::X1, |q| 1.0 / (q.x1 - q.x1), &p, 1e-5);
        assert!(matches!(res, Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn ball_volume_small_and_closed_form() {
        // Euclidean limit: volume ~ 4 pi r^3 / 3 for small r.
        let v = ball_volume(0.1, 1e-12).unwrap();
        let euclid = 4.0 * std::f64::consts::PI / 3.0 * 0.1f64.powi(3);
        assert!((v / euclid - 1.0).abs() < 0.05, "v={v} euclid={euclid}");

        // Closed form pi (sinh 2r - 2r).
        let v2 = ball_volume(2.0, 1e-12).unwrap();
        let exact = std::f64::consts::PI * (4.0f64.sinh() - 4.0);
        assert_abs_diff_eq!(v2, exact, epsilon = 1e-8 * exact);

        // Monotone in r.
        let mut prev = 0.0;
        for k in 1..=10 {
            let v = ball_volume(0.4 * k as f64, 1e-10).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn right_invariant_fields_match_coordinate_forms() {
        // X0^r = x1 d1 + x2 d2 + a da ; X1^r = d1 ; X2^r = d2.
        let p = GroupPoint::new(0.7, -1.3, 2.1).unwrap();
        let f = |q: &GroupPoint| q.x1 * q.x1 + 3.0 * q.x2 + q.a().ln();
        let d1 = right_field_derivative(FieldIndex::X1, f, &p, 1e-6).unwrap();
        assert_abs_diff_eq!(d1, 2.0 * p.x1, epsilon = 1e-6);
        let d2 = right_field_derivative(FieldIndex::X2, f, &p, 1e-6).unwrap();
        assert_abs_diff_eq!(d2, 3.0, epsilon = 1e-6);
        let d0 = right_field_derivative(FieldIndex::X0, f, &p, 1e-6).unwrap();
        assert_abs_diff_eq!(d0, p.x1 * 2.0 * p.x1 + p.x2 * 3.0 + 1.0, epsilon = 1e-5);
    }
}
