//! Calderon-Zygmund sets, atoms with validation evidence, and the lifting
//! of plane atoms to atoms on the group.
//!
//! An admissible set is a parallelepiped
//! `[b1 - L/2, b1 + L/2] x [b2 - L/2, b2 + L/2] x [a e^{-r}, a e^{r}]` whose
//! side and height are coupled: `e^2 a r <= L < e^8 a r` when `r < 1` and
//! `a e^{2r} <= L < a e^{8r}` when `r >= 1`. Its right-Haar measure is
//! exactly `2 r L^2`. An atom is a mean-zero function supported in such a
//! set with sup-norm at most the reciprocal measure.

pub mod hn;
pub mod kits;

use crate::error::CoreError;
use crate::group::GroupPoint;
use crate::quad::{distance_to_box, GridFn2};
use crate::Result;
use serde::{Deserialize, Serialize};

/// An admissible parallelepiped: center `(b1, b2)`, side `L`, height center
/// `a`, logarithmic half-height `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CZSet {
    pub b1: f64,
    pub b2: f64,
    pub l: f64,
    pub a: f64,
    pub r: f64,
}

impl CZSet {
    /// Validates positivity and the admissibility inequalities.
    pub fn new(b1: f64, b2: f64, l: f64, a: f64, r: f64) -> Result<Self> {
        if !(l > 0.0 && a > 0.0 && r > 0.0) {
            return Err(CoreError::InvalidParameter(format!(
                "side {l}, height {a} and half-height {r} must be positive"
            )));
        }
        let set = CZSet { b1, b2, l, a, r };
        if !set.is_admissible() {
            return Err(CoreError::InvalidParameter(format!(
                "inadmissible parallelepiped: L={l}, a={a}, r={r}"
            )));
        }
        Ok(set)
    }

    /// The admissibility inequalities alone (callable on any parameters).
    pub fn is_admissible(&self) -> bool {
        let e2 = std::f64::consts::E * std::f64::consts::E;
        if self.r < 1.0 {
            let lo = e2 * self.a * self.r;
            let hi = (8.0f64).exp() * self.a * self.r;
            lo <= self.l && self.l < hi
        } else {
            let lo = self.a * (2.0 * self.r).exp();
            let hi = self.a * (8.0 * self.r).exp();
            lo <= self.l && self.l < hi
        }
    }

    /// Right-Haar measure `2 r L^2`.
    pub fn measure(&self) -> f64 {
        2.0 * self.r * self.l * self.l
    }

    pub fn a_lo(&self) -> f64 {
        self.a * (-self.r).exp()
    }

    pub fn a_hi(&self) -> f64 {
        self.a * self.r.exp()
    }

    pub fn contains(&self, p: &GroupPoint) -> bool {
        (p.x1 - self.b1).abs() <= self.l / 2.0
            && (p.x2 - self.b2).abs() <= self.l / 2.0
            && p.a() >= self.a_lo()
            && p.a() <= self.a_hi()
    }

    /// Membership in the dilated set `R* = {x : d(x, R) < r}`.
    pub fn dilated_contains(&self, p: &GroupPoint) -> bool {
        self.distance_to(p) < self.r
    }

    /// Distance from a point to the set (zero inside).
    pub fn distance_to(&self, p: &GroupPoint) -> f64 {
        distance_to_box(p, self.b1, self.b2, self.l / 2.0, self.a_lo(), self.a_hi())
    }

    /// Left translate `g . R`, again an admissible set.
    pub fn left_translate(&self, g: &GroupPoint) -> CZSet {
        CZSet {
            b1: g.x1 + g.a() * self.b1,
            b2: g.x2 + g.a() * self.b2,
            l: g.a() * self.l,
            a: g.a() * self.a,
            r: self.r,
        }
    }

    /// Center of the set as a group point.
    pub fn center(&self) -> GroupPoint {
        GroupPoint::new(self.b1, self.b2, self.a).expect("valid center")
    }

    /// Measure of the dilated set, by seeded Monte-Carlo sampling of its
    /// indicator over a bounding log-box (the indicator boundary defeats
    /// panel quadrature). The estimate comes with a binomial standard
    /// error.
    pub fn dilated_measure(&self, samples: usize, seed: u64) -> (f64, f64) {
        use rand::Rng;
        let u_c = self.a.ln();
        // d >= |log a_p - log a_q| bounds the u-extent; the x-extent comes
        // from cosh d >= D^2 / (2 a_p a_q) within the height window.
        let u_lo = u_c - 2.0 * self.r - 0.05;
        let u_hi = u_c + 2.0 * self.r + 0.05;
        let reach = (2.0 * u_hi.exp() * self.a_hi() * self.r.cosh()).sqrt();
        let half = self.l / 2.0 + reach + 0.05;
        let volume = (2.0 * half) * (2.0 * half) * (u_hi - u_lo);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut hits = 0usize;
        for _ in 0..samples {
            let p = GroupPoint::new(
                self.b1 + rng.gen_range(-half..half),
                self.b2 + rng.gen_range(-half..half),
                rng.gen_range(u_lo..u_hi).exp(),
            )
            .expect("bounding-box sample");
            if self.dilated_contains(&p) {
                hits += 1;
            }
        }
        let frac = hits as f64 / samples as f64;
        let stderr = (frac * (1.0 - frac) / samples as f64).sqrt();
        (volume * frac, volume * stderr)
    }
}

/// A box in the native coordinates `(x1, x2, a)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub x1: (f64, f64),
    pub x2: (f64, f64),
    pub a: (f64, f64),
}

impl BoxSet {
    pub fn new(x1: (f64, f64), x2: (f64, f64), a: (f64, f64)) -> Result<Self> {
        if !(x1.0 < x1.1 && x2.0 < x2.1 && 0.0 < a.0 && a.0 < a.1) {
            return Err(CoreError::InvalidParameter(format!("degenerate box {x1:?} {x2:?} {a:?}")));
        }
        Ok(BoxSet { x1, x2, a })
    }

    pub fn contains(&self, p: &GroupPoint) -> bool {
        self.x1.0 < p.x1
            && p.x1 < self.x1.1
            && self.x2.0 < p.x2
            && p.x2 < self.x2.1
            && self.a.0 < p.a()
            && p.a() < self.a.1
    }

    /// Right-Haar measure `|x1| |x2| log(a_hi/a_lo)`.
    pub fn measure(&self) -> f64 {
        (self.x1.1 - self.x1.0) * (self.x2.1 - self.x2.0) * (self.a.1 / self.a.0).ln()
    }

    /// Membership in the right translate `E g`.
    pub fn translate_contains(&self, g: &GroupPoint, p: &GroupPoint) -> bool {
        self.contains(&p.multiply(&g.inverse()))
    }

    /// Axis-aligned bounding box of the right translate `E g` (exact for
    /// the shears arising from translates by `(0, sigma, 1)` and
    /// `(0, 0, c)`).
    pub fn translate_bounding_box(&self, g: &GroupPoint) -> BoxSet {
        // E g = { (y1 + b g1, y2 + b g2, b c) : (y1, y2, b) in E }.
        let corners_b = [self.a.0, self.a.1];
        let mut x1 = (f64::INFINITY, f64::NEG_INFINITY);
        let mut x2 = (f64::INFINITY, f64::NEG_INFINITY);
        for &b in &corners_b {
            x1 = (x1.0.min(self.x1.0 + b * g.x1), x1.1.max(self.x1.1 + b * g.x1));
            x2 = (x2.0.min(self.x2.0 + b * g.x2), x2.1.max(self.x2.1 + b * g.x2));
        }
        BoxSet { x1, x2, a: (self.a.0 * g.a(), self.a.1 * g.a()) }
    }

    pub fn center(&self) -> GroupPoint {
        GroupPoint::new(
            0.5 * (self.x1.0 + self.x1.1),
            0.5 * (self.x2.0 + self.x2.1),
            (self.a.0 * self.a.1).sqrt(),
        )
        .expect("valid box center")
    }

    /// Uniform sample in the box (uniform in `log a`).
    pub fn sample<R: rand::Rng>(&self, rng: &mut R) -> GroupPoint {
        let x1 = rng.gen_range(self.x1.0..self.x1.1);
        let x2 = rng.gen_range(self.x2.0..self.x2.1);
        let u = rng.gen_range(self.a.0.ln()..self.a.1.ln());
        GroupPoint::new(x1, x2, u.exp()).expect("sample in box")
    }
}

/// Pointwise evaluation rule of an atom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum AtomRule {
    /// `scale (1_E - 1_{E g})`: the difference of a box and its right
    /// translate.
    TranslateDifference { e: BoxSet, shift: GroupPoint, scale: f64 },
    /// `scale 1_R` over the whole supporting set (not mean-zero; used as a
    /// negative control).
    Constant { scale: f64 },
    /// `scale (1_{upper half} - 1_{lower half})` split at the height center.
    VerticalSplit { scale: f64 },
    /// `(1/2) r^{-1} 1_{[e^{-r}, e^{r}]}(a) b(x1, x2)` for a plane profile
    /// `b`.
    Lifted { profile: PlaneProfile },
}

/// A plane function backing a lifted atom.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum PlaneProfile {
    /// `scale (1_{E1} - 1_{E2})` for plane boxes `(x_lo, x_hi, y_lo, y_hi)`.
    BoxDifference { e1: [f64; 4], e2: [f64; 4], scale: f64 },
    /// Sampled values on a uniform grid, interpolated bilinearly.
    Grid(GridFn2),
}

impl PlaneProfile {
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        match self {
            PlaneProfile::BoxDifference { e1, e2, scale } => {
                let ind = |b: &[f64; 4]| -> f64 {
                    if b[0] < x1 && x1 < b[1] && b[2] < x2 && x2 < b[3] {
                        1.0
                    } else {
                        0.0
                    }
                };
                scale * (ind(e1) - ind(e2))
            }
            PlaneProfile::Grid(g) => g.interp(x1, x2),
        }
    }

    /// Plane integral (exact for box differences, midpoint rule for grids).
    pub fn integral(&self) -> f64 {
        match self {
            PlaneProfile::BoxDifference { e1, e2, scale } => {
                scale * ((e1[1] - e1[0]) * (e1[3] - e1[2]) - (e2[1] - e2[0]) * (e2[3] - e2[2]))
            }
            PlaneProfile::Grid(g) => g.integral(),
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            PlaneProfile::BoxDifference { scale, .. } => scale.abs(),
            PlaneProfile::Grid(g) => g.data.iter().fold(0.0f64, |m, v| m.max(v.abs())),
        }
    }
}

/// A candidate atom: a supporting set, an evaluation rule, and the
/// validation evidence once computed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Atom {
    pub support: CZSet,
    pub rule: AtomRule,
}

/// Per-condition margins from [`Atom::validate`]: support containment,
/// the sup-norm bound `||f||_inf <= rho(R)^{-1}` and the mean-zero
/// condition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AtomEvidence {
    pub supported: bool,
    pub sup_norm: f64,
    pub sup_bound: f64,
    pub sup_ok: bool,
    pub mean: f64,
    pub mean_ok: bool,
    pub pass: bool,
}

impl Atom {
    pub fn eval(&self, p: &GroupPoint) -> f64 {
        match &self.rule {
            AtomRule::TranslateDifference { e, shift, scale } => {
                let mut v = 0.0;
                if e.contains(p) {
                    v += 1.0;
                }
                if e.translate_contains(shift, p) {
                    v -= 1.0;
                }
                scale * v
            }
            AtomRule::Constant { scale } => {
                if self.support.contains(p) {
                    *scale
                } else {
                    0.0
                }
            }
            AtomRule::VerticalSplit { scale } => {
                if !self.support.contains(p) {
                    0.0
                } else if p.a() >= self.support.a {
                    *scale
                } else {
                    -*scale
                }
            }
            AtomRule::Lifted { profile } => {
                let s = self.support;
                if p.a() < s.a_lo() || p.a() > s.a_hi() {
                    0.0
                } else {
                    0.5 / s.r * profile.eval(p.x1, p.x2)
                }
            }
        }
    }

    /// Checks the three atom conditions and returns per-condition margins;
    /// never fails, failing conditions are reported in the evidence.
    pub fn validate(&self) -> AtomEvidence {
        let rho = self.support.measure();
        let sup_bound = 1.0 / rho;
        let (supported, sup_norm, mean) = match &self.rule {
            AtomRule::TranslateDifference { e, shift, scale } => {
                let shifted = e.translate_bounding_box(shift);
                let inside = |b: &BoxSet| {
                    (b.x1.0 - self.support.b1).abs() <= self.support.l / 2.0 + 1e-12
                        && (b.x1.1 - self.support.b1).abs() <= self.support.l / 2.0 + 1e-12
                        && (b.x2.0 - self.support.b2).abs() <= self.support.l / 2.0 + 1e-12
                        && (b.x2.1 - self.support.b2).abs() <= self.support.l / 2.0 + 1e-12
                        && b.a.0 >= self.support.a_lo() - 1e-12
                        && b.a.1 <= self.support.a_hi() + 1e-12
                };
                // Right translation preserves the measure, so the two boxes
                // cancel exactly.
                let mean = scale * (e.measure() - e.measure());
                (inside(e) && inside(&shifted), scale.abs(), mean)
            }
            AtomRule::Constant { scale } => (true, scale.abs(), scale * rho),
            AtomRule::VerticalSplit { scale } => (true, scale.abs(), 0.0),
            AtomRule::Lifted { profile } => {
                let sup = 0.5 / self.support.r * profile.sup_norm();
                // Vertical integral of the height indicator against da/a is
                // exactly 2r, so the mean reduces to the plane integral.
                let mean = profile.integral();
                (true, sup, mean)
            }
        };
        let sup_ok = sup_norm <= sup_bound * (1.0 + 1e-12);
        let mean_ok = mean.abs() <= 1e-10 * sup_norm.max(1.0);
        AtomEvidence { supported, sup_norm, sup_bound, sup_ok, mean, mean_ok, pass: supported && sup_ok && mean_ok }
    }
}

/// Lifts a finite plane atomic decomposition `sum lambda_j b_j` to the
/// group: each plane atom on a square of side `L_j` becomes
/// `(1/2) r_j^{-1} 1_{[e^{-r_j}, e^{r_j}]}(a) b_j(x1, x2)` with `r_j`
/// chosen so the supporting parallelepiped is admissible. The vertical
/// integral `int f da/a` reproduces the plane function exactly and the
/// decomposition-level norm bound is `sum |lambda_j|`.
pub fn lift_to_h1(terms: Vec<(f64, PlaneProfile, (f64, f64), f64)>) -> Result<LiftedFunction> {
    let mut atoms = Vec::with_capacity(terms.len());
    let mut norm_bound = 0.0;
    for (lambda, profile, center, side) in terms {
        if side <= 0.0 {
            return Err(CoreError::InvalidParameter("plane atom side must be positive".into()));
        }
        let sup = profile.sup_norm();
        if sup > (1.0 + 1e-9) / (side * side) {
            return Err(CoreError::NotAnAtom(format!(
                "plane profile sup {sup} exceeds side^-2 = {}",
                1.0 / (side * side)
            )));
        }
        if profile.integral().abs() > 1e-8 * sup.max(1.0) * side * side {
            return Err(CoreError::NotAnAtom("plane profile is not mean-zero".into()));
        }
        let e2 = std::f64::consts::E * std::f64::consts::E;
        let r = if side < e2 { side / e2 } else { side.ln() / 2.0 };
        let support = CZSet::new(center.0, center.1, side, 1.0, r)?;
        atoms.push((lambda, Atom { support, rule: AtomRule::Lifted { profile } }));
        norm_bound += lambda.abs();
    }
    Ok(LiftedFunction { atoms, norm_bound })
}

/// A finite atomic combination on the group with its norm bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiftedFunction {
    pub atoms: Vec<(f64, Atom)>,
    pub norm_bound: f64,
}

impl LiftedFunction {
    pub fn eval(&self, p: &GroupPoint) -> f64 {
        self.atoms.iter().map(|(l, a)| l * a.eval(p)).sum()
    }

    /// Vertical integral `int_0^inf f(x1, x2, a) da/a`, exact for lifted
    /// rules.
    pub fn vertical_integral(&self, x1: f64, x2: f64) -> f64 {
        self.atoms
            .iter()
            .map(|(l, a)| match &a.rule {
                AtomRule::Lifted { profile } => l * profile.eval(x1, x2),
                _ => 0.0,
            })
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn theorem_set() -> CZSet {
        // [-e^2 log2/2, e^2 log2/2]^2 x [1/2, 2]: a = 1, r = log 2,
        // L = e^2 log 2 attains the admissibility lower bound.
        let l = std::f64::consts::E.powi(2) * std::f64::consts::LN_2;
        CZSet::new(0.0, 0.0, l, 1.0, std::f64::consts::LN_2).unwrap()
    }

    #[test]
    fn admissibility_examples() {
        let r = theorem_set();
        assert!(r.is_admissible());
        assert_abs_diff_eq!(r.a_lo(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.a_hi(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.measure(), 36.3655, epsilon = 1e-3);

        // L = 1 with a = r = 1 needs L >= e^2.
        assert!(CZSet::new(0.0, 0.0, 1.0, 1.0, 1.0).is_err());
        assert!(CZSet::new(0.0, 0.0, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn left_translate_stays_admissible() {
        let r = theorem_set();
        let g = GroupPoint::new(5.0, -3.0, 7.0).unwrap();
        let t = r.left_translate(&g);
        assert!(t.is_admissible());
        // Membership transports: g p in gR iff p in R.
        let p = GroupPoint::new(0.3, -0.7, 1.4).unwrap();
        assert_eq!(r.contains(&p), t.contains(&g.multiply(&p)));
    }

    #[test]
    fn dilated_set_contains_the_set() {
        let r = theorem_set();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(11);
        let b = BoxSet::new(
            (-r.l / 2.0, r.l / 2.0),
            (-r.l / 2.0, r.l / 2.0),
            (r.a_lo(), r.a_hi()),
        )
        .unwrap();
        for _ in 0..200 {
            let p = b.sample(&mut rng);
            assert!(r.dilated_contains(&p));
        }
    }

    #[test]
    fn s1_atom_validates() {
        let support = theorem_set();
        let e = BoxSet::new((-0.5, 0.5), (-0.25, 0.0), (1.0, 2.0)).unwrap();
        let shift = GroupPoint::new(0.0, 0.25, 1.0).unwrap();
        let atom = Atom {
            support,
            rule: AtomRule::TranslateDifference { e, shift, scale: 1.0 / support.measure() },
        };
        let ev = atom.validate();
        assert!(ev.pass, "evidence: {ev:?}");

        // E and E^sigma are disjoint: the atom takes values in
        // {-s, 0, +s} and both boxes lie in R.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        for _ in 0..500 {
            let p = e.sample(&mut rng);
            assert!(atom.eval(&p) > 0.0);
            assert!(support.contains(&p));
            let q = p.multiply(&shift);
            assert!(atom.eval(&q) < 0.0, "E sigma overlaps E at {q:?}");
            assert!(support.contains(&q));
        }
    }

    #[test]
    fn failing_conditions_reported() {
        let support = theorem_set();
        let not_mean_zero =
            Atom { support, rule: AtomRule::Constant { scale: 1.0 / support.measure() } };
        let ev = not_mean_zero.validate();
        assert!(!ev.mean_ok && ev.sup_ok && !ev.pass);

        let too_large = Atom {
            support,
            rule: AtomRule::VerticalSplit { scale: 2.0 / support.measure() },
        };
        let ev = too_large.validate();
        assert!(!ev.sup_ok && ev.mean_ok && !ev.pass);
    }

    #[test]
    fn lift_single_atom_and_vertical_identity() {
        // Plane atom: difference of two boxes inside a square of side e^4.
        let side = (4.0f64).exp();
        let scale = 1.0 / (side * side);
        let profile = PlaneProfile::BoxDifference {
            e1: [-10.0, -2.0, -10.0, 10.0],
            e2: [2.0, 10.0, -10.0, 10.0],
            scale,
        };
        let lifted = lift_to_h1(vec![(1.0, profile, (0.0, 0.0), side)]).unwrap();
        assert_eq!(lifted.atoms.len(), 1);
        let (_, atom) = &lifted.atoms[0];
        // r = log(side)/2 = 2 regime.
        assert_abs_diff_eq!(atom.support.r, 2.0, epsilon = 1e-12);
        assert!(atom.support.is_admissible());
        assert!(atom.validate().pass);

        for (x1, x2) in [(-5.0, 0.0), (5.0, 3.0), (0.0, 0.0), (-2.5, -8.0)] {
            let direct = lifted.vertical_integral(x1, x2);
            // Quadrature of f over the height against da/a.
            let f = |u: f64| lifted.eval(&GroupPoint::new(x1, x2, u.exp()).unwrap());
            let q = crate::quad::integrate1(&f, -3.0, 3.0, 1e-10, 4000).unwrap();
            assert_abs_diff_eq!(q.value, direct, epsilon = 1e-8 * direct.abs().max(1e-6));
        }
    }

    #[test]
    fn lift_rejects_non_atoms() {
        let profile = PlaneProfile::BoxDifference {
            e1: [-1.0, 0.0, -1.0, 1.0],
            e2: [0.0, 1.0, -1.0, 1.0],
            scale: 100.0,
        };
        assert!(matches!(
            lift_to_h1(vec![(1.0, profile, (0.0, 0.0), 2.0)]),
            Err(CoreError::NotAnAtom(_))
        ));

        let lopsided = PlaneProfile::BoxDifference {
            e1: [-1.0, 0.0, -1.0, 1.0],
            e2: [0.0, 1.0, 0.0, 1.0],
            scale: 0.1,
        };
        assert!(matches!(
            lift_to_h1(vec![(1.0, lopsided, (0.0, 0.0), 2.0)]),
            Err(CoreError::NotAnAtom(_))
        ));
    }
}
