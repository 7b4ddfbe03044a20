//! Truncated-series term calculus for far-field kernel expansions.
//!
//! Away from the unit ball every kernel handled here is a finite sum of
//! terms `c * a^{m0} x1^{m1} x2^{m2} e^{-p r} * S(e^{-2r})`, where `S` is a
//! convergent power series in `e^{-2r}`. The module implements the exact
//! differentiation rules of the fields `X0, X1, X2` on this term language,
//! splits results into a non-integrable principal part plus an integrable
//! remainder bucket, classifies integrability of individual monomials over
//! the half-regions `a > 1` and `a < 1`, and extracts the principal-part
//! constants of the second- and third-order kernels.
//!
//! Coefficients are exact rationals times a power of `pi`, so the principal
//! constants are produced exactly rather than as floats.
//!
//! The rules use the exact identities `1/sinh r = 2 e^{-r} / (1 - e^{-2r})`
//! and `coth r = 1 + 2 sum_{k>=1} e^{-2kr}`, giving
//!
//! ```text
//! X_i r = 2 x_i e^{-r} S(r)            (i = 1, 2)
//! X_0 r = 2 a  e^{-r} S(r) - S(r) ,
//! ```
//!
//! with specific series `S`. Differentiating `x^m e^{-pr} sigma(r)` along
//! `X_1` therefore yields
//!
//! ```text
//! m1 a^{m0+1} x1^{m1-1} x2^{m2} e^{-pr} sigma
//! + a^{m0} x1^{m1+1} x2^{m2} e^{-(p+1)r} (-2p sigma + 2 sigma') S_geom ,
//! ```
//!
//! and along `X_0`
//!
//! ```text
//! x^m e^{-pr} (m0 sigma + p sigma S_coth - sigma' S_coth)
//! + a^{m0+1} x1^{m1} x2^{m2} e^{-(p+1)r} (-2p sigma + 2 sigma') S_geom .
//! ```

use crate::error::CoreError;
use crate::group::{FieldIndex, GroupPoint};
use crate::Result;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

/// Exact coefficient `q * pi^pi_exp` with rational `q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coeff {
    num: i64,
    den: i64,
    pi_exp: i32,
}

impl Coeff {
    pub fn zero() -> Self {
        Coeff { num: 0, den: 1, pi_exp: 0 }
    }

    pub fn one() -> Self {
        Coeff { num: 1, den: 1, pi_exp: 0 }
    }

    pub fn rational(num: i64, den: i64) -> Self {
        let r = Ratio::new(num, den);
        Coeff { num: *r.numer(), den: *r.denom(), pi_exp: 0 }
    }

    /// `num / (den * pi^k)` for `k >= 0` (the only powers arising here).
    pub fn with_pi(num: i64, den: i64, pi_exp: i32) -> Self {
        let r = Ratio::new(num, den);
        Coeff { num: *r.numer(), den: *r.denom(), pi_exp }
    }

    fn ratio(&self) -> Ratio<i64> {
        Ratio::new(self.num, self.den)
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn mul(&self, rhs: &Coeff) -> Coeff {
        let r = self.ratio() * rhs.ratio();
        if r.is_zero() {
            return Coeff::zero();
        }
        Coeff { num: *r.numer(), den: *r.denom(), pi_exp: self.pi_exp + rhs.pi_exp }
    }

    pub fn scale_int(&self, k: i64) -> Coeff {
        self.mul(&Coeff::rational(k, 1))
    }

    /// Adds coefficients; both sides must share the same power of `pi`
    /// unless one of them vanishes.
    pub fn add(&self, rhs: &Coeff) -> Coeff {
        if self.is_zero() {
            return *rhs;
        }
        if rhs.is_zero() {
            return *self;
        }
        assert_eq!(self.pi_exp, rhs.pi_exp, "adding coefficients with different pi powers");
        let r = self.ratio() + rhs.ratio();
        if r.is_zero() {
            return Coeff::zero();
        }
        Coeff { num: *r.numer(), den: *r.denom(), pi_exp: self.pi_exp }
    }

    pub fn neg(&self) -> Coeff {
        Coeff { num: -self.num, den: self.den, pi_exp: self.pi_exp }
    }

    pub fn to_f64(&self) -> f64 {
        let base = self.ratio().to_f64().unwrap_or(f64::NAN);
        base * std::f64::consts::PI.powi(self.pi_exp)
    }

    /// Exact textual form, e.g. `-2/pi`, `3/2`, `1/(2*pi)`.
    pub fn exact_string(&self) -> String {
        if self.num == 0 {
            return "0".to_string();
        }
        let n = self.num;
        let d = self.den;
        match self.pi_exp {
            0 => {
                if d == 1 {
                    format!("{n}")
                } else {
                    format!("{n}/{d}")
                }
            }
            -1 => {
                if d == 1 {
                    format!("{n}/pi")
                } else {
                    format!("{n}/({d}*pi)")
                }
            }
            1 => {
                if d == 1 {
                    format!("{n}*pi")
                } else {
                    format!("{n}*pi/{d}")
                }
            }
            k if k < 0 => {
                if d == 1 {
                    format!("{n}/pi^{}", -k)
                } else {
                    format!("{n}/({d}*pi^{})", -k)
                }
            }
            k => format!("{n}*pi^{k}/{d}"),
        }
    }
}

/// A truncated power series `c_0 + c_1 e^{-2r} + ... + c_K e^{-2Kr}`.
///
/// `S`-type series have `c_0 = 1`; `R`-type series have `c_0 = 0`. Products
/// and termwise derivatives re-truncate at the stored order and record the
/// loss in `truncated`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpSeries {
    coeffs: Vec<Coeff>,
    truncated: bool,
}

impl ExpSeries {
    /// The constant series `1`.
    pub fn one(order: usize) -> Self {
        let mut coeffs = vec![Coeff::zero(); order + 1];
        coeffs[0] = Coeff::one();
        ExpSeries { coeffs, truncated: false }
    }

    /// Geometric series `sum_k e^{-2kr}`, from `1/(1 - e^{-2r})`; the exact
    /// tail beyond the truncation order is recorded as loss.
    pub fn geometric(order: usize) -> Self {
        ExpSeries { coeffs: vec![Coeff::one(); order + 1], truncated: true }
    }

    /// Series of `coth r = 1 + 2 sum_{k>=1} e^{-2kr}`.
    pub fn coth(order: usize) -> Self {
        let mut coeffs = vec![Coeff::rational(2, 1); order + 1];
        coeffs[0] = Coeff::one();
        ExpSeries { coeffs, truncated: true }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coefficient(&self, k: usize) -> Coeff {
        self.coeffs.get(k).copied().unwrap_or_else(Coeff::zero)
    }

    pub fn coefficients(&self) -> &[Coeff] {
        &self.coeffs
    }

    pub fn truncated(&self) -> bool {
        self.truncated
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(Coeff::is_zero)
    }

    /// `S`-type: leading coefficient exactly one.
    pub fn is_s_type(&self) -> bool {
        self.coeffs[0] == Coeff::one()
    }

    /// `R`-type: vanishing leading coefficient.
    pub fn is_r_type(&self) -> bool {
        self.coeffs[0].is_zero()
    }

    /// Product, truncated at the shorter order.
    pub fn mul(&self, rhs: &ExpSeries) -> ExpSeries {
        let order = self.order().min(rhs.order());
        let mut coeffs = vec![Coeff::zero(); order + 1];
        let mut lost = self.truncated || rhs.truncated;
        for (i, a) in self.coeffs.iter().enumerate() {
            if a.is_zero() {
                continue;
            }
            for (j, b) in rhs.coeffs.iter().enumerate() {
                if b.is_zero() {
                    continue;
                }
                if i + j <= order {
                    coeffs[i + j] = coeffs[i + j].add(&a.mul(b));
                } else {
                    lost = true;
                }
            }
        }
        ExpSeries { coeffs, truncated: lost }
    }

    /// Termwise derivative in `r`: `c_k -> -2k c_k`. Maps `S`-type to
    /// `R`-type.
    pub fn deriv_r(&self) -> ExpSeries {
        let coeffs =
            self.coeffs.iter().enumerate().map(|(k, c)| c.scale_int(-2 * k as i64)).collect();
        ExpSeries { coeffs, truncated: self.truncated }
    }

    pub fn scale(&self, c: &Coeff) -> ExpSeries {
        ExpSeries {
            coeffs: self.coeffs.iter().map(|x| x.mul(c)).collect(),
            truncated: self.truncated,
        }
    }

    pub fn add(&self, rhs: &ExpSeries) -> ExpSeries {
        let order = self.order().max(rhs.order());
        let mut coeffs = vec![Coeff::zero(); order + 1];
        for (k, c) in coeffs.iter_mut().enumerate() {
            *c = self.coefficient(k).add(&rhs.coefficient(k));
        }
        ExpSeries { coeffs, truncated: self.truncated || rhs.truncated }
    }

    /// Splits off the constant term: returns `(c_0, series - c_0)`.
    pub fn split_constant(&self) -> (Coeff, ExpSeries) {
        let c0 = self.coeffs[0];
        let mut tail = self.clone();
        tail.coeffs[0] = Coeff::zero();
        (c0, tail)
    }

    /// Evaluates the series at `q = e^{-2r}`.
    pub fn eval(&self, q: f64) -> f64 {
        // Horner in q, from the highest coefficient down.
        let mut acc = 0.0;
        for c in self.coeffs.iter().rev() {
            acc = acc * q + c.to_f64();
        }
        acc
    }
}

/// Exponent triple `(m0, m1, m2)` for `a^{m0} x1^{m1} x2^{m2}`.
pub type Exponents = [i64; 3];

fn degree(m: &Exponents) -> i64 {
    m[0] + m[1] + m[2]
}

/// One term `coeff * a^{m0} x1^{m1} x2^{m2} e^{-p r} * series(r)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Monomial {
    pub coeff: Coeff,
    pub exps: Exponents,
    pub p: u32,
    pub series: ExpSeries,
}

impl Monomial {
    /// Degree `|m| = m0 + m1 + m2`.
    pub fn degree(&self) -> i64 {
        degree(&self.exps)
    }

    /// Numeric value at a point with `r > 0`, given `e^{-r}`.
    fn eval_with(&self, p: &GroupPoint, exp_neg_r: f64) -> f64 {
        let xm = p.a().powi(self.exps[0] as i32)
            * p.x1.powi(self.exps[1] as i32)
            * p.x2.powi(self.exps[2] as i32);
        self.coeff.to_f64() * xm * exp_neg_r.powi(self.p as i32)
            * self.series.eval(exp_neg_r * exp_neg_r)
    }

    /// The weak non-integrability conditions maintained on every principal
    /// term: `m1 + m2 - 2p <= -2`, `|m| - p <= -2`, `m0 + p >= 0`.
    fn satisfies_principal_conditions(&self) -> bool {
        let p = self.p as i64;
        self.exps[1] + self.exps[2] - 2 * p <= -2
            && self.degree() - p <= -2
            && self.exps[0] + p >= 0
    }
}

/// Region selector for the integrability classification: the part of the
/// complement of the unit ball with `a > 1` or with `a < 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HalfRegion {
    GPlus,
    GMinus,
}

/// Decides integrability of `x^m e^{-p r}` over the selected half-region:
/// over `a > 1` the test is `m1 + m2 - 2p < -2` and `|m| - p < -2`; over
/// `a < 1` it is `m1 + m2 - 2p < -2` and `m0 + p > 0`.
pub fn classify_integrability(m: Exponents, p: u32, region: HalfRegion) -> Result<bool> {
    if m[1] < 0 || m[2] < 0 || m[0] < -1 {
        return Err(CoreError::BadExponent((m[0], m[1], m[2])));
    }
    let p = p as i64;
    let horizontal = m[1] + m[2] - 2 * p < -2;
    Ok(match region {
        HalfRegion::GPlus => horizontal && degree(&m) - p < -2,
        HalfRegion::GMinus => horizontal && m[0] + p > 0,
    })
}

/// A finite sum of monomials split into the non-integrable principal part
/// and the integrable remainder bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSum {
    pub principal: Vec<Monomial>,
    pub q_bucket: Vec<Monomial>,
    order: usize,
}

impl TermSum {
    pub fn empty(order: usize) -> Self {
        TermSum { principal: Vec::new(), q_bucket: Vec::new(), order }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Far-field expansion of the kernel of the inverse Laplacian:
    /// `(1/2pi) a^{-1} e^{-r} S(r)` with the geometric series `S`.
    pub fn expansion_w(order: usize) -> Result<Self> {
        if order < 1 {
            return Err(CoreError::InvalidParameter("truncation order must be >= 1".into()));
        }
        let w = Monomial {
            coeff: Coeff::with_pi(1, 2, -1),
            exps: [-1, 0, 0],
            p: 1,
            series: ExpSeries::geometric(order),
        };
        Ok(TermSum { principal: vec![w], q_bucket: Vec::new(), order })
    }

    /// Checks the integrability conditions carried by every remainder-bucket
    /// monomial: weak inequalities on `(m, p)` with an `R`-type series, so
    /// the effective decay `p + 2` satisfies the strict conditions on both
    /// half-regions.
    pub fn q_bucket_sound(&self) -> Result<bool> {
        for mono in &self.q_bucket {
            if !mono.series.is_r_type() && !mono.coeff.is_zero() && !mono.series.is_zero() {
                return Ok(false);
            }
            let plus = classify_integrability(mono.exps, mono.p + 2, HalfRegion::GPlus)?;
            let minus = classify_integrability(mono.exps, mono.p + 2, HalfRegion::GMinus)?;
            if !(plus && minus) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Applies the field `X_i` to the sum, routing series tails and other
    /// integrable output to the remainder bucket.
    pub fn derive(&self, i: FieldIndex) -> Result<TermSum> {
        if self.order == 0 {
            return Err(CoreError::OrderExhausted);
        }
        let geom = ExpSeries::geometric(self.order);
        let coth = ExpSeries::coth(self.order);
        let mut out = TermSum::empty(self.order);

        let mut emit_principal = |coeff: Coeff, exps: Exponents, p: u32, series: ExpSeries| {
            // Split the constant off the series; the tail is integrable
            // whenever the carried conditions hold, which the debug assert
            // below re-checks on every insertion.
            let (c0, tail) = series.split_constant();
            let lead = coeff.mul(&c0);
            if !lead.is_zero() {
                let mono = Monomial {
                    coeff: lead,
                    exps,
                    p,
                    series: ExpSeries::one(self.order),
                };
                debug_assert!(mono.satisfies_principal_conditions(), "conditions lost at {mono:?}");
                out.principal.push(mono);
            }
            if !tail.is_zero() {
                out.q_bucket.push(Monomial {
                    coeff: Coeff::one(),
                    exps,
                    p,
                    series: tail.scale(&coeff),
                });
            }
        };

        for mono in &self.principal {
            for (coeff, exps, p, series) in rule_outputs(mono, i, &geom, &coth) {
                emit_principal(coeff, exps, p, series);
            }
        }

        for mono in &self.q_bucket {
            for (coeff, exps, p, series) in rule_outputs(mono, i, &geom, &coth) {
                if !series.is_zero() && !coeff.is_zero() {
                    out.q_bucket.push(Monomial {
                        coeff: Coeff::one(),
                        exps,
                        p,
                        series: series.scale(&coeff),
                    });
                }
            }
        }

        out.canonicalize();
        Ok(out)
    }

    /// Merges terms with equal `(exponents, p)` keys and sorts by
    /// `(p, exponents)`.
    fn canonicalize(&mut self) {
        let merge = |list: &mut Vec<Monomial>, fold_series: bool| {
            list.sort_by_key(|m| (m.p, m.exps));
            let mut merged: Vec<Monomial> = Vec::with_capacity(list.len());
            for mono in list.drain(..) {
                match merged.last_mut() {
                    Some(last) if last.p == mono.p && last.exps == mono.exps => {
                        if fold_series {
                            // Bucket entries are normalized to coefficient 1
                            // with the weight folded into the series.
                            last.series = last.series.add(&mono.series);
                        } else if last.series == mono.series {
                            last.coeff = last.coeff.add(&mono.coeff);
                        } else {
                            merged.push(mono);
                        }
                    }
                    _ => merged.push(mono),
                }
            }
            merged.retain(|m| !m.coeff.is_zero() && !m.series.is_zero());
            *list = merged;
        };
        merge(&mut self.principal, false);
        merge(&mut self.q_bucket, true);
    }

    /// Numeric value of principal plus bucket at a point with `r(p) > 1`.
    pub fn evaluate(&self, p: &GroupPoint) -> Result<f64> {
        let r = p.r();
        if r <= 1.0 {
            return Err(CoreError::OutOfDomain { r });
        }
        // e^{-r} = 1 / (cosh r + sqrt(cosh^2 r - 1)), stable for large r.
        let c = p.cosh_r();
        let exp_neg_r = if c > 1e150 { 1.0 / (2.0 * c) } else { 1.0 / (c + (c * c - 1.0).sqrt()) };
        let mut acc = crate::quad::Kahan::default();
        for mono in self.principal.iter().chain(&self.q_bucket) {
            acc.add(mono.eval_with(p, exp_neg_r));
        }
        Ok(acc.value())
    }

    /// Crude bound on the series-truncation loss at a point, used to widen
    /// comparison tolerances: sums `|coeff| |x^m| e^{-(p + 2K + 2) r}` over
    /// the truncated terms with the largest stored coefficient magnitude.
    pub fn truncation_hint(&self, p: &GroupPoint) -> f64 {
        let c = p.cosh_r();
        let e = if c > 1e150 { 1.0 / (2.0 * c) } else { 1.0 / (c + (c * c - 1.0).sqrt()) };
        let mut bound = 0.0;
        for mono in self.principal.iter().chain(&self.q_bucket) {
            if !mono.series.truncated() {
                continue;
            }
            let max_c = mono
                .series
                .coefficients()
                .iter()
                .map(|x| x.to_f64().abs())
                .fold(0.0f64, f64::max)
                .max(1.0);
            let xm = p.a().powi(mono.exps[0] as i32).abs()
                * p.x1.abs().powi(mono.exps[1] as i32)
                * p.x2.abs().powi(mono.exps[2] as i32);
            let tail_start = mono.p as i32 + 2 * (self.order as i32 + 1);
            // Geometric tail of the dropped coefficients.
            bound += mono.coeff.to_f64().abs() * max_c * xm * e.powi(tail_start)
                / (1.0 - e * e).max(1e-12);
        }
        bound
    }
}

/// Output slots of one derivative application. At most two slots arise:
/// the exponent-lowering product-rule term at `(exps', p)` and the
/// decay-raising term at `(exps'', p + 1)`.
fn rule_outputs(
    mono: &Monomial,
    i: FieldIndex,
    geom: &ExpSeries,
    coth: &ExpSeries,
) -> Vec<(Coeff, Exponents, u32, ExpSeries)> {
    let mut out = Vec::with_capacity(2);
    let sigma = &mono.series;
    let sigma_prime = sigma.deriv_r();
    let p = mono.p as i64;
    match i {
        FieldIndex::X1 | FieldIndex::X2 => {
            let axis = if i == FieldIndex::X1 { 1 } else { 2 };
            if mono.exps[axis] != 0 {
                let mut e = mono.exps;
                e[0] += 1;
                e[axis] -= 1;
                out.push((
                    mono.coeff.scale_int(mono.exps[axis]),
                    e,
                    mono.p,
                    sigma.clone(),
                ));
            }
            let mut e = mono.exps;
            e[axis] += 1;
            let series = sigma.scale(&Coeff::rational(-2 * p, 1)).add(&sigma_prime.scale(&Coeff::rational(2, 1)));
            out.push((mono.coeff, e, mono.p + 1, series.mul(geom)));
        }
        FieldIndex::X0 => {
            // Slot at (m, p): m0 sigma + p sigma coth - sigma' coth.
            let same = sigma
                .scale(&Coeff::rational(mono.exps[0], 1))
                .add(&sigma.mul(coth).scale(&Coeff::rational(p, 1)))
                .add(&sigma_prime.mul(coth).scale(&Coeff::rational(-1, 1)));
            if !same.is_zero() {
                out.push((mono.coeff, mono.exps, mono.p, same));
            }
            // Slot at (m + e0, p + 1): (-2p sigma + 2 sigma') S_geom.
            let mut e = mono.exps;
            e[0] += 1;
            let series = sigma.scale(&Coeff::rational(-2 * p, 1)).add(&sigma_prime.scale(&Coeff::rational(2, 1)));
            out.push((mono.coeff, e, mono.p + 1, series.mul(geom)));
        }
    }
    out
}

/// Principal-part constants of a second-order kernel `X_i X_j W`:
/// `alpha x^m e^{-2r} + beta x^n e^{-3r}` with `|m| = 0`, `|n| = 1` and
/// `beta != 0` (`alpha` may vanish).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SecondOrderKernel {
    pub i: usize,
    pub j: usize,
    pub terms: TermSum,
    pub alpha: Coeff,
    pub alpha_exps: Exponents,
    pub beta: Coeff,
    pub beta_exps: Exponents,
}

/// Derives `X_i X_j W` and matches the principal part to its two-term
/// shape, exposing the exact constants.
pub fn second_order_kernel(i: FieldIndex, j: FieldIndex, order: usize) -> Result<SecondOrderKernel> {
    let w = TermSum::expansion_w(order)?;
    let terms = w.derive(j)?.derive(i)?;
    let mut alpha: Option<&Monomial> = None;
    let mut beta: Option<&Monomial> = None;
    for mono in &terms.principal {
        match mono.p {
            2 => {
                if alpha.replace(mono).is_some() {
                    return Err(CoreError::ShapeMismatch("two e^{-2r} principal terms".into()));
                }
            }
            3 => {
                if beta.replace(mono).is_some() {
                    return Err(CoreError::ShapeMismatch("two e^{-3r} principal terms".into()));
                }
            }
            p => {
                return Err(CoreError::ShapeMismatch(format!("unexpected decay e^{{-{p}r}}")));
            }
        }
    }
    let beta = beta.ok_or_else(|| CoreError::ShapeMismatch("missing e^{-3r} term".into()))?;
    if beta.coeff.is_zero() {
        return Err(CoreError::ShapeMismatch("vanishing beta".into()));
    }
    if beta.degree() != 1 {
        return Err(CoreError::ShapeMismatch(format!("|n| = {} != 1", beta.degree())));
    }
    let (alpha_c, alpha_e) = match alpha {
        Some(m) => {
            if m.degree() != 0 {
                return Err(CoreError::ShapeMismatch(format!("|m| = {} != 0", m.degree())));
            }
            (m.coeff, m.exps)
        }
        None => (Coeff::zero(), [0, 0, 0]),
    };
    // Sign conditions carried by the shape.
    let n = beta.exps;
    if !(alpha_e[1] + alpha_e[2] - 4 < -2
        && n[1] + n[2] - 6 < -2
        && alpha_e[0] + 2 > 0
        && n[0] + 3 > 0)
    {
        return Err(CoreError::ShapeMismatch("exponent sign conditions violated".into()));
    }
    Ok(SecondOrderKernel {
        i: i.as_usize(),
        j: j.as_usize(),
        alpha: alpha_c,
        alpha_exps: alpha_e,
        beta: beta.coeff,
        beta_exps: beta.exps,
        terms,
    })
}

/// Principal-part constants of `X_2 X_i X_j W`:
/// `gamma x^h e^{-2r} + (e^{-3r} terms of degree 1) + theta x^n e^{-4r}`
/// with `theta != 0` and `|n| = 2`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThirdOrderKernel {
    pub i: usize,
    pub j: usize,
    pub terms: TermSum,
    pub gamma: Coeff,
    pub gamma_exps: Exponents,
    /// The `e^{-3r}` terms (one or two; colliding keys merge).
    pub mid: Vec<(Coeff, Exponents)>,
    pub theta: Coeff,
    pub theta_exps: Exponents,
}

/// Derives the second-order kernel once more along `X_2` and matches the
/// four-slot shape.
pub fn third_derivative_x2(i: FieldIndex, j: FieldIndex, order: usize) -> Result<ThirdOrderKernel> {
    let second = second_order_kernel(i, j, order)?;
    let terms = second.terms.derive(FieldIndex::X2)?;
    let mut gamma: Option<&Monomial> = None;
    let mut mid = Vec::new();
    let mut theta: Option<&Monomial> = None;
    for mono in &terms.principal {
        match mono.p {
            2 => {
                if gamma.replace(mono).is_some() {
                    return Err(CoreError::ShapeMismatch("two e^{-2r} terms".into()));
                }
            }
            3 => mid.push((mono.coeff, mono.exps)),
            4 => {
                if theta.replace(mono).is_some() {
                    return Err(CoreError::ShapeMismatch("two e^{-4r} terms".into()));
                }
            }
            p => return Err(CoreError::ShapeMismatch(format!("unexpected decay e^{{-{p}r}}"))),
        }
    }
    let theta = theta.ok_or_else(|| CoreError::ShapeMismatch("missing e^{-4r} term".into()))?;
    if theta.coeff.is_zero() {
        return Err(CoreError::ShapeMismatch("vanishing theta".into()));
    }
    if theta.degree() != 2 {
        return Err(CoreError::ShapeMismatch(format!("|n| = {} != 2", theta.degree())));
    }
    if mid.len() > 2 {
        return Err(CoreError::ShapeMismatch("more than two e^{-3r} terms".into()));
    }
    for (_, e) in &mid {
        if degree(e) != 1 {
            return Err(CoreError::ShapeMismatch("e^{-3r} term of degree != 1".into()));
        }
    }
    let (gamma_c, gamma_e) = match gamma {
        Some(m) => {
            if m.degree() != 0 {
                return Err(CoreError::ShapeMismatch("e^{-2r} term of degree != 0".into()));
            }
            (m.coeff, m.exps)
        }
        None => (Coeff::zero(), [0, 0, 0]),
    };
    Ok(ThirdOrderKernel {
        i: i.as_usize(),
        j: j.as_usize(),
        gamma: gamma_c,
        gamma_exps: gamma_e,
        mid,
        theta: theta.coeff,
        theta_exps: theta.exps,
        terms,
    })
}

impl ThirdOrderKernel {
    /// The homogeneous degree-6 polynomial `P(x1, x2, a)` obtained by
    /// replacing `e^{-pr}` with `a^p |x|^{-2p}` in the principal part and
    /// clearing `|x|^8`:
    ///
    /// ```text
    /// P = theta x^n a^4 + |x|^2 [ (mid terms) x^l a^3 ] + |x|^4 gamma x^h a^2 .
    /// ```
    pub fn cone_polynomial(&self, x1: f64, x2: f64, a: f64) -> f64 {
        let norm2 = x1 * x1 + x2 * x2 + a * a;
        let monom = |c: &Coeff, e: &Exponents, extra_a: i32| {
            c.to_f64() * a.powi(e[0] as i32 + extra_a) * x1.powi(e[1] as i32) * x2.powi(e[2] as i32)
        };
        let mut v = monom(&self.theta, &self.theta_exps, 4);
        for (c, e) in &self.mid {
            v += norm2 * monom(c, e, 3);
        }
        v += norm2 * norm2 * monom(&self.gamma, &self.gamma_exps, 2);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn w_closed(p: &GroupPoint) -> f64 {
        (1.0 / (4.0 * std::f64::consts::PI)) * (1.0 / p.a()) / p.r().sinh()
    }

    #[test]
    fn expansion_w_leading_term() {
        let w = TermSum::expansion_w(12).unwrap();
        assert_eq!(w.principal.len(), 1);
        let lead = &w.principal[0];
        assert_eq!(lead.coeff, Coeff::with_pi(1, 2, -1));
        assert_eq!(lead.exps, [-1, 0, 0]);
        assert_eq!(lead.p, 1);
        for k in 0..=12 {
            assert_eq!(lead.series.coefficient(k), Coeff::one());
        }
    }

    #[test]
    fn expansion_w_matches_closed_form() {
        let w = TermSum::expansion_w(20).unwrap();
        let p = GroupPoint::new(0.0, 0.0, 3f64.exp()).unwrap();
        let v = w.evaluate(&p).unwrap();
        assert_abs_diff_eq!(v, w_closed(&p), epsilon = 1e-10 * w_closed(&p));

        // Tail bound at lower order.
        let w5 = TermSum::expansion_w(5).unwrap();
        let q = GroupPoint::new(0.4, -0.2, 2.2f64.exp()).unwrap();
        let rel = (w5.evaluate(&q).unwrap() / w_closed(&q) - 1.0).abs();
        assert!(rel < 10.0 * (-2.0 * 5.0 * q.r()).exp(), "rel={rel}");
    }

    #[test]
    fn evaluate_domain_and_empty() {
        let w = TermSum::expansion_w(6).unwrap();
        let inside = GroupPoint::new(0.1, 0.1, 1.2).unwrap();
        assert!(matches!(w.evaluate(&inside), Err(CoreError::OutOfDomain { .. })));
        let empty = TermSum::empty(6);
        let p = GroupPoint::new(0.0, 0.0, 9.0).unwrap();
        assert_eq!(empty.evaluate(&p).unwrap(), 0.0);
    }

    #[test]
    fn first_derivatives_of_w() {
        let w = TermSum::expansion_w(12).unwrap();
        let dw1 = w.derive(FieldIndex::X1).unwrap();
        assert_eq!(dw1.principal.len(), 1);
        let lead = &dw1.principal[0];
        // -(1/pi) a^{-1} x1 e^{-2r}; the rule -2p applied to (1/2pi) e^{-r}.
        assert_eq!(lead.coeff, Coeff::with_pi(-1, 1, -1));
        assert_eq!(lead.exps, [-1, 1, 0]);
        assert_eq!(lead.p, 2);

        let dw0 = w.derive(FieldIndex::X0).unwrap();
        assert_eq!(dw0.principal.len(), 1);
        let lead0 = &dw0.principal[0];
        // -(1/pi) e^{-2r}: the (m, p)-slot constant (m0 + p) vanishes for W.
        assert_eq!(lead0.coeff, Coeff::with_pi(-1, 1, -1));
        assert_eq!(lead0.exps, [0, 0, 0]);
        assert_eq!(lead0.p, 2);
    }

    #[test]
    fn derivative_of_pure_bucket_stays_in_bucket() {
        let w = TermSum::expansion_w(10).unwrap();
        let mut q_only = w.derive(FieldIndex::X1).unwrap();
        q_only.principal.clear();
        assert!(!q_only.q_bucket.is_empty());
        for i in FieldIndex::ALL {
            let d = q_only.derive(i).unwrap();
            assert!(d.principal.is_empty());
            assert!(d.q_bucket_sound().unwrap());
        }
    }

    #[test]
    fn q_bucket_always_sound() {
        let w = TermSum::expansion_w(8).unwrap();
        let mut ts = w;
        for i in [FieldIndex::X1, FieldIndex::X0, FieldIndex::X2] {
            ts = ts.derive(i).unwrap();
            assert!(ts.q_bucket_sound().unwrap());
        }
    }

    #[test]
    fn classify_integrability_examples() {
        use HalfRegion::*;
        assert!(!classify_integrability([0, 0, 0], 2, GPlus).unwrap());
        assert!(classify_integrability([0, 0, 0], 3, GPlus).unwrap());
        assert!(!classify_integrability([-1, 0, 0], 1, GMinus).unwrap());
        assert!(classify_integrability([-1, 0, 0], 2, GMinus).unwrap());
        assert!(matches!(
            classify_integrability([-2, 0, 0], 3, GPlus),
            Err(CoreError::BadExponent(_))
        ));
        assert!(matches!(
            classify_integrability([0, -1, 0], 3, GPlus),
            Err(CoreError::BadExponent(_))
        ));
    }

    #[test]
    fn second_order_constants() {
        // X0 X0 W: alpha = -2/pi at m = (0,0,0), beta = 4/pi at n = (1,0,0).
        let k00 = second_order_kernel(FieldIndex::X0, FieldIndex::X0, 12).unwrap();
        assert_eq!(k00.alpha, Coeff::with_pi(-2, 1, -1));
        assert_eq!(k00.alpha_exps, [0, 0, 0]);
        assert_eq!(k00.beta, Coeff::with_pi(4, 1, -1));
        assert_eq!(k00.beta_exps, [1, 0, 0]);

        // X1 X1 W: alpha = -1/pi, beta = 4/pi at n = (-1,2,0).
        let k11 = second_order_kernel(FieldIndex::X1, FieldIndex::X1, 12).unwrap();
        assert_eq!(k11.alpha, Coeff::with_pi(-1, 1, -1));
        assert_eq!(k11.alpha_exps, [0, 0, 0]);
        assert_eq!(k11.beta, Coeff::with_pi(4, 1, -1));
        assert_eq!(k11.beta_exps, [-1, 2, 0]);

        // Mixed indices have vanishing alpha but nonzero beta.
        let k12 = second_order_kernel(FieldIndex::X1, FieldIndex::X2, 12).unwrap();
        assert!(k12.alpha.is_zero());
        assert_eq!(k12.beta, Coeff::with_pi(4, 1, -1));
        assert_eq!(k12.beta_exps, [-1, 1, 1]);
    }

    #[test]
    fn all_nine_pairs_match_shape() {
        for i in FieldIndex::ALL {
            for j in FieldIndex::ALL {
                let k = second_order_kernel(i, j, 12).unwrap();
                assert!(!k.beta.is_zero(), "beta vanished for ({i:?},{j:?})");
                assert_eq!(degree(&k.beta_exps), 1);
                if !k.alpha.is_zero() {
                    assert_eq!(degree(&k.alpha_exps), 0);
                }
            }
        }
    }

    #[test]
    fn third_derivative_shape_and_theta() {
        for i in FieldIndex::ALL {
            for j in FieldIndex::ALL {
                let t = third_derivative_x2(i, j, 12).unwrap();
                assert!(!t.theta.is_zero(), "theta vanished for ({i:?},{j:?})");
                assert_eq!(degree(&t.theta_exps), 2);
                assert!(t.mid.len() <= 2);
            }
        }
        // Spot value: X2 k00 = (8/pi) x2 e^{-3r} - (24/pi) a x2 e^{-4r} + Q.
        let t00 = third_derivative_x2(FieldIndex::X0, FieldIndex::X0, 12).unwrap();
        assert!(t00.gamma.is_zero());
        assert_eq!(t00.mid.len(), 1);
        assert_eq!(t00.mid[0].0, Coeff::with_pi(8, 1, -1));
        assert_eq!(t00.mid[0].1, [0, 0, 1]);
        assert_eq!(t00.theta, Coeff::with_pi(-24, 1, -1));
        assert_eq!(t00.theta_exps, [1, 0, 1]);
    }

    #[test]
    fn swap_symmetry_between_11_and_22() {
        let k11 = second_order_kernel(FieldIndex::X1, FieldIndex::X1, 10).unwrap();
        let k22 = second_order_kernel(FieldIndex::X2, FieldIndex::X2, 10).unwrap();
        assert_eq!(k11.alpha, k22.alpha);
        assert_eq!(k11.beta, k22.beta);
        let swapped = [k11.beta_exps[0], k11.beta_exps[2], k11.beta_exps[1]];
        assert_eq!(swapped, k22.beta_exps);
    }

    #[test]
    fn series_closure_properties() {
        let s1 = ExpSeries::geometric(8);
        let s2 = ExpSeries::coth(8);
        assert!(s1.is_s_type() && s2.is_s_type());
        assert!(s1.mul(&s2).is_s_type());
        assert!(s1.deriv_r().is_r_type());
        assert!(s2.deriv_r().is_r_type());
    }

    #[test]
    fn coeff_exact_strings() {
        assert_eq!(Coeff::with_pi(-2, 1, -1).exact_string(), "-2/pi");
        assert_eq!(Coeff::with_pi(1, 2, -1).exact_string(), "1/(2*pi)");
        assert_eq!(Coeff::rational(3, 2).exact_string(), "3/2");
        assert_eq!(Coeff::zero().exact_string(), "0");
    }
}
