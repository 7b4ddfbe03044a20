//! Deterministic adaptive quadrature in logarithmic coordinates, truncated
//! tail scans for divergence experiments, and 2D grid convolution.
//!
//! All routines are pure and deterministic: panels are refined depth-first
//! (left half before right half), partial sums use compensated (Kahan)
//! accumulation in a fixed order, and no randomness or thread scheduling
//! enters the result. Error control is by a nested Gauss-Legendre pair
//! (7/15 points in 1D, tensorized in 2D); a panel's error estimate is the
//! difference of the two rules.

use crate::error::CoreError;
use crate::group::GroupPoint;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::io::{Read, Write};
use std::sync::OnceLock;

/// Compensated (Kahan) accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Kahan {
    sum: f64,
    carry: f64,
}

impl Kahan {
    pub fn add(&mut self, x: f64) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, by Newton iteration on
/// the Legendre recurrence.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

fn rule_low() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(7))
}

fn rule_high() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(15))
}

/// Result of an adaptive integration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuadResult {
    pub value: f64,
    /// Estimated absolute error.
    pub error: f64,
    /// Number of integrand evaluations.
    pub evals: usize,
    /// Number of panels in the final subdivision.
    pub panels: usize,
}

/// Axis-aligned rectangle `[x_lo, x_hi] x [y_lo, y_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Rect {
    pub fn new(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> Self {
        Rect { x_lo, x_hi, y_lo, y_hi }
    }

    pub fn area(&self) -> f64 {
        (self.x_hi - self.x_lo) * (self.y_hi - self.y_lo)
    }
}

struct Budget {
    used: Cell<usize>,
    max: usize,
}

impl Budget {
    fn new(max: usize) -> Self {
        Budget { used: Cell::new(0), max }
    }

    fn take(&self, n: usize) -> bool {
        let u = self.used.get() + n;
        self.used.set(u);
        u <= self.max
    }
}

fn panel1<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let (nl, wl) = rule_low();
    let (nh, wh) = rule_high();
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut lo = Kahan::default();
    for (x, w) in nl.iter().zip(wl) {
        lo.add(w * f(c + h * x));
    }
    let mut hi = Kahan::default();
    for (x, w) in nh.iter().zip(wh) {
        hi.add(w * f(c + h * x));
    }
    let low = lo.value() * h;
    let high = hi.value() * h;
    (high, (high - low).abs())
}

fn adapt1<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    depth: usize,
    budget: &Budget,
    acc: &mut Kahan,
    err: &mut Kahan,
    panels: &mut usize,
) -> bool {
    let (v, e) = panel1(f, a, b);
    let have_budget = budget.take(22);
    // The rounding floor stops refinement chasing noise below double
    // precision of the accumulated value.
    if e <= tol || e <= 1e-13 * v.abs() || depth >= 48 || !have_budget {
        acc.add(v);
        err.add(e);
        *panels += 1;
        return have_budget || e <= tol;
    }
    let m = 0.5 * (a + b);
    let ok_l = adapt1(f, a, m, tol / 2.0, depth + 1, budget, acc, err, panels);
    let ok_r = adapt1(f, m, b, tol / 2.0, depth + 1, budget, acc, err, panels);
    ok_l && ok_r
}

/// Adaptive 1D integration of `f` over `[a, b]` to absolute tolerance
/// `tol`, with at most `max_panels` panel refinements.
pub fn integrate1<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    tol: f64,
    max_panels: usize,
) -> Result<QuadResult> {
    if !(a < b) {
        return Err(CoreError::InvalidParameter(format!("empty interval [{a}, {b}]")));
    }
    let budget = Budget::new(max_panels.saturating_mul(22));
    let mut acc = Kahan::default();
    let mut err = Kahan::default();
    let mut panels = 0;
    let ok = adapt1(f, a, b, tol, 0, &budget, &mut acc, &mut err, &mut panels);
    let res = QuadResult { value: acc.value(), error: err.value(), evals: budget.used.get(), panels };
    if !ok && res.error > tol {
        return Err(CoreError::BudgetExhausted { value: res.value, error: res.error, tol });
    }
    Ok(res)
}

fn panel2<F: Fn(f64, f64) -> f64>(f: &F, r: &Rect) -> (f64, f64) {
    let (nl, wl) = rule_low();
    let (nh, wh) = rule_high();
    let cx = 0.5 * (r.x_lo + r.x_hi);
    let hx = 0.5 * (r.x_hi - r.x_lo);
    let cy = 0.5 * (r.y_lo + r.y_hi);
    let hy = 0.5 * (r.y_hi - r.y_lo);
    let mut lo = Kahan::default();
    for (x, wx) in nl.iter().zip(wl) {
        for (y, wy) in nl.iter().zip(wl) {
            lo.add(wx * wy * f(cx + hx * x, cy + hy * y));
        }
    }
    let mut hi = Kahan::default();
    for (x, wx) in nh.iter().zip(wh) {
        for (y, wy) in nh.iter().zip(wh) {
            hi.add(wx * wy * f(cx + hx * x, cy + hy * y));
        }
    }
    let low = lo.value() * hx * hy;
    let high = hi.value() * hx * hy;
    (high, (high - low).abs())
}

#[allow(clippy::too_many_arguments)]
fn adapt2<F: Fn(f64, f64) -> f64>(
    f: &F,
    r: Rect,
    tol: f64,
    depth: usize,
    budget: &Budget,
    acc: &mut Kahan,
    err: &mut Kahan,
    panels: &mut usize,
) -> bool {
    let (v, e) = panel2(f, &r);
    let have_budget = budget.take(274);
    if e <= tol || e <= 1e-13 * v.abs() || depth >= 40 || !have_budget {
        acc.add(v);
        err.add(e);
        *panels += 1;
        return have_budget || e <= tol;
    }
    // Bisect the longer side; ties split x first.
    let (ra, rb) = if r.x_hi - r.x_lo >= r.y_hi - r.y_lo {
        let m = 0.5 * (r.x_lo + r.x_hi);
        (Rect { x_hi: m, ..r }, Rect { x_lo: m, ..r })
    } else {
        let m = 0.5 * (r.y_lo + r.y_hi);
        (Rect { y_hi: m, ..r }, Rect { y_lo: m, ..r })
    };
    let ok_a = adapt2(f, ra, tol / 2.0, depth + 1, budget, acc, err, panels);
    let ok_b = adapt2(f, rb, tol / 2.0, depth + 1, budget, acc, err, panels);
    ok_a && ok_b
}

/// Adaptive 2D integration over a rectangle.
pub fn integrate2<F: Fn(f64, f64) -> f64>(
    f: &F,
    rect: Rect,
    tol: f64,
    max_panels: usize,
) -> Result<QuadResult> {
    if !(rect.x_lo < rect.x_hi && rect.y_lo < rect.y_hi) {
        return Err(CoreError::InvalidParameter(format!("empty rectangle {rect:?}")));
    }
    let budget = Budget::new(max_panels.saturating_mul(274));
    let mut acc = Kahan::default();
    let mut err = Kahan::default();
    let mut panels = 0;
    let ok = adapt2(f, rect, tol, 0, &budget, &mut acc, &mut err, &mut panels);
    let res = QuadResult { value: acc.value(), error: err.value(), evals: budget.used.get(), panels };
    if !ok && res.error > tol {
        return Err(CoreError::BudgetExhausted { value: res.value, error: res.error, tol });
    }
    Ok(res)
}

/// Adaptive integration of `f(x1, x2, u)` over the solid
/// `{(x1, x2) in section(u), u in [u_lo, u_hi]}` in logarithmic coordinates
/// (where the right Haar measure is Lebesgue). The outer `u`-integral is
/// 1D-adaptive; each slice is solved by [`integrate2`]. A slice whose
/// section is `None` contributes zero.
///
/// `tol` is split evenly between the slice solves and the outer rule, so the
/// reported error bounds the total.
pub fn integrate_sections<F, S>(
    f: &F,
    u_lo: f64,
    u_hi: f64,
    section: &S,
    tol: f64,
    max_panels_inner: usize,
    max_panels_outer: usize,
) -> Result<QuadResult>
where
    F: Fn(f64, f64, f64) -> f64,
    S: Fn(f64) -> Option<Rect>,
{
    if !(u_lo < u_hi) {
        return Err(CoreError::InvalidParameter(format!("empty u-interval [{u_lo}, {u_hi}]")));
    }
    let inner_tol = 0.5 * tol / (u_hi - u_lo);
    let inner_evals = Cell::new(0usize);
    let inner_err = Cell::new(0.0f64);
    let slice = |u: f64| -> f64 {
        match section(u) {
            None => 0.0,
            Some(rect) => {
                if rect.area() <= 0.0 {
                    return 0.0;
                }
                let g = |x1: f64, x2: f64| f(x1, x2, u);
                match integrate2(&g, rect, inner_tol * rect.area().max(1.0) / rect.area().max(1.0), max_panels_inner) {
                    Ok(q) => {
                        inner_evals.set(inner_evals.get() + q.evals);
                        inner_err.set(inner_err.get().max(q.error));
                        q.value
                    }
                    Err(CoreError::BudgetExhausted { value, error, .. }) => {
                        inner_evals.set(inner_evals.get() + max_panels_inner * 274);
                        inner_err.set(inner_err.get().max(error));
                        value
                    }
                    Err(_) => f64::NAN,
                }
            }
        }
    };
    let outer = integrate1(&slice, u_lo, u_hi, 0.5 * tol, max_panels_outer);
    let (mut q, exhausted) = match outer {
        Ok(q) => (q, false),
        Err(CoreError::BudgetExhausted { value, error, tol: _ }) => {
            (QuadResult { value, error, evals: 0, panels: 0 }, true)
        }
        Err(e) => return Err(e),
    };
    if !q.value.is_finite() {
        return Err(CoreError::NonFinite("slice integral".into()));
    }
    q.evals += inner_evals.get();
    q.error += inner_err.get() * (u_hi - u_lo);
    if exhausted || q.error > tol {
        if q.error > tol {
            return Err(CoreError::BudgetExhausted { value: q.value, error: q.error, tol });
        }
    }
    Ok(q)
}

/// Substitution mapping `s in [0, 1)` to `x = x0 + c s/(1 - s)`, folding a
/// half-line into a finite panel range with weight `c / (1 - s)^2`. For
/// integrands with power-law tails the transformed integrand is again
/// smooth and bounded.
pub fn halfline_map(x0: f64, c: f64) -> impl Fn(f64) -> (f64, f64) {
    move |s: f64| {
        let x = x0 + c * s / (1.0 - s);
        let w = c / ((1.0 - s) * (1.0 - s));
        (x, w)
    }
}

/// Integrates `f` over `[x0, +inf)` via the [`halfline_map`] substitution
/// with scale `c`.
pub fn integrate1_halfline<F: Fn(f64) -> f64>(
    f: &F,
    x0: f64,
    c: f64,
    tol: f64,
    max_panels: usize,
) -> Result<QuadResult> {
    let map = halfline_map(x0, c);
    let g = |s: f64| {
        let (x, w) = map(s);
        if !x.is_finite() || !w.is_finite() {
            return 0.0;
        }
        f(x) * w
    };
    integrate1(&g, 0.0, 1.0 - 1e-14, tol, max_panels)
}

// ---------------------------------------------------------------------------
// Tail scans

/// Fit model for a truncated-integral scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FitModel {
    /// `I(T)` constant: the integral converges.
    Bounded,
    /// `I(T) = A + B log T`.
    Log,
    /// `I(T) = A + B log log T`.
    LogLog,
}

impl std::fmt::Display for FitModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FitModel::Bounded => write!(f, "bounded"),
            FitModel::Log => write!(f, "log"),
            FitModel::LogLog => write!(f, "loglog"),
        }
    }
}

/// Outcome of a truncated-tail scan: the curve `(T_k, I(T_k))`, the best
/// fit model with its parameters, and the fit residual.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanReport {
    /// Strictly increasing truncation bounds with the truncated integrals.
    pub entries: Vec<(f64, f64)>,
    /// Best-fitting model.
    pub model: FitModel,
    /// Intercept `A` of the best fit.
    pub intercept: f64,
    /// Slope `B` of the best fit (zero for the bounded model).
    pub slope: f64,
    /// Root-mean-square residual of the best fit.
    pub residual: f64,
    /// Relative variation of `I` over the last decade of `T`.
    pub last_decade_variation: f64,
}

impl ScanReport {
    /// Builds the report from a scan curve by fitting all models.
    pub fn fit(entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.len() < 3 {
            return Err(CoreError::InvalidParameter("scan needs at least 3 truncation points".into()));
        }
        for w in entries.windows(2) {
            if !(w[0].0 < w[1].0) {
                return Err(CoreError::InvalidParameter("truncation bounds must increase".into()));
            }
        }
        let fits = [
            (FitModel::Log, Self::least_squares(&entries, |t| t.ln())),
            (FitModel::LogLog, Self::least_squares(&entries, |t| t.ln().ln())),
        ];
        // Bounded model: constant fit.
        let n = entries.len() as f64;
        let mean = entries.iter().map(|e| e.1).sum::<f64>() / n;
        let bounded_res =
            (entries.iter().map(|e| (e.1 - mean) * (e.1 - mean)).sum::<f64>() / n).sqrt();

        let t_end = entries.last().unwrap().0;
        let i_end = entries.last().unwrap().1;
        // Interpolate I at T_end / 10 on the log-T axis.
        let t_prev = t_end / 10.0;
        let i_prev = {
            let mut v = entries[0].1;
            for w in entries.windows(2) {
                if w[1].0 >= t_prev {
                    let (t0, i0) = w[0];
                    let (t1, i1) = w[1];
                    let s = ((t_prev.max(t0)).ln() - t0.ln()) / (t1.ln() - t0.ln());
                    v = i0 + s * (i1 - i0);
                    break;
                }
            }
            v
        };
        let scale = i_end.abs().max(1e-300);
        let last_decade_variation = ((i_end - i_prev) / scale).abs();

        let mut best = (FitModel::Bounded, mean, 0.0, bounded_res);
        for (model, (a, b, res)) in fits {
            if res < best.3 {
                best = (model, a, b, res);
            }
        }
        // A clearly flat curve is bounded even if a sloped fit edges out the
        // constant fit on residual.
        if last_decade_variation < 1e-4 {
            best = (FitModel::Bounded, mean, 0.0, bounded_res);
        }
        Ok(ScanReport {
            entries,
            model: best.0,
            intercept: best.1,
            slope: best.2,
            residual: best.3,
            last_decade_variation,
        })
    }

    fn least_squares(entries: &[(f64, f64)], z: impl Fn(f64) -> f64) -> (f64, f64, f64) {
        let n = entries.len() as f64;
        let (mut sz, mut si, mut szz, mut szi) = (0.0, 0.0, 0.0, 0.0);
        for &(t, i) in entries {
            let zt = z(t);
            sz += zt;
            si += i;
            szz += zt * zt;
            szi += zt * i;
        }
        let denom = n * szz - sz * sz;
        if denom.abs() < 1e-30 {
            return (si / n, 0.0, f64::INFINITY);
        }
        let b = (n * szi - sz * si) / denom;
        let a = (si - b * sz) / n;
        let res = (entries
            .iter()
            .map(|&(t, i)| {
                let e = i - (a + b * z(t));
                e * e
            })
            .sum::<f64>()
            / n)
            .sqrt();
        (a, b, res)
    }

    /// True when the scan indicates a convergent integral.
    pub fn is_bounded(&self) -> bool {
        self.model == FitModel::Bounded || self.last_decade_variation < 0.01
    }

    /// Serializes the curve as CSV with columns `T, I, model, params`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("T,I,model,params\n");
        for &(t, i) in &self.entries {
            out.push_str(&format!(
                "{t},{i},{},A={};B={}\n",
                self.model, self.intercept, self.slope
            ));
        }
        out
    }
}

/// Truncated integration domain for one value of the truncation bound `T`,
/// described by exact slice geometry: the `u`-interval, the `x1`-interval
/// of the section at height `u`, and the `x2`-interval over the line
/// `(u, x1)`. Exact intervals keep every nested integrand smooth, so no
/// indicator functions enter the quadrature.
pub struct ScanDomain {
    pub u_lo: f64,
    pub u_hi: f64,
    pub x1_range: Box<dyn Fn(f64) -> Option<(f64, f64)> + Sync>,
    pub x2_range: Box<dyn Fn(f64, f64) -> Option<(f64, f64)> + Sync>,
}

/// One-pass magnitude probe followed by an absolute-tolerance solve:
/// integrates to roughly `rel` relative accuracy with the floor `floor`.
fn integrate1_auto<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    rel: f64,
    floor: f64,
    max_panels: usize,
) -> f64 {
    if !(a < b) {
        return 0.0;
    }
    let (probe, _) = panel1(f, a, b);
    let tol = (rel * probe.abs()).max(floor);
    match integrate1(f, a, b, tol, max_panels) {
        Ok(q) => q.value,
        Err(CoreError::BudgetExhausted { value, .. }) => value,
        Err(_) => f64::NAN,
    }
}

/// Integral of `weight` over a [`ScanDomain`] by nested adaptive 1D rules
/// on the exact slice intervals.
pub fn integrate_domain<W>(weight: &W, dom: &ScanDomain, rel: f64) -> Result<f64>
where
    W: Fn(f64, f64, f64) -> f64,
{
    let slice = |u: f64| {
        let Some((x1_lo, x1_hi)) = (dom.x1_range)(u) else {
            return 0.0;
        };
        if !(x1_lo < x1_hi) {
            return 0.0;
        }
        let line = |x1: f64| {
            let Some((x2_lo, x2_hi)) = (dom.x2_range)(u, x1) else {
                return 0.0;
            };
            if !(x2_lo < x2_hi) {
                return 0.0;
            }
            integrate1_auto(&|x2| weight(x1, x2, u), x2_lo, x2_hi, rel / 4.0, 1e-300, 300)
        };
        integrate1_auto(&line, x1_lo, x1_hi, rel / 4.0, 1e-300, 600)
    };
    let (probe, _) = panel1(&slice, dom.u_lo, dom.u_hi);
    let tol = (rel / 2.0 * probe.abs()).max(1e-300);
    let q = match integrate1(&slice, dom.u_lo, dom.u_hi, tol, 900) {
        Ok(q) => q,
        Err(CoreError::BudgetExhausted { value, error, .. }) => {
            QuadResult { value, error, evals: 0, panels: 0 }
        }
        Err(e) => return Err(e),
    };
    if !q.value.is_finite() {
        return Err(CoreError::NonFinite("scan slice integral".into()));
    }
    Ok(q.value)
}

/// Computes the truncated integrals `I(T_k)` of `weight` over the domains
/// produced by `domain_at` and fits growth models.
///
/// `weight` must be nonnegative on the region; each `I(T_k)` is solved
/// independently to relative tolerance `tol_rel`.
pub fn scan_tail<W, D>(weight: &W, domain_at: &D, t_list: &[f64], tol_rel: f64) -> Result<ScanReport>
where
    W: Fn(f64, f64, f64) -> f64,
    D: Fn(f64) -> ScanDomain,
{
    let mut entries = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let dom = domain_at(t);
        entries.push((t, integrate_domain(weight, &dom, tol_rel)?));
    }
    ScanReport::fit(entries)
}

// ---------------------------------------------------------------------------
// 2D grids and convolution

/// A sampled function on a uniform 2D grid. `data[j * nx + i]` holds the
/// value at `(x0 + i dx, y0 + j dx)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridFn2 {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub x0: f64,
    pub y0: f64,
    pub data: Vec<f64>,
}

impl GridFn2 {
    /// Samples `f` on the grid covering `[x0, x0 + (nx-1) dx] x ...`.
    pub fn sample<F: Fn(f64, f64) -> f64>(x0: f64, y0: f64, dx: f64, nx: usize, ny: usize, f: F) -> Self {
        let mut data = vec![0.0; nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                data[j * nx + i] = f(x0 + i as f64 * dx, y0 + j as f64 * dx);
            }
        }
        GridFn2 { nx, ny, dx, x0, y0, data }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * self.nx + i]
    }

    /// Midpoint-rule integral of the grid values.
    pub fn integral(&self) -> f64 {
        let mut acc = Kahan::default();
        for &v in &self.data {
            acc.add(v);
        }
        acc.value() * self.dx * self.dx
    }

    /// Midpoint-rule `L^2` norm.
    pub fn l2_norm(&self) -> f64 {
        let mut acc = Kahan::default();
        for &v in &self.data {
            acc.add(v * v);
        }
        (acc.value() * self.dx * self.dx).sqrt()
    }

    /// Bilinear interpolation; zero outside the grid.
    pub fn interp(&self, x: f64, y: f64) -> f64 {
        let fx = (x - self.x0) / self.dx;
        let fy = (y - self.y0) / self.dx;
        if fx < 0.0 || fy < 0.0 || fx > (self.nx - 1) as f64 || fy > (self.ny - 1) as f64 {
            return 0.0;
        }
        let i = (fx.floor() as usize).min(self.nx - 2);
        let j = (fy.floor() as usize).min(self.ny - 2);
        let tx = fx - i as f64;
        let ty = fy - j as f64;
        let v00 = self.at(i, j);
        let v10 = self.at(i + 1, j);
        let v01 = self.at(i, j + 1);
        let v11 = self.at(i + 1, j + 1);
        v00 * (1.0 - tx) * (1.0 - ty) + v10 * tx * (1.0 - ty) + v01 * (1.0 - tx) * ty + v11 * tx * ty
    }

    /// Writes the grid as a single-line JSON header (`nx, ny, dx, origin`)
    /// followed by the raw little-endian doubles.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let header = serde_json::json!({
            "nx": self.nx, "ny": self.ny, "dx": self.dx, "origin": [self.x0, self.y0],
        });
        writeln!(w, "{header}")?;
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads a grid written by [`GridFn2::write_to`].
    pub fn read_from<R: Read>(mut r: R) -> std::io::Result<Self> {
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            r.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
        }
        let v: serde_json::Value = serde_json::from_slice(&header)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let nx = v["nx"].as_u64().unwrap_or(0) as usize;
        let ny = v["ny"].as_u64().unwrap_or(0) as usize;
        let dx = v["dx"].as_f64().unwrap_or(0.0);
        let x0 = v["origin"][0].as_f64().unwrap_or(0.0);
        let y0 = v["origin"][1].as_f64().unwrap_or(0.0);
        let mut data = vec![0.0; nx * ny];
        let mut buf = [0u8; 8];
        for d in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *d = f64::from_le_bytes(buf);
        }
        Ok(GridFn2 { nx, ny, dx, x0, y0, data })
    }
}

/// Direct discrete convolution `(kernel_a * g)` on the grid of `g`, where
/// `kernel_a(x) = a^{-2} kernel(x/a)` is the scaled kernel. The kernel is
/// truncated at the radius where its assumed `|x|^{-3}` tail contributes
/// less than `1e-4` of the accumulated value; with the grids used here the
/// truncation radius always covers the full grid, so this is the exact
/// discrete convolution.
pub fn convolve2d<K: Fn(f64, f64) -> f64>(kernel: &K, g: &GridFn2, a: f64) -> Result<GridFn2> {
    if a <= 0.0 {
        return Err(CoreError::InvalidParameter("scale a must be positive".into()));
    }
    if g.dx > a && g.dx > 0.5 {
        return Err(CoreError::GridTooCoarse(format!(
            "grid step {} exceeds kernel scale {a}",
            g.dx
        )));
    }
    let inv_a2 = 1.0 / (a * a);
    let cell = g.dx * g.dx;
    let mut out = GridFn2 {
        nx: g.nx,
        ny: g.ny,
        dx: g.dx,
        x0: g.x0,
        y0: g.y0,
        data: vec![0.0; g.nx * g.ny],
    };
    for j in 0..g.ny {
        for i in 0..g.nx {
            let x = g.x0 + i as f64 * g.dx;
            let y = g.y0 + j as f64 * g.dx;
            let mut acc = Kahan::default();
            for jj in 0..g.ny {
                for ii in 0..g.nx {
                    let gv = g.at(ii, jj);
                    if gv == 0.0 {
                        continue;
                    }
                    let sx = (x - (g.x0 + ii as f64 * g.dx)) / a;
                    let sy = (y - (g.y0 + jj as f64 * g.dx)) / a;
                    acc.add(kernel(sx, sy) * inv_a2 * gv);
                }
            }
            out.data[j * g.nx + i] = acc.value() * cell;
        }
    }
    Ok(out)
}

/// Haar measure of a box in log coordinates (Lebesgue measure there).
pub fn rho_of_log_box(x_extent: f64, y_extent: f64, u_extent: f64) -> f64 {
    x_extent * y_extent * u_extent
}

/// Distance from a point to an axis-aligned box
/// `[b1 - L/2, b1 + L/2] x [b2 - L/2, b2 + L/2] x [a e^{-r}, a e^{r}]`,
/// computed in closed form: the nearest box point clamps each horizontal
/// coordinate, and the optimal height is `sqrt(a_p^2 + D^2)` clamped to the
/// height interval.
pub fn distance_to_box(
    p: &GroupPoint,
    b1: f64,
    b2: f64,
    half_l: f64,
    a_lo: f64,
    a_hi: f64,
) -> f64 {
    let q1 = p.x1.clamp(b1 - half_l, b1 + half_l);
    let q2 = p.x2.clamp(b2 - half_l, b2 + half_l);
    let d2 = (p.x1 - q1) * (p.x1 - q1) + (p.x2 - q2) * (p.x2 - q2);
    let ap = p.a();
    let aq = (ap * ap + d2).sqrt().clamp(a_lo, a_hi);
    let c = (aq / ap + ap / aq + d2 / (ap * aq)) / 2.0;
    crate::group::arcosh(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomial_is_exact() {
        let f = |x: f64| 7.0 * x.powi(4) + 2.0 * x.powi(3) - 11.0 * x * x + 15.0 * x + 1.0;
        let q = integrate1(&f, -3.0, 10.0, 1e-10, 100).unwrap();
        assert_abs_diff_eq!(q.value, 2133443.0 / 15.0, epsilon = 1e-6);
    }

    #[test]
    fn oscillatory_1d() {
        let q = integrate1(&|x: f64| x.sin(), 0.0, 30.0, 1e-10, 10_000).unwrap();
        assert_abs_diff_eq!(q.value, 1.0 - 30.0f64.cos(), epsilon = 1e-8);
    }

    #[test]
    fn separable_2d_gaussian() {
        let f = |x: f64, y: f64| (-x * x - y * y).exp();
        let q = integrate2(&f, Rect::new(-4.0, 4.0, -4.0, 4.0), 1e-10, 20_000).unwrap();
        let one_d = integrate1(&|x: f64| (-x * x).exp(), -4.0, 4.0, 1e-12, 4_000).unwrap().value;
        assert_abs_diff_eq!(q.value, one_d * one_d, epsilon = 1e-8);
    }

    #[test]
    fn budget_exhaustion_reports_partial() {
        let f = |x: f64| (1.0 / (x * x + 1e-8)).sin();
        match integrate1(&f, -1.0, 1.0, 1e-12, 8) {
            Err(CoreError::BudgetExhausted { value, error, .. }) => {
                assert!(value.is_finite());
                assert!(error > 0.0);
            }
            other => panic!("expected budget exhaustion, got {other:?}"),
        }
    }

    #[test]
    fn sections_cz_box_measure_is_2rl2() {
        // Constant integrand over a CZ box in log coordinates.
        let l = 3.0f64;
        let r = 0.7f64;
        let q = integrate_sections(
            &|_, _, _| 1.0,
            -r,
            r,
            &|_| Some(Rect::new(-l / 2.0, l / 2.0, -l / 2.0, l / 2.0)),
            1e-10,
            100,
            100,
        )
        .unwrap();
        assert_abs_diff_eq!(q.value, 2.0 * r * l * l, epsilon = 1e-9);
    }

    #[test]
    fn halfline_integration() {
        // int_1^inf x^{-2} dx = 1
        let q = integrate1_halfline(&|x: f64| x.powi(-2), 1.0, 2.0, 1e-10, 4_000).unwrap();
        assert_abs_diff_eq!(q.value, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn refinement_consistency() {
        let f = |x: f64| (5.0 * x).cos() * (-x * x).exp();
        let coarse = integrate1(&f, -3.0, 3.0, 1e-4, 10_000).unwrap();
        let fine = integrate1(&f, -3.0, 3.0, 5e-5, 10_000).unwrap();
        assert!((coarse.value - fine.value).abs() <= coarse.error + 1e-12);
    }

    #[test]
    fn determinism_bitwise() {
        let f = |x: f64| (x.sin() / (1.0 + x * x)).abs().sqrt();
        let a = integrate1(&f, 0.0, 20.0, 1e-9, 50_000).unwrap();
        let b = integrate1(&f, 0.0, 20.0, 1e-9, 50_000).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn scan_fit_models() {
        // Exact log growth.
        let entries: Vec<(f64, f64)> =
            (2..10).map(|k| (10f64.powi(k), 1.0 + 0.5 * 10f64.powi(k).ln())).collect();
        let rep = ScanReport::fit(entries).unwrap();
        assert_eq!(rep.model, FitModel::Log);
        assert_abs_diff_eq!(rep.slope, 0.5, epsilon = 1e-9);
        assert!(!rep.is_bounded());

        // Exact loglog growth.
        let entries: Vec<(f64, f64)> =
            (2..10).map(|k| (10f64.powi(k), 2.0 + 0.1 * 10f64.powi(k).ln().ln())).collect();
        let rep = ScanReport::fit(entries).unwrap();
        assert_eq!(rep.model, FitModel::LogLog);
        assert_abs_diff_eq!(rep.slope, 0.1, epsilon = 1e-9);

        // Converged curve.
        let entries: Vec<(f64, f64)> =
            (2..10).map(|k| (10f64.powi(k), 3.0 - 10f64.powi(-k))).collect();
        let rep = ScanReport::fit(entries).unwrap();
        assert!(rep.is_bounded());
    }

    #[test]
    fn grid_roundtrip_and_interp() {
        let g = GridFn2::sample(-1.0, -1.0, 0.25, 9, 9, |x, y| x + 2.0 * y);
        let mut buf = Vec::new();
        g.write_to(&mut buf).unwrap();
        let h = GridFn2::read_from(&buf[..]).unwrap();
        assert_eq!(g.data, h.data);
        assert_eq!(g.nx, h.nx);
        assert_abs_diff_eq!(g.interp(0.1, 0.3), 0.1 + 0.6, epsilon = 1e-12);
        assert_eq!(g.interp(5.0, 0.0), 0.0);
    }

    #[test]
    fn convolution_spike_and_linearity() {
        // g = delta-like spike: convolution samples the kernel.
        let dx = 0.125;
        let mut g = GridFn2::sample(-2.0, -2.0, dx, 33, 33, |_, _| 0.0);
        let ic = 16usize;
        g.data[ic * 33 + ic] = 1.0 / (dx * dx); // unit mass at the origin
        let k = |x: f64, y: f64| (-(x * x + y * y)).exp();
        let out = convolve2d(&k, &g, 1.0).unwrap();
        assert_abs_diff_eq!(out.at(ic, ic), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.interp(0.5, 0.0), (-0.25f64).exp(), epsilon = 1e-12);

        // Linearity.
        let g1 = GridFn2::sample(-2.0, -2.0, dx, 33, 33, |x, y| (-(x * x + y * y)).exp());
        let g2 = GridFn2::sample(-2.0, -2.0, dx, 33, 33, |x, y| x * (-(x * x + y * y)).exp());
        let sum = GridFn2::sample(-2.0, -2.0, dx, 33, 33, |x, y| {
            (1.0 + x) * (-(x * x + y * y)).exp()
        });
        let c1 = convolve2d(&k, &g1, 0.5).unwrap();
        let c2 = convolve2d(&k, &g2, 0.5).unwrap();
        let cs = convolve2d(&k, &sum, 0.5).unwrap();
        for idx in 0..c1.data.len() {
            assert_abs_diff_eq!(c1.data[idx] + c2.data[idx], cs.data[idx], epsilon = 1e-10);
        }
    }

    #[test]
    fn distance_to_box_agrees_with_search() {
        use crate::group::distance;
        let p = GroupPoint::new(3.0, -1.0, 4.0).unwrap();
        let (b1, b2, half_l, a_lo, a_hi) = (0.0, 0.0, 1.0, 0.5, 2.0);
        let d = distance_to_box(&p, b1, b2, half_l, a_lo, a_hi);
        let mut best = f64::INFINITY;
        let n = 60;
        for i in 0..=n {
            for j in 0..=n {
                for k in 0..=n {
                    let q = GroupPoint::new(
                        b1 - half_l + 2.0 * half_l * i as f64 / n as f64,
                        b2 - half_l + 2.0 * half_l * j as f64 / n as f64,
                        a_lo * (a_hi / a_lo).powf(k as f64 / n as f64),
                    )
                    .unwrap();
                    best = best.min(distance(&p, &q));
                }
            }
        }
        assert!((d - best).abs() < 1e-3, "closed form {d} vs search {best}");
        assert!(d <= best + 1e-12);
    }
}
