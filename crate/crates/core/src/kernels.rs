//! Closed-form evaluation of the convolution kernels attached to the
//! distinguished Laplacian: the heat kernel, the inverse-square-root and
//! inverse kernels `U` and `W`, the first-order derivative kernels
//! `k_i = X_i U`, the directional derivatives `X_2 k_1` and `X_0 k_0`, the
//! second-order kernels `k_ij = X_i X_j W` (near field by differences of
//! the closed-form `X_j W`, far field by the term calculus), the kernels
//! `g_ij` of the sandwiched second-order transforms, the smooth unit-ball
//! cutoff, the local-part kernel `beta` in flattened coordinates, and the
//! `psi`-based splitting of the global part.

use crate::error::CoreError;
use crate::group::{
    distance, flow, FieldIndex, GroupPoint,
};
use crate::terms::{second_order_kernel, Coeff, Exponents, SecondOrderKernel};
use crate::Result;
use std::f64::consts::PI;
use std::sync::OnceLock;

/// `r / sinh r`, with the Taylor series below `r = 1e-6`.
pub fn r_over_sinh(r: f64) -> f64 {
    if r < 1e-6 {
        1.0 - r * r / 6.0 + 7.0 * r.powi(4) / 360.0
    } else {
        r / r.sinh()
    }
}

/// The heat kernel
/// `p_t(x) = (8 pi^{3/2})^{-1} delta^{1/2}(x) (r/sinh r) t^{-3/2} e^{-r^2/4t}`.
pub fn heat_kernel(t: f64, p: &GroupPoint) -> Result<f64> {
    if t <= 0.0 {
        return Err(CoreError::InvalidParameter(format!("time {t} must be positive")));
    }
    let r = p.r();
    let norm = 1.0 / (8.0 * PI.powf(1.5));
    Ok(norm * (1.0 / p.a()) * r_over_sinh(r) * t.powf(-1.5) * (-r * r / (4.0 * t)).exp())
}

/// Kernel of the inverse square root of the Laplacian:
/// `U(x) = (1/2 pi^2) delta^{1/2}(x) / (r sinh r)`.
pub fn kernel_u(p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    Ok((1.0 / (2.0 * PI * PI)) * (1.0 / p.a()) / (r * r.sinh()))
}

/// Kernel of the inverse Laplacian:
/// `W(x) = (1/4 pi) delta^{1/2}(x) / sinh r`.
pub fn kernel_w(p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    Ok((1.0 / (4.0 * PI)) * (1.0 / p.a()) / r.sinh())
}

/// Closed form of the first derivatives of `W`:
/// `X_j W = -(1/4 pi) a^{-1} x_j cosh r / sinh^3 r` for `j = 1, 2` and
/// `X_0 W = -(1/4 pi) a^{-1} [ 1/sinh r + cosh r (a - cosh r)/sinh^3 r ]`.
pub fn kernel_xw(j: FieldIndex, p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let sh = r.sinh();
    let ch = r.cosh();
    let inv_a = 1.0 / p.a();
    let c = -1.0 / (4.0 * PI);
    Ok(match j {
        FieldIndex::X1 => c * inv_a * p.x1 * ch / (sh * sh * sh),
        FieldIndex::X2 => c * inv_a * p.x2 * ch / (sh * sh * sh),
        FieldIndex::X0 => c * inv_a * (1.0 / sh + ch * (p.a() - ch) / (sh * sh * sh)),
    })
}

/// First-order kernels `k_i = X_i U`:
///
/// ```text
/// k_i = -(1/2 pi^2) a^{-1} x_i (sinh r + r cosh r)/(r^2 sinh^3 r)   (i = 1, 2)
/// k_0 = -(1/2 pi^2) a^{-1} [ 1/(r sinh r)
///        + (a - cosh r)(sinh r + r cosh r)/(r^2 sinh^3 r) ] .
/// ```
pub fn kernel_k(i: FieldIndex, p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let sh = r.sinh();
    let ch = r.cosh();
    let inv_a = 1.0 / p.a();
    let grad = (sh + r * ch) / (r * r * sh * sh * sh);
    let c = 1.0 / (2.0 * PI * PI);
    Ok(match i {
        FieldIndex::X1 => -c * inv_a * p.x1 * grad,
        FieldIndex::X2 => -c * inv_a * p.x2 * grad,
        FieldIndex::X0 => -c * inv_a * (1.0 / (r * sh) + (p.a() - ch) * grad),
    })
}

/// Shared numerator of the radial second derivatives:
/// `M(r) = 2 r^2 cosh^2 r + r^2 + 2 sinh^2 r + 3 r sinh r cosh r`.
fn second_radial_numerator(r: f64) -> f64 {
    let sh = r.sinh();
    let ch = r.cosh();
    2.0 * r * r * ch * ch + r * r + 2.0 * sh * sh + 3.0 * r * sh * ch
}

/// Closed form of `X_2 k_1`:
/// `(1/2 pi^2) a^{-1} x_1 x_2 M(r) / (r^3 sinh^5 r)`.
pub fn kernel_x2k1(p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let sh = r.sinh();
    Ok((1.0 / (2.0 * PI * PI)) * (1.0 / p.a()) * p.x1 * p.x2 * second_radial_numerator(r)
        / (r * r * r * sh.powi(5)))
}

/// Closed form of `X_0 k_0`:
///
/// ```text
/// (1/2 pi^2) [ a^{-1}/(r sinh r)
///   + (1 - 3 a^{-2} - 3 a^{-2}(x1^2 + x2^2))/2 * (sinh r + r cosh r)/(r^2 sinh^3 r)
///   + a^{-1} ((a - a^{-1} - a^{-1}(x1^2 + x2^2))^2 / 4) * M(r)/(r^3 sinh^5 r) ] .
/// ```
pub fn kernel_x0k0(p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let sh = r.sinh();
    let ch = r.cosh();
    let a = p.a();
    let s = p.x1 * p.x1 + p.x2 * p.x2;
    let inv_a = 1.0 / a;
    let inv_a2 = inv_a * inv_a;
    let grad = (sh + r * ch) / (r * r * sh * sh * sh);
    let t1 = inv_a / (r * sh);
    let t2 = (1.0 - 3.0 * inv_a2 - 3.0 * inv_a2 * s) / 2.0 * grad;
    let half_diff = (a - inv_a - inv_a * s) / 2.0;
    let t3 = inv_a * half_diff * half_diff * second_radial_numerator(r) / (r * r * r * sh.powi(5));
    Ok((1.0 / (2.0 * PI * PI)) * (t1 + t2 + t3))
}

/// Crossover radius between the finite-difference and series strategies
/// for the second-order kernels.
pub const KIJ_CROSSOVER_R: f64 = 3.0;

/// Second-order kernels `k_ij = X_i X_j W` with the far-field term sums
/// built once per truncation order.
pub struct SecondOrderTable {
    cells: Vec<SecondOrderKernel>,
    order: usize,
}

impl SecondOrderTable {
    pub fn new(order: usize) -> Result<Self> {
        let mut cells = Vec::with_capacity(9);
        for i in FieldIndex::ALL {
            for j in FieldIndex::ALL {
                cells.push(second_order_kernel(i, j, order)?);
            }
        }
        Ok(SecondOrderTable { cells, order })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// The derived expansion and constants for the pair `(i, j)`.
    pub fn expansion(&self, i: FieldIndex, j: FieldIndex) -> &SecondOrderKernel {
        &self.cells[i.as_usize() * 3 + j.as_usize()]
    }

    /// Evaluates `k_ij` at `p`: a central difference of the closed-form
    /// `X_j W` along `X_i` inside `r <= 3`, the term-sum value outside.
    pub fn kij(&self, i: FieldIndex, j: FieldIndex, p: &GroupPoint) -> Result<f64> {
        let r = p.r();
        if r == 0.0 {
            return Err(CoreError::Singular);
        }
        if r <= KIJ_CROSSOVER_R {
            kij_near_field(i, j, p)
        } else {
            self.expansion(i, j).terms.evaluate(p)
        }
    }
}

/// Near-field `k_ij` by a central difference of the closed-form `X_j W`
/// along the flow of `X_i`, with a step scaled to the distance from the
/// singularity.
pub fn kij_near_field(i: FieldIndex, j: FieldIndex, p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let h = 1e-5 * r.clamp(0.01, 1.0);
    let fp = kernel_xw(j, &p.multiply(&flow(i, h)))?;
    let fm = kernel_xw(j, &p.multiply(&flow(i, -h)))?;
    Ok((fp - fm) / (2.0 * h))
}

/// Shared second-order table at the default truncation order 12.
pub fn default_table() -> &'static SecondOrderTable {
    static TABLE: OnceLock<SecondOrderTable> = OnceLock::new();
    TABLE.get_or_init(|| SecondOrderTable::new(12).expect("second-order table"))
}

/// Derivative of the modular function along `X_j` at the identity:
/// `-2` for `j = 0`, zero otherwise.
pub fn modular_derivative_at_identity(j: FieldIndex) -> f64 {
    match j {
        FieldIndex::X0 => -2.0,
        _ => 0.0,
    }
}

/// Kernel of the sandwiched transform:
/// `g_ij = -X_j^r (X_i W) + X_j delta(e) X_i W`, with the right-invariant
/// derivative taken by central differences along left multiplication.
pub fn kernel_gij(i: FieldIndex, j: FieldIndex, p: &GroupPoint) -> Result<f64> {
    let r = p.r();
    if r == 0.0 {
        return Err(CoreError::Singular);
    }
    let h = 1e-5 * r.clamp(0.01, 1.0);
    let fp = kernel_xw(i, &flow(j, h).multiply(p))?;
    let fm = kernel_xw(i, &flow(j, -h).multiply(p))?;
    let right_deriv = (fp - fm) / (2.0 * h);
    Ok(-right_deriv + modular_derivative_at_identity(j) * kernel_xw(i, p)?)
}

/// Operator selector for [`integral_kernel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// `R_i = X_i Delta^{-1/2}` with integral kernel `delta(y) k_i(y^{-1} x)`.
    R(FieldIndex),
    /// `S_i = Delta^{-1/2} X_i` with integral kernel `-delta(x) k_i(x^{-1} y)`.
    S(FieldIndex),
    /// `S_ij = Delta^{-1} X_i X_j` with integral kernel
    /// `delta(x) k_ji(x^{-1} y)`.
    Sij(FieldIndex, FieldIndex),
}

/// Integral kernels of the first-order transforms and of `S_ij`.
pub fn integral_kernel(op: OperatorKind, x: &GroupPoint, y: &GroupPoint) -> Result<f64> {
    if distance(x, y) == 0.0 {
        return Err(CoreError::Singular);
    }
    match op {
        OperatorKind::R(i) => Ok(y.modular() * kernel_k(i, &y.inverse().multiply(x))?),
        OperatorKind::S(i) => Ok(-x.modular() * kernel_k(i, &x.inverse().multiply(y))?),
        OperatorKind::Sij(i, j) => {
            let w = x.inverse().multiply(y);
            Ok(x.modular() * default_table().kij(j, i, &w)?)
        }
    }
}

// ---------------------------------------------------------------------------
// Smooth cutoff and the local-part kernel beta

/// Smooth radial cutoff: identically one on the unit ball, supported in the
/// ball of radius two. Profile `eta(s) = sig(2-s) / (sig(2-s) + sig(s-1))`
/// with `sig(u) = e^{-1/u}` for `u > 0`.
#[derive(Debug, Clone, Copy)]
pub struct Cutoff {
    pub inner: f64,
    pub outer: f64,
}

impl Default for Cutoff {
    fn default() -> Self {
        Cutoff { inner: 1.0, outer: 2.0 }
    }
}

fn bump_sig(u: f64) -> f64 {
    if u > 0.0 {
        (-1.0 / u).exp()
    } else {
        0.0
    }
}

impl Cutoff {
    /// Profile value at radial coordinate `s`.
    pub fn profile(&self, s: f64) -> f64 {
        let up = bump_sig(self.outer - s);
        let down = bump_sig(s - self.inner);
        if up == 0.0 {
            0.0
        } else {
            up / (up + down)
        }
    }

    /// Cutoff value at a group point (`1` on `B_inner`, `0` off `B_outer`).
    pub fn value(&self, p: &GroupPoint) -> f64 {
        self.profile(p.r())
    }
}

/// The local-part kernel in flattened coordinates:
///
/// ```text
/// beta((x1,x2,s), (y1,y2,t)) = e^{-2t} k(e^{-t}(x1-y1), e^{-t}(x2-y2), e^{s-t}) .
/// ```
pub fn beta_local<K>(k: &K, x: [f64; 3], y: [f64; 3]) -> Result<f64>
where
    K: Fn(&GroupPoint) -> Result<f64>,
{
    if x == y {
        return Err(CoreError::Singular);
    }
    let et = (-y[2]).exp();
    let p = GroupPoint::new(et * (x[0] - y[0]), et * (x[1] - y[1]), (x[2] - y[2]).exp())?;
    Ok(et * et * k(&p)?)
}

/// Gradient of `beta` in the second (flattened) argument, by central
/// differences.
pub fn beta_local_grad_y<K>(k: &K, x: [f64; 3], y: [f64; 3], h: f64) -> Result<[f64; 3]>
where
    K: Fn(&GroupPoint) -> Result<f64>,
{
    let mut grad = [0.0; 3];
    for (axis, g) in grad.iter_mut().enumerate() {
        let mut yp = y;
        let mut ym = y;
        yp[axis] += h;
        ym[axis] -= h;
        *g = (beta_local(k, x, yp)? - beta_local(k, x, ym)?) / (2.0 * h);
    }
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Global-part splitting k^infty = k^1 + k^2 + k^3

/// The plane kernel `psi` of the scale-factorized part `k^3`:
///
/// ```text
/// psi(y1, y2) = alpha y1^{m1} y2^{m2} / (1 + |y|^2)^2
///             + beta  y1^{n1} y2^{n2} / (1 + |y|^2)^3 ,
/// ```
///
/// built from the principal-part constants of `k_ij` via the substitution
/// `e^{-r} ~ a^{-1} (1 + |a^{-1}(x1,x2)|^2)^{-1}` valid for `a >= 1` far
/// from the identity.
#[derive(Debug, Clone)]
pub struct PsiKernel {
    pub i: usize,
    pub j: usize,
    pub alpha: Coeff,
    pub alpha_exps: Exponents,
    pub beta: Coeff,
    pub beta_exps: Exponents,
}

impl PsiKernel {
    /// Builds `psi` for the stored index order `(i, j)` from the term
    /// calculus.
    pub fn new(i: FieldIndex, j: FieldIndex) -> Result<Self> {
        let k = default_table().expansion(i, j);
        Ok(PsiKernel {
            i: k.i,
            j: k.j,
            alpha: k.alpha,
            alpha_exps: k.alpha_exps,
            beta: k.beta,
            beta_exps: k.beta_exps,
        })
    }

    /// Value of `psi` at a plane point.
    pub fn eval(&self, y1: f64, y2: f64) -> f64 {
        let d = 1.0 + y1 * y1 + y2 * y2;
        let am = self.alpha.to_f64()
            * y1.powi(self.alpha_exps[1] as i32)
            * y2.powi(self.alpha_exps[2] as i32);
        let bn = self.beta.to_f64()
            * y1.powi(self.beta_exps[1] as i32)
            * y2.powi(self.beta_exps[2] as i32);
        am / (d * d) + bn / (d * d * d)
    }

    /// Integral of `psi` over the plane (closed form; only the even part
    /// contributes).
    pub fn plane_integral(&self) -> f64 {
        let term = |c: &Coeff, e: &Exponents, pow: i32| -> f64 {
            if c.is_zero() || e[1] % 2 != 0 || e[2] % 2 != 0 {
                return 0.0;
            }
            // int y1^{2a} y2^{2b} / (1+|y|^2)^pow dy in polar form:
            // only the cases arising here: (0,0,2) -> pi, (0,0,3) -> pi/2,
            // (2,0,3) and (0,2,3) -> pi/4; (2,2,..) does not arise.
            let key = (e[1], e[2], pow);
            let base = match key {
                (0, 0, 2) => PI,
                (0, 0, 3) => PI / 2.0,
                (2, 0, 3) | (0, 2, 3) => PI / 4.0,
                _ => f64::NAN,
            };
            c.to_f64() * base
        };
        term(&self.alpha, &self.alpha_exps, 2) + term(&self.beta, &self.beta_exps, 3)
    }
}

/// The split of the global part of `k_ij` into `k^1 + k^2 + k^3`.
pub struct GlobalSplit {
    pub psi: PsiKernel,
    i: FieldIndex,
    j: FieldIndex,
    cutoff: Cutoff,
}

impl GlobalSplit {
    pub fn new(i: FieldIndex, j: FieldIndex) -> Result<Self> {
        Ok(GlobalSplit { psi: PsiKernel::new(i, j)?, i, j, cutoff: Cutoff::default() })
    }

    /// Global part `k^infty = k_ij (1 - cutoff)`.
    pub fn k_infty(&self, p: &GroupPoint) -> Result<f64> {
        let c = self.cutoff.value(p);
        if c >= 1.0 {
            return Ok(0.0);
        }
        Ok(default_table().kij(self.i, self.j, p)? * (1.0 - c))
    }

    /// `k^3(x1, x2, a) = a^{-2} psi(x1/a, x2/a)` on `{r > 1, a > 1}`.
    pub fn k3(&self, p: &GroupPoint) -> f64 {
        if p.r() > 1.0 && p.a() > 1.0 {
            let a = p.a();
            self.psi.eval(p.x1 / a, p.x2 / a) / (a * a)
        } else {
            0.0
        }
    }

    /// `k^1 = k^infty` restricted to `{a <= 1}`.
    pub fn k1(&self, p: &GroupPoint) -> Result<f64> {
        if p.a() <= 1.0 {
            self.k_infty(p)
        } else {
            Ok(0.0)
        }
    }

    /// `k^2 = k^infty - k^3` on `{a > 1}`.
    pub fn k2(&self, p: &GroupPoint) -> Result<f64> {
        if p.a() > 1.0 {
            Ok(self.k_infty(p)? - self.k3(p))
        } else {
            Ok(0.0)
        }
    }
}

/// Selector for the kernels whose local parts obey the flattened
/// Calderon-Zygmund estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalKernel {
    /// `k_ij^0 = k_ij * cutoff`.
    Kij(FieldIndex, FieldIndex),
    /// `g_ij^0 = g_ij * cutoff`.
    Gij(FieldIndex, FieldIndex),
    /// `l_ij^0 = (delta k_ji-check) * cutoff`, the kernel of `S_ij`.
    Lij(FieldIndex, FieldIndex),
}

impl LocalKernel {
    /// Evaluates the cutoff kernel at a point.
    pub fn eval(&self, p: &GroupPoint) -> Result<f64> {
        let cut = Cutoff::default().value(p);
        if cut == 0.0 {
            return Ok(0.0);
        }
        let v = match self {
            LocalKernel::Kij(i, j) => default_table().kij(*i, *j, p)?,
            LocalKernel::Gij(i, j) => kernel_gij(*i, *j, p)?,
            LocalKernel::Lij(i, j) => {
                p.modular() * default_table().kij(*j, *i, &p.inverse())?
            }
        };
        Ok(v * cut)
    }
}

/// Oracle helpers: independent reconstructions of `U`, `W` and the heat
/// semigroup used by the verification suites. These deliberately avoid the
/// closed forms they are compared against.
pub mod oracles {
    use super::*;
    use crate::quad::{integrate1, integrate2, integrate_sections, Rect};

    /// `U` from the heat kernel by the subordination integral
    /// `U = (1/Gamma(1/2)) int_0^inf t^{-1/2} p_t dt`, integrated in
    /// `w = log t`.
    pub fn u_from_heat(p: &GroupPoint, tol: f64) -> Result<f64> {
        let r = p.r();
        let w_lo = (2.0 * r.max(1e-3).ln() - 10.0).min(-10.0);
        let f = |w: f64| {
            let t = w.exp();
            t.sqrt() * heat_kernel(t, p).unwrap_or(0.0)
        };
        let q = integrate1(&f, w_lo, 24.0, tol, 40_000)?;
        Ok(q.value / PI.sqrt())
    }

    /// `W` from the heat kernel by `W = int_0^inf p_t dt`.
    pub fn w_from_heat(p: &GroupPoint, tol: f64) -> Result<f64> {
        let r = p.r();
        let w_lo = (2.0 * r.max(1e-3).ln() - 10.0).min(-10.0);
        let f = |w: f64| {
            let t = w.exp();
            t * heat_kernel(t, p).unwrap_or(0.0)
        };
        let q = integrate1(&f, w_lo, 28.0, tol, 40_000)?;
        Ok(q.value)
    }

    /// Total mass `int p_t drho` by section quadrature in log coordinates.
    pub fn heat_mass(t: f64, tol: f64) -> Result<f64> {
        let r_max = (160.0 * t).sqrt().max(6.0 * t.sqrt()).max(3.0);
        let ch = r_max.cosh();
        let section = move |u: f64| {
            let s_max = (2.0 * u.exp() * ch - u.exp() * u.exp() - 1.0).max(0.0);
            if s_max <= 0.0 {
                return None;
            }
            let half = s_max.sqrt();
            Some(Rect::new(-half, half, -half, half))
        };
        let f = |x1: f64, x2: f64, u: f64| {
            let p = GroupPoint::new(x1, x2, u.exp()).unwrap();
            heat_kernel(t, &p).unwrap_or(0.0)
        };
        let q = integrate_sections(&f, -r_max, r_max, &section, tol, 6_000, 2_000)?;
        Ok(q.value)
    }

    /// Group convolution `(p_t * p_s)(x)` by section quadrature over the
    /// second factor.
    pub fn heat_convolution(t: f64, s: f64, x: &GroupPoint, tol: f64) -> Result<f64> {
        let r_max: f64 = 6.0;
        let ch = r_max.cosh();
        let section = move |u: f64| {
            let s_max = (2.0 * u.exp() * ch - u.exp() * u.exp() - 1.0).max(0.0);
            if s_max <= 0.0 {
                return None;
            }
            let half = s_max.sqrt();
            Some(Rect::new(-half, half, -half, half))
        };
        let f = |y1: f64, y2: f64, u: f64| {
            let y = GroupPoint::new(y1, y2, u.exp()).unwrap();
            let xy_inv = x.multiply(&y.inverse());
            heat_kernel(t, &xy_inv).unwrap_or(0.0) * heat_kernel(s, &y).unwrap_or(0.0)
        };
        let q = integrate_sections(&f, -r_max, r_max, &section, tol, 8_000, 2_000)?;
        Ok(q.value)
    }

    /// Plane convolution `(psi * phi)(0, 0)` by quadrature over the support
    /// of `phi`.
    pub fn psi_phi_at_origin<F>(psi: &PsiKernel, phi: &F, tol: f64) -> Result<f64>
    where
        F: Fn(f64, f64) -> f64,
    {
        let f = |z1: f64, z2: f64| psi.eval(-z1, -z2) * phi(z1, z2);
        let q = integrate2(&f, Rect::new(-1.0, 1.0, -1.0, 1.0), tol, 20_000)?;
        Ok(q.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::{field_derivative_richardson, FieldIndex};
    use approx::assert_abs_diff_eq;

    #[test]
    fn heat_kernel_at_identity() {
        let e = GroupPoint::identity();
        let v = heat_kernel(1.0, &e).unwrap();
        assert_abs_diff_eq!(v, 1.0 / (8.0 * PI.powf(1.5)), epsilon = 1e-15);
        assert_abs_diff_eq!(v, 0.0224485, epsilon = 1e-6);
    }

    #[test]
    fn u_and_w_spot_values() {
        let p = GroupPoint::new(0.0, 0.0, std::f64::consts::E).unwrap();
        assert_abs_diff_eq!(kernel_u(&p).unwrap(), 0.015859, epsilon = 1e-6);
        assert_abs_diff_eq!(kernel_w(&p).unwrap(), 0.024911, epsilon = 1e-6);
        assert!(matches!(kernel_u(&GroupPoint::identity()), Err(CoreError::Singular)));
    }

    #[test]
    fn kernel_u_is_rotation_invariant() {
        // r depends on x1^2 + x2^2 only.
        let a = 1.7;
        let v1 = kernel_u(&GroupPoint::new(0.5, 0.8, a).unwrap()).unwrap();
        let rho = (0.25f64 + 0.64).sqrt();
        for k in 0..8 {
            let th = k as f64 * 0.7853981633974483;
            let q = GroupPoint::new(rho * th.cos(), rho * th.sin(), a).unwrap();
            assert_abs_diff_eq!(kernel_u(&q).unwrap(), v1, epsilon = 1e-14);
        }
    }

    #[test]
    fn kernel_k_vanishing_factor_and_fd_oracle() {
        let p = GroupPoint::new(0.0, 5.0, 2.0).unwrap();
        assert_eq!(kernel_k(FieldIndex::X1, &p).unwrap(), 0.0);

        let q = GroupPoint::new(1.0, 1.0, 1.0).unwrap();
        let fd = field_derivative_richardson(
            FieldIndex::X1,
            |w| kernel_u(w).unwrap(),
            &q,
            1e-4,
        )
        .unwrap();
        assert_abs_diff_eq!(kernel_k(FieldIndex::X1, &q).unwrap(), fd, epsilon = 1e-8);

        let z = GroupPoint::new(0.0, 0.0, std::f64::consts::E).unwrap();
        let fd0 = field_derivative_richardson(
            FieldIndex::X0,
            |w| kernel_u(w).unwrap(),
            &z,
            1e-4,
        )
        .unwrap();
        assert_abs_diff_eq!(kernel_k(FieldIndex::X0, &z).unwrap(), fd0, epsilon = 1e-8);
    }

    #[test]
    fn kernel_xw_matches_fd() {
        let q = GroupPoint::new(0.8, -0.4, 1.9).unwrap();
        for j in FieldIndex::ALL {
            let fd = field_derivative_richardson(j, |w| kernel_w(w).unwrap(), &q, 1e-4).unwrap();
            assert_abs_diff_eq!(kernel_xw(j, &q).unwrap(), fd, epsilon = 1e-9);
        }
    }

    #[test]
    fn x2k1_zero_line_and_fd() {
        let p = GroupPoint::new(1.5, 0.0, 2.0).unwrap();
        assert_eq!(kernel_x2k1(&p).unwrap(), 0.0);

        let q = GroupPoint::new(1.2, 0.7, 0.8).unwrap();
        let fd = field_derivative_richardson(
            FieldIndex::X2,
            |w| kernel_k(FieldIndex::X1, w).unwrap(),
            &q,
            1e-4,
        )
        .unwrap();
        let v = kernel_x2k1(&q).unwrap();
        assert_abs_diff_eq!(v, fd, epsilon = 1e-7 * v.abs().max(1.0));
    }

    #[test]
    fn x0k0_matches_fd() {
        let q = GroupPoint::new(0.4, -0.9, 1.6).unwrap();
        let fd = field_derivative_richardson(
            FieldIndex::X0,
            |w| kernel_k(FieldIndex::X0, w).unwrap(),
            &q,
            1e-4,
        )
        .unwrap();
        let v = kernel_x0k0(&q).unwrap();
        assert_abs_diff_eq!(v, fd, epsilon = 1e-7 * v.abs().max(1.0));
    }

    #[test]
    fn kij_strategies_agree_in_overlap_band() {
        let table = default_table();
        let dirs: [(f64, f64, f64); 3] = [(0.6, 0.5, 0.62), (0.9, -0.2, 0.4), (-0.5, 0.7, 0.5)];
        for (i, j) in [(FieldIndex::X0, FieldIndex::X0), (FieldIndex::X1, FieldIndex::X2)] {
            for &(d1, d2, d3) in &dirs {
                for &scale in &[2.6, 3.0, 3.4] {
                    let n = (d1 * d1 + d2 * d2 + d3 * d3).sqrt();
                    let p = GroupPoint::new(
                        scale * d1 / n * 2.0,
                        scale * d2 / n * 2.0,
                        (scale * d3 / n).exp(),
                    )
                    .unwrap();
                    let near = kij_near_field(i, j, &p).unwrap();
                    let far = table.expansion(i, j).terms.evaluate(&p).unwrap();
                    let denom = near.abs().max(1e-300);
                    assert!(
                        ((near - far) / denom).abs() < 1e-3,
                        "disagreement at r={} for ({i:?},{j:?}): near={near} far={far}",
                        p.r()
                    );
                }
            }
        }
    }

    #[test]
    fn sij_kernel_duality() {
        let x = GroupPoint::new(0.3, 1.0, 2.0).unwrap();
        let y = GroupPoint::new(-4.0, 2.0, 0.2).unwrap();
        // S_i(x, y) = -R_i(y, x).
        for i in FieldIndex::ALL {
            let s = integral_kernel(OperatorKind::S(i), &x, &y).unwrap();
            let r = integral_kernel(OperatorKind::R(i), &y, &x).unwrap();
            assert_abs_diff_eq!(s, -r, epsilon = 1e-14 * r.abs().max(1.0));
        }
    }

    #[test]
    fn cutoff_profile() {
        let c = Cutoff::default();
        assert_eq!(c.profile(0.5), 1.0);
        assert_eq!(c.profile(1.0), 1.0);
        assert_eq!(c.profile(2.0), 0.0);
        assert_eq!(c.profile(3.0), 0.0);
        let mid = c.profile(1.5);
        assert!(mid > 0.0 && mid < 1.0);
        // Monotone decreasing on [1, 2].
        let mut prev = 1.0;
        for k in 0..=20 {
            let v = c.profile(1.0 + k as f64 * 0.05);
            assert!(v <= prev + 1e-15);
            prev = v;
        }
    }

    #[test]
    fn beta_local_with_origin_second_argument() {
        let k = |p: &GroupPoint| kernel_w(p);
        let x = [0.4, -0.3, 0.2];
        let v = beta_local(&k, x, [0.0, 0.0, 0.0]).unwrap();
        let direct = kernel_w(&GroupPoint::new(0.4, -0.3, 0.2f64.exp()).unwrap()).unwrap();
        assert_abs_diff_eq!(v, direct, epsilon = 1e-15);
        assert!(matches!(beta_local(&k, x, x), Err(CoreError::Singular)));
    }

    #[test]
    fn psi_decay_bound() {
        let psi = PsiKernel::new(FieldIndex::X0, FieldIndex::X0).unwrap();
        let mut fitted = 0.0f64;
        let mut y = 0.05;
        while y < 100.0 {
            for th in [0.0, 0.9, 2.1, 4.0] {
                let (y1, y2) = (y * f64::cos(th), y * f64::sin(th));
                let bound = psi.eval(y1, y2).abs() * (1.0 + y).powi(3);
                fitted = fitted.max(bound);
            }
            y *= 1.3;
        }
        assert!(fitted.is_finite() && fitted > 0.0);
        assert!(fitted < 10.0, "decay constant unexpectedly large: {fitted}");
    }
}
