//! The multi-scale lattice test function `h_N` and the machinery that
//! measures the super-level sets of its scaled plane convolutions.
//!
//! `h_N = sum_{n=0}^{N} sum_{|k_i| < (2^{qn} L - 1)/p} +- phi(2^{qn} x - p k)`
//! piles mean-zero bumps on `N + 1` dyadic scales inside `[-L, L]^2`. The
//! divergence experiment needs the measure of
//! `{ (x, a) : |psi_a * h_N (x)| > t }` in the product of plane Lebesgue
//! measure and `da/a`, where `psi_a(x) = a^{-2} psi(x/a)`.
//!
//! Writing `V(y, a') = (psi_{a'} * phi)(y)`, scaling gives
//! `psi_a * phi_{nk}(x) = V(2^{qn} x - p k, 2^{qn} a)`, so the convolution
//! field is a lattice sum of one two-parameter function. `V` is precomputed
//! once on grids covering the argument ranges (a direct table where the
//! scaled kernel is wide, and a `psi`-mass-times-`phi` form plus a small
//! correction table where it is narrow) and interpolated; evaluation
//! truncates the lattice sum where the table's tail bound certifies the
//! dropped mass, and every classification carries the accumulated
//! uncertainty so super-level counts are conservative.

use crate::error::CoreError;
use crate::kernels::PsiKernel;
use crate::quad::{integrate1, integrate2, Kahan, Rect};
use crate::Result;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Smooth mean-zero bump choices supported in `[-1, 1]^2`; the four
/// parities cover every parity class the plane kernels take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bump {
    /// `x1 B(x1) B(x2)`: odd in `x1`.
    OddX1,
    /// `x2 B(x1) B(x2)`: odd in `x2`.
    OddX2,
    /// `x1 x2 B(x1) B(x2)`: odd in both.
    OddOdd,
    /// `4 B(2x1) B(2x2) - B(x1) B(x2)`: even, mean-zero by scaling.
    EvenDiff,
}

fn smooth_bump(u: f64) -> f64 {
    if u.abs() < 1.0 {
        (-1.0 / (1.0 - u * u)).exp()
    } else {
        0.0
    }
}

impl Bump {
    pub const ALL: [Bump; 4] = [Bump::OddX1, Bump::OddX2, Bump::OddOdd, Bump::EvenDiff];

    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        match self {
            Bump::OddX1 => x1 * smooth_bump(x1) * smooth_bump(x2),
            Bump::OddX2 => x2 * smooth_bump(x1) * smooth_bump(x2),
            Bump::OddOdd => x1 * x2 * smooth_bump(x1) * smooth_bump(x2),
            Bump::EvenDiff => {
                4.0 * smooth_bump(2.0 * x1) * smooth_bump(2.0 * x2)
                    - smooth_bump(x1) * smooth_bump(x2)
            }
        }
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            Bump::OddX1 | Bump::OddX2 => {
                // max of |u| B(u) times B(0).
                let mut m = 0.0f64;
                for k in 0..=1000 {
                    let u = k as f64 / 1000.0;
                    m = m.max(u * smooth_bump(u));
                }
                m * smooth_bump(0.0)
            }
            Bump::OddOdd => {
                let mut m = 0.0f64;
                for k in 0..=1000 {
                    let u = k as f64 / 1000.0;
                    m = m.max(u * smooth_bump(u));
                }
                m * m
            }
            Bump::EvenDiff => 4.0 * smooth_bump(0.0) * smooth_bump(0.0),
        }
    }

    /// Plane integral; zero for every member by parity or scaling.
    pub fn integral(&self, tol: f64) -> Result<f64> {
        let f = |x: f64, y: f64| self.eval(x, y);
        Ok(integrate2(&f, Rect::new(-1.0, 1.0, -1.0, 1.0), tol, 20_000)?.value)
    }
}

/// Picks the first bump with `|psi * phi(0,0)|` above `threshold`, returning
/// it with the convolution value.
pub fn select_bump(psi: &PsiKernel, threshold: f64) -> Result<(Bump, f64)> {
    for bump in Bump::ALL {
        let v = crate::kernels::oracles::psi_phi_at_origin(psi, &|x, y| bump.eval(x, y), 1e-10)?;
        if v.abs() > threshold {
            return Ok((bump, v));
        }
    }
    Err(CoreError::SearchFailure("no bump pairs with the plane kernel at the origin".into()))
}

/// The lattice sum `h_N` with its sign assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HnFunction {
    /// Number of scales minus one (`N`).
    pub n_scales: usize,
    pub l: f64,
    pub p: u64,
    pub q: u32,
    pub bump: Bump,
    /// Per-scale maximal lattice index: `|k_i| <= kmax[n]`.
    pub kmax: Vec<i64>,
    sign_offsets: Vec<usize>,
    signs: Vec<i8>,
}

/// Sign assignment for [`HnFunction::build`].
pub enum SignChoice {
    /// Independent fair signs from a seeded generator.
    Seed(u64),
    /// Explicit flattened signs (scale-major, then `k1`-major).
    Explicit(Vec<i8>),
}

impl HnFunction {
    pub fn build(n: usize, l: f64, p: u64, q: u32, signs: SignChoice, bump: Bump) -> Result<Self> {
        if (n as f64) >= l.ln() {
            return Err(CoreError::InvalidParameter(format!("need N < log L, got N={n}, L={l}")));
        }
        if p < 4 || q == 0 {
            return Err(CoreError::InvalidParameter("need lattice spacing p >= 4 and q >= 1".into()));
        }
        let mut kmax = Vec::with_capacity(n + 1);
        let mut sign_offsets = Vec::with_capacity(n + 2);
        sign_offsets.push(0usize);
        let mut total = 0usize;
        for scale in 0..=n {
            let bound = ((2f64.powi((q as i32) * scale as i32) * l - 1.0) / p as f64).ceil() as i64 - 1;
            let bound = bound.max(0);
            kmax.push(bound);
            let count = (2 * bound + 1) as usize;
            total += count * count;
            sign_offsets.push(total);
        }
        let signs = match signs {
            SignChoice::Explicit(s) => {
                if s.len() != total {
                    return Err(CoreError::InvalidParameter(format!(
                        "sign vector length {} != term count {total}",
                        s.len()
                    )));
                }
                s
            }
            SignChoice::Seed(seed) => {
                let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                (0..total).map(|_| if rng.gen::<bool>() { 1i8 } else { -1i8 }).collect()
            }
        };
        Ok(HnFunction { n_scales: n, l, p, q, bump, kmax, sign_offsets, signs })
    }

    /// Total number of bump translates.
    pub fn term_count(&self) -> usize {
        *self.sign_offsets.last().unwrap()
    }

    /// Sign of the `(scale, k1, k2)` translate; `None` outside the lattice.
    pub fn sign(&self, scale: usize, k1: i64, k2: i64) -> Option<f64> {
        let m = *self.kmax.get(scale)?;
        if k1.abs() > m || k2.abs() > m {
            return None;
        }
        let side = (2 * m + 1) as usize;
        let idx = self.sign_offsets[scale] + (k1 + m) as usize * side + (k2 + m) as usize;
        Some(self.signs[idx] as f64)
    }

    /// Pointwise value; at each scale at most one translate covers the
    /// point because the lattice spacing exceeds the bump diameter.
    pub fn eval(&self, x1: f64, x2: f64) -> f64 {
        let mut acc = 0.0;
        for scale in 0..=self.n_scales {
            let s = 2f64.powi((self.q as i32) * scale as i32);
            let y1 = s * x1;
            let y2 = s * x2;
            let k1 = (y1 / self.p as f64).round() as i64;
            let k2 = (y2 / self.p as f64).round() as i64;
            if let Some(sign) = self.sign(scale, k1, k2) {
                acc += sign * self.bump.eval(y1 - (self.p as f64) * k1 as f64, y2 - (self.p as f64) * k2 as f64);
            }
        }
        acc
    }

    /// Monte-Carlo `L^2` norm over `[-L, L]^2` with a seeded sampler.
    pub fn l2_norm_mc(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut acc = Kahan::default();
        for _ in 0..samples {
            let x1 = rng.gen_range(-self.l..self.l);
            let x2 = rng.gen_range(-self.l..self.l);
            let v = self.eval(x1, x2);
            acc.add(v * v);
        }
        (acc.value() / samples as f64 * 4.0 * self.l * self.l).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Precomputed scaled convolution V(y, a') = (psi_{a'} * phi)(y)

/// Accurate single-point evaluation of `V(y, a')` by quadrature. The wide
/// regime integrates over the bump support; the narrow regime uses polar
/// coordinates in the scaled variable `v = w/a'` with a logarithmic radial
/// coordinate, where the integrand stays smooth across all scales. The
/// 48-node angular rule is spectrally accurate for the smooth periodic
/// integrand.
pub fn direct_v(psi: &PsiKernel, bump: Bump, y1: f64, y2: f64, a: f64, tol: f64) -> Result<f64> {
    if a >= 0.25 {
        let f = |z1: f64, z2: f64| {
            let w1 = (y1 - z1) / a;
            let w2 = (y2 - z2) / a;
            psi.eval(w1, w2) / (a * a) * bump.eval(z1, z2)
        };
        let q = integrate2(&f, Rect::new(-1.0, 1.0, -1.0, 1.0), tol, 60_000)?;
        Ok(q.value)
    } else {
        let r_hi = (((y1 * y1 + y2 * y2).sqrt() + 1.5) / a).max(8.0);
        let ang = 48usize;
        let ring = |s: f64| {
            let r = s.exp();
            let mut acc = Kahan::default();
            for k in 0..ang {
                let th = (k as f64 + 0.5) * std::f64::consts::TAU / ang as f64;
                let v1 = r * th.cos();
                let v2 = r * th.sin();
                acc.add(psi.eval(v1, v2) * bump.eval(y1 - a * v1, y2 - a * v2));
            }
            acc.value() * r * r * std::f64::consts::TAU / ang as f64
        };
        let s_lo = (1e-5f64).ln();
        let q = integrate1(&ring, s_lo, r_hi.ln(), tol, 40_000)?;
        Ok(q.value)
    }
}

fn catmull_rom(p0: f64, p1: f64, p2: f64, p3: f64, t: f64) -> f64 {
    0.5 * ((2.0 * p1)
        + (-p0 + p2) * t
        + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t * t
        + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t * t * t)
}

/// Interpolated table of `V(y, a')` over the argument range of one
/// experiment, with certified interpolation and truncation bounds.
pub struct PlaneConvolution {
    pub psi_mass: f64,
    bump: Bump,
    half_width: f64,
    step: f64,
    nodes: usize,
    /// `log2 a'` levels of the direct table (wide regime).
    level_lo: f64,
    level_step: f64,
    levels: Vec<Vec<f64>>,
    /// Narrow-regime correction tables `V - psi_mass * phi` on a coarser
    /// grid.
    corr_half_width: f64,
    corr_step: f64,
    corr_nodes: usize,
    corr_level_lo: f64,
    corr_levels: Vec<Vec<f64>>,
    /// Per-level bound on `|V| |y|^4` at the table edge, for lattice-tail
    /// truncation.
    tail_c4: Vec<f64>,
    corr_tail_c4: Vec<f64>,
    /// Bound on `|V| a'^3` above the top level.
    high_bound: f64,
    /// Probe-validated interpolation error.
    pub interp_error: f64,
}

/// Range of `log2 a'` needed by an experiment with scales `q`, `N` and
/// slab heights within `[2^{-1}, 2]`.
fn level_range(q: u32, n_max: usize) -> (f64, f64) {
    let span = (q as f64) * n_max as f64;
    (-span - 1.5, span + 1.5)
}

impl PlaneConvolution {
    /// Builds the tables for scales up to `n_max` at lattice exponent `q`.
    pub fn build(psi: &PsiKernel, bump: Bump, q: u32, n_max: usize) -> Result<Self> {
        let psi_mass = psi.plane_integral();
        let (lo, hi) = level_range(q, n_max);
        let level_step = 0.25;
        let half_width = 16.0;
        let step = 0.125f64;
        let nodes = (2.0 * half_width / step).round() as usize + 1;

        // Wide regime: log2 a' in [-2, min(hi, 5.2)].
        let level_lo = -2.0;
        let level_hi = hi.min(5.2);
        let n_levels = ((level_hi - level_lo) / level_step).ceil() as usize + 1;
        let mut levels = Vec::with_capacity(n_levels);
        let mut tail_c4 = Vec::with_capacity(n_levels);
        let pool = crate::thread_pool();
        for li in 0..n_levels {
            let a = 2f64.powf(level_lo + li as f64 * level_step);
            let data: Vec<f64> = pool.install(|| {
                use rayon::prelude::*;
                (0..nodes * nodes)
                    .into_par_iter()
                    .map(|idx| {
                        let iy = idx / nodes;
                        let ix = idx % nodes;
                        let y1 = -half_width + ix as f64 * step;
                        let y2 = -half_width + iy as f64 * step;
                        direct_v(psi, bump, y1, y2, a, 1e-9).unwrap_or(f64::NAN)
                    })
                    .collect()
            });
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("convolution table entry".into()));
            }
            // Edge-ring tail constant.
            let mut c4 = 0.0f64;
            for ix in 0..nodes {
                for &iy in &[0usize, nodes - 1] {
                    for (gx, gy) in [(ix, iy), (iy, ix)] {
                        let y1 = -half_width + gx as f64 * step;
                        let y2 = -half_width + gy as f64 * step;
                        let r4 = (y1 * y1 + y2 * y2).powi(2);
                        c4 = c4.max(data[gy * nodes + gx].abs() * r4);
                    }
                }
            }
            levels.push(data);
            tail_c4.push(c4);
        }

        // Narrow regime: corrections V - psi_mass * phi for
        // log2 a' in [lo, -2).
        let corr_half_width = 4.0;
        let corr_step = 0.25f64;
        let corr_nodes = (2.0 * corr_half_width / corr_step).round() as usize + 1;
        let corr_level_lo = lo;
        let corr_count = ((-2.0 - lo) / level_step).ceil().max(0.0) as usize;
        let mut corr_levels = Vec::with_capacity(corr_count);
        let mut corr_tail_c4 = Vec::with_capacity(corr_count);
        for li in 0..corr_count {
            let a = 2f64.powf(corr_level_lo + li as f64 * level_step);
            let data: Vec<f64> = pool.install(|| {
                use rayon::prelude::*;
                (0..corr_nodes * corr_nodes)
                    .into_par_iter()
                    .map(|idx| {
                        let iy = idx / corr_nodes;
                        let ix = idx % corr_nodes;
                        let y1 = -corr_half_width + ix as f64 * corr_step;
                        let y2 = -corr_half_width + iy as f64 * corr_step;
                        let v = direct_v(psi, bump, y1, y2, a, 1e-9).unwrap_or(f64::NAN);
                        v - psi_mass * bump.eval(y1, y2)
                    })
                    .collect()
            });
            if data.iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite("correction table entry".into()));
            }
            let mut c4 = 0.0f64;
            for ix in 0..corr_nodes {
                for &iy in &[0usize, corr_nodes - 1] {
                    for (gx, gy) in [(ix, iy), (iy, ix)] {
                        let y1 = -corr_half_width + gx as f64 * corr_step;
                        let y2 = -corr_half_width + gy as f64 * corr_step;
                        let r4 = (y1 * y1 + y2 * y2).powi(2);
                        c4 = c4.max(data[gy * corr_nodes + gx].abs() * r4);
                    }
                }
            }
            corr_levels.push(data);
            corr_tail_c4.push(c4);
        }

        // Above the top level |V| <= high_bound / a'^3; fit on a probe ring.
        let mut high_bound = 0.0f64;
        let a_top = 2f64.powf(level_hi);
        for k in 0..24 {
            let th = k as f64 * std::f64::consts::TAU / 24.0;
            for rad in [0.0, 2.0, 6.0, 12.0] {
                let v = direct_v(psi, bump, rad * th.cos(), rad * th.sin(), a_top, 1e-10)?;
                high_bound = high_bound.max(v.abs() * a_top.powi(3));
            }
        }

        let mut table = PlaneConvolution {
            psi_mass,
            bump,
            half_width,
            step,
            nodes,
            level_lo,
            level_step,
            levels,
            corr_half_width,
            corr_step,
            corr_nodes,
            corr_level_lo,
            corr_levels,
            tail_c4,
            corr_tail_c4,
            high_bound: high_bound * 1.5,
            interp_error: 0.0,
        };

        // Probe validation of the interpolation.
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0x5eed);
        let mut worst = 0.0f64;
        for _ in 0..120 {
            let lg = rng.gen_range(lo..level_hi - 0.3);
            let a = 2f64.powf(lg);
            let y1 = rng.gen_range(-6.0..6.0);
            let y2 = rng.gen_range(-6.0..6.0);
            let (v, _) = table.value(y1, y2, a);
            let exact = direct_v(psi, bump, y1, y2, a, 1e-10)?;
            worst = worst.max((v - exact).abs());
        }
        table.interp_error = worst;
        Ok(table)
    }

    fn grid_fetch(data: &[f64], nodes: usize, ix: i64, iy: i64) -> f64 {
        if ix < 0 || iy < 0 || ix >= nodes as i64 || iy >= nodes as i64 {
            0.0
        } else {
            data[iy as usize * nodes + ix as usize]
        }
    }

    fn bicubic(data: &[f64], nodes: usize, half_width: f64, step: f64, y1: f64, y2: f64) -> f64 {
        let fx = (y1 + half_width) / step;
        let fy = (y2 + half_width) / step;
        let ix = fx.floor() as i64;
        let iy = fy.floor() as i64;
        let tx = fx - ix as f64;
        let ty = fy - iy as f64;
        let mut rows = [0.0; 4];
        for (r, row) in rows.iter_mut().enumerate() {
            let gy = iy - 1 + r as i64;
            *row = catmull_rom(
                Self::grid_fetch(data, nodes, ix - 1, gy),
                Self::grid_fetch(data, nodes, ix, gy),
                Self::grid_fetch(data, nodes, ix + 1, gy),
                Self::grid_fetch(data, nodes, ix + 2, gy),
                tx,
            );
        }
        catmull_rom(rows[0], rows[1], rows[2], rows[3], ty)
    }

    /// Interpolated `V(y, a')` with an uncertainty bound (nonzero when the
    /// argument falls outside the tabled window and only the tail bound is
    /// available).
    pub fn value(&self, y1: f64, y2: f64, a: f64) -> (f64, f64) {
        let lg = a.log2();
        let r2 = y1 * y1 + y2 * y2;
        let top = self.level_lo + (self.levels.len() - 1) as f64 * self.level_step;
        if lg >= top {
            return (0.0, self.high_bound / (a * a * a));
        }
        if lg >= self.level_lo {
            // Wide regime: cubic in the level and in both grid axes.
            if r2 > (self.half_width - 2.0 * self.step).powi(2) {
                let li = ((lg - self.level_lo) / self.level_step).round() as usize;
                let c4 = self.tail_c4[li.min(self.tail_c4.len() - 1)];
                return (0.0, c4 / (r2 * r2).max(1.0));
            }
            let fl = (lg - self.level_lo) / self.level_step;
            let li = fl.floor() as i64;
            let tl = fl - li as f64;
            let mut vals = [0.0; 4];
            for (s, v) in vals.iter_mut().enumerate() {
                let idx = (li - 1 + s as i64).clamp(0, self.levels.len() as i64 - 1) as usize;
                *v = Self::bicubic(&self.levels[idx], self.nodes, self.half_width, self.step, y1, y2);
            }
            (catmull_rom(vals[0], vals[1], vals[2], vals[3], tl), self.interp_error)
        } else {
            // Narrow regime: the kernel mass carries the bump shape plus a
            // tabled correction.
            let base = self.psi_mass * self.bump.eval(y1, y2);
            if self.corr_levels.is_empty() {
                return (base, 0.05);
            }
            if r2 > (self.corr_half_width - 2.0 * self.corr_step).powi(2) {
                let li = (((lg - self.corr_level_lo) / self.level_step).round().max(0.0) as usize)
                    .min(self.corr_tail_c4.len() - 1);
                return (base, self.corr_tail_c4[li] / (r2 * r2).max(1.0));
            }
            let fl = (lg - self.corr_level_lo) / self.level_step;
            let li = fl.floor() as i64;
            let tl = fl - li as f64;
            let mut vals = [0.0; 4];
            for (s, v) in vals.iter_mut().enumerate() {
                let idx = (li - 1 + s as i64).clamp(0, self.corr_levels.len() as i64 - 1) as usize;
                *v = Self::bicubic(
                    &self.corr_levels[idx],
                    self.corr_nodes,
                    self.corr_half_width,
                    self.corr_step,
                    y1,
                    y2,
                );
            }
            (base + catmull_rom(vals[0], vals[1], vals[2], vals[3], tl), self.interp_error)
        }
    }

    /// The convolution field `Z(x, a) = (psi_a * h)(x)` with an uncertainty
    /// bound covering interpolation and lattice-tail truncation.
    pub fn field(&self, h: &HnFunction, x1: f64, x2: f64, a: f64) -> (f64, f64) {
        let p = h.p as f64;
        let mut acc = Kahan::default();
        let mut uncertainty = 0.0;
        let reach = self.half_width;
        for scale in 0..=h.n_scales {
            let s = 2f64.powi((h.q as i32) * scale as i32);
            let y1 = s * x1;
            let y2 = s * x2;
            let a_scaled = s * a;
            let k1_lo = ((y1 - reach) / p).ceil() as i64;
            let k1_hi = ((y1 + reach) / p).floor() as i64;
            let k2_lo = ((y2 - reach) / p).ceil() as i64;
            let k2_hi = ((y2 + reach) / p).floor() as i64;
            let mut terms = 0usize;
            for k1 in k1_lo..=k1_hi {
                for k2 in k2_lo..=k2_hi {
                    if let Some(sign) = h.sign(scale, k1, k2) {
                        let (v, u) = self.value(y1 - p * k1 as f64, y2 - p * k2 as f64, a_scaled);
                        acc.add(sign * v);
                        uncertainty += u;
                        terms += 1;
                    }
                }
            }
            let _ = terms;
            // Lattice tail beyond the table window: sum of c4 / |p k|^4
            // over the dropped indices, bounded by an integral.
            let c4 = self.tail_bound_for(a_scaled);
            uncertainty += c4 * std::f64::consts::TAU / (p * p * (reach - p).max(1.0).powi(2));
        }
        (acc.value(), uncertainty)
    }

    fn tail_bound_for(&self, a: f64) -> f64 {
        let lg = a.log2();
        if lg >= self.level_lo {
            let li = (((lg - self.level_lo) / self.level_step).round().max(0.0) as usize)
                .min(self.tail_c4.len() - 1);
            self.tail_c4[li]
        } else if !self.corr_tail_c4.is_empty() {
            let li = (((lg - self.corr_level_lo) / self.level_step).round().max(0.0) as usize)
                .min(self.corr_tail_c4.len() - 1);
            self.corr_tail_c4[li]
        } else {
            0.1
        }
    }
}

/// Threshold discovery: the largest box `U = [-w, w]^2 x [2^{-v}, 2^{v}]`
/// around `(0, 0, 1)` on which `|psi_a * phi| > delta` with
/// `delta = |psi * phi(0,0)| / 2`, checked on a grid.
pub struct ThresholdBox {
    pub delta: f64,
    pub half_width: f64,
    /// Half-extent of `log a` over the box.
    pub log_half_height: f64,
}

impl ThresholdBox {
    pub fn measure(&self) -> f64 {
        (2.0 * self.half_width).powi(2) * 2.0 * self.log_half_height
    }
}

pub fn find_threshold(psi: &PsiKernel, bump: Bump, q: u32) -> Result<ThresholdBox> {
    let c0 = direct_v(psi, bump, 0.0, 0.0, 1.0, 1e-11)?.abs();
    if c0 <= 0.0 {
        return Err(CoreError::SearchFailure("kernel-bump pairing vanishes at the origin".into()));
    }
    let delta = c0 / 2.0;
    // Keep slabs disjoint: log-half-height at most q ln2 / 2.
    let v_cap = 0.999 * (q as f64) * std::f64::consts::LN_2 / 2.0;
    for &w in &[1.0, 0.75, 0.5, 0.375, 0.25, 0.125, 0.0625] {
        for &v in &[v_cap.min(std::f64::consts::LN_2), 0.5 * v_cap, 0.25 * v_cap] {
            let mut ok = true;
            'grid: for ix in -3..=3i32 {
                for iy in -3..=3i32 {
                    for iz in -2..=2i32 {
                        let y1 = w * ix as f64 / 3.0;
                        let y2 = w * iy as f64 / 3.0;
                        let a = (v * iz as f64 / 2.0).exp();
                        let val = direct_v(psi, bump, y1, y2, a, 1e-10)?;
                        if val.abs() <= delta {
                            ok = false;
                            break 'grid;
                        }
                    }
                }
            }
            if ok {
                return Ok(ThresholdBox { delta, half_width: w, log_half_height: v });
            }
        }
    }
    Err(CoreError::SearchFailure("no neighbourhood sustains half the origin value".into()))
}

/// Stratified super-level measure estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LevelSetEstimate {
    /// Conservative lower bound (definite hits only).
    pub measure_lb: f64,
    /// Point estimate including ambiguous points at half weight.
    pub measure_est: f64,
    /// Binomial standard error of the estimate.
    pub stderr: f64,
    /// Measure classified as ambiguous by the uncertainty band.
    pub ambiguous: f64,
}

/// Measures `{ |psi_a * h| > t }` restricted to the dyadic height slabs
/// `a in 2^{-qn} [e^{-v}, e^{v}]`, `x in [-L, L]^2`, by seeded stratified
/// sampling with `samples` points per slab.
pub fn level_set_measure(
    conv: &PlaneConvolution,
    h: &HnFunction,
    t: f64,
    log_half_height: f64,
    samples: usize,
    seed: u64,
) -> LevelSetEstimate {
    let mut lb = 0.0;
    let mut est = 0.0;
    let mut var = 0.0;
    let mut ambiguous = 0.0;
    for slab in 0..=h.n_scales {
        let mut rng =
            <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed.wrapping_add(slab as u64));
        let u_center = -(h.q as f64) * std::f64::consts::LN_2 * slab as f64;
        let slab_measure = (2.0 * h.l).powi(2) * 2.0 * log_half_height;
        let mut definite = 0usize;
        let mut amb = 0usize;
        for _ in 0..samples {
            let x1 = rng.gen_range(-h.l..h.l);
            let x2 = rng.gen_range(-h.l..h.l);
            let u = u_center + rng.gen_range(-log_half_height..log_half_height);
            let (z, unc) = conv.field(h, x1, x2, u.exp());
            if z.abs() > t + unc {
                definite += 1;
            } else if z.abs() > t - unc {
                amb += 1;
            }
        }
        let p_hit = definite as f64 / samples as f64;
        let p_amb = amb as f64 / samples as f64;
        lb += slab_measure * p_hit;
        est += slab_measure * (p_hit + 0.5 * p_amb);
        ambiguous += slab_measure * p_amb;
        var += slab_measure * slab_measure * p_hit * (1.0 - p_hit) / samples as f64;
    }
    LevelSetEstimate { measure_lb: lb, measure_est: est, stderr: var.sqrt(), ambiguous }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::FieldIndex;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bumps_are_supported_and_mean_zero() {
        for bump in Bump::ALL {
            assert_eq!(bump.eval(1.2, 0.0), 0.0);
            assert_eq!(bump.eval(0.3, -1.0), 0.0);
            let mass = bump.integral(1e-11).unwrap();
            assert!(mass.abs() < 1e-9, "{bump:?} has mass {mass}");
        }
    }

    #[test]
    fn bump_selection_for_even_and_odd_kernels() {
        // The (0,0) plane kernel is even in both variables (its second
        // numerator is constant): only the even bump pairs with it.
        let psi = PsiKernel::new(FieldIndex::X0, FieldIndex::X0).unwrap();
        let (bump, v) = select_bump(&psi, 1e-6).unwrap();
        assert_eq!(bump, Bump::EvenDiff);
        assert!(v.abs() > 1e-5);

        // The (0,1) kernel is odd in y1 in both numerators: the x1-odd bump
        // pairs first.
        let psi01 = PsiKernel::new(FieldIndex::X0, FieldIndex::X1).unwrap();
        let (bump01, v01) = select_bump(&psi01, 1e-6).unwrap();
        assert_eq!(bump01, Bump::OddX1);
        assert!(v01.abs() > 1e-5);
    }

    #[test]
    fn hn_support_count_and_mean() {
        let h = HnFunction::build(2, 9.0, 8, 2, SignChoice::Seed(5), Bump::OddX1).unwrap();
        // Support inside [-L, L]^2.
        assert_eq!(h.eval(9.5, 0.0), 0.0);
        assert_eq!(h.eval(0.0, -9.2), 0.0);
        // Term count: sum over scales of (2 kmax + 1)^2 with
        // kmax = largest integer < (2^{qn} L - 1)/p.
        let expected: usize = (0..=2)
            .map(|n| {
                let bound = ((4f64.powi(n) * 9.0 - 1.0) / 8.0).ceil() as i64 - 1;
                ((2 * bound + 1) * (2 * bound + 1)) as usize
            })
            .sum();
        assert_eq!(h.term_count(), expected);
        // Mean nearly zero on a fine uniform grid (each translate is
        // mean-zero, so only grid bias remains).
        let n = 1500usize;
        let mut acc = Kahan::default();
        let stepg = 18.0 / n as f64;
        for i in 0..n {
            for j in 0..n {
                acc.add(h.eval(-9.0 + (i as f64 + 0.5) * stepg, -9.0 + (j as f64 + 0.5) * stepg));
            }
        }
        let mass = acc.value() * stepg * stepg;
        assert!(mass.abs() < 2e-3, "grid mass {mass}");
    }

    #[test]
    fn build_rejects_bad_parameters() {
        assert!(HnFunction::build(3, 9.0, 8, 2, SignChoice::Seed(1), Bump::OddX1).is_err());
        assert!(HnFunction::build(1, 9.0, 2, 2, SignChoice::Seed(1), Bump::OddX1).is_err());
        assert!(matches!(
            HnFunction::build(1, 9.0, 8, 2, SignChoice::Explicit(vec![1, -1]), Bump::OddX1),
            Err(CoreError::InvalidParameter(_))
        ));
    }

    #[test]
    fn direct_v_scaling_identity() {
        // psi_a * phi_{nk}(x) = V(2^{qn} x - pk, 2^{qn} a): check against a
        // shifted direct quadrature.
        let psi = PsiKernel::new(FieldIndex::X0, FieldIndex::X0).unwrap();
        let bump = Bump::OddX1;
        let (q, n, p) = (2i32, 1i32, 8.0);
        let s = 2f64.powi(q * n);
        let (k1, k2) = (1.0, -1.0);
        let x = (p * k1 / s + 0.05, p * k2 / s - 0.03);
        let a = 0.9 / s;
        let lhs = {
            // psi_a * phi_nk at x, by quadrature over the translate support.
            let f = |z1: f64, z2: f64| {
                let w1 = (x.0 - (z1 + p * k1) / s) / a;
                let w2 = (x.1 - (z2 + p * k2) / s) / a;
                psi.eval(w1, w2) / (a * a) * bump.eval(z1, z2) / (s * s)
            };
            integrate2(&f, Rect::new(-1.0, 1.0, -1.0, 1.0), 1e-11, 40_000).unwrap().value
        };
        let rhs = direct_v(&psi, bump, s * x.0 - p * k1, s * x.1 - p * k2, s * a, 1e-11).unwrap();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8);
    }

    #[test]
    fn narrow_regime_tends_to_kernel_mass_times_bump() {
        // Every plane kernel here has vanishing integral, so the sharp-scale
        // limit of the convolution is zero and the correction decays with
        // the scale.
        let psi = PsiKernel::new(FieldIndex::X0, FieldIndex::X0).unwrap();
        let bump = Bump::EvenDiff;
        assert_abs_diff_eq!(psi.plane_integral(), 0.0, epsilon = 1e-12);
        let unit = direct_v(&psi, bump, 0.4, 0.1, 1.0, 1e-10).unwrap().abs();
        let sharp = direct_v(&psi, bump, 0.4, 0.1, 1.0 / 64.0, 1e-10).unwrap().abs();
        assert!(sharp < 0.25 * unit, "sharp={sharp} unit={unit}");
    }
}
