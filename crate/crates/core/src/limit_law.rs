//! Deterministic limiting objects: the product densities `p^(m)`, the support of the
//! symmetrized singular-value law `G(z, .)`, the cubic for its Stieltjes transform
//! `s(z, w)`, the density `g` and CDF `G`, logarithmic potentials, and the geometry of the
//! local-law domain `D(z)`.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{integrate, integrate_with_breaks, QuadError, Tolerance};

/// Imaginary offset used for Stieltjes inversion.
pub const INVERSION_ETA: f64 = 1e-9;

/// `a = sqrt(2) + 1`, the constant of the smoothing inequality.
pub const SMOOTHING_A: f64 = 1.0 + std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LimitLawError {
    #[error("number of factors must be >= 1, got {0}")]
    FactorCount(usize),
    #[error("radius {0} outside [0, 1]")]
    Radius(f64),
    #[error("|z| = 1 is the excluded edge regime")]
    UnitCircle,
    #[error("spectral parameter must lie in the upper half-plane, got Im w = {0}")]
    NotUpperHalfPlane(f64),
    #[error("no root of the cubic with positive imaginary part at w = {0}")]
    NoStieltjesRoot(C64),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("epsilon = {0} leaves no admissible u nodes")]
    EmptyDomain(f64),
    #[error("V = {big_v} is below the lower edge {v_min} of the domain")]
    VBelowFloor { big_v: f64, v_min: f64 },
    #[error("invalid grid parameter: {0}")]
    Grid(String),
    #[error("descent schedule needs v > 0 and s > 1, got v = {v}, s = {s}")]
    Schedule { v: f64, s: f64 },
    #[error("probability {0} outside (0, 1)")]
    Probability(f64),
}

/// `p^(m)(z) = (1/(pi m)) |z|^{2/m - 2}` on the unit disk. Returns `+inf` at `z = 0` for `m >= 2`.
pub fn density_p(m: usize, z: C64) -> Result<f64, LimitLawError> {
    if m < 1 {
        return Err(LimitLawError::FactorCount(m));
    }
    let r = z.norm();
    if r > 1.0 {
        return Ok(0.0);
    }
    if m == 1 {
        return Ok(1.0 / PI);
    }
    if r == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(r.powf(2.0 / m as f64 - 2.0) / (PI * m as f64))
}

/// Mass of `p^(m)` in the disk of radius `rad`: `rad^{2/m}`.
pub fn radial_cdf(m: usize, rad: f64) -> Result<f64, LimitLawError> {
    if m < 1 {
        return Err(LimitLawError::FactorCount(m));
    }
    if !(0.0..=1.0).contains(&rad) {
        return Err(LimitLawError::Radius(rad));
    }
    Ok(rad.powf(2.0 / m as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Inside,
    Outside,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimitLawAtZ {
    pub z: C64,
    pub alpha: f64,
    pub lambda_plus: f64,
    pub lambda_minus: Option<f64>,
    pub regime: Regime,
    pub tau_margin: f64,
}

fn endpoints(z: C64) -> LimitLawAtZ {
    let r2 = z.norm_sqr();
    let alpha = (1.0 + 8.0 * r2).sqrt();
    let lambda_plus = ((alpha + 3.0).powi(3) / (8.0 * (alpha + 1.0))).sqrt();
    let outside = z.norm() > 1.0;
    let lambda_minus = outside.then(|| ((alpha - 3.0).powi(3) / (8.0 * (alpha - 1.0))).sqrt());
    LimitLawAtZ {
        z,
        alpha,
        lambda_plus,
        lambda_minus,
        regime: if outside { Regime::Outside } else { Regime::Inside },
        tau_margin: (z.norm() - 1.0).abs(),
    }
}

/// Support geometry of `G(z, .)` away from the unit circle.
pub fn support_endpoints(z: C64) -> Result<LimitLawAtZ, LimitLawError> {
    if z.norm() == 1.0 {
        return Err(LimitLawError::UnitCircle);
    }
    Ok(endpoints(z))
}

/// `gamma(u)`: distance from `|u|` to the nearest support edge.
pub fn gamma_edge(z: C64, u: f64) -> Result<f64, LimitLawError> {
    Ok(support_endpoints(z)?.gamma(u))
}

impl LimitLawAtZ {
    pub fn gamma(&self, u: f64) -> f64 {
        let a = u.abs();
        let to_plus = (a - self.lambda_plus).abs();
        match self.lambda_minus {
            Some(lm) => to_plus.min((a - lm).abs()),
            None => to_plus,
        }
    }

    /// Inner edge of the positive band: `lambda_-` outside the disk, `0` inside.
    pub fn inner_edge(&self) -> f64 {
        self.lambda_minus.unwrap_or(0.0)
    }

    /// Bands of the support `J(z)` in increasing order.
    pub fn support(&self) -> Vec<(f64, f64)> {
        match self.lambda_minus {
            Some(lm) => vec![(-self.lambda_plus, -lm), (lm, self.lambda_plus)],
            None => vec![(-self.lambda_plus, self.lambda_plus)],
        }
    }

    /// Smallest width among the bands of `J(z)`.
    pub fn min_band_width(&self) -> f64 {
        self.support().iter().map(|(a, b)| b - a).fold(f64::INFINITY, f64::min)
    }

    /// `J_eps(z)`: points of the support at distance `>= eps` from every edge.
    pub fn shrunk_support(&self, eps: f64) -> Vec<(f64, f64)> {
        self.support()
            .into_iter()
            .filter_map(|(a, b)| (b - eps >= a + eps).then_some((a + eps, b - eps)))
            .collect()
    }

    pub fn contains_shrunk(&self, eps: f64, u: f64) -> bool {
        self.shrunk_support(eps).iter().any(|&(a, b)| u >= a && u <= b)
    }

    pub fn stieltjes(&self, w: C64) -> Result<StieltjesEvaluation, LimitLawError> {
        solve_s(self.z, w)
    }

    /// `g(z, x) = (1/pi) Im s(z, x + i eta)`.
    pub fn density(&self, x: f64) -> Result<f64, LimitLawError> {
        limiting_density_g(self.z, x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StieltjesEvaluation {
    pub w: C64,
    pub s: C64,
    pub residual: f64,
}

/// `|s((w+s)^2 - |z|^2) + (w+s)|`.
pub fn cubic_residual(z: C64, w: C64, s: C64) -> f64 {
    let ws = w + s;
    (s * (ws * ws - z.norm_sqr()) + ws).norm()
}

fn cubic_roots(z: C64, w: C64) -> [C64; 3] {
    // s^3 + a s^2 + b s + c
    let a = w * 2.0;
    let b = w * w + (1.0 - z.norm_sqr());
    let c = w;
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = a * a * a * (2.0 / 27.0) - a * b / 3.0 + c;
    let disc = (q * q / 4.0 + p * p * p / 27.0).sqrt();
    let (u1, u2) = (-q / 2.0 + disc, -q / 2.0 - disc);
    let big = if u1.norm() >= u2.norm() { u1 } else { u2 };
    let omega = C64::new(-0.5, 0.75f64.sqrt());
    let mut roots = [C64::new(0.0, 0.0); 3];
    if big.norm() == 0.0 {
        roots = [-shift; 3];
    } else {
        let mut cr = big.powf(1.0 / 3.0);
        for root in roots.iter_mut() {
            *root = cr - p / (cr * 3.0) - shift;
            cr *= omega;
        }
    }
    for root in roots.iter_mut() {
        *root = polish(z, w, *root);
    }
    roots
}

fn polish(z: C64, w: C64, mut s: C64) -> C64 {
    let b = w * w + (1.0 - z.norm_sqr());
    let mut best = (cubic_residual(z, w, s), s);
    for _ in 0..6 {
        let f = ((s + w * 2.0) * s + b) * s + w;
        let df = (s * 3.0 + w * 4.0) * s + b;
        if df.norm() == 0.0 {
            break;
        }
        s -= f / df;
        let r = cubic_residual(z, w, s);
        if !r.is_finite() {
            break;
        }
        if r < best.0 {
            best = (r, s);
        }
        if r == 0.0 {
            break;
        }
    }
    best.1
}

/// Index of the root with the largest imaginary part, or `None` when the top two are
/// too close to tell apart in floating point.
fn unambiguous_top(roots: &[C64; 3], w: C64) -> Option<usize> {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| roots[j].im.total_cmp(&roots[i].im));
    let (top, second) = (roots[idx[0]], roots[idx[1]]);
    let tol = 1e-12 * (1.0 + top.norm() + w.norm());
    (top.im > 0.0 && top.im - second.im > tol).then_some(idx[0])
}

fn nearest(roots: &[C64; 3], target: C64) -> C64 {
    *roots.iter().min_by(|a, b| (**a - target).norm().total_cmp(&(**b - target).norm())).unwrap()
}

/// Root of the cubic selected by continuity from `w + 8i` down to `w`.
fn continued_root(z: C64, w: C64) -> C64 {
    let mut height = 8.0;
    let start = C64::new(w.re, w.im + height);
    let roots = cubic_roots(z, start);
    let mut current = match unambiguous_top(&roots, start) {
        Some(i) => roots[i],
        None => -start.inv(),
    };
    while height > 1e-4 * w.im.max(1e-300) && height > 1e-15 {
        height *= 0.5;
        let wk = C64::new(w.re, w.im + height);
        current = nearest(&cubic_roots(z, wk), current);
    }
    nearest(&cubic_roots(z, w), current)
}

/// The Stieltjes root `s(z, w)` of `s^3 + 2w s^2 + (w^2 - |z|^2 + 1) s + w = 0`.
pub fn solve_s(z: C64, w: C64) -> Result<StieltjesEvaluation, LimitLawError> {
    if !(w.im > 0.0) {
        return Err(LimitLawError::NotUpperHalfPlane(w.im));
    }
    let roots = cubic_roots(z, w);
    let s = match unambiguous_top(&roots, w) {
        Some(i) => roots[i],
        None => continued_root(z, w),
    };
    if !(s.im > 0.0) {
        return Err(LimitLawError::NoStieltjesRoot(w));
    }
    Ok(StieltjesEvaluation { w, s, residual: cubic_residual(z, w, s) })
}

pub fn limiting_density_g(z: C64, x: f64) -> Result<f64, LimitLawError> {
    limiting_density_eta(z, x, INVERSION_ETA)
}

/// Stieltjes inversion at an explicit offset, for sensitivity checks.
pub fn limiting_density_eta(z: C64, x: f64, eta: f64) -> Result<f64, LimitLawError> {
    Ok(solve_s(z, C64::new(x, eta))?.s.im / PI)
}

fn density_or_nan(z: C64, x: f64) -> f64 {
    limiting_density_g(z, x).unwrap_or(f64::NAN)
}

fn band_breaks(law: &LimitLawAtZ) -> Vec<f64> {
    let mut pts = vec![-law.lambda_plus];
    match law.lambda_minus {
        Some(lm) => pts.extend([-lm, lm]),
        None => pts.push(0.0),
    }
    pts.push(law.lambda_plus);
    pts
}

/// `G(z, x)` by direct adaptive quadrature of `g` from `-lambda_+`. Use [`LimitingCdf`]
/// when many evaluations at the same `z` are needed.
#[allow(non_snake_case)]
pub fn limiting_cdf_G(z: C64, x: f64) -> Result<f64, LimitLawError> {
    let law = support_endpoints(z)?;
    if x <= -law.lambda_plus {
        return Ok(0.0);
    }
    let mut pts: Vec<f64> = band_breaks(&law).into_iter().filter(|&p| p < x).collect();
    pts.push(x.min(law.lambda_plus));
    let mut g = |t: f64| density_or_nan(z, t);
    let est = integrate_with_breaks(&mut g, &pts, Tolerance::new(1e-9, 1e-10).with_max_intervals(4000))?;
    Ok(est.value.clamp(0.0, 1.0))
}

/// Total mass of `g(z, .)` over `J(z)`.
pub fn density_mass(z: C64) -> Result<f64, LimitLawError> {
    let law = support_endpoints(z)?;
    let mut g = |t: f64| density_or_nan(z, t);
    Ok(integrate_with_breaks(&mut g, &band_breaks(&law), Tolerance::new(1e-9, 1e-10).with_max_intervals(4000))?.value)
}

/// Tabulated `G(z, .)`. `G(x) = 1/2 + sign(x) H(|x|)` with `H(y) = int_0^y g`, stored at
/// panel nodes clustered toward the band edges; values between nodes add one short
/// adaptive integral.
#[derive(Debug, Clone)]
pub struct LimitingCdf {
    pub law: LimitLawAtZ,
    nodes: Vec<f64>,
    cumulative: Vec<f64>,
}

const CDF_PANELS: usize = 192;

impl LimitingCdf {
    pub fn new(z: C64) -> Result<Self, LimitLawError> {
        let law = support_endpoints(z)?;
        let (lo, hi) = (law.inner_edge(), law.lambda_plus);
        let nodes: Vec<f64> = (0..=CDF_PANELS)
            .map(|k| {
                let t = k as f64 / CDF_PANELS as f64;
                lo + (hi - lo) * 0.5 * (1.0 - (PI * t).cos())
            })
            .collect();
        let mut cumulative = Vec::with_capacity(nodes.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for pair in nodes.windows(2) {
            acc += integrate(|t| density_or_nan(z, t), pair[0], pair[1], Tolerance::new(1e-13, 1e-12))?.value;
            cumulative.push(acc);
        }
        Ok(LimitingCdf { law, nodes, cumulative })
    }

    /// `int_0^y g` for `y >= 0`.
    fn half_mass(&self, y: f64) -> Result<f64, LimitLawError> {
        if y <= self.nodes[0] {
            return Ok(0.0);
        }
        let last = self.nodes.len() - 1;
        if y >= self.nodes[last] {
            return Ok(self.cumulative[last]);
        }
        let k = self.nodes.partition_point(|&t| t <= y) - 1;
        let z = self.law.z;
        let extra = integrate(|t| density_or_nan(z, t), self.nodes[k], y, Tolerance::new(1e-13, 1e-12))?.value;
        Ok(self.cumulative[k] + extra)
    }

    /// Total mass recovered by the table (ideally 1).
    pub fn total_mass(&self) -> f64 {
        2.0 * self.cumulative[self.cumulative.len() - 1]
    }

    pub fn cdf(&self, x: f64) -> Result<f64, LimitLawError> {
        let h = self.half_mass(x.abs())?;
        let g = if x >= 0.0 { 0.5 + h } else { 0.5 - h };
        Ok(g.clamp(0.0, 1.0))
    }

    /// `G^{-1}(p)`: the table brackets the root, then safeguarded Newton steps with the
    /// density as derivative, falling back to bisection when a step leaves the bracket.
    pub fn quantile(&self, p: f64) -> Result<f64, LimitLawError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(LimitLawError::Probability(p));
        }
        if p < 0.5 {
            return Ok(-self.quantile(1.0 - p)?);
        }
        let target = (p - 0.5).min(self.cumulative[self.cumulative.len() - 1]);
        if target <= 0.0 {
            return Ok(0.0);
        }
        let k = self.cumulative.partition_point(|&c| c < target).clamp(1, self.nodes.len() - 1);
        let (mut a, mut b) = (self.nodes[k - 1], self.nodes[k]);
        let (ca, cb) = (self.cumulative[k - 1], self.cumulative[k]);
        let mut x = if cb > ca { a + (b - a) * ((target - ca) / (cb - ca)).clamp(0.0, 1.0) } else { 0.5 * (a + b) };
        let z = self.law.z;
        // panel-local mass from the left node avoids repeated long integrals
        let mass = |y: f64| -> Result<f64, LimitLawError> {
            Ok(ca + integrate(|t| density_or_nan(z, t), self.nodes[k - 1], y, Tolerance::new(1e-14, 1e-13))?.value)
        };
        for _ in 0..100 {
            let f = mass(x)? - target;
            if f == 0.0 {
                return Ok(x);
            }
            if f < 0.0 {
                a = x;
            } else {
                b = x;
            }
            if b - a <= 1e-15 * b.abs().max(1.0) {
                break;
            }
            let g = limiting_density_g(z, x).unwrap_or(0.0);
            let step = if g > 0.0 { x - f / g } else { f64::NAN };
            let next = if step > a && step < b { step } else { 0.5 * (a + b) };
            if (next - x).abs() <= 1e-15 * x.abs().max(1.0) {
                return Ok(next);
            }
            x = next;
        }
        Ok(x)
    }

    /// The `count` atoms `G^{-1}((k - 1/2)/count)`, `k = 1..count`.
    pub fn quantile_atoms(&self, count: usize) -> Result<Vec<f64>, LimitLawError> {
        (1..=count).map(|k| self.quantile((k as f64 - 0.5) / count as f64)).collect()
    }
}

/// Closed form of `-int log|x| dG(z, x)`: `(1 - |z|^2)/2` inside the disk, `-log|z|` outside.
pub fn log_potential_closed_form(z: C64) -> f64 {
    let r = z.norm();
    if r <= 1.0 {
        0.5 * (1.0 - r * r)
    } else {
        -r.ln()
    }
}

/// `-int log|x| dG(z, x)` by quadrature. Works on the unit circle too, where the inner
/// edge of the support closes at 0.
pub fn log_potential_limit(z: C64) -> Result<f64, LimitLawError> {
    let law = endpoints(z);
    let (lo, hi) = (law.inner_edge(), law.lambda_plus);
    let mut breaks = vec![lo];
    if lo == 0.0 {
        breaks.extend([1e-8, 1e-5, 1e-3, 0.05]);
    }
    breaks.push(0.5 * (lo + hi));
    breaks.push(hi);
    breaks.retain(|&b| b >= lo && b <= hi);
    breaks.dedup();
    let mut f = |x: f64| {
        if x <= 0.0 {
            return 0.0;
        }
        -2.0 * x.ln() * density_or_nan(z, x)
    };
    Ok(integrate_with_breaks(&mut f, &breaks, Tolerance::new(1e-8, 1e-9).with_max_intervals(6000))?.value)
}

/// `v0 = A0 log^2(n) / n` (natural log).
pub fn v_zero(n: usize, a0: f64) -> f64 {
    let ln = (n as f64).ln();
    a0 * ln * ln / n as f64
}

/// `eps = (2 v a)^{2/3}`, the smallest epsilon compatible with the smoothing precondition.
pub fn default_epsilon(v: f64) -> f64 {
    (2.0 * v * SMOOTHING_A).powf(2.0 / 3.0)
}

/// `{v s^k : k = 0..K_v}` with `K_v = min{l : v s^l >= V}`.
pub fn descent_schedule(v: f64, s_factor: f64, big_v: f64) -> Result<Vec<f64>, LimitLawError> {
    if !(v > 0.0) || !(s_factor > 1.0) {
        return Err(LimitLawError::Schedule { v, s: s_factor });
    }
    let mut out = vec![v];
    let mut cur = v;
    // relative slack absorbs rounding in products like (V/s)*s
    while cur < big_v * (1.0 - 1e-12) {
        cur *= s_factor;
        out.push(cur);
    }
    Ok(out)
}

/// `K_v` of [`descent_schedule`].
pub fn descent_steps(v: f64, s_factor: f64, big_v: f64) -> Result<usize, LimitLawError> {
    Ok(descent_schedule(v, s_factor, big_v)?.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridParams {
    #[serde(rename = "A0")]
    pub a0: f64,
    #[serde(rename = "V")]
    pub big_v: f64,
    /// `None` selects `(2 v0 a)^{2/3}`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    pub s_factor: f64,
    pub nodes_per_decade: usize,
    pub u_nodes: usize,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams { a0: 4.0, big_v: 2.0, epsilon: None, s_factor: 2.0, nodes_per_decade: 6, u_nodes: 9 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalLawGrid {
    pub law: LimitLawAtZ,
    pub n: usize,
    pub a0: f64,
    pub big_v: f64,
    pub epsilon: f64,
    pub s_factor: f64,
    pub v0: f64,
    pub nodes: Vec<GridNode>,
}

fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count <= 1 || hi <= lo {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count).map(|k| (a + (b - a) * k as f64 / (count - 1) as f64).exp()).collect()
}

impl LocalLawGrid {
    /// Lower edge `v0 / sqrt(gamma(u))` of the domain at `u`.
    pub fn v_floor(&self, u: f64) -> f64 {
        self.v0 / self.law.gamma(u).sqrt()
    }

    /// Membership in `D(z)`: `u in J_{eps/2}` and `v0/sqrt(gamma(u)) <= v <= V`.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let slack = 1e-12 * v.abs().max(1.0);
        self.law.contains_shrunk(0.5 * self.epsilon, u) && v >= self.v_floor(u) - slack && v <= self.big_v + slack
    }

    /// Grid restricted to one vertical line with `count` log-spaced `v` in `[v_min, V]`.
    pub fn vertical_line(
        z: C64,
        n: usize,
        params: &GridParams,
        u: f64,
        v_min: Option<f64>,
        count: usize,
    ) -> Result<Self, LimitLawError> {
        let mut grid = Self::skeleton(z, n, params)?;
        if !grid.law.contains_shrunk(0.5 * grid.epsilon, u) {
            return Err(LimitLawError::EmptyDomain(grid.epsilon));
        }
        let floor = grid.v_floor(u);
        let lo = v_min.unwrap_or(floor);
        if lo < floor * (1.0 - 1e-12) {
            return Err(LimitLawError::Grid(format!("v_min {lo} below the domain floor {floor}")));
        }
        if grid.big_v < lo {
            return Err(LimitLawError::VBelowFloor { big_v: grid.big_v, v_min: lo });
        }
        grid.nodes = log_spaced(lo, grid.big_v, count).into_iter().map(|v| GridNode { u, v }).collect();
        Ok(grid)
    }

    fn skeleton(z: C64, n: usize, params: &GridParams) -> Result<Self, LimitLawError> {
        let law = support_endpoints(z)?;
        if !(params.a0 > 0.0) || !(params.s_factor > 1.0) || n < 2 {
            return Err(LimitLawError::Grid(format!(
                "need A0 > 0, s_factor > 1, n >= 2; got A0 = {}, s = {}, n = {n}",
                params.a0, params.s_factor
            )));
        }
        let v0 = v_zero(n, params.a0);
        let epsilon = params.epsilon.unwrap_or_else(|| default_epsilon(v0));
        if !(epsilon > 0.0) {
            return Err(LimitLawError::Grid(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(LocalLawGrid {
            law,
            n,
            a0: params.a0,
            big_v: params.big_v,
            epsilon,
            s_factor: params.s_factor,
            v0,
            nodes: Vec::new(),
        })
    }
}

/// Lattice on `D(z)`: `u` nodes spread over `J_{eps/2}(z)` and, for each `u`, `v` nodes
/// log-spaced from `v0/sqrt(gamma(u))` to `V`.
pub fn build_domain_grid(z: C64, n: usize, params: &GridParams) -> Result<LocalLawGrid, LimitLawError> {
    let mut grid = LocalLawGrid::skeleton(z, n, params)?;
    let bands = grid.law.shrunk_support(0.5 * grid.epsilon);
    if bands.is_empty() || params.u_nodes == 0 {
        return Err(LimitLawError::EmptyDomain(grid.epsilon));
    }
    let per_band = params.u_nodes.div_ceil(bands.len()).max(1);
    let mut us = Vec::new();
    for &(a, b) in &bands {
        if per_band == 1 || b == a {
            us.push(0.5 * (a + b));
        } else {
            us.extend((0..per_band).map(|k| (a + (b - a) * k as f64 / (per_band - 1) as f64).clamp(a, b)));
        }
    }
    for u in us {
        let floor = grid.v_floor(u);
        if grid.big_v < floor {
            return Err(LimitLawError::VBelowFloor { big_v: grid.big_v, v_min: floor });
        }
        let decades = (grid.big_v / floor).log10();
        let count = ((decades * params.nodes_per_decade as f64).ceil() as usize + 1).max(2);
        grid.nodes.extend(log_spaced(floor, grid.big_v, count).into_iter().map(|v| GridNode { u, v }));
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn densities_and_radial_cdf() {
        assert!((density_p(1, c(0.3, 0.0)).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert_eq!(density_p(1, c(1.5, 0.0)).unwrap(), 0.0);
        assert!((density_p(2, c(0.0, 0.25)).unwrap() - 2.0 / PI).abs() < 1e-15);
        assert_eq!(density_p(3, c(0.0, 0.0)).unwrap(), f64::INFINITY);
        assert!(density_p(0, c(0.1, 0.0)).is_err());
        assert!((radial_cdf(1, 0.5).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(radial_cdf(3, 1.0).unwrap(), 1.0);
        assert!((radial_cdf(2, 0.25).unwrap() - 0.25).abs() < 1e-15);
        assert!(radial_cdf(2, 1.5).is_err());
    }

    #[test]
    fn endpoint_values() {
        let l0 = support_endpoints(c(0.0, 0.0)).unwrap();
        assert!((l0.lambda_plus - 2.0).abs() < 1e-14);
        assert_eq!(l0.lambda_minus, None);
        let l2 = support_endpoints(c(0.0, 2.0)).unwrap();
        assert!((l2.alpha - 33f64.sqrt()).abs() < 1e-14);
        // 3.520345..., quoted to four decimals as 3.5205
        assert!((l2.lambda_plus - 3.5205).abs() < 2e-4);
        assert!((l2.lambda_minus.unwrap() - 0.7380).abs() < 1e-4);
        let edge = support_endpoints(c(1.001, 0.0)).unwrap();
        assert!(edge.lambda_minus.unwrap() < 0.05);
        assert_eq!(support_endpoints(c(0.6, 0.8)).err(), Some(LimitLawError::UnitCircle));
    }

    #[test]
    fn gamma_values() {
        assert!((gamma_edge(c(0.0, 0.0), 1.5).unwrap() - 0.5).abs() < 1e-14);
        assert!((gamma_edge(c(2.0, 0.0), 2.0).unwrap() - 1.2620).abs() < 1e-4);
        let law = support_endpoints(c(0.5, 0.0)).unwrap();
        assert_eq!(law.gamma(law.lambda_plus), 0.0);
    }

    #[test]
    fn semicircle_reduction() {
        let s = solve_s(c(0.0, 0.0), c(0.0, 2.0)).unwrap();
        assert!((s.s - c(0.0, 2f64.sqrt() - 1.0)).norm() < 1e-14);
        for w in [c(0.3, 0.01), c(-1.9, 1e-4), c(2.5, 0.5), c(0.0, 50.0)] {
            // principal-branch semicircle transform with Im > 0
            let mut root = (-w + (w * w - 4.0).sqrt()) / 2.0;
            if root.im <= 0.0 {
                root = (-w - (w * w - 4.0).sqrt()) / 2.0;
            }
            assert!((solve_s(c(0.0, 0.0), w).unwrap().s - root).norm() < 1e-10);
        }
    }

    #[test]
    fn large_w_asymptote() {
        let w = c(0.0, 1e6);
        for z in [c(0.0, 0.0), c(0.5, 0.5), c(3.0, 0.0)] {
            let s = solve_s(z, w).unwrap().s;
            assert!((s + w.inv()).norm() <= 1e-10);
        }
    }

    #[test]
    fn rejects_lower_half_plane() {
        assert!(matches!(solve_s(c(0.0, 0.0), c(1.0, 0.0)), Err(LimitLawError::NotUpperHalfPlane(_))));
    }

    #[test]
    fn semicircle_density_and_cdf() {
        assert!((limiting_density_g(c(0.0, 0.0), 0.0).unwrap() - 1.0 / PI).abs() < 1e-8);
        assert!(limiting_density_g(c(0.0, 0.0), 3.0).unwrap() <= 1e-4);
        assert!((limiting_cdf_G(c(0.0, 0.0), 0.0).unwrap() - 0.5).abs() < 1e-6);
        let table = LimitingCdf::new(c(0.0, 0.0)).unwrap();
        assert!((table.cdf(0.0).unwrap() - 0.5).abs() < 1e-12);
        assert!((table.cdf(2.0).unwrap() - 1.0).abs() < 1e-4);
        assert!(table.cdf(-2.0).unwrap() < 1e-4);
    }

    #[test]
    fn cdf_table_agrees_with_direct_quadrature() {
        let z = c(2.0, 0.0);
        let table = LimitingCdf::new(z).unwrap();
        for x in [-3.0, -1.0, 0.0, 0.5, 0.9, 2.2, 3.4, 4.0] {
            let direct = limiting_cdf_G(z, x).unwrap();
            assert!((table.cdf(x).unwrap() - direct).abs() < 1e-7, "x = {x}");
        }
        let q = table.quantile(0.8).unwrap();
        assert!((table.cdf(q).unwrap() - 0.8).abs() < 1e-10);
        assert!((table.quantile(0.2).unwrap() + q).abs() < 1e-12);
    }

    #[test]
    fn closed_form_potentials() {
        assert!((log_potential_closed_form(c(0.0, 0.0)) - 0.5).abs() < 1e-15);
        assert!((log_potential_closed_form(c(2.0, 0.0)) + 2f64.ln()).abs() < 1e-15);
        assert!(log_potential_closed_form(c(1.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn v0_and_domain() {
        assert!((v_zero(1000, 1.0) - 0.047717).abs() < 1e-6);
        let params = GridParams { a0: 1.0, epsilon: Some(0.5), ..GridParams::default() };
        let grid = build_domain_grid(c(0.0, 0.0), 1000, &params).unwrap();
        let umin = grid.nodes.iter().map(|n| n.u).fold(f64::INFINITY, f64::min);
        let umax = grid.nodes.iter().map(|n| n.u).fold(f64::NEG_INFINITY, f64::max);
        assert!((umin + 1.75).abs() < 1e-14 && (umax - 1.75).abs() < 1e-14);
        assert!(grid.nodes.iter().all(|n| grid.contains(n.u, n.v)));
        let too_wide = GridParams { epsilon: Some(5.0), ..params };
        assert!(matches!(build_domain_grid(c(0.0, 0.0), 1000, &too_wide), Err(LimitLawError::EmptyDomain(_))));
        let low_v = GridParams { big_v: 1e-3, ..params };
        assert!(matches!(build_domain_grid(c(0.0, 0.0), 1000, &low_v), Err(LimitLawError::VBelowFloor { .. })));
    }

    #[test]
    fn outside_grid_avoids_gap() {
        let params = GridParams { epsilon: Some(0.2), ..GridParams::default() };
        let grid = build_domain_grid(c(2.0, 0.0), 2000, &params).unwrap();
        let lm = grid.law.lambda_minus.unwrap();
        assert!(grid.nodes.iter().all(|n| n.u.abs() >= lm + 0.1 - 1e-12 && grid.contains(n.u, n.v)));
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(descent_schedule(2.0, 2.0, 2.0).unwrap(), vec![2.0]);
        assert_eq!(descent_steps(0.01, 2.0, 1.0).unwrap(), 7);
        assert_eq!(descent_steps(1.0 / 3.0, 3.0, 1.0).unwrap(), 1);
        let sched = descent_schedule(0.013, 1.7, 2.0).unwrap();
        assert!(*sched.last().unwrap() >= 2.0);
        assert!(sched[..sched.len() - 1].iter().all(|&v| v < 2.0));
        assert!(descent_schedule(0.0, 2.0, 1.0).is_err());
        assert!(descent_schedule(0.1, 1.0, 1.0).is_err());
    }
}
