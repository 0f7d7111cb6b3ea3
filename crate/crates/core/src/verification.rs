//! Statistics comparing empirical spectra with their limits: local-law sweeps,
//! self-consistency residuals, Kolmogorov distances, the smoothing-inequality bound,
//! smoothed linear statistics, Green/log-potential identities, log-log regressions and
//! moment-inequality probes.

use std::f64::consts::PI;
use std::sync::OnceLock;

use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ensembles::{stream_rng, EntryLaw};
use crate::limit_law::{
    density_p, descent_schedule, log_potential_closed_form, solve_s, LimitLawError, LimitingCdf, LocalLawGrid,
    SMOOTHING_A,
};
use crate::quad::{integrate, integrate_disk, integrate_real_line, QuadError, Tolerance};
use crate::spectra::{ComplexSpectrum, SingularSpectrum, SpectraError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerificationError {
    #[error(transparent)]
    Spectra(#[from] SpectraError),
    #[error(transparent)]
    LimitLaw(#[from] LimitLawError),
    #[error(transparent)]
    Quadrature(#[from] QuadError),
    #[error("spectrum computed at z = {spectrum} but the grid is for z = {grid}")]
    ZMismatch { spectrum: C64, grid: C64 },
    #[error("degenerate node: |w + m| = {0:e} below the division guard")]
    DegenerateNode(f64),
    #[error("smoothing precondition 2va <= eps^(3/2) violated: 2va = {lhs}, eps^(3/2) = {rhs}")]
    Precondition { lhs: f64, rhs: f64 },
    #[error("epsilon = {eps} exceeds half the minimal band width {half_width}")]
    EpsilonTooLarge { eps: f64, half_width: f64 },
    #[error("zero singular value: the log-potential is infinite")]
    ZeroSingularValue,
    #[error("regression needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("regression needs positive coordinates, got ({0}, {1})")]
    NonPositive(f64, f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
}

type Result<T> = std::result::Result<T, VerificationError>;

/// Distributions that can be compared through CDFs and Stieltjes transforms.
pub trait SpectralDistribution {
    fn cdf(&self, x: f64) -> f64;
    fn stieltjes(&self, w: C64) -> C64;
    /// Sorted atoms when the distribution is discrete.
    fn atoms(&self) -> Option<&[f64]> {
        None
    }
}

/// Uniform measure on finitely many real atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(mut atoms: Vec<f64>) -> Self {
        atoms.sort_by(f64::total_cmp);
        EmpiricalMeasure { atoms }
    }

    /// Symmetrized singular values `{+-s_j}`.
    pub fn from_spectrum(spec: &SingularSpectrum) -> Self {
        EmpiricalMeasure { atoms: spec.symmetrized_atoms() }
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

impl SpectralDistribution for EmpiricalMeasure {
    fn cdf(&self, x: f64) -> f64 {
        self.atoms.partition_point(|&a| a <= x) as f64 / self.atoms.len() as f64
    }

    fn stieltjes(&self, w: C64) -> C64 {
        let sum: C64 = self.atoms.iter().map(|&a| (C64::new(a, 0.0) - w).inv()).sum();
        sum / self.atoms.len() as f64
    }

    fn atoms(&self) -> Option<&[f64]> {
        Some(&self.atoms)
    }
}

impl SpectralDistribution for LimitingCdf {
    fn cdf(&self, x: f64) -> f64 {
        LimitingCdf::cdf(self, x).unwrap_or(f64::NAN)
    }

    fn stieltjes(&self, w: C64) -> C64 {
        solve_s(self.law.z, w).map(|e| e.s).unwrap_or(C64::new(f64::NAN, f64::NAN))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    pub u: f64,
    pub v: f64,
    pub w: C64,
    pub m_n: C64,
    pub s: C64,
    /// `|Lambda_n| = |m_n - s|`.
    pub lambda_abs: f64,
    /// `n v |Lambda_n| / log^2 n`.
    pub normalized: f64,
    /// `Lambda_n^(alpha) = m_n^(alpha) - s`, `alpha = 1..2m`; empty without block weights.
    pub block_lambdas: Vec<C64>,
    /// Max-norm of the vector of block lambdas.
    pub lambda_vec: Option<f64>,
    /// `|Lambda(v s^k)| <= tau Im s(v s^k)` for all `k <= K_v`. Uses the block vector when
    /// available and `|Lambda_n|` otherwise.
    pub indicator: bool,
}

fn lambda_at(spec: &SingularSpectrum, z: C64, w: C64) -> Result<(C64, C64, Vec<C64>)> {
    let s = solve_s(z, w)?.s;
    let m_n = spec.empirical_stieltjes(w)?;
    let blocks = if spec.has_block_weights() {
        spec.partial_traces(w)?.into_iter().map(|m| m - s).collect()
    } else {
        Vec::new()
    };
    Ok((s, m_n, blocks))
}

fn vec_norm(blocks: &[C64]) -> Option<f64> {
    (!blocks.is_empty()).then(|| blocks.iter().map(|b| b.norm()).fold(0.0, f64::max))
}

/// One [`LambdaRecord`] per grid node.
pub fn lambda_sweep(spec: &SingularSpectrum, grid: &LocalLawGrid, tau: f64) -> Result<Vec<LambdaRecord>> {
    let z = grid.law.z;
    if (spec.z - z).norm() > 1e-14 * (1.0 + z.norm()) {
        return Err(VerificationError::ZMismatch { spectrum: spec.z, grid: z });
    }
    let n = spec.n() as f64;
    let log2 = n.ln().powi(2);
    grid.nodes
        .iter()
        .map(|node| {
            let w = C64::new(node.u, node.v);
            let (s, m_n, block_lambdas) = lambda_at(spec, z, w)?;
            let lambda_abs = (m_n - s).norm();
            let mut indicator = true;
            for vk in descent_schedule(node.v, grid.s_factor, grid.big_v)? {
                let wk = C64::new(node.u, vk);
                let (sk, mk, bk) = lambda_at(spec, z, wk)?;
                let size = vec_norm(&bk).unwrap_or((mk - sk).norm());
                if size > tau * sk.im {
                    indicator = false;
                    break;
                }
            }
            Ok(LambdaRecord {
                u: node.u,
                v: node.v,
                w,
                m_n,
                s,
                lambda_abs,
                normalized: n * node.v * lambda_abs / log2,
                lambda_vec: vec_norm(&block_lambdas),
                block_lambdas,
                indicator,
            })
        })
        .collect()
}

/// 1-based cyclic index on `{1..m}`.
fn cyc(alpha: isize, m: usize) -> usize {
    (alpha - 1).rem_euclid(m as isize) as usize + 1
}

/// `T^(alpha)`, `alpha = 1..2m`, solving the self-consistent equations exactly for the
/// given partial traces (slice index `alpha - 1`). The first `m` entries are the upper
/// blocks, the last `m` the lower ones.
pub fn residual_from_traces(traces: &[C64], z: C64, w: C64) -> Result<Vec<C64>> {
    if traces.len() % 2 != 0 || traces.is_empty() {
        return Err(VerificationError::Parameter(format!("need 2m partial traces, got {}", traces.len())));
    }
    let m = traces.len() / 2;
    let r2 = z.norm_sqr();
    let mt = |alpha: usize| traces[alpha - 1];
    let guard = |d: C64| if d.norm() < 1e-12 { Err(VerificationError::DegenerateNode(d.norm())) } else { Ok(d) };
    let mut out = Vec::with_capacity(2 * m);
    for a in 1..=m {
        let (next, prev) = (cyc(a as isize + 1, m), cyc(a as isize - 1, m));
        let d = guard(w + mt(prev))?;
        out.push(C64::new(1.0, 0.0) + mt(a) * (w + mt(next + m) - r2 / d));
    }
    for a in 1..=m {
        let (next, prev) = (cyc(a as isize + 1, m), cyc(a as isize - 1, m));
        let d = guard(w + mt(next + m))?;
        out.push(C64::new(1.0, 0.0) + mt(m + a) * (w + mt(prev) - r2 / d));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistency {
    pub w: C64,
    /// Upper-block residuals `T^(alpha)`, `alpha = 1..m`.
    pub upper: Vec<C64>,
    /// Lower-block residuals `T^(m + alpha)`.
    pub lower: Vec<C64>,
}

impl SelfConsistency {
    pub fn max_upper(&self) -> f64 {
        self.upper.iter().map(|t| t.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.upper.iter().chain(&self.lower).map(|t| t.norm()).fold(0.0, f64::max)
    }
}

pub fn selfconsistency_residual(spec: &SingularSpectrum, z: C64, w: C64) -> Result<SelfConsistency> {
    let traces = spec.partial_traces(w)?;
    let mut all = residual_from_traces(&traces, z, w)?;
    let lower = all.split_off(spec.m());
    Ok(SelfConsistency { w, upper: all, lower })
}

/// Exact `sup_x |F(x) - G(x)|` for a discrete `F`, evaluated at the jumps.
pub fn kolmogorov_atoms<G: FnMut(f64) -> f64>(atoms: &[f64], mut cdf: G) -> f64 {
    let mut sorted = atoms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let total = sorted.len() as f64;
    let mut best: f64 = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let g = cdf(sorted[i]);
        best = best.max((g - i as f64 / total).abs()).max((g - j as f64 / total).abs());
        i = j;
    }
    best
}

/// `Delta*_n(z) = sup_x |F_n(z, x) - G(z, x)|`.
pub fn kolmogorov_distance(spec: &SingularSpectrum, law: &LimitingCdf) -> Result<f64> {
    let atoms = spec.symmetrized_atoms();
    let mut failure = None;
    let d = kolmogorov_atoms(&atoms, |x| match law.cdf(x) {
        Ok(g) => g,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    });
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(d),
    }
}

/// `sup |F - G|` for arbitrary distributions: exact when `F` is discrete, on a fine grid
/// over the support of `G` otherwise.
pub fn distribution_distance<F: SpectralDistribution + ?Sized>(f: &F, g: &LimitingCdf) -> f64 {
    if let Some(atoms) = f.atoms() {
        return kolmogorov_atoms(atoms, |x| SpectralDistribution::cdf(g, x));
    }
    let lp = g.law.lambda_plus;
    (0..=4000)
        .map(|k| -1.1 * lp + 2.2 * lp * k as f64 / 4000.0)
        .map(|x| (f.cdf(x) - SpectralDistribution::cdf(g, x)).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingParams {
    pub v: f64,
    pub epsilon: f64,
    #[serde(rename = "V")]
    pub big_v: f64,
    pub c1: f64,
    pub c2: f64,
    /// Grid points per band used for the sup over `J'_eps`.
    pub sup_points: usize,
}

impl SmoothingParams {
    pub fn new(v: f64, epsilon: f64, big_v: f64, c1: f64, c2: f64) -> Self {
        SmoothingParams { v, epsilon, big_v, c1, c2, sup_points: 33 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingTerms {
    /// `2 int |S_F - S_G|(u + iV) du`
    pub large_v: f64,
    /// `2 sup_x int_{v'}^{V} |S_F - S_G|(x + iu) du`
    pub vertical: f64,
    /// `C1 v`
    pub c1_v: f64,
    /// `C2 eps^{3/2}`
    pub c2_eps: f64,
}

impl SmoothingTerms {
    pub fn total(&self) -> f64 {
        self.large_v + self.vertical + self.c1_v + self.c2_eps
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub delta_star: f64,
    pub terms: SmoothingTerms,
    pub rhs: f64,
    pub holds: bool,
    pub params: SmoothingParams,
}

/// Evaluates the four right-hand terms of the smoothing inequality and the true distance.
pub fn smoothing_bound<F: SpectralDistribution + Sync + ?Sized>(
    f: &F,
    g: &LimitingCdf,
    params: SmoothingParams,
) -> Result<DistanceReport> {
    let SmoothingParams { v, epsilon, big_v, c1, c2, sup_points } = params;
    if !(v > 0.0) || !(epsilon > 0.0) || !(big_v > v) {
        return Err(VerificationError::Parameter(format!("need 0 < v < V and eps > 0, got v = {v}, V = {big_v}, eps = {epsilon}")));
    }
    let lhs = 2.0 * v * SMOOTHING_A;
    let rhs = epsilon.powf(1.5);
    if lhs > rhs * (1.0 + 1e-12) {
        return Err(VerificationError::Precondition { lhs, rhs });
    }
    let half_width = 0.5 * g.law.min_band_width();
    if epsilon >= half_width {
        return Err(VerificationError::EpsilonTooLarge { eps: epsilon, half_width });
    }
    let diff = |w: C64| (f.stieltjes(w) - SpectralDistribution::stieltjes(g, w)).norm();

    let large_v = 2.0 * integrate_real_line(|u| diff(C64::new(u, big_v)), Tolerance::new(1e-9, 1e-7))?.value;

    let xs: Vec<f64> = g
        .law
        .shrunk_support(0.5 * epsilon)
        .into_iter()
        .flat_map(|(a, b)| {
            let k = sup_points.max(2);
            (0..k).map(move |i| a + (b - a) * i as f64 / (k - 1) as f64)
        })
        .collect();
    let verticals: Vec<std::result::Result<f64, QuadError>> = xs
        .par_iter()
        .map(|&x| {
            let v_prime = v / g.law.gamma(x).sqrt();
            // integrate in t = ln u so the small-u end is resolved
            integrate(
                |t: f64| {
                    let u = t.exp();
                    u * diff(C64::new(x, u))
                },
                v_prime.ln(),
                big_v.ln(),
                Tolerance::new(1e-9, 1e-6),
            )
            .map(|e| e.value)
        })
        .collect();
    let mut sup: f64 = 0.0;
    for r in verticals {
        sup = sup.max(r?);
    }
    let terms = SmoothingTerms { large_v, vertical: 2.0 * sup, c1_v: c1 * v, c2_eps: c2 * epsilon.powf(1.5) };
    let delta_star = distribution_distance(f, g);
    let total = terms.total();
    Ok(DistanceReport { delta_star, terms, rhs: total, holds: total >= delta_star, params })
}

fn bump_raw(r2: f64) -> f64 {
    if r2 >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - r2)).exp()
    }
}

fn bump_raw_laplacian(r2: f64) -> f64 {
    if r2 >= 1.0 {
        return 0.0;
    }
    let q = 1.0 - r2;
    let phi = (-1.0 / q).exp();
    phi * (-4.0 / (q * q) + 4.0 * r2 / q.powi(4) - 8.0 * r2 / q.powi(3))
}

struct BumpConstants {
    mass: f64,
    laplacian_l1: f64,
}

fn bump_constants() -> &'static BumpConstants {
    static CONSTANTS: OnceLock<BumpConstants> = OnceLock::new();
    CONSTANTS.get_or_init(|| {
        let tol = Tolerance::new(1e-15, 1e-12);
        let mass = integrate(|r| 2.0 * PI * r * bump_raw(r * r), 0.0, 1.0, tol).expect("bump mass").value;
        // |Delta phi| changes sign once; split there for a clean integrand
        let zero = bisect_sign_change(|r| bump_raw_laplacian(r * r), 0.05, 0.95);
        let l1 = [(0.0, zero), (zero, 1.0)]
            .iter()
            .map(|&(a, b)| integrate(|r| 2.0 * PI * r * bump_raw_laplacian(r * r).abs(), a, b, tol).expect("bump laplacian").value)
            .sum::<f64>();
        BumpConstants { mass, laplacian_l1: l1 / mass }
    })
}

fn bisect_sign_change<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let fa = f(a).signum();
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if f(mid).signum() == fa {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// `amplitude * f((z - center)/radius) / radius^2` where `f` is the normalized bump
/// `exp(-1/(1-|x|^2))` on the unit disk, so the total mass is `amplitude`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: C64,
    pub radius: f64,
    pub amplitude: f64,
}

impl Bump {
    pub fn new(center: C64, radius: f64) -> Self {
        Bump { center, radius, amplitude: 1.0 }
    }

    pub fn value(&self, z: C64) -> f64 {
        let r2 = ((z - self.center) / self.radius).norm_sqr();
        self.amplitude * bump_raw(r2) / (bump_constants().mass * self.radius * self.radius)
    }

    pub fn laplacian(&self, z: C64) -> f64 {
        let r2 = ((z - self.center) / self.radius).norm_sqr();
        self.amplitude * bump_raw_laplacian(r2) / (bump_constants().mass * self.radius.powi(4))
    }

    pub fn mass(&self) -> f64 {
        self.amplitude
    }

    /// `||Delta f||_{L^1}` in closed scaling form.
    pub fn laplacian_l1(&self) -> f64 {
        self.amplitude.abs() * bump_constants().laplacian_l1 / (self.radius * self.radius)
    }
}

/// `f_{z0}(z) = n^{2a} f((z - z0) n^a)` built on the normalized bump.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothedTestFunction {
    pub z0: C64,
    pub a: f64,
    pub n: usize,
    /// Scales the base profile; 0 gives the zero function.
    pub amplitude: f64,
}

impl SmoothedTestFunction {
    pub fn new(z0: C64, a: f64, n: usize) -> Result<Self> {
        if !(a > 0.0 && a < 0.5) || n < 2 {
            return Err(VerificationError::Parameter(format!("need a in (0, 1/2) and n >= 2, got a = {a}, n = {n}")));
        }
        Ok(SmoothedTestFunction { z0, a, n, amplitude: 1.0 })
    }

    pub fn bump(&self) -> Bump {
        Bump { center: self.z0, radius: (self.n as f64).powf(-self.a), amplitude: self.amplitude }
    }

    pub fn value(&self, z: C64) -> f64 {
        self.bump().value(z)
    }

    /// `||Delta f||_{L^1}` of the base profile (before rescaling).
    pub fn base_laplacian_l1(&self) -> f64 {
        self.amplitude.abs() * bump_constants().laplacian_l1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearStatistic {
    pub lhs: f64,
    pub bound: f64,
    pub ratio: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub c: f64,
    pub log_power: f64,
    /// Minimal distance of `z0` from the unit circle before a warning is attached.
    pub tau: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { c: 1.0, log_power: 5.0, tau: 0.1 }
    }
}

/// `int f_{z0} dmu^(m)` by polar quadrature over the support of the bump.
pub fn limit_integral(tf: &SmoothedTestFunction, m: usize) -> Result<f64> {
    if tf.amplitude == 0.0 {
        return Ok(0.0);
    }
    let bump = tf.bump();
    density_p(m, tf.z0)?;
    let mut f = |x: f64, y: f64| {
        let z = C64::new(x, y);
        let p = density_p(m, z).unwrap_or(0.0);
        if p.is_finite() {
            bump.value(z) * p
        } else {
            0.0
        }
    };
    let breaks = [(1.0 - tf.z0.norm()).abs()];
    // the angle origin points away from the origin, where p^(m) may be singular
    let origin = (-tf.z0).arg();
    Ok(integrate_disk(&mut f, (tf.z0.re, tf.z0.im), bump.radius, &breaks, origin, Tolerance::new(1e-9, 1e-8).with_max_intervals(4000))?.value)
}

/// `|(1/n) sum f_{z0}(lambda_j) - int f_{z0} dmu^(m)|` against `c ||Delta f|| log^k n / n^{1-2a}`.
pub fn smoothed_statistic(eigs: &ComplexSpectrum, tf: &SmoothedTestFunction, m: usize, consts: BoundConstants) -> Result<LinearStatistic> {
    let mut warnings = Vec::new();
    let margin = (tf.z0.norm() - 1.0).abs();
    if margin < consts.tau {
        warnings.push(format!("z0 = {} lies within {} of the unit circle", tf.z0, consts.tau));
    }
    let empirical = eigs.eigenvalues.iter().map(|&l| tf.value(l)).sum::<f64>() / eigs.len().max(1) as f64;
    let lhs = (empirical - limit_integral(tf, m)?).abs();
    let n = tf.n as f64;
    let bound = consts.c * tf.base_laplacian_l1() * n.ln().powf(consts.log_power) / n.powf(1.0 - 2.0 * tf.a);
    let ratio = if bound > 0.0 { lhs / bound } else { 0.0 };
    Ok(LinearStatistic { lhs, bound, ratio, warnings })
}

/// `U_n(z) = -(1/nm) sum_j log s_j(z)`.
pub fn log_potential_empirical(spec: &SingularSpectrum) -> Result<f64> {
    if spec.values().iter().any(|&s| s <= 0.0) {
        return Err(VerificationError::ZeroSingularValue);
    }
    let sum: f64 = spec.values().iter().map(|s| s.ln()).sum();
    Ok(-sum / spec.values().len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GreenMeasure {
    /// The circular law `mu^(1)`.
    Disk,
    PointMass { at: C64 },
    Empirical { points: Vec<C64> },
}

impl GreenMeasure {
    pub fn potential(&self, z: C64) -> f64 {
        match self {
            GreenMeasure::Disk => log_potential_closed_form(z),
            GreenMeasure::PointMass { at } => -(z - at).norm().ln(),
            GreenMeasure::Empirical { points } => {
                -points.iter().map(|p| (z - p).norm().ln()).sum::<f64>() / points.len() as f64
            }
        }
    }

    fn singular_points(&self) -> Vec<C64> {
        match self {
            GreenMeasure::Disk => Vec::new(),
            GreenMeasure::PointMass { at } => vec![*at],
            GreenMeasure::Empirical { points } => points.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GreenCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub abs_err: f64,
}

/// `int f dnu` against `-(1/2pi) int Delta f U_nu dA`.
pub fn green_identity_check(f: &Bump, measure: &GreenMeasure) -> Result<GreenCheck> {
    let tol = Tolerance::new(1e-8, 1e-9).with_max_intervals(4000);
    let lhs = match measure {
        GreenMeasure::Disk => {
            let breaks = [(1.0 - f.center.norm()).abs(), 1.0 + f.center.norm()];
            let mut g = |x: f64, y: f64| {
                let z = C64::new(x, y);
                if z.norm() <= 1.0 {
                    f.value(z) / PI
                } else {
                    0.0
                }
            };
            integrate_disk(&mut g, (f.center.re, f.center.im), f.radius, &breaks, 0.0, tol)?.value
        }
        GreenMeasure::PointMass { at } => f.value(*at),
        GreenMeasure::Empirical { points } => points.iter().map(|&p| f.value(p)).sum::<f64>() / points.len() as f64,
    };
    let singular = measure.singular_points();
    let breaks: Vec<f64> = singular.iter().map(|p| (p - f.center).norm()).collect();
    let origin = singular
        .first()
        .filter(|p| (**p - f.center).norm() > 0.0)
        .map(|p| (p - f.center).arg())
        .unwrap_or(0.0);
    let mut h = |x: f64, y: f64| {
        let z = C64::new(x, y);
        let lap = f.laplacian(z);
        if lap == 0.0 {
            return 0.0;
        }
        let u = measure.potential(z);
        if u.is_finite() {
            lap * u
        } else {
            0.0
        }
    };
    let integral = integrate_disk(&mut h, (f.center.re, f.center.im), f.radius, &breaks, origin, tol)?.value;
    let rhs = -integral / (2.0 * PI);
    Ok(GreenCheck { lhs, rhs, abs_err: (lhs - rhs).abs() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Least squares on `(log x, log y)`.
pub fn scaling_regression(points: &[(f64, f64)]) -> Result<Regression> {
    if points.len() < 3 {
        return Err(VerificationError::TooFewPoints(points.len()));
    }
    if let Some(&(x, y)) = points.iter().find(|(x, y)| !(*x > 0.0) || !(*y > 0.0)) {
        return Err(VerificationError::NonPositive(x, y));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = points.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / k, ly.iter().sum::<f64>() / k);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(VerificationError::Parameter("all x coordinates coincide".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(Regression { slope, intercept, r2 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LinearRosenthal,
    QuadraticForm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub p: f64,
    /// Monte Carlo `E^{1/p} |form|^p`.
    pub moment: f64,
    pub envelope: f64,
    pub ratio: f64,
    /// Exact `E^{1/2} |form|^2` (available for `p = 2`).
    pub exact_p2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    pub kind: ProbeKind,
    pub law: EntryLaw,
    pub n: usize,
    pub resamples: usize,
    pub seed: u64,
    pub rows: Vec<ProbeRow>,
    pub warnings: Vec<String>,
}

impl ProbeTable {
    /// Largest over smallest ratio across `p`.
    pub fn ratio_spread(&self) -> f64 {
        let (lo, hi) = self.rows.iter().fold((f64::INFINITY, 0.0f64), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
        hi / lo
    }
}

/// Coefficients of a probe: a vector for linear forms, a symmetric zero-diagonal matrix
/// (row-major `n x n`) for quadratic forms.
#[derive(Debug, Clone, PartialEq)]
pub enum ProbeCoefficients {
    Linear(Vec<f64>),
    Quadratic(Vec<f64>),
}

impl ProbeCoefficients {
    /// `a_j = n^{-1/2}`.
    pub fn flat_linear(n: usize) -> Self {
        ProbeCoefficients::Linear(vec![1.0 / (n as f64).sqrt(); n])
    }

    /// `a_lk = 1/n` for `l != k`.
    pub fn flat_quadratic(n: usize) -> Self {
        ProbeCoefficients::Quadratic((0..n * n).map(|i| if i / n == i % n { 0.0 } else { 1.0 / n as f64 }).collect())
    }

    fn n(&self) -> usize {
        match self {
            ProbeCoefficients::Linear(a) => a.len(),
            ProbeCoefficients::Quadratic(a) => (a.len() as f64).sqrt().round() as usize,
        }
    }
}

const PROBE_CHUNK: usize = 1024;

/// Monte Carlo moments of linear or quadratic forms in i.i.d. entries, divided by the
/// moment-inequality envelope.
pub fn moment_inequality_probe(
    law: EntryLaw,
    coefficients: &ProbeCoefficients,
    ps: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<ProbeTable> {
    let n = coefficients.n();
    if n == 0 || resamples == 0 || ps.iter().any(|&p| !(p >= 1.0)) {
        return Err(VerificationError::Parameter("need n > 0, resamples > 0 and p >= 1".into()));
    }
    if let ProbeCoefficients::Quadratic(a) = coefficients {
        if a.len() != n * n {
            return Err(VerificationError::Parameter("quadratic coefficients must be square".into()));
        }
    }
    let mut warnings = Vec::new();
    for &p in ps {
        if p * (resamples as f64).ln() > 30.0 * 4.0 || p * p.ln() > 30.0 {
            warnings.push(format!("p = {p} may exceed the reliable Monte Carlo range"));
        }
    }
    let chunks = resamples.div_ceil(PROBE_CHUNK);
    // per-chunk sums of |form|^p, combined in chunk order for bitwise reproducibility
    let partial: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, 1 << 32, c as u64);
            let count = PROBE_CHUNK.min(resamples - c * PROBE_CHUNK);
            let mut x = vec![0.0; n];
            let mut acc = vec![0.0; ps.len()];
            for _ in 0..count {
                for xi in x.iter_mut() {
                    *xi = law.sample(&mut rng);
                }
                let form = match coefficients {
                    ProbeCoefficients::Linear(a) => a.iter().zip(&x).map(|(a, x)| a * x).sum::<f64>(),
                    ProbeCoefficients::Quadratic(a) => {
                        let mut q = 0.0;
                        for l in 0..n {
                            let row = &a[l * n..(l + 1) * n];
                            let dot: f64 = row.iter().zip(&x).map(|(a, x)| a * x).sum();
                            q += x[l] * (dot - row[l] * x[l]);
                        }
                        q
                    }
                };
                for (slot, &p) in acc.iter_mut().zip(ps) {
                    *slot += form.abs().powf(p);
                }
            }
            acc
        })
        .collect();
    let mut sums = vec![0.0; ps.len()];
    for chunk in &partial {
        for (s, v) in sums.iter_mut().zip(chunk) {
            *s += v;
        }
    }
    let law_moment = |p: f64| -> f64 {
        let mut rng = stream_rng(seed, (1 << 32) + 1, 0);
        let draws = 100_000;
        (0..draws).map(|_| law.sample(&mut rng).abs().powf(p)).sum::<f64>() / draws as f64
    };
    let rows = ps
        .iter()
        .zip(&sums)
        .map(|(&p, &sum)| {
            let moment = (sum / resamples as f64).powf(1.0 / p);
            let mu_p = law_moment(p);
            let (envelope, exact_p2) = match coefficients {
                ProbeCoefficients::Linear(a) => {
                    let l2 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let amax = a.iter().map(|x| x.abs()).fold(0.0, f64::max);
                    (p.sqrt() * l2 + p * mu_p.powf(1.0 / p) * amax, Some(l2))
                }
                ProbeCoefficients::Quadratic(a) => {
                    let mut hs = 0.0;
                    let mut amax: f64 = 0.0;
                    for l in 0..n {
                        for k in 0..n {
                            if l != k {
                                let v = a[l * n + k];
                                hs += v * v;
                                amax = amax.max(v.abs());
                            }
                        }
                    }
                    // Var = 2 sum_{l != k} a_lk^2 for symmetric A and unit-variance entries
                    (p * hs.sqrt() + p * p * mu_p.powf(2.0 / p) * amax, Some((2.0 * hs).sqrt()))
                }
            };
            ProbeRow { p, moment, envelope, ratio: moment / envelope, exact_p2: (p == 2.0).then_some(exact_p2).flatten() }
        })
        .collect();
    let kind = match coefficients {
        ProbeCoefficients::Linear(_) => ProbeKind::LinearRosenthal,
        ProbeCoefficients::Quadratic(_) => ProbeKind::QuadraticForm,
    };
    Ok(ProbeTable { kind, law, n, resamples, seed, rows, warnings })
}
