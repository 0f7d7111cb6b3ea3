//! Globally adaptive Gauss–Kronrod (7/15) quadrature.
//!
//! Subintervals are kept in a max-heap keyed on their local error estimate and
//! the worst one is bisected until the summed error meets the tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

// Gauss weights for the odd-indexed Kronrod nodes 1, 3, 5, 7.
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuadError {
    #[error("quadrature did not converge: estimate {value}, error {error} after {intervals} subintervals")]
    NotConverged { value: f64, error: f64, intervals: usize },
    #[error("integrand returned a non-finite value at x = {0}")]
    NonFinite(f64),
    #[error("invalid integration interval [{0}, {1}]")]
    BadInterval(f64, f64),
}

#[derive(Debug, Clone, Copy)]
pub struct Tolerance {
    pub abs: f64,
    pub rel: f64,
    pub max_intervals: usize,
}

impl Tolerance {
    pub const fn abs(abs: f64) -> Self {
        Tolerance { abs, rel: 0.0, max_intervals: 2000 }
    }

    pub const fn new(abs: f64, rel: f64) -> Self {
        Tolerance { abs, rel, max_intervals: 2000 }
    }

    pub const fn with_max_intervals(mut self, max_intervals: usize) -> Self {
        self.max_intervals = max_intervals;
        self
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance { abs: 1e-6, rel: 0.0, max_intervals: 2000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl Eq for Segment {}

impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

fn kronrod<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> Result<Segment, QuadError> {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    if !fc.is_finite() {
        return Err(QuadError::NonFinite(center));
    }
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for (i, (&x, &wk)) in XGK.iter().zip(WGK.iter()).take(7).enumerate() {
        let dx = half * x;
        let (x1, x2) = (center - dx, center + dx);
        let (f1, f2) = (f(x1), f(x2));
        if !f1.is_finite() {
            return Err(QuadError::NonFinite(x1));
        }
        if !f2.is_finite() {
            return Err(QuadError::NonFinite(x2));
        }
        kronrod += wk * (f1 + f2);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (f1 + f2);
        }
    }
    let value = kronrod * half;
    let error = ((kronrod - gauss) * half).abs();
    Ok(Segment { a, b, value, error })
}

/// Integrates `f` over `[a, b]`. A reversed interval flips the sign.
pub fn integrate<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, tol: Tolerance) -> Result<Estimate, QuadError> {
    integrate_with_breaks(&mut f, &[a, b], tol)
}

/// Integrates over consecutive panels `[p0, p1], [p1, p2], ...`, which lets callers
/// put known singularities or kinks on panel boundaries.
pub fn integrate_with_breaks<F: FnMut(f64) -> f64>(
    f: &mut F,
    points: &[f64],
    tol: Tolerance,
) -> Result<Estimate, QuadError> {
    if points.len() < 2 {
        return Err(QuadError::BadInterval(f64::NAN, f64::NAN));
    }
    for w in points.windows(2) {
        if !w[0].is_finite() || !w[1].is_finite() {
            return Err(QuadError::BadInterval(w[0], w[1]));
        }
    }
    let (first, last) = (points[0], points[points.len() - 1]);
    if first > last {
        let reversed: Vec<f64> = points.iter().rev().copied().collect();
        let est = integrate_with_breaks(f, &reversed, tol)?;
        return Ok(Estimate { value: -est.value, ..est });
    }

    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in points.windows(2) {
        if w[1] > w[0] {
            heap.push(kronrod(f, w[0], w[1])?);
            evaluations += 15;
        }
    }
    let mut value: f64 = heap.iter().map(|s| s.value).sum();
    let mut error: f64 = heap.iter().map(|s| s.error).sum();
    loop {
        let target = tol.abs.max(tol.rel * value.abs());
        if error <= target {
            // resum to drop accumulated update drift
            let value = heap.iter().map(|s| s.value).sum();
            let error = heap.iter().map(|s| s.error).sum();
            return Ok(Estimate { value, error, evaluations });
        }
        if heap.len() >= tol.max_intervals {
            return Err(QuadError::NotConverged { value, error, intervals: heap.len() });
        }
        let Some(worst) = heap.pop() else {
            return Ok(Estimate { value: 0.0, error: 0.0, evaluations });
        };
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // interval cannot be split further in floating point
            error -= worst.error;
            heap.push(Segment { error: 0.0, ..worst });
            continue;
        }
        let left = kronrod(f, worst.a, mid)?;
        let right = kronrod(f, mid, worst.b)?;
        value += left.value + right.value - worst.value;
        error += left.error + right.error - worst.error;
        heap.push(left);
        heap.push(right);
        evaluations += 30;
    }
}

/// Integrates over the whole real line through the map `x = tan(t)`.
/// `f` must decay at least like `1/x^2`.
pub fn integrate_real_line<F: FnMut(f64) -> f64>(mut f: F, tol: Tolerance) -> Result<Estimate, QuadError> {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut g = |t: f64| {
        let c = t.cos();
        if c == 0.0 {
            return 0.0;
        }
        f(t.tan()) / (c * c)
    };
    integrate_with_breaks(&mut g, &[-half_pi, 0.0, half_pi], tol)
}

/// Two-dimensional integral over a disk of radius `radius` around `center`, written in
/// polar coordinates. Inner angular integrals are themselves adaptive and run over
/// `[angle_origin, angle_origin + 2pi]`, so an angular singularity placed at the origin
/// is never sampled.
pub fn integrate_disk<F: FnMut(f64, f64) -> f64>(
    mut f: F,
    center: (f64, f64),
    radius: f64,
    radial_breaks: &[f64],
    angle_origin: f64,
    tol: Tolerance,
) -> Result<Estimate, QuadError> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut inner_failure = None;
    let inner_tol = Tolerance { abs: tol.abs / (two_pi * radius.max(1.0)), ..tol };
    let mut radial = |r: f64| {
        if r == 0.0 {
            return 0.0;
        }
        let est = integrate(
            |theta: f64| f(center.0 + r * theta.cos(), center.1 + r * theta.sin()),
            angle_origin,
            angle_origin + two_pi,
            inner_tol,
        );
        match est {
            Ok(e) => e.value * r,
            Err(e) => {
                inner_failure.get_or_insert(e);
                0.0
            }
        }
    };
    let mut points = vec![0.0];
    points.extend(radial_breaks.iter().copied().filter(|&b| b > 0.0 && b < radius));
    points.push(radius);
    let outer = integrate_with_breaks(&mut radial, &points, tol);
    if let Some(e) = inner_failure {
        return Err(e);
    }
    outer
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let est = integrate(|x| x.powi(5) - 3.0 * x * x, -1.0, 2.0, Tolerance::abs(1e-12)).unwrap();
        // x^6/6 - x^3 on [-1, 2]
        let exact = (64.0 / 6.0 - 8.0) - (1.0 / 6.0 + 1.0);
        assert!((est.value - exact).abs() < 1e-12);
    }

    #[test]
    fn sqrt_endpoint_singularity() {
        let est = integrate(|x: f64| x.sqrt(), 0.0, 1.0, Tolerance::abs(1e-9)).unwrap();
        assert!((est.value - 2.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn log_singularity_on_break() {
        let mut f = |x: f64| -x.abs().ln();
        let est = integrate_with_breaks(&mut f, &[-1.0, 0.0, 1.0], Tolerance::abs(1e-8)).unwrap();
        assert!((est.value - 2.0).abs() < 1e-7);
    }

    #[test]
    fn reversed_interval_flips_sign() {
        let a = integrate(|x| x.exp(), 0.0, 1.0, Tolerance::abs(1e-12)).unwrap().value;
        let b = integrate(|x| x.exp(), 1.0, 0.0, Tolerance::abs(1e-12)).unwrap().value;
        assert!((a + b).abs() < 1e-14);
    }

    #[test]
    fn lorentzian_over_real_line() {
        let est = integrate_real_line(|x| 1.0 / (1.0 + x * x), Tolerance::abs(1e-10)).unwrap();
        assert!((est.value - std::f64::consts::PI).abs() < 1e-9);
    }

    #[test]
    fn disk_area_and_second_moment() {
        let area = integrate_disk(|_, _| 1.0, (0.3, -0.2), 0.5, &[], 0.0, Tolerance::abs(1e-10)).unwrap();
        assert!((area.value - std::f64::consts::PI * 0.25).abs() < 1e-9);
        let m2 = integrate_disk(|x, y| x * x + y * y, (0.0, 0.0), 1.0, &[], 0.0, Tolerance::abs(1e-10)).unwrap();
        assert!((m2.value - std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let err = integrate(|x| 1.0 / x, 0.0, 1.0, Tolerance::default()).unwrap_err();
        assert!(matches!(err, QuadError::NonFinite(_) | QuadError::NotConverged { .. }));
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let tol = Tolerance::abs(1e-14).with_max_intervals(3);
        let err = integrate(|x: f64| (50.0 * x).sin().abs(), 0.0, 10.0, tol).unwrap_err();
        assert!(matches!(err, QuadError::NotConverged { .. }));
    }
}
