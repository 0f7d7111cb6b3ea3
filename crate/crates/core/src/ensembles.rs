//! I.i.d. entry laws, truncation and deterministic factor sampling.
//!
//! Every emitted law is symmetric with mean zero and unit variance. Truncation zeroes
//! entries above a cutoff `c` and rescales the survivors by `1/sigma(c)`, where `c` is
//! chosen so that the rescaled entries still obey `|X| <= D n^{1/2 - phi}`.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{self, Tolerance};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnsembleError {
    #[error("matrix dimension n = {0} must be at least 2")]
    Dimension(usize),
    #[error("number of factors m = {0} must be at least 1")]
    FactorCount(usize),
    #[error("factor index q = {q} outside 1..={m}")]
    FactorIndex { q: usize, m: usize },
    #[error("truncation threshold must be positive (D = {d}, phi = {phi})")]
    Threshold { d: f64, phi: f64 },
    #[error("truncation level {threshold} is below the smallest attainable maximum of the standardized law")]
    TruncationInfeasible { threshold: f64 },
    #[error("invalid entry law: {0}")]
    Law(String),
    #[error("delta must be positive, got {0}")]
    Delta(f64),
    #[error("moment audit needs at least 100 samples, got {0}")]
    TooFewSamples(usize),
    #[error("moment order p = {0} must be at least 2")]
    MomentOrder(f64),
}

/// Law of a single matrix entry before truncation, standardized to mean 0 and variance 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntryLaw {
    Gaussian,
    Rademacher,
    /// Uniform on `[-sqrt 3, sqrt 3]`.
    Uniform,
    /// Student-t with `tail_exponent` degrees of freedom, rescaled to unit variance.
    HeavyTail { tail_exponent: f64 },
    /// Gaussian entry times an independent Bernoulli(p) mask, divided by `sqrt p`.
    SparseBernoulli { p: f64 },
}

impl EntryLaw {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        match *self {
            EntryLaw::HeavyTail { tail_exponent } if !(tail_exponent > 4.0) || !tail_exponent.is_finite() => Err(
                EnsembleError::Law(format!("heavy_tail needs tail_exponent > 4, got {tail_exponent}")),
            ),
            EntryLaw::SparseBernoulli { p } if !(p > 0.0 && p <= 1.0) => {
                Err(EnsembleError::Law(format!("sparse_bernoulli needs p in (0, 1], got {p}")))
            }
            _ => Ok(()),
        }
    }

    /// The `delta` for which `E|X|^{4+delta}` is certified finite. Light-tailed laws
    /// have every moment, reported as infinity.
    pub fn moment_delta(&self) -> f64 {
        match *self {
            EntryLaw::HeavyTail { tail_exponent } => 0.5 * (tail_exponent - 4.0),
            _ => f64::INFINITY,
        }
    }

    pub fn name(&self) -> String {
        match *self {
            EntryLaw::Gaussian => "gaussian".into(),
            EntryLaw::Rademacher => "rademacher".into(),
            EntryLaw::Uniform => "uniform".into(),
            EntryLaw::HeavyTail { tail_exponent } => format!("heavy_tail({tail_exponent})"),
            EntryLaw::SparseBernoulli { p } => format!("sparse_bernoulli({p})"),
        }
    }

    /// One standardized, untruncated draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            EntryLaw::Gaussian => StandardNormal.sample(rng),
            EntryLaw::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            EntryLaw::Uniform => 3f64.sqrt() * (2.0 * rng.random::<f64>() - 1.0),
            EntryLaw::HeavyTail { tail_exponent } => {
                let t = StudentT::new(tail_exponent).expect("validated degrees of freedom");
                let x: f64 = t.sample(rng);
                x * ((tail_exponent - 2.0) / tail_exponent).sqrt()
            }
            EntryLaw::SparseBernoulli { p } => {
                let g: f64 = StandardNormal.sample(rng);
                if rng.random::<f64>() < p {
                    g / p.sqrt()
                } else {
                    0.0
                }
            }
        }
    }

    /// `E[X^2; |X| <= c]` for the standardized law, computed analytically or by quadrature.
    pub fn truncated_second_moment(&self, c: f64) -> f64 {
        if c <= 0.0 {
            return 0.0;
        }
        match *self {
            EntryLaw::Gaussian => gaussian_truncated_second_moment(c),
            EntryLaw::Rademacher => {
                if c >= 1.0 {
                    1.0
                } else {
                    0.0
                }
            }
            EntryLaw::Uniform => {
                let r3 = 3f64.sqrt();
                if c >= r3 {
                    1.0
                } else {
                    c.powi(3) / (3.0 * r3)
                }
            }
            EntryLaw::HeavyTail { tail_exponent } => {
                let nu = tail_exponent;
                let scale = ((nu - 2.0) / nu).sqrt();
                let kernel = |y: f64| {
                    let x = y / scale;
                    (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0)
                };
                let tol = Tolerance::new(1e-300, 1e-13).with_max_intervals(5000);
                let total = quad::integrate_real_line(kernel, tol).map(|e| e.value).unwrap_or(f64::NAN);
                let inner = quad::integrate(|y| y * y * kernel(y), -c, c, tol).map(|e| e.value).unwrap_or(f64::NAN);
                inner / total
            }
            EntryLaw::SparseBernoulli { p } => gaussian_truncated_second_moment(c * p.sqrt()),
        }
    }
}

fn gaussian_truncated_second_moment(c: f64) -> f64 {
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    if c > 40.0 {
        return 1.0;
    }
    if c < 8.0 {
        let body = quad::integrate(|x| x * x * phi(x), 0.0, c, Tolerance::new(1e-300, 1e-14));
        return (2.0 * body.map(|e| e.value).unwrap_or(f64::NAN)).min(1.0);
    }
    let tail = quad::integrate(|x| x * x * phi(x), c, 40.0, Tolerance::new(1e-300, 1e-12));
    1.0 - 2.0 * tail.map(|e| e.value).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationPolicy {
    pub enabled: bool,
    #[serde(rename = "D")]
    pub d: f64,
    pub phi: f64,
    /// Near-i.i.d. perturbation margin; recorded for provenance only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
}

impl TruncationPolicy {
    pub const fn disabled() -> Self {
        TruncationPolicy { enabled: false, d: 1.0, phi: 0.25, delta0: None }
    }

    pub fn new(d: f64, phi: f64) -> Self {
        TruncationPolicy { enabled: true, d, phi, delta0: None }
    }

    /// Policy with `phi` derived from the law's moment margin `delta`.
    pub fn from_delta(d: f64, delta: f64) -> Result<Self, EnsembleError> {
        Ok(TruncationPolicy::new(d, derive_phi(delta)?))
    }

    /// `D n^{1/2 - phi}`, or `None` when truncation is off.
    pub fn threshold(&self, n: usize) -> Result<Option<f64>, EnsembleError> {
        if !self.enabled {
            return Ok(None);
        }
        if !(self.d > 0.0) || !(self.phi > 0.0 && self.phi < 0.5) {
            return Err(EnsembleError::Threshold { d: self.d, phi: self.phi });
        }
        Ok(Some(self.d * (n as f64).powf(0.5 - self.phi)))
    }
}

impl Default for TruncationPolicy {
    fn default() -> Self {
        TruncationPolicy::disabled()
    }
}

/// `delta / (2 (4 + delta))`, the largest admissible truncation exponent.
pub fn derive_phi(delta: f64) -> Result<f64, EnsembleError> {
    if !(delta > 0.0) {
        return Err(EnsembleError::Delta(delta));
    }
    Ok(delta / (2.0 * (4.0 + delta)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub n: usize,
    pub m: usize,
    pub law: EntryLaw,
    #[serde(default)]
    pub truncation: TruncationPolicy,
    pub base_seed: u64,
}

impl EnsembleSpec {
    pub fn new(n: usize, m: usize, law: EntryLaw, base_seed: u64) -> Self {
        EnsembleSpec { n, m, law, truncation: TruncationPolicy::disabled(), base_seed }
    }

    pub fn with_truncation(mut self, truncation: TruncationPolicy) -> Self {
        self.truncation = truncation;
        self
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n < 2 {
            return Err(EnsembleError::Dimension(self.n));
        }
        if self.m < 1 {
            return Err(EnsembleError::FactorCount(self.m));
        }
        self.law.validate()?;
        self.truncation.threshold(self.n)?;
        Ok(())
    }

    /// Soft problems that do not block sampling.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let EntryLaw::SparseBernoulli { p } = self.law {
            let floor = (self.n as f64).ln() / self.n as f64;
            if p < floor {
                out.push(format!("sparse_bernoulli p = {p} is below log(n)/n = {floor:.3e}"));
            }
        }
        out
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Stream seed for one `(base_seed, stream, trial)` triple. Streams of distinct
/// triples are independent of scheduling order.
pub fn derive_seed(base_seed: u64, stream: u64, trial: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base_seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ trial)
}

pub fn stream_rng(base_seed: u64, stream: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base_seed, stream, trial))
}

/// Sampler with the truncation cutoff and rescaling factor resolved once.
#[derive(Debug, Clone)]
pub struct FactorSampler {
    spec: EnsembleSpec,
    cutoff: Option<f64>,
    scale: f64,
}

impl FactorSampler {
    pub fn new(spec: &EnsembleSpec) -> Result<Self, EnsembleError> {
        spec.validate()?;
        let (cutoff, scale) = match spec.truncation.threshold(spec.n)? {
            None => (None, 1.0),
            Some(threshold) => {
                let c = solve_cutoff(&spec.law, threshold)?;
                (Some(c), 1.0 / spec.law.truncated_second_moment(c).sqrt())
            }
        };
        Ok(FactorSampler { spec: spec.clone(), cutoff, scale })
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    /// Raw cutoff applied before rescaling.
    pub fn cutoff(&self) -> Option<f64> {
        self.cutoff
    }

    /// Variance of the emitted law, `scale^2 E[X^2; |X| <= c]`.
    pub fn emitted_variance(&self) -> f64 {
        match self.cutoff {
            None => 1.0,
            Some(c) => self.scale * self.scale * self.spec.law.truncated_second_moment(c),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let x = self.spec.law.sample(rng);
        match self.cutoff {
            Some(c) if x.abs() > c => 0.0,
            Some(_) => x * self.scale,
            None => x,
        }
    }

    /// Factor `q` (1-based) of trial `trial`.
    pub fn factor(&self, q: usize, trial: u64) -> Result<Mat<f64>, EnsembleError> {
        if q < 1 || q > self.spec.m {
            return Err(EnsembleError::FactorIndex { q, m: self.spec.m });
        }
        let n = self.spec.n;
        let mut rng = stream_rng(self.spec.base_seed, q as u64, trial);
        let mut data = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            data.push(self.draw(&mut rng));
        }
        Ok(Mat::from_fn(n, n, |i, j| data[i * n + j]))
    }

    pub fn factors(&self, trial: u64) -> Result<Vec<Mat<f64>>, EnsembleError> {
        (1..=self.spec.m).map(|q| self.factor(q, trial)).collect()
    }
}

/// Solves `c / sigma(c) = threshold` for the cutoff, taking the stable (larger) root.
fn solve_cutoff(law: &EntryLaw, threshold: f64) -> Result<f64, EnsembleError> {
    let sigma = |c: f64| law.truncated_second_moment(c).sqrt();
    let mut c = threshold;
    for _ in 0..500 {
        let s = sigma(c);
        if !(s > 0.0) {
            return Err(EnsembleError::TruncationInfeasible { threshold });
        }
        let next = threshold * s;
        if (next - c).abs() <= 1e-15 * c {
            c = next;
            break;
        }
        c = next;
    }
    // step just inside the root so that c / sigma(c) <= threshold after rounding
    let mut c = c * (1.0 - 1e-12);
    for _ in 0..60 {
        let s = sigma(c);
        if s > 0.0 && c / s <= threshold {
            return Ok(c);
        }
        c *= 1.0 - 1e-9;
    }
    Err(EnsembleError::TruncationInfeasible { threshold })
}

/// Factor `q` of trial `trial` for `spec`; a pure function of its arguments.
pub fn sample_factor(spec: &EnsembleSpec, q: usize, trial: u64) -> Result<Mat<f64>, EnsembleError> {
    FactorSampler::new(spec)?.factor(q, trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentAudit {
    pub mean: f64,
    pub variance: f64,
    pub abs_moment: f64,
    pub p: f64,
    pub count: usize,
}

/// Plain empirical mean, variance and `p`-th absolute moment.
pub fn moment_audit(samples: &[f64], p: f64) -> Result<MomentAudit, EnsembleError> {
    if samples.len() < 100 {
        return Err(EnsembleError::TooFewSamples(samples.len()));
    }
    if !(p >= 2.0) {
        return Err(EnsembleError::MomentOrder(p));
    }
    let count = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / count;
    let variance = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count;
    let abs_moment = samples.iter().map(|x| x.abs().powf(p)).sum::<f64>() / count;
    Ok(MomentAudit { mean, variance, abs_moment, p, count: samples.len() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_laws() -> Vec<EntryLaw> {
        vec![
            EntryLaw::Gaussian,
            EntryLaw::Rademacher,
            EntryLaw::Uniform,
            EntryLaw::HeavyTail { tail_exponent: 6.0 },
            EntryLaw::SparseBernoulli { p: 0.3 },
        ]
    }

    #[test]
    fn derive_phi_values() {
        assert!((derive_phi(1.0).unwrap() - 0.1).abs() < 1e-15);
        assert!((derive_phi(4.0).unwrap() - 0.25).abs() < 1e-15);
        let lim = derive_phi(1e6).unwrap();
        assert!(lim < 0.5 && 0.5 - lim < 1e-5);
        assert!(derive_phi(0.0).is_err());
        assert!(derive_phi(-1.0).is_err());
    }

    #[test]
    fn untruncated_laws_have_unit_second_moment() {
        for law in all_laws() {
            let m2 = law.truncated_second_moment(1e6);
            assert!((m2 - 1.0).abs() < 1e-9, "{law:?}: {m2}");
        }
    }

    #[test]
    fn gaussian_truncated_moment_matches_erf_identity() {
        // E[X^2; |X| <= 1] = erf(1/sqrt 2) - 2 phi(1)
        let erf = 0.682_689_492_137_085_9;
        let phi1 = (-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let expected = erf - 2.0 * phi1;
        assert!((EntryLaw::Gaussian.truncated_second_moment(1.0) - expected).abs() < 1e-13);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = EnsembleSpec::new(2, 1, EntryLaw::Gaussian, 42);
        let a = sample_factor(&spec, 1, 0).unwrap();
        let b = sample_factor(&spec, 1, 0).unwrap();
        assert_eq!(a, b);
        let c = sample_factor(&spec, 1, 1).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn factor_index_and_dimension_errors() {
        let spec = EnsembleSpec::new(4, 2, EntryLaw::Gaussian, 1);
        assert!(matches!(sample_factor(&spec, 0, 0), Err(EnsembleError::FactorIndex { .. })));
        assert!(matches!(sample_factor(&spec, 3, 0), Err(EnsembleError::FactorIndex { .. })));
        let bad = EnsembleSpec::new(1, 1, EntryLaw::Gaussian, 1);
        assert!(matches!(bad.validate(), Err(EnsembleError::Dimension(1))));
        let bad = EnsembleSpec::new(4, 0, EntryLaw::Gaussian, 1);
        assert!(matches!(bad.validate(), Err(EnsembleError::FactorCount(0))));
    }

    #[test]
    fn non_positive_threshold_rejected() {
        let spec = EnsembleSpec::new(10, 1, EntryLaw::Gaussian, 1).with_truncation(TruncationPolicy::new(0.0, 0.1));
        assert!(matches!(FactorSampler::new(&spec), Err(EnsembleError::Threshold { .. })));
        let spec = EnsembleSpec::new(10, 1, EntryLaw::Gaussian, 1).with_truncation(TruncationPolicy::new(1.0, 0.7));
        assert!(matches!(FactorSampler::new(&spec), Err(EnsembleError::Threshold { .. })));
    }

    #[test]
    fn heavy_tail_truncation_respects_threshold() {
        let law = EntryLaw::HeavyTail { tail_exponent: 5.0 };
        let phi = derive_phi(1.0).unwrap();
        let spec = EnsembleSpec::new(100, 1, law, 7).with_truncation(TruncationPolicy::new(1.0, phi));
        let threshold = spec.truncation.threshold(100).unwrap().unwrap();
        assert!((threshold - 100f64.powf(0.4)).abs() < 1e-12);
        assert!((threshold - 6.3096).abs() < 1e-4);
        let sampler = FactorSampler::new(&spec).unwrap();
        for trial in 0..5 {
            let x = sampler.factor(1, trial).unwrap();
            for j in 0..100 {
                for i in 0..100 {
                    assert!(x[(i, j)].abs() <= threshold);
                }
            }
        }
        assert!((sampler.emitted_variance() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn infeasible_truncation_is_an_error() {
        // the standardized uniform law cannot be squeezed below sqrt(3)
        let spec = EnsembleSpec::new(4, 1, EntryLaw::Uniform, 1).with_truncation(TruncationPolicy::new(0.5, 0.4));
        assert!(matches!(FactorSampler::new(&spec), Err(EnsembleError::TruncationInfeasible { .. })));
    }

    #[test]
    fn rademacher_audit() {
        let law = EntryLaw::Rademacher;
        let mut rng = stream_rng(3, 0, 0);
        let xs: Vec<f64> = (0..10_000).map(|_| law.sample(&mut rng)).collect();
        let audit = moment_audit(&xs, 4.0).unwrap();
        assert!(audit.mean.abs() < 0.03);
        assert!((audit.variance - 1.0).abs() < 0.05);
        assert_eq!(audit.abs_moment, 1.0);
    }

    #[test]
    fn constant_audit_and_errors() {
        let xs = vec![1.0; 200];
        let audit = moment_audit(&xs, 4.0).unwrap();
        assert_eq!((audit.mean, audit.variance, audit.abs_moment), (1.0, 0.0, 1.0));
        assert!(matches!(moment_audit(&[], 4.0), Err(EnsembleError::TooFewSamples(0))));
        assert!(matches!(moment_audit(&xs, 1.0), Err(EnsembleError::MomentOrder(_))));
    }

    #[test]
    fn sparse_warning() {
        let spec = EnsembleSpec::new(1000, 1, EntryLaw::SparseBernoulli { p: 1e-4 }, 0);
        assert_eq!(spec.warnings().len(), 1);
        let spec = EnsembleSpec::new(1000, 1, EntryLaw::SparseBernoulli { p: 0.5 }, 0);
        assert!(spec.warnings().is_empty());
    }

    #[test]
    fn law_json_shape() {
        let law: EntryLaw = serde_json::from_str(r#"{"kind":"heavy_tail","tail_exponent":6.0}"#).unwrap();
        assert_eq!(law, EntryLaw::HeavyTail { tail_exponent: 6.0 });
        assert!(serde_json::from_str::<EntryLaw>(r#"{"kind":"heavy_tail","tail_exponent":6.0,"extra":1}"#).is_err());
    }
}
