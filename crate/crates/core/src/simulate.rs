//! Synthetic complete data and MAR missingness mechanisms.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::{default_column_names, MaskedDataset, Pattern};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Correlation between the first two coordinates in the synthetic designs.
pub const DEFAULT_DEPENDENCE: f64 = 0.7;

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    /// Uniform marginals on [0, 1] joined by a Gaussian copula.
    UniformCopula,
    Gaussian,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform_copula" => Ok(Family::UniformCopula),
            "gaussian" => Ok(Family::Gaussian),
            other => Err(Error::InvalidArgument(format!("unknown family {other:?}"))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::UniformCopula => "uniform",
            Family::Gaussian => "gaussian",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub family: Family,
    pub n: usize,
    /// Correlation between X1 and X2 (on the latent Gaussian scale for the copula).
    pub dependence: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(family: Family, n: usize, seed: u64) -> Self {
        Self {
            family,
            n,
            dependence: DEFAULT_DEPENDENCE,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        if !(self.dependence > -1.0 && self.dependence < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dependence must lie in (-1, 1), got {}",
                self.dependence
            )));
        }
        Ok(())
    }

    fn covariance(&self) -> Vec<Vec<f64>> {
        let r = self.dependence;
        vec![vec![1.0, r, 0.0], vec![r, 1.0, 0.0], vec![0.0, 0.0, 1.0]]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(sigma: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = sigma.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = sigma[i][i] - s;
                if !(v > 0.0) {
                    return Err(Error::InvalidArgument("covariance is not positive definite".into()));
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (sigma[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

fn latent_gaussian<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Array2<f64>> {
    spec.validate()?;
    let l = cholesky(&spec.covariance())?;
    let d = l.len();
    let mut out = Array2::zeros((spec.n, d));
    let mut z = vec![0.0; d];
    for mut row in out.axis_iter_mut(Axis(0)) {
        for zj in z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        for i in 0..d {
            row[i] = (0..=i).map(|k| l[i][k] * z[k]).sum();
        }
    }
    Ok(out)
}

/// Three columns with uniform marginals: `X = Φ(Z)` for correlated Gaussian `Z`.
pub fn sample_uniform_copula_with<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Array2<f64>> {
    Ok(latent_gaussian(spec, rng)?.mapv(normal_cdf))
}

pub fn sample_gaussian_with<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Array2<f64>> {
    latent_gaussian(spec, rng)
}

pub fn sample_uniform_copula(spec: &SyntheticSpec) -> Result<Array2<f64>> {
    sample_uniform_copula_with(spec, &mut rng::stream(spec.seed, Stream::Simulation))
}

pub fn sample_gaussian(spec: &SyntheticSpec) -> Result<Array2<f64>> {
    sample_gaussian_with(spec, &mut rng::stream(spec.seed, Stream::Simulation))
}

/// Draws a complete sample of the spec's family from the given stream.
pub fn sample_family(spec: &SyntheticSpec, purpose: Stream) -> Result<Array2<f64>> {
    let mut rng = rng::stream(spec.seed, purpose);
    match spec.family {
        Family::UniformCopula => sample_uniform_copula_with(spec, &mut rng),
        Family::Gaussian => sample_gaussian_with(spec, &mut rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismKind {
    UniformPaper,
    GaussianPaper,
    LogisticGeneric,
}

#[derive(Debug, Clone, PartialEq)]
struct LogisticParams {
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Per pattern, coefficients over all d columns (zero where the pattern is missing).
    coefs: Vec<Vec<f64>>,
    intercept: f64,
}

/// Total probability mass shared by the incomplete patterns of the logistic mechanism.
const LOGISTIC_INCOMPLETE_CAP: f64 = 0.95;

/// A MAR mechanism over a fixed pattern set. Pattern 0 is always the
/// all-observed pattern and absorbs the probability left by the others, so it
/// is the only pattern whose probability may depend on every coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct MarMechanism {
    patterns: Vec<Pattern>,
    kind: MechanismKind,
    logistic: Option<LogisticParams>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn three_patterns() -> Vec<Pattern> {
    vec![
        Pattern::from_bits(vec![false, false, false]),
        Pattern::from_bits(vec![false, true, false]),
        Pattern::from_bits(vec![true, false, false]),
    ]
}

impl MarMechanism {
    pub fn patterns(&self) -> &[Pattern] {
        &self.patterns
    }

    pub fn kind(&self) -> MechanismKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.patterns[0].d()
    }

    /// `P(M = pattern k | X = x)` for every pattern.
    pub fn probabilities(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            MechanismKind::UniformPaper => {
                vec![(x[0] + x[1]) / 3.0, (2.0 - x[0]) / 3.0, (1.0 - x[1]) / 3.0]
            }
            MechanismKind::GaussianPaper => {
                let (u1, u2) = (normal_cdf(x[0]), normal_cdf(x[1]));
                vec![(u1 + u2) / 3.0, (2.0 - u1) / 3.0, (1.0 - u2) / 3.0]
            }
            MechanismKind::LogisticGeneric => {
                let p = self.logistic.as_ref().expect("logistic parameters");
                let mut probs = vec![0.0; self.patterns.len()];
                let share = LOGISTIC_INCOMPLETE_CAP / (self.patterns.len() - 1) as f64;
                let mut rest = 0.0;
                for k in 1..self.patterns.len() {
                    probs[k] = share * sigmoid(p.intercept + p.score(k, x));
                    rest += probs[k];
                }
                probs[0] = 1.0 - rest;
                probs
            }
        }
    }

    pub fn prob(&self, k: usize, x: &[f64]) -> f64 {
        self.probabilities(x)[k]
    }

    /// Expected share of masked cells over the rows of `x`.
    pub fn expected_missing_fraction(&self, x: ArrayView2<'_, f64>) -> f64 {
        let d = self.dim() as f64;
        let miss: Vec<f64> = self
            .patterns
            .iter()
            .map(|p| (p.d() - p.d_m()) as f64 / d)
            .collect();
        let total: f64 = x
            .axis_iter(Axis(0))
            .map(|row| {
                let row = row.to_vec();
                self.probabilities(&row).iter().zip(&miss).map(|(p, m)| p * m).sum::<f64>()
            })
            .sum();
        total / x.nrows() as f64
    }
}

impl LogisticParams {
    fn score(&self, k: usize, x: &[f64]) -> f64 {
        self.coefs[k]
            .iter()
            .enumerate()
            .filter(|(_, &c)| c != 0.0)
            .map(|(j, c)| c * (x[j] - self.center[j]) / self.scale[j])
            .sum()
    }
}

/// The three-pattern mechanism of the synthetic designs, with patterns
/// (0,0,0), (0,1,0), (1,0,0).
pub fn paper_mar_mechanism(family: Family) -> MarMechanism {
    MarMechanism {
        patterns: three_patterns(),
        kind: match family {
            Family::UniformCopula => MechanismKind::UniformPaper,
            Family::Gaussian => MechanismKind::GaussianPaper,
        },
        logistic: None,
    }
}

/// Masks each row with a pattern drawn from the mechanism's probabilities at that row.
pub fn amputate<R: Rng>(complete: ArrayView2<'_, f64>, mech: &MarMechanism, rng: &mut R) -> Result<MaskedDataset> {
    let (n, d) = complete.dim();
    if d != mech.dim() {
        return Err(Error::DimensionMismatch {
            expected: mech.dim(),
            found: d,
        });
    }
    let mut mask = Array2::from_elem((n, d), false);
    for (i, row) in complete.axis_iter(Axis(0)).enumerate() {
        let x = row.to_vec();
        let probs = mech.probabilities(&x);
        let sum: f64 = probs.iter().sum();
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidMechanism(format!(
                "row {i}: pattern probabilities {probs:?} are not a distribution"
            )));
        }
        let u: f64 = rng.random::<f64>() * sum;
        let mut acc = 0.0;
        let mut chosen = probs.iter().rposition(|&p| p > 0.0).expect("positive mass");
        for (k, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = k;
                break;
            }
        }
        for (j, &b) in mech.patterns[chosen].bits().iter().enumerate() {
            mask[[i, j]] = b;
        }
    }
    MaskedDataset::new(complete.to_owned(), mask, default_column_names(d))
}

fn draw_patterns<R: Rng>(d: usize, count: usize, p_col: f64, rng: &mut R) -> Vec<Pattern> {
    let full = (1u128 << d) - 1;
    // all-missing rows carry no information; use that pattern only when forced
    let proper = 2u128.pow(d as u32) - 2;
    let allow_all_missing = proper < count as u128;
    let mut chosen: BTreeSet<Vec<bool>> = BTreeSet::new();
    if d <= 12 {
        let mut pool: Vec<(f64, Vec<bool>)> = (1..=full)
            .filter(|&m| allow_all_missing || m != full)
            .map(|m| {
                let bits: Vec<bool> = (0..d).map(|j| m >> j & 1 == 1).collect();
                let k = bits.iter().filter(|&&b| b).count() as i32;
                let w = p_col.powi(k) * (1.0 - p_col).powi(d as i32 - k);
                // exponential keys give weighted sampling without replacement
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (u.ln() / w, bits)
            })
            .collect();
        pool.sort_by(|a, b| b.0.total_cmp(&a.0));
        chosen.extend(pool.into_iter().take(count).map(|(_, b)| b));
    } else {
        while chosen.len() < count {
            let bits: Vec<bool> = (0..d).map(|_| rng.random_bool(p_col)).collect();
            let k = bits.iter().filter(|&&b| b).count();
            if k > 0 && k < d {
                chosen.insert(bits);
            }
        }
    }
    let mut patterns: Vec<Pattern> = chosen.into_iter().map(Pattern::from_bits).collect();
    patterns.shuffle(rng);
    patterns
}

/// Random-pattern MAR mechanism calibrated to a target share of masked cells.
///
/// Draws `n_patterns − 1` distinct incomplete patterns. Each incomplete
/// pattern k has probability `0.95 / (K−1) · sigmoid(α + β_kᵀ z^(k))`, where
/// `z^(k)` are the pilot-standardized coordinates observed under k; the
/// all-observed pattern takes the remainder. The shared intercept α is found by
/// bisection so that the expected masked share on `pilot` equals
/// `target_missing_frac`.
pub fn generic_logistic_mar<R: Rng>(
    pilot: ArrayView2<'_, f64>,
    n_patterns: usize,
    target_missing_frac: f64,
    rng: &mut R,
) -> Result<MarMechanism> {
    let (n, d) = pilot.dim();
    if d == 0 || d > 64 {
        return Err(Error::InvalidArgument(format!("unsupported dimension {d}")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("pilot sample needs at least two rows".into()));
    }
    let max_patterns = if d >= 63 { usize::MAX } else { 1usize << d };
    if n_patterns < 2 || n_patterns > max_patterns {
        return Err(Error::InvalidArgument(format!(
            "n_patterns must lie in [2, 2^d], got {n_patterns}"
        )));
    }
    if !(target_missing_frac > 0.0 && target_missing_frac <= 0.6) {
        return Err(Error::InvalidArgument(format!(
            "target missing fraction must lie in (0, 0.6], got {target_missing_frac}"
        )));
    }
    let mut center = Vec::with_capacity(d);
    let mut scale = Vec::with_capacity(d);
    for col in pilot.axis_iter(Axis(1)) {
        let m = col.mean().expect("nonempty");
        let s = col.std(1.0);
        center.push(m);
        scale.push(if s > 0.0 && s.is_finite() { s } else { 1.0 });
    }

    let p_col = ((target_missing_frac + 0.15) / LOGISTIC_INCOMPLETE_CAP).min(0.9);
    let mut patterns = vec![Pattern::all_observed(d)];
    patterns.extend(draw_patterns(d, n_patterns - 1, p_col, rng));

    let coefs: Vec<Vec<f64>> = patterns
        .iter()
        .map(|p| {
            let norm = (p.d_m().max(1) as f64).sqrt();
            (0..d)
                .map(|j| {
                    if p.is_all_observed() || p.is_missing(j) {
                        0.0
                    } else {
                        rng.sample::<f64, _>(StandardNormal) / norm
                    }
                })
                .collect()
        })
        .collect();

    let mut mech = MarMechanism {
        patterns,
        kind: MechanismKind::LogisticGeneric,
        logistic: Some(LogisticParams {
            center,
            scale,
            coefs,
            intercept: 0.0,
        }),
    };
    let frac_at = |alpha: f64, mech: &mut MarMechanism| {
        mech.logistic.as_mut().expect("logistic").intercept = alpha;
        mech.expected_missing_fraction(pilot)
    };

    let (mut lo, mut hi) = (-40.0, 40.0);
    let (f_lo, f_hi) = (frac_at(lo, &mut mech), frac_at(hi, &mut mech));
    if !(f_lo <= target_missing_frac && target_missing_frac <= f_hi) {
        return Err(Error::CalibrationFailed(format!(
            "target {target_missing_frac} outside the reachable range [{f_lo:.4}, {f_hi:.4}] for the drawn patterns"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let f = frac_at(mid, &mut mech);
        if (f - target_missing_frac).abs() < 1e-4 {
            return Ok(mech);
        }
        if f < target_missing_frac {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::CalibrationFailed(
        "bisection did not converge in 100 iterations".into(),
    ))
}
