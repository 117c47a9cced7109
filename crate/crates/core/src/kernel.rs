//! Gaussian (RBF) localizing kernel and the median-distance bandwidth rule.

use ndarray::{ArrayView2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

/// Sample size above which the median heuristic runs on a random subsample.
pub const MEDIAN_SUBSAMPLE_CAP: usize = 2000;

/// Kernel bandwidth σ > 0.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Bandwidth(f64);

impl Bandwidth {
    pub fn new(sigma: f64) -> Result<Self> {
        if sigma > 0.0 && sigma.is_finite() {
            Ok(Self(sigma))
        } else {
            Err(Error::InvalidArgument(format!(
                "bandwidth must be positive and finite, got {sigma}"
            )))
        }
    }

    pub fn sigma(self) -> f64 {
        self.0
    }

    /// The factor `1 / (2σ²)` multiplying squared distances in the exponent.
    #[inline]
    pub fn exponent_scale(self) -> f64 {
        1.0 / (2.0 * self.0 * self.0)
    }
}

#[inline]
pub(crate) fn squared_distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `exp(−‖x − y‖² / (2σ²))`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: Bandwidth) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument("kernel on empty vectors".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel argument".into()));
    }
    let s = sigma.sigma();
    Ok((-squared_distance(x, y) / (2.0 * s * s)).exp())
}

/// Median of the pairwise Euclidean distances between rows (lower middle for
/// an even count). Samples larger than [`MEDIAN_SUBSAMPLE_CAP`] are first
/// subsampled without replacement using `seed`.
pub fn median_heuristic(sample: ArrayView2<'_, f64>, seed: u64) -> Result<Bandwidth> {
    let m = sample.nrows();
    if m < 2 {
        return Err(Error::InvalidArgument(
            "median heuristic needs at least two rows".into(),
        ));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("median heuristic sample".into()));
    }
    let rows: Vec<Vec<f64>> = if m > MEDIAN_SUBSAMPLE_CAP {
        let mut rng = rng::stream(seed, Stream::Subsampling);
        let mut picked = index::sample(&mut rng, m, MEDIAN_SUBSAMPLE_CAP).into_vec();
        picked.sort_unstable();
        picked.iter().map(|&i| sample.row(i).to_vec()).collect()
    } else {
        sample.axis_iter(Axis(0)).map(|r| r.to_vec()).collect()
    };

    let k = rows.len();
    let mut dists = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in (i + 1)..k {
            dists.push(squared_distance(&rows[i], &rows[j]).sqrt());
        }
    }
    let mid = (dists.len() - 1) / 2;
    let (_, median, _) = dists.select_nth_unstable_by(mid, f64::total_cmp);
    if *median == 0.0 {
        return Err(Error::ZeroBandwidth);
    }
    Bandwidth::new(*median)
}
