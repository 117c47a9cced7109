//! Local-linear estimate of the density-ratio gradient that drives each particle.
//!
//! For a query point and one missingness pattern, the kernel-weighted linear
//! fit `g(x) = wᵀx + b` of the ratio between the pattern's observed rows and
//! the current ensemble solves a `(d_m+1)×(d_m+1)` symmetric system. Its slope
//! `w`, zero-padded to all `d` coordinates and averaged over patterns with
//! weights `n_m / n`, is the particle velocity.

use ndarray::{s, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;

use crate::dataset::{Pattern, PatternGroup};
use crate::error::{Error, Result};
use crate::kernel::{squared_distance, Bandwidth};

/// Tikhonov regularization applied to the local-linear system by default.
pub const DEFAULT_TIKHONOV_EPS: f64 = 1e-5;

/// The system `A (w, b)ᵀ = c` for one pattern at one query point.
///
/// `a` is row-major with the slope block first and the intercept in the last
/// row and column.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalLinearSystem {
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub d_m: usize,
}

impl LocalLinearSystem {
    pub fn zeros(d_m: usize) -> Self {
        let k = d_m + 1;
        Self {
            a: vec![0.0; k * k],
            c: vec![0.0; k],
            d_m,
        }
    }

    pub fn size(&self) -> usize {
        self.d_m + 1
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.a[row * (self.d_m + 1) + col]
    }

    /// `A₂₂`, the mean ensemble kernel weight. Zero when every weight underflowed.
    pub fn ensemble_mass(&self) -> f64 {
        self.at(self.d_m, self.d_m)
    }

    fn reset(&mut self, d_m: usize) {
        let k = d_m + 1;
        self.d_m = d_m;
        self.a.clear();
        self.a.resize(k * k, 0.0);
        self.c.clear();
        self.c.resize(k, 0.0);
    }
}

/// Slope and intercept of one pattern's local-linear fit.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternFit {
    pub pattern: Pattern,
    /// Slope zero-padded to d coordinates.
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityResult {
    pub v: Vec<f64>,
    /// Per-pattern fits, present when diagnostics were requested.
    pub per_pattern: Option<Vec<PatternFit>>,
    /// Number of patterns whose ensemble-side kernel weights all underflowed.
    pub underflow_count: usize,
}

/// Accumulates `A` and `c` from row-major sub-matrices.
fn accumulate(
    target: &[f64],
    ensemble: &[f64],
    query: &[f64],
    scale: f64,
    sys: &mut LocalLinearSystem,
) {
    let d_m = query.len();
    let k = d_m + 1;
    sys.reset(d_m);
    let n_tilde = ensemble.len() / d_m;
    let n_m = target.len() / d_m;

    let a = &mut sys.a;
    for e in ensemble.chunks_exact(d_m) {
        let wgt = (-(squared_distance(e, query) * scale)).exp();
        if wgt == 0.0 {
            continue;
        }
        for j in 0..d_m {
            let we = wgt * e[j];
            let row = &mut a[j * k..(j + 1) * k];
            for l in j..d_m {
                row[l] += we * e[l];
            }
            row[d_m] += we;
        }
        a[d_m * k + d_m] += wgt;
    }
    let inv = n_tilde as f64;
    for j in 0..k {
        for l in j..k {
            let v = a[j * k + l] / inv;
            a[j * k + l] = v;
            a[l * k + j] = v;
        }
    }

    let c = &mut sys.c;
    for x in target.chunks_exact(d_m) {
        let wgt = (-(squared_distance(x, query) * scale)).exp();
        if wgt == 0.0 {
            continue;
        }
        for j in 0..d_m {
            c[j] += wgt * x[j];
        }
        c[d_m] += wgt;
    }
    let inv = n_m as f64;
    for v in c.iter_mut() {
        *v /= inv;
    }
}

fn contiguous(x: ArrayView2<'_, f64>) -> std::borrow::Cow<'_, [f64]> {
    match x.to_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(x.iter().copied().collect()),
    }
}

/// Assembles the kernel-weighted system for one pattern group.
///
/// `ensemble_sub` (ñ × d_m) and `query_sub` are already restricted to the
/// pattern's observed coordinates.
pub fn assemble_system(
    group: &PatternGroup,
    ensemble_sub: ArrayView2<'_, f64>,
    query_sub: &[f64],
    sigma: Bandwidth,
) -> Result<LocalLinearSystem> {
    let d_m = group.pattern.d_m();
    if d_m == 0 || group.n_m() == 0 || ensemble_sub.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "local-linear system needs d_m ≥ 1 and nonempty samples".into(),
        ));
    }
    for found in [ensemble_sub.ncols(), query_sub.len()] {
        if found != d_m {
            return Err(Error::DimensionMismatch { expected: d_m, found });
        }
    }
    if query_sub.iter().any(|v| !v.is_finite()) || ensemble_sub.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local-linear system input".into()));
    }
    let mut sys = LocalLinearSystem::zeros(d_m);
    accumulate(
        &contiguous(group.rows.view()),
        &contiguous(ensemble_sub),
        query_sub,
        sigma.exponent_scale(),
        &mut sys,
    );
    check_finite(&sys)?;
    Ok(sys)
}

fn check_finite(sys: &LocalLinearSystem) -> Result<()> {
    if sys.a.iter().chain(&sys.c).all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("local-linear system accumulation overflowed".into()))
    }
}

/// Solves `(A + εI)(w, b)ᵀ = c` in place by Gaussian elimination with partial
/// pivoting. On return `c` holds the solution; `a` is overwritten.
fn solve_in_place(a: &mut [f64], c: &mut [f64], k: usize, eps: f64) -> Result<()> {
    for i in 0..k {
        a[i * k + i] += eps;
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tiny = scale * (k as f64) * f64::EPSILON;
    for col in 0..k {
        let (piv_row, piv) = (col..k)
            .map(|r| (r, a[r * k + col]))
            .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
            .expect("nonempty pivot range");
        if !(piv.abs() > tiny) {
            return Err(Error::Singular { col, pivot: piv });
        }
        if piv_row != col {
            for j in 0..k {
                a.swap(col * k + j, piv_row * k + j);
            }
            c.swap(col, piv_row);
        }
        for r in (col + 1)..k {
            let f = a[r * k + col] / piv;
            if f == 0.0 {
                continue;
            }
            for j in col..k {
                a[r * k + j] -= f * a[col * k + j];
            }
            c[r] -= f * c[col];
        }
    }
    for col in (0..k).rev() {
        let mut s = c[col];
        for j in (col + 1)..k {
            s -= a[col * k + j] * c[j];
        }
        c[col] = s / a[col * k + col];
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("local-linear solution".into()));
    }
    Ok(())
}

/// Solves the regularized system, returning the slope `w` and intercept `b`.
pub fn solve_system(sys: &LocalLinearSystem, epsilon: f64) -> Result<(Vec<f64>, f64)> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "Tikhonov epsilon must be nonnegative, got {epsilon}"
        )));
    }
    let k = sys.size();
    let mut a = sys.a.clone();
    let mut sol = sys.c.clone();
    solve_in_place(&mut a, &mut sol, k, epsilon)?;
    let b = sol.pop().expect("k ≥ 1");
    Ok((sol, b))
}

/// Reusable buffers for single-query evaluation.
#[derive(Debug, Clone)]
struct Workspace {
    sys: LocalLinearSystem,
    query_sub: Vec<f64>,
    a: Vec<f64>,
    sol: Vec<f64>,
}

impl Default for Workspace {
    fn default() -> Self {
        Self {
            sys: LocalLinearSystem::zeros(0),
            query_sub: Vec::new(),
            a: Vec::new(),
            sol: Vec::new(),
        }
    }
}

/// One pattern group together with the ensemble restricted to its observed columns.
struct PreparedGroup<'a> {
    group: &'a PatternGroup,
    target: std::borrow::Cow<'a, [f64]>,
    ensemble_sub: Vec<f64>,
}

impl<'a> PreparedGroup<'a> {
    fn new(group: &'a PatternGroup, ensemble: ArrayView2<'_, f64>) -> Self {
        let obs = group.pattern.observed_idx();
        let mut ensemble_sub = Vec::with_capacity(ensemble.nrows() * obs.len());
        for row in ensemble.rows() {
            ensemble_sub.extend(obs.iter().map(|&j| row[j]));
        }
        Self {
            group,
            target: contiguous(group.rows.view()),
            ensemble_sub,
        }
    }

    /// Solves this pattern's system at `query` (full d-vector). The slope is
    /// left in `ws` at the pattern's observed coordinates, see [`Self::add_weighted`].
    fn solve_at(
        &self,
        query: &[f64],
        scale: f64,
        epsilon: f64,
        ws: &mut Workspace,
    ) -> Result<(f64, bool)> {
        let obs = self.group.pattern.observed_idx();
        ws.query_sub.clear();
        ws.query_sub.extend(obs.iter().map(|&j| query[j]));
        accumulate(&self.target, &self.ensemble_sub, &ws.query_sub, scale, &mut ws.sys);
        check_finite(&ws.sys)?;
        let underflow = ws.sys.ensemble_mass() == 0.0;
        let k = ws.sys.size();
        ws.a.clear();
        ws.a.extend_from_slice(&ws.sys.a);
        ws.sol.clear();
        ws.sol.extend_from_slice(&ws.sys.c);
        solve_in_place(&mut ws.a, &mut ws.sol, k, epsilon)?;
        Ok((ws.sol[k - 1], underflow))
    }

    fn padded_slope(&self, ws: &Workspace, d: usize) -> Vec<f64> {
        let mut w = vec![0.0; d];
        for (s, &j) in self.group.pattern.observed_idx().iter().enumerate() {
            w[j] = ws.sol[s];
        }
        w
    }
}

/// Pattern-averaged velocity at `query` against prepared groups. `n` is the
/// total number of rows across the groups.
fn velocity_prepared(
    prepared: &[PreparedGroup<'_>],
    n: usize,
    query: &[f64],
    sigma: Bandwidth,
    epsilon: f64,
    diagnostics: bool,
    ws: &mut Workspace,
) -> Result<VelocityResult> {
    let d = query.len();
    let scale = sigma.exponent_scale();
    let mut v = vec![0.0; d];
    let mut per_pattern = diagnostics.then(Vec::new);
    let mut underflow_count = 0;
    for p in prepared {
        let (b, underflow) = p.solve_at(query, scale, epsilon, ws)?;
        underflow_count += usize::from(underflow);
        let weight = p.group.n_m() as f64 / n as f64;
        for (s, &j) in p.group.pattern.observed_idx().iter().enumerate() {
            v[j] += weight * ws.sol[s];
        }
        if let Some(fits) = per_pattern.as_mut() {
            fits.push(PatternFit {
                pattern: p.group.pattern.clone(),
                w: p.padded_slope(ws, d),
                b,
            });
        }
    }
    Ok(VelocityResult {
        v,
        per_pattern,
        underflow_count,
    })
}

fn check_query(ensemble: ArrayView2<'_, f64>, query: &[f64]) -> Result<()> {
    if ensemble.ncols() != query.len() {
        return Err(Error::DimensionMismatch {
            expected: ensemble.ncols(),
            found: query.len(),
        });
    }
    if ensemble.nrows() == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if query.iter().chain(ensemble.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ensemble or query".into()));
    }
    Ok(())
}

/// Slope of one pattern's local-linear fit at `query`, zero-padded to `d`
/// coordinates, and its intercept.
pub fn pattern_velocity(
    group: &PatternGroup,
    ensemble: ArrayView2<'_, f64>,
    query: &[f64],
    sigma: Bandwidth,
    epsilon: f64,
) -> Result<(Vec<f64>, f64)> {
    check_query(ensemble, query)?;
    if group.pattern.d() != query.len() {
        return Err(Error::DimensionMismatch {
            expected: group.pattern.d(),
            found: query.len(),
        });
    }
    let prepared = PreparedGroup::new(group, ensemble);
    let mut ws = Workspace::default();
    let (b, _) = prepared.solve_at(query, sigma.exponent_scale(), epsilon, &mut ws)?;
    Ok((prepared.padded_slope(&ws, query.len()), b))
}

/// `Σ_m (n_m / n) w_m(query)` over all groups.
pub fn aggregate_velocity(
    groups: &[PatternGroup],
    ensemble: ArrayView2<'_, f64>,
    query: &[f64],
    sigma: Bandwidth,
    epsilon: f64,
    diagnostics: bool,
) -> Result<VelocityResult> {
    check_query(ensemble, query)?;
    let n: usize = groups.iter().map(PatternGroup::n_m).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no observed rows".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.pattern.d() != query.len()) {
        return Err(Error::DimensionMismatch {
            expected: query.len(),
            found: g.pattern.d(),
        });
    }
    let prepared: Vec<_> = groups.iter().map(|g| PreparedGroup::new(g, ensemble)).collect();
    velocity_prepared(
        &prepared,
        n,
        query,
        sigma,
        epsilon,
        diagnostics,
        &mut Workspace::default(),
    )
}

/// Rows per block (and tile edge) in [`ensemble_velocities`].
const BLOCK_ROWS: usize = 128;

/// One pattern group prepared for block evaluation against a whole ensemble.
///
/// The system entries for a block of queries are kernel-weighted sums of
/// fixed per-point features, so they come out of two matrix products:
/// `K_ens · Φ` for `A` (upper triangle of `x̂x̂ᵀ` with `x̂ = (x, 1)`) and
/// `K_target · [X_m, 1]` for `c`.
struct BlockGroup<'a> {
    group: &'a PatternGroup,
    ensemble_sub: Array2<f64>,
    ensemble_t: Array2<f64>,
    target_t: Array2<f64>,
    features: Array2<f64>,
    target_aug: Array2<f64>,
    weight: f64,
}

fn upper_index(d_m: usize) -> Vec<(usize, usize)> {
    (0..=d_m).flat_map(|j| (j..=d_m).map(move |l| (j, l))).collect()
}

impl<'a> BlockGroup<'a> {
    fn new(group: &'a PatternGroup, ensemble: ArrayView2<'_, f64>, weight: f64) -> Self {
        let obs = group.pattern.observed_idx();
        let d_m = obs.len();
        let ensemble_sub = ensemble.select(Axis(1), obs);
        let pairs = upper_index(d_m);
        let aug = |row: ArrayView1<'_, f64>, j: usize| if j == d_m { 1.0 } else { row[j] };
        let features = Array2::from_shape_fn((ensemble_sub.nrows(), pairs.len()), |(i, p)| {
            let (j, l) = pairs[p];
            let row = ensemble_sub.row(i);
            aug(row, j) * aug(row, l)
        });
        let target_aug = Array2::from_shape_fn((group.n_m(), d_m + 1), |(i, j)| aug(group.rows.row(i), j));
        Self {
            group,
            ensemble_t: ensemble_sub.t().as_standard_layout().into_owned(),
            target_t: group.rows.t().as_standard_layout().into_owned(),
            ensemble_sub,
            features,
            target_aug,
            weight,
        }
    }
}

/// `exp(−‖q_i − p_j‖² · scale)` for every query row `i` and point `j`, with
/// points given column-wise (`d_m × N`).
fn kernel_block(queries: ArrayView2<'_, f64>, points_t: ArrayView2<'_, f64>, scale: f64) -> Array2<f64> {
    let n = points_t.ncols();
    let mut out = Vec::with_capacity(queries.nrows() * n);
    let mut acc = vec![0.0; n];
    for q in queries.rows() {
        acc.fill(0.0);
        for (col, &ql) in points_t.rows().into_iter().zip(q.iter()) {
            let col = col.to_slice().expect("contiguous coordinate row");
            for (a, &p) in acc.iter_mut().zip(col) {
                let t = p - ql;
                *a += t * t;
            }
        }
        out.extend(acc.iter().map(|&d2| (-(d2 * scale)).exp()));
    }
    Array2::from_shape_vec((queries.nrows(), n), out).expect("shape matches")
}

/// Kernel-weighted feature sums `(Σ_j k_ij Φ_j)` for every ensemble row `i`.
///
/// The ensemble kernel is symmetric, so only tiles on or above the block
/// diagonal are evaluated; each off-diagonal tile contributes to both of its
/// row blocks. Tiles are computed in parallel and summed in a fixed order.
fn ensemble_feature_sums(g: &BlockGroup<'_>, starts: &[usize], scale: f64) -> Array2<f64> {
    let n_tilde = g.ensemble_sub.nrows();
    let range = |b: usize| starts[b]..(starts[b] + BLOCK_ROWS).min(n_tilde);
    let tiles: Vec<(usize, usize)> = (0..starts.len())
        .flat_map(|bi| (bi..starts.len()).map(move |bj| (bi, bj)))
        .collect();
    let parts: Vec<(Array2<f64>, Option<Array2<f64>>)> = tiles
        .par_iter()
        .map(|&(bi, bj)| {
            let (ri, rj) = (range(bi), range(bj));
            let k = kernel_block(
                g.ensemble_sub.slice(s![ri.clone(), ..]),
                g.ensemble_t.slice(s![.., rj.clone()]),
                scale,
            );
            let to_i = k.dot(&g.features.slice(s![rj, ..]));
            let to_j = (bi != bj).then(|| k.t().dot(&g.features.slice(s![ri, ..])));
            (to_i, to_j)
        })
        .collect();
    let mut sums = Array2::zeros((n_tilde, g.features.ncols()));
    for (&(bi, bj), (to_i, to_j)) in tiles.iter().zip(parts) {
        sums.slice_mut(s![range(bi), ..]).scaled_add(1.0, &to_i);
        if let Some(to_j) = to_j {
            sums.slice_mut(s![range(bj), ..]).scaled_add(1.0, &to_j);
        }
    }
    sums
}

fn block_velocity(
    groups: &[BlockGroup<'_>],
    sums: &[(Array2<f64>, Array2<f64>)],
    rows: std::ops::Range<usize>,
    d: usize,
    epsilon: f64,
) -> Result<(Array2<f64>, usize)> {
    let mut v = Array2::zeros((rows.len(), d));
    let mut underflow = 0;
    let mut a = Vec::new();
    let mut sol = Vec::new();
    for (g, (a_sums, c_sums)) in groups.iter().zip(sums) {
        let obs = g.group.pattern.observed_idx();
        let d_m = obs.len();
        let k = d_m + 1;
        let (n_tilde, n_m) = (g.ensemble_sub.nrows() as f64, g.group.n_m() as f64);
        let pairs = upper_index(d_m);
        for (r, i) in rows.clone().enumerate() {
            a.clear();
            a.resize(k * k, 0.0);
            for (p, &(j, l)) in pairs.iter().enumerate() {
                let val = a_sums[[i, p]] / n_tilde;
                a[j * k + l] = val;
                a[l * k + j] = val;
            }
            sol.clear();
            sol.extend(c_sums.row(i).iter().map(|c| c / n_m));
            if a.iter().chain(&sol).any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("local-linear system accumulation overflowed".into()));
            }
            underflow += usize::from(a[k * k - 1] == 0.0);
            solve_in_place(&mut a, &mut sol, k, epsilon)?;
            for (s, &j) in obs.iter().enumerate() {
                v[[r, j]] += g.weight * sol[s];
            }
        }
    }
    Ok((v, underflow))
}

/// Pattern-averaged velocity of every ensemble row against the ensemble
/// itself, plus the number of (particle, pattern) systems whose ensemble
/// weights all underflowed.
///
/// Work is split into fixed blocks and run in parallel; the result does not
/// depend on the number of worker threads.
pub fn ensemble_velocities(
    groups: &[PatternGroup],
    ensemble: ArrayView2<'_, f64>,
    sigma: Bandwidth,
    epsilon: f64,
) -> Result<(Array2<f64>, usize)> {
    let (n_tilde, d) = ensemble.dim();
    if n_tilde == 0 {
        return Err(Error::InvalidArgument("empty ensemble".into()));
    }
    if ensemble.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ensemble".into()));
    }
    if let Some(g) = groups.iter().find(|g| g.pattern.d() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: g.pattern.d(),
        });
    }
    let n: usize = groups.iter().map(PatternGroup::n_m).sum();
    if n == 0 {
        return Err(Error::InvalidArgument("no observed rows".into()));
    }
    let prepared: Vec<BlockGroup<'_>> = groups
        .iter()
        .map(|g| BlockGroup::new(g, ensemble, g.n_m() as f64 / n as f64))
        .collect();
    let scale = sigma.exponent_scale();
    let starts: Vec<usize> = (0..n_tilde).step_by(BLOCK_ROWS).collect();
    let range = |s: usize| s..(s + BLOCK_ROWS).min(n_tilde);

    let sums: Vec<(Array2<f64>, Array2<f64>)> = prepared
        .iter()
        .map(|g| {
            let a_sums = ensemble_feature_sums(g, &starts, scale);
            let blocks: Vec<Array2<f64>> = starts
                .par_iter()
                .map(|&s| {
                    kernel_block(g.ensemble_sub.slice(s![range(s), ..]), g.target_t.view(), scale)
                        .dot(&g.target_aug)
                })
                .collect();
            let c_views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
            let c_sums = ndarray::concatenate(Axis(0), &c_views).expect("blocks share columns");
            (a_sums, c_sums)
        })
        .collect();

    let blocks: Vec<Result<(Array2<f64>, usize)>> = starts
        .par_iter()
        .map(|&s| block_velocity(&prepared, &sums, range(s), d, epsilon))
        .collect();
    let mut v = Array2::zeros((n_tilde, d));
    let mut underflow = 0;
    for (&s, block) in starts.iter().zip(blocks) {
        let (bv, u) = block?;
        v.slice_mut(s![range(s), ..]).assign(&bv);
        underflow += u;
    }
    Ok((v, underflow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{default_column_names, partition_by_pattern, MaskedDataset};
    use crate::kernel::rbf_kernel;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn bw(s: f64) -> Bandwidth {
        Bandwidth::new(s).unwrap()
    }

    fn full_group(rows: Array2<f64>) -> PatternGroup {
        let d = rows.ncols();
        PatternGroup {
            pattern: Pattern::all_observed(d),
            row_indices: (0..rows.nrows()).collect(),
            rows,
        }
    }

    fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn single_point_at_query() {
        let g = full_group(array![[2.0]]);
        let sys = assemble_system(&g, array![[0.0]].view(), &[0.0], bw(1.0)).unwrap();
        let k = rbf_kernel(&[2.0], &[0.0], bw(1.0)).unwrap();
        assert_eq!(sys.a, vec![0.0, 0.0, 0.0, 1.0]);
        assert!((sys.c[0] - 2.0 * k).abs() < 1e-16);
        assert!((sys.c[1] - k).abs() < 1e-16);
        assert_eq!(sys.ensemble_mass(), 1.0);
    }

    #[test]
    fn assemble_matches_naive_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..100 {
            let d_m = rng.random_range(1..5);
            let n_m = rng.random_range(1..30);
            let nt = rng.random_range(1..30);
            let g = full_group(normal_matrix(&mut rng, n_m, d_m));
            let e = normal_matrix(&mut rng, nt, d_m);
            let q: Vec<f64> = (0..d_m).map(|_| rng.sample(StandardNormal)).collect();
            let s = bw(rng.random_range(0.3..2.0));
            let sys = assemble_system(&g, e.view(), &q, s).unwrap();
            for j in 0..=d_m {
                for l in 0..=d_m {
                    let mut acc = 0.0;
                    for i in 0..nt {
                        let row = e.row(i).to_vec();
                        let kw = rbf_kernel(&row, &q, s).unwrap();
                        let fj = if j < d_m { row[j] } else { 1.0 };
                        let fl = if l < d_m { row[l] } else { 1.0 };
                        acc += kw * fj * fl;
                    }
                    acc /= nt as f64;
                    assert!((sys.at(j, l) - acc).abs() <= 1e-12 * acc.abs().max(1.0));
                }
                let mut acc = 0.0;
                for i in 0..n_m {
                    let row = g.rows.row(i).to_vec();
                    let kw = rbf_kernel(&row, &q, s).unwrap();
                    acc += kw * if j < d_m { row[j] } else { 1.0 };
                }
                acc /= n_m as f64;
                assert!((sys.c[j] - acc).abs() <= 1e-12 * acc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn a11_is_psd_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let d_m = rng.random_range(1..5);
            let g = full_group(normal_matrix(&mut rng, 5, d_m));
            let rows = rng.random_range(1..12);
            let e = normal_matrix(&mut rng, rows, d_m);
            let q: Vec<f64> = (0..d_m).map(|_| rng.sample(StandardNormal)).collect();
            let sys = assemble_system(&g, e.view(), &q, bw(1.0)).unwrap();
            for j in 0..=d_m {
                for l in 0..=d_m {
                    assert!((sys.at(j, l) - sys.at(l, j)).abs() <= 1e-12);
                }
            }
            let a11 = nalgebra::DMatrix::from_fn(d_m, d_m, |j, l| sys.at(j, l));
            let min = a11.symmetric_eigenvalues().min();
            assert!(min >= -1e-10, "min eigenvalue {min}");
        }
    }

    #[test]
    fn identity_system() {
        let mut sys = LocalLinearSystem::zeros(2);
        for i in 0..3 {
            sys.a[i * 3 + i] = 1.0;
        }
        sys.c = vec![1.0; 3];
        let (w, b) = solve_system(&sys, 0.0).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
        assert_eq!(b, 1.0);
    }

    #[test]
    fn solve_matches_reference_lu() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let k = rng.random_range(1..7);
            let m = nalgebra::DMatrix::<f64>::from_fn(k, k, |_, _| rng.sample(StandardNormal));
            let spd = &m * m.transpose() + nalgebra::DMatrix::identity(k, k) * 0.1;
            let c = nalgebra::DVector::<f64>::from_fn(k, |_, _| rng.sample(StandardNormal));
            let reference = spd.clone().lu().solve(&c).unwrap();
            let sys = LocalLinearSystem {
                a: (0..k * k).map(|i| spd[(i / k, i % k)]).collect(),
                c: c.iter().copied().collect(),
                d_m: k - 1,
            };
            let (w, b) = solve_system(&sys, 0.0).unwrap();
            let mut sol = w.clone();
            sol.push(b);
            for i in 0..k {
                assert!((sol[i] - reference[i]).abs() <= 1e-9 * reference.amax().max(1.0));
            }
            // residual bound
            let mut res = 0.0;
            for i in 0..k {
                let r: f64 = (0..k).map(|j| sys.at(i, j) * sol[j]).sum::<f64>() - sys.c[i];
                res += r * r;
            }
            assert!(res.sqrt() <= 1e-8 * c.norm().max(1.0));
        }
    }

    #[test]
    fn singular_and_invalid_inputs() {
        let sys = LocalLinearSystem {
            a: vec![0.0, 0.0, 0.0, 1.0],
            c: vec![1.0, 1.0],
            d_m: 1,
        };
        assert!(matches!(solve_system(&sys, 0.0), Err(Error::Singular { col: 0, .. })));
        assert!(solve_system(&sys, 1e-5).is_ok());
        assert!(solve_system(&sys, -1.0).is_err());
    }

    #[test]
    fn isolated_query_drifts_negligibly() {
        let g = full_group(array![[100.0], [100.5]]);
        let e = array![[0.0], [0.2]];
        let res = aggregate_velocity(&[g], e.view(), &[50.0], bw(0.5), DEFAULT_TIKHONOV_EPS, false).unwrap();
        assert_eq!(res.underflow_count, 1);
        assert!(res.v[0].abs() < 1e-100);
    }

    #[test]
    fn shared_sample_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let d = rng.random_range(1..5);
            let n = rng.random_range(3..60);
            let s = normal_matrix(&mut rng, n, d);
            let g = full_group(s.clone());
            let q: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
            let sigma = bw(rng.random_range(0.8..3.0));
            let sys = assemble_system(&g, s.view(), &q, sigma).unwrap();
            // (0, 1) solves the assembled system
            for i in 0..=d {
                let r = sys.at(i, d) - sys.c[i];
                assert!(r.abs() < 1e-10);
            }
            let (w, b) = solve_system(&sys, 0.0).unwrap();
            assert!(w.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-8, "{w:?}");
            assert!((b - 1.0).abs() <= 1e-8);
            let (wp, _) = pattern_velocity(&g, s.view(), &q, sigma, 0.0).unwrap();
            assert!(wp.iter().all(|v| v.abs() <= 1e-8));
        }
    }

    #[test]
    fn affine_equivariance_of_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..50 {
            let d = rng.random_range(1..4);
            let t = normal_matrix(&mut rng, 40, d);
            let e = normal_matrix(&mut rng, 40, d).mapv(|v| v + 0.3);
            let g = full_group(t.clone());
            let q: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.5).collect();
            let (w, _) = pattern_velocity(&g, e.view(), &q, bw(1.0), 0.0).unwrap();
            let s = 3.0;
            let gs = full_group(t.mapv(|v| v * s));
            let qs: Vec<f64> = q.iter().map(|v| v * s).collect();
            let (ws, _) = pattern_velocity(&gs, e.mapv(|v| v * s).view(), &qs, bw(s), 0.0).unwrap();
            for (a, b) in w.iter().zip(&ws) {
                assert!((b - a / s).abs() <= 1e-8 * (a / s).abs().max(1e-12));
            }
        }
    }

    #[test]
    fn distant_target_points_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let t = normal_matrix(&mut rng, 30, 2);
        let e = normal_matrix(&mut rng, 30, 2);
        let q = [0.1, -0.2];
        let sigma = bw(0.5);
        let (w, _) = pattern_velocity(&full_group(t.clone()), e.view(), &q, sigma, DEFAULT_TIKHONOV_EPS).unwrap();
        // appending a point 40σ away only changes the 1/n_m normalization
        let mut far = t.clone().into_raw_vec_and_offset().0;
        far.extend_from_slice(&[q[0] + 40.0 * 0.5, q[1]]);
        let t2 = Array2::from_shape_vec((31, 2), far).unwrap();
        let g2 = full_group(t2);
        let sys1 = assemble_system(&full_group(t), e.view(), &q, sigma).unwrap();
        let sys2 = assemble_system(&g2, e.view(), &q, sigma).unwrap();
        for j in 0..3 {
            assert!((sys2.c[j] * 31.0 / 30.0 - sys1.c[j]).abs() < 1e-12);
        }
        let (w2, _) = solve_system(&sys2, DEFAULT_TIKHONOV_EPS).unwrap();
        let (w1, _) = solve_system(&sys1, DEFAULT_TIKHONOV_EPS).unwrap();
        assert_eq!(w1, w.clone());
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a * 30.0 / 31.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_padding_on_missing_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let values = normal_matrix(&mut rng, 10, 2);
        let mut mask = Array2::from_elem((10, 2), false);
        for i in 0..5 {
            mask[[i, 0]] = true;
        }
        let ds = MaskedDataset::new(values, mask, default_column_names(2)).unwrap();
        let groups = partition_by_pattern(&ds);
        let g10 = groups.iter().find(|g| g.pattern.bits() == [true, false]).unwrap();
        let e = normal_matrix(&mut rng, 20, 2);
        for _ in 0..10 {
            let q = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let (w, _) = pattern_velocity(g10, e.view(), &q, bw(1.0), 1e-5).unwrap();
            assert_eq!(w[0], 0.0);
        }
    }

    #[test]
    fn aggregate_weights_and_cancellation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t = normal_matrix(&mut rng, 25, 2);
        let e = normal_matrix(&mut rng, 25, 2).mapv(|v| v * 1.3);
        let q = [0.2, 0.4];
        let g = full_group(t.clone());
        let (w, _) = pattern_velocity(&g, e.view(), &q, bw(1.0), 1e-5).unwrap();
        let res = aggregate_velocity(std::slice::from_ref(&g), e.view(), &q, bw(1.0), 1e-5, true).unwrap();
        assert_eq!(res.v, w);
        assert_eq!(res.per_pattern.unwrap()[0].w, w);

        // mirrored target and ensemble about the query give opposite slopes
        let mirror = |m: &Array2<f64>| Array2::from_shape_fn(m.dim(), |(i, j)| 2.0 * q[j] - m[[i, j]]);
        let g1 = full_group(t.clone());
        let g2 = full_group(mirror(&t));
        let e_sym = Array2::from_shape_vec((50, 2), {
            let mut v = e.clone().into_raw_vec_and_offset().0;
            v.extend(mirror(&e).iter());
            v
        })
        .unwrap();
        let (w1, _) = pattern_velocity(&g1, e_sym.view(), &q, bw(1.0), 0.0).unwrap();
        let (w2, _) = pattern_velocity(&g2, e_sym.view(), &q, bw(1.0), 0.0).unwrap();
        let scale = w1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a + b).abs() <= 1e-10 * scale, "{a} {b}");
        }
        let res = aggregate_velocity(&[g1, g2], e_sym.view(), &q, bw(1.0), 0.0, false).unwrap();
        assert!(res.v.iter().all(|v| v.abs() <= 1e-10 * scale));
    }

    #[test]
    fn block_velocities_match_per_query_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &(n, d) in &[(7usize, 1usize), (150, 2), (300, 3)] {
            let values = normal_matrix(&mut rng, n, d);
            let mask = Array2::from_shape_fn((n, d), |(i, j)| d > 1 && (i + j) % 3 == 0);
            let ds = MaskedDataset::new(values, mask, default_column_names(d)).unwrap();
            let groups = partition_by_pattern(&ds);
            let ens = normal_matrix(&mut rng, n + 5, d);
            let (v, _) = ensemble_velocities(&groups, ens.view(), bw(0.9), 1e-5).unwrap();
            for i in 0..ens.nrows() {
                let q = ens.row(i).to_vec();
                let r = aggregate_velocity(&groups, ens.view(), &q, bw(0.9), 1e-5, false).unwrap();
                for j in 0..d {
                    let tol = 1e-10 * (1.0 + r.v[j].abs());
                    assert!((v[[i, j]] - r.v[j]).abs() <= tol, "{} vs {}", v[[i, j]], r.v[j]);
                }
            }
        }
    }
}
