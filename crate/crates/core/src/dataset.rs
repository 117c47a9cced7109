//! Masked tabular data, missingness patterns and column standardization.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub const DEFAULT_MISSING_TOKEN: &str = "NA";

/// An n×d matrix with a mask of missing entries (`true` = missing).
///
/// Masked cells hold NaN internally but are never handed out through the
/// public accessors; the mask is authoritative.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDataset {
    values: Array2<f64>,
    mask: Array2<bool>,
    column_names: Vec<String>,
}

impl MaskedDataset {
    pub fn new(
        mut values: Array2<f64>,
        mask: Array2<bool>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let (n, d) = values.dim();
        if n == 0 || d == 0 {
            return Err(Error::Empty(format!("dataset has shape {n}x{d}")));
        }
        if mask.dim() != (n, d) {
            return Err(Error::DimensionMismatch {
                expected: n * d,
                found: mask.len(),
            });
        }
        if column_names.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: column_names.len(),
            });
        }
        for ((i, j), v) in values.indexed_iter_mut() {
            if mask[[i, j]] {
                *v = f64::NAN;
            } else if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "observed entry ({i}, {j}) is {v}"
                )));
            }
        }
        for (j, col) in mask.axis_iter(Axis(1)).enumerate() {
            if col.iter().all(|&m| m) {
                return Err(Error::FullyMissingColumn {
                    col: j,
                    name: column_names[j].clone(),
                });
            }
        }
        Ok(Self {
            values,
            mask,
            column_names,
        })
    }

    /// Wraps a complete matrix (no missing entries).
    pub fn from_complete(values: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), false);
        Self::new(values, mask, column_names)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn mask(&self) -> ArrayView2<'_, bool> {
        self.mask.view()
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]]
    }

    /// Reads an observed entry. Masked entries are an error.
    pub fn get(&self, row: usize, col: usize) -> Result<f64> {
        if self.mask[[row, col]] {
            Err(Error::MaskedRead { row, col })
        } else {
            Ok(self.values[[row, col]])
        }
    }

    pub fn observed_column(&self, col: usize) -> Vec<f64> {
        self.values
            .column(col)
            .iter()
            .zip(self.mask.column(col))
            .filter(|(_, &m)| !m)
            .map(|(&v, _)| v)
            .collect()
    }

    pub fn missing_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.mask.len() as f64
    }

    pub fn is_complete(&self) -> bool {
        self.mask.iter().all(|&m| !m)
    }

    /// The value matrix of a complete dataset.
    pub fn complete_values(&self) -> Result<&Array2<f64>> {
        if let Some((idx, _)) = self.mask.indexed_iter().find(|(_, &m)| m) {
            return Err(Error::MaskedRead {
                row: idx.0,
                col: idx.1,
            });
        }
        Ok(&self.values)
    }

    /// Values with NaN under the mask; crate-internal, callers must consult the mask.
    pub(crate) fn raw_values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn row_pattern(&self, row: usize) -> Pattern {
        Pattern::from_bits(self.mask.row(row).to_vec())
    }

    pub fn select_columns(&self, cols: &[usize]) -> Result<Self> {
        let values = self.values.select(Axis(1), cols);
        let mask = self.mask.select(Axis(1), cols);
        let names = cols.iter().map(|&j| self.column_names[j].clone()).collect();
        Self::new(values, mask, names)
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.values.select(Axis(0), rows),
            self.mask.select(Axis(0), rows),
            self.column_names.clone(),
        )
    }
}

/// Default column names `X1..Xd`.
pub fn default_column_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("X{j}")).collect()
}

/// A missingness pattern: `bits[j]` is true when column j is missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern {
    bits: Vec<bool>,
    observed_idx: Vec<usize>,
}

impl Pattern {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        let observed_idx = bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| !b)
            .map(|(j, _)| j)
            .collect();
        Self { bits, observed_idx }
    }

    pub fn all_observed(d: usize) -> Self {
        Self::from_bits(vec![false; d])
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn observed_idx(&self) -> &[usize] {
        &self.observed_idx
    }

    pub fn d(&self) -> usize {
        self.bits.len()
    }

    /// Number of observed columns.
    pub fn d_m(&self) -> usize {
        self.observed_idx.len()
    }

    pub fn is_all_observed(&self) -> bool {
        self.observed_idx.len() == self.bits.len()
    }

    pub fn is_missing(&self, col: usize) -> bool {
        self.bits[col]
    }

    /// Restricts a full d-vector to the observed coordinates.
    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        self.observed_idx.iter().map(|&j| x[j]).collect()
    }
}

impl std::fmt::Display for Pattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.bits {
            f.write_str(if b { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// The rows sharing one missingness pattern, restricted to their observed columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternGroup {
    pub pattern: Pattern,
    /// n_m × d_m observed sub-vectors.
    pub rows: Array2<f64>,
    /// Source row indices in the dataset, increasing.
    pub row_indices: Vec<usize>,
}

impl PatternGroup {
    pub fn n_m(&self) -> usize {
        self.rows.nrows()
    }
}

/// Groups rows by missingness pattern, ordered lexicographically on the
/// pattern bits. Rows with every column missing carry no information and are
/// dropped with a warning.
pub fn partition_by_pattern(ds: &MaskedDataset) -> Vec<PatternGroup> {
    let mut by_pattern: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
    for (i, row) in ds.mask.axis_iter(Axis(0)).enumerate() {
        by_pattern.entry(row.to_vec()).or_default().push(i);
    }
    let mut groups = Vec::with_capacity(by_pattern.len());
    for (bits, row_indices) in by_pattern {
        let pattern = Pattern::from_bits(bits);
        if pattern.d_m() == 0 {
            log::warn!(
                "dropping {} row(s) with every column missing",
                row_indices.len()
            );
            continue;
        }
        let rows = ds
            .values
            .select(Axis(0), &row_indices)
            .select(Axis(1), pattern.observed_idx());
        groups.push(PatternGroup {
            pattern,
            rows,
            row_indices,
        });
    }
    groups
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Per-column affine map `x ↦ (x − mu) / lambda_sqrt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mu: Vec<f64>,
    pub lambda_sqrt: Vec<f64>,
}

impl Standardizer {
    /// Column means and sample standard deviations (n_obs − 1) over observed entries.
    pub fn fit(ds: &MaskedDataset) -> Result<Self> {
        let d = ds.ncols();
        let mut mu = Vec::with_capacity(d);
        let mut lambda_sqrt = Vec::with_capacity(d);
        for j in 0..d {
            let (m, s) = column_stats(&ds.observed_column(j), j)?;
            mu.push(m);
            lambda_sqrt.push(s);
        }
        Ok(Self { mu, lambda_sqrt })
    }

    /// Fits on a complete matrix.
    pub fn fit_complete(x: ArrayView2<'_, f64>) -> Result<Self> {
        let d = x.ncols();
        let mut mu = Vec::with_capacity(d);
        let mut lambda_sqrt = Vec::with_capacity(d);
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let col: Vec<f64> = col.to_vec();
            let (m, s) = column_stats(&col, j)?;
            mu.push(m);
            lambda_sqrt.push(s);
        }
        Ok(Self { mu, lambda_sqrt })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: d,
            });
        }
        Ok(())
    }

    #[inline]
    fn map(&self, j: usize, v: f64, direction: Direction) -> f64 {
        match direction {
            Direction::Forward => (v - self.mu[j]) / self.lambda_sqrt[j],
            Direction::Inverse => v * self.lambda_sqrt[j] + self.mu[j],
        }
    }

    /// Transforms the observed entries; the mask is unchanged.
    pub fn apply_dataset(&self, ds: &MaskedDataset, direction: Direction) -> Result<MaskedDataset> {
        self.check_dim(ds.ncols())?;
        let mut values = ds.values.clone();
        for ((i, j), v) in values.indexed_iter_mut() {
            if !ds.mask[[i, j]] {
                *v = self.map(j, *v, direction);
            }
        }
        Ok(MaskedDataset {
            values,
            mask: ds.mask.clone(),
            column_names: ds.column_names.clone(),
        })
    }

    /// Transforms every entry of a complete matrix (e.g. a particle ensemble).
    pub fn apply_matrix(&self, x: ArrayView2<'_, f64>, direction: Direction) -> Result<Array2<f64>> {
        self.check_dim(x.ncols())?;
        let mut out = x.to_owned();
        for ((_, j), v) in out.indexed_iter_mut() {
            *v = self.map(j, *v, direction);
        }
        Ok(out)
    }
}

fn column_stats(obs: &[f64], col: usize) -> Result<(f64, f64)> {
    if obs.len() < 2 {
        return Err(Error::TooFewObserved { col });
    }
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::ZeroVariance { col });
    }
    Ok((mean, sd))
}

/// Drops columns whose share of distinct observed values is below `min_frac`.
/// Returns the reduced dataset and the names of the dropped columns.
pub fn filter_low_unique_columns(
    ds: &MaskedDataset,
    min_frac: f64,
) -> Result<(MaskedDataset, Vec<String>)> {
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for j in 0..ds.ncols() {
        let obs = ds.observed_column(j);
        let distinct: HashSet<u64> = obs.iter().map(|v| v.to_bits()).collect();
        if distinct.len() as f64 / obs.len() as f64 >= min_frac {
            keep.push(j);
        } else {
            dropped.push(ds.column_names[j].clone());
        }
    }
    if keep.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "every column has fewer than {min_frac} unique values"
        )));
    }
    Ok((ds.select_columns(&keep)?, dropped))
}

pub fn load_csv(path: impl AsRef<Path>, missing_token: &str) -> Result<MaskedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, missing_token)
}

/// Parses CSV with a mandatory header. A cell is missing when it equals
/// `missing_token` or is empty.
pub fn read_csv<R: Read>(reader: R, missing_token: &str) -> Result<MaskedDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let d = names.len();
    if d == 0 || (d == 1 && names[0].is_empty()) {
        return Err(Error::Empty("missing header row".into()));
    }
    let mut data = Vec::new();
    let mut mask = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != d {
            return Err(Error::RaggedRow {
                row: i + 1,
                found: record.len(),
                expected: d,
            });
        }
        for (j, cell) in record.iter().enumerate() {
            if cell.is_empty() || cell == missing_token {
                data.push(f64::NAN);
                mask.push(true);
            } else {
                let v: f64 = cell.parse().map_err(|_| Error::Unparseable {
                    row: i + 1,
                    col: j,
                    value: cell.to_owned(),
                })?;
                if !v.is_finite() {
                    return Err(Error::Unparseable {
                        row: i + 1,
                        col: j,
                        value: cell.to_owned(),
                    });
                }
                data.push(v);
                mask.push(false);
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("no data rows".into()));
    }
    let values = Array2::from_shape_vec((n, d), data).expect("shape checked per row");
    let mask = Array2::from_shape_vec((n, d), mask).expect("shape checked per row");
    MaskedDataset::new(values, mask, names)
}

/// Formats a float with 17 significant digits.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(path: impl AsRef<Path>, ds: &MaskedDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, ds)
}

pub fn write_csv_to<W: Write>(writer: W, ds: &MaskedDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(&ds.column_names)?;
    for i in 0..ds.nrows() {
        w.write_record((0..ds.ncols()).map(|j| {
            if ds.mask[[i, j]] {
                DEFAULT_MISSING_TOKEN.to_owned()
            } else {
                format_float(ds.values[[i, j]])
            }
        }))?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Writes a complete matrix with the given header.
pub fn write_matrix_csv(
    path: impl AsRef<Path>,
    column_names: &[String],
    x: ArrayView2<'_, f64>,
) -> Result<()> {
    let path = path.as_ref();
    if column_names.len() != x.ncols() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            found: column_names.len(),
        });
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(column_names)?;
    for row in x.axis_iter(Axis(0)) {
        w.write_record(row.iter().map(|&v| format_float(v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_masked(rng: &mut ChaCha8Rng, n: usize, d: usize, p_miss: f64) -> MaskedDataset {
        loop {
            let values = Array2::from_shape_fn((n, d), |_| rng.random_range(-5.0..5.0) * 10f64.powi(rng.random_range(-3..4)));
            let mask = Array2::from_shape_fn((n, d), |_| rng.random_bool(p_miss));
            let ok = mask.axis_iter(Axis(1)).all(|c| c.iter().filter(|&&m| !m).count() >= 2);
            if ok {
                return MaskedDataset::new(values, mask, default_column_names(d)).unwrap();
            }
        }
    }

    #[test]
    fn load_counts_missing_cell() {
        let src = "a,b\n1,2\nNA,4\n5,6\n";
        let ds = read_csv(src.as_bytes(), "NA").unwrap();
        assert_eq!((ds.nrows(), ds.ncols()), (3, 2));
        assert_eq!(ds.missing_count(), 1);
        assert!(ds.is_missing(1, 0));
        assert!(matches!(ds.get(1, 0), Err(Error::MaskedRead { row: 1, col: 0 })));
        assert_eq!(ds.get(2, 1).unwrap(), 6.0);
    }

    #[test]
    fn empty_cells_are_missing_and_scientific_parses() {
        let ds = read_csv("a,b\n1e-3,\n2,3.5E2\n".as_bytes(), "NA").unwrap();
        assert!(ds.is_missing(0, 1));
        assert_eq!(ds.get(0, 0).unwrap(), 1e-3);
        assert_eq!(ds.get(1, 1).unwrap(), 350.0);
    }

    #[test]
    fn load_errors() {
        let err = read_csv("a,b\n1,NA\n2,NA\n".as_bytes(), "NA").unwrap_err();
        assert!(matches!(err, Error::FullyMissingColumn { col: 1, .. }));
        let err = read_csv("a,b\n1,2\n3\n".as_bytes(), "NA").unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 2, found: 1, expected: 2 }));
        let err = read_csv("a,b\n1,x\n".as_bytes(), "NA").unwrap_err();
        assert!(matches!(err, Error::Unparseable { .. }));
        assert!(read_csv("a,b\n".as_bytes(), "NA").is_err());
    }

    #[test]
    fn custom_missing_token() {
        let ds = read_csv("a\n1\n?\n3\n".as_bytes(), "?").unwrap();
        assert_eq!(ds.missing_count(), 1);
    }

    #[test]
    fn csv_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = rng.random_range(2..30);
            let d = rng.random_range(1..6);
            let ds = random_masked(&mut rng, n, d, 0.3);
            let mut buf = Vec::new();
            write_csv_to(&mut buf, &ds).unwrap();
            let back = read_csv(buf.as_slice(), "NA").unwrap();
            assert_eq!(back.mask, ds.mask);
            assert_eq!(back.column_names, ds.column_names);
            for ((i, j), &m) in ds.mask.indexed_iter() {
                if !m {
                    assert_eq!(back.values[[i, j]].to_bits(), ds.values[[i, j]].to_bits());
                }
            }
        }
    }

    #[test]
    fn single_group_when_complete() {
        let ds = MaskedDataset::from_complete(array![[1.0, 2.0], [3.0, 4.0], [5.0, 7.0]], default_column_names(2)).unwrap();
        let groups = partition_by_pattern(&ds);
        assert_eq!(groups.len(), 1);
        assert!(groups[0].pattern.is_all_observed());
        assert_eq!(groups[0].n_m(), 3);
    }

    #[test]
    fn three_pattern_design() {
        let values = Array2::from_shape_fn((6, 3), |(i, j)| (i * 3 + j) as f64);
        let mask = array![
            [false, false, false],
            [false, true, false],
            [true, false, false],
            [false, false, false],
            [true, false, false],
            [false, true, false]
        ];
        let ds = MaskedDataset::new(values, mask, default_column_names(3)).unwrap();
        let groups = partition_by_pattern(&ds);
        let dims: Vec<usize> = groups.iter().map(|g| g.pattern.d_m()).collect();
        let bits: Vec<String> = groups.iter().map(|g| g.pattern.to_string()).collect();
        assert_eq!(bits, ["000", "010", "100"]);
        assert_eq!(dims, [3, 2, 2]);
        assert_eq!(groups[1].row_indices, [1, 5]);
        assert_eq!(groups[1].rows, array![[3.0, 5.0], [15.0, 17.0]]);
    }

    #[test]
    fn partition_is_disjoint_cover_matching_rescan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..40);
            let d = rng.random_range(1..5);
            let ds = random_masked(&mut rng, n.max(4), d, 0.35);
            let groups = partition_by_pattern(&ds);
            let mut seen = vec![0usize; ds.nrows()];
            for g in &groups {
                for (r, &i) in g.row_indices.iter().enumerate() {
                    seen[i] += 1;
                    // brute force: this row's mask equals the pattern and the sub-vector matches
                    for j in 0..d {
                        assert_eq!(ds.mask[[i, j]], g.pattern.bits()[j]);
                    }
                    for (k, &j) in g.pattern.observed_idx().iter().enumerate() {
                        assert_eq!(g.rows[[r, k]], ds.get(i, j).unwrap());
                    }
                }
            }
            for i in 0..ds.nrows() {
                let all_missing = ds.mask.row(i).iter().all(|&m| m);
                assert_eq!(seen[i], if all_missing { 0 } else { 1 });
            }
            for w in groups.windows(2) {
                assert!(w[0].pattern.bits() < w[1].pattern.bits());
            }
        }
    }

    #[test]
    fn all_missing_rows_are_dropped() {
        let ds = read_csv("a,b\n1,2\nNA,NA\n3,NA\n".as_bytes(), "NA").unwrap();
        let groups = partition_by_pattern(&ds);
        let total: usize = groups.iter().map(|g| g.n_m()).sum();
        assert_eq!(total, 2);
    }

    #[test]
    fn partition_is_row_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ds = random_masked(&mut rng, 40, 3, 0.3);
        let mut perm: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled = ds.select_rows(&perm).unwrap();
        let collect = |groups: Vec<PatternGroup>| {
            let mut pairs: Vec<(String, Vec<u64>)> = groups
                .iter()
                .flat_map(|g| {
                    g.rows
                        .axis_iter(Axis(0))
                        .map(|r| (g.pattern.to_string(), r.iter().map(|v| v.to_bits()).collect()))
                        .collect::<Vec<_>>()
                })
                .collect();
            pairs.sort();
            pairs
        };
        assert_eq!(collect(partition_by_pattern(&ds)), collect(partition_by_pattern(&shuffled)));
    }

    #[test]
    fn standardizer_two_point_stats() {
        let ds = read_csv("a,b\n0,1\n2,NA\n0,3\n2,NA\n".as_bytes(), "NA").unwrap();
        let s = Standardizer::fit(&ds).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert!((s.lambda_sqrt[0] - (4.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(s.mu[1], 2.0);
        assert!((s.lambda_sqrt[1] - 2f64.sqrt()).abs() < 1e-15);

        let two = read_csv("a\n0\n2\n".as_bytes(), "NA").unwrap();
        let s = Standardizer::fit(&two).unwrap();
        assert_eq!(s.mu[0], 1.0);
        assert!((s.lambda_sqrt[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn standardizer_errors() {
        let constant = read_csv("a\n1\n1\n1\n".as_bytes(), "NA").unwrap();
        assert!(matches!(Standardizer::fit(&constant), Err(Error::ZeroVariance { col: 0 })));
        let sparse = read_csv("a,b\n1,2\nNA,3\n".as_bytes(), "NA").unwrap();
        assert!(matches!(Standardizer::fit(&sparse), Err(Error::TooFewObserved { col: 0 })));
        let s = Standardizer::fit(&read_csv("a\n1\n2\n".as_bytes(), "NA").unwrap()).unwrap();
        let wide = Array2::zeros((2, 2));
        assert!(matches!(
            s.apply_matrix(wide.view(), Direction::Forward),
            Err(Error::DimensionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn standardizer_matches_naive_and_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let n = rng.random_range(4..12);
            let d = rng.random_range(1..4);
            let ds = random_masked(&mut rng, n, d, 0.25);
            let s = Standardizer::fit(&ds).unwrap();
            for j in 0..d {
                let mut sum = 0.0;
                let mut cnt = 0.0;
                for i in 0..n {
                    if let Ok(v) = ds.get(i, j) {
                        sum += v;
                        cnt += 1.0;
                    }
                }
                let mean = sum / cnt;
                let mut ss = 0.0;
                for i in 0..n {
                    if let Ok(v) = ds.get(i, j) {
                        ss += (v - mean).powi(2);
                    }
                }
                let sd = (ss / (cnt - 1.0)).sqrt();
                assert!((s.mu[j] - mean).abs() <= 1e-12 * mean.abs().max(1.0));
                assert!((s.lambda_sqrt[j] - sd).abs() <= 1e-12 * sd);
            }
            let fwd = s.apply_dataset(&ds, Direction::Forward).unwrap();
            let back = s.apply_dataset(&fwd, Direction::Inverse).unwrap();
            assert_eq!(back.mask, ds.mask);
            for ((i, j), &m) in ds.mask.indexed_iter() {
                if !m {
                    let (a, b) = (ds.values[[i, j]], back.values[[i, j]]);
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(s.lambda_sqrt[j]), "{a} vs {b}");
                }
            }
            // standardized observed columns have mean 0 and sd 1
            let refit = Standardizer::fit(&fwd).unwrap();
            for j in 0..d {
                assert!(refit.mu[j].abs() < 1e-10);
                assert!((refit.lambda_sqrt[j] - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn shift_moves_mean_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_masked(&mut rng, 20, 3, 0.2);
        let shifted = MaskedDataset::new(ds.values.mapv(|v| v + 7.5), ds.mask.clone(), ds.column_names.clone()).unwrap();
        let (a, b) = (Standardizer::fit(&ds).unwrap(), Standardizer::fit(&shifted).unwrap());
        for j in 0..3 {
            assert!((b.mu[j] - a.mu[j] - 7.5).abs() < 1e-9);
            assert!((b.lambda_sqrt[j] - a.lambda_sqrt[j]).abs() < 1e-9 * a.lambda_sqrt[j].max(1.0));
        }
    }

    #[test]
    fn unique_filter_drops_discrete_columns() {
        let mut src = String::from("a,b\n");
        for i in 0..40 {
            src.push_str(&format!("{},{}\n", i, i % 2));
        }
        let ds = read_csv(src.as_bytes(), "NA").unwrap();
        let (kept, dropped) = filter_low_unique_columns(&ds, 0.1).unwrap();
        assert_eq!(kept.column_names(), ["a"]);
        assert_eq!(dropped, ["b"]);
    }
}
