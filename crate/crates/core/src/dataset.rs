//! Tabular numeric data: CSV ingestion, standardization and k-fold splits.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major matrix of finite reals with named columns and opaque row ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    values: Vec<f64>,
    n_points: usize,
    n_features: usize,
    feature_names: Vec<String>,
    row_ids: Vec<String>,
}

impl Dataset {
    /// Builds a dataset from a row-major buffer. Row ids default to `0..n`
    /// and feature names to `f0, f1, ...` when `None`.
    pub fn new(
        values: Vec<f64>,
        n_features: usize,
        feature_names: Option<Vec<String>>,
        row_ids: Option<Vec<String>>,
    ) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::InvalidDataset("at least one feature is required".into()));
        }
        if values.is_empty() {
            return Err(Error::NoRows);
        }
        if !values.len().is_multiple_of(n_features) {
            return Err(Error::DimensionMismatch(format!(
                "{} values do not fill rows of {} features",
                values.len(),
                n_features
            )));
        }
        let n_points = values.len() / n_features;
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / n_features + 1,
                col: pos % n_features + 1,
            });
        }
        let feature_names = feature_names.unwrap_or_else(|| default_names(n_features));
        if feature_names.len() != n_features {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for {} features",
                feature_names.len(),
                n_features
            )));
        }
        let row_ids = row_ids.unwrap_or_else(|| (0..n_points).map(|i| i.to_string()).collect());
        if row_ids.len() != n_points {
            return Err(Error::DimensionMismatch(format!(
                "{} row ids for {} rows",
                row_ids.len(),
                n_points
            )));
        }
        Ok(Self {
            values,
            n_points,
            n_features,
            feature_names,
            row_ids,
        })
    }

    /// Builds a dataset from a list of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or(Error::NoRows)?;
        let n_features = first.len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n_features {
                return Err(Error::RaggedRow {
                    row: i + 1,
                    expected: n_features,
                    found: r.len(),
                });
            }
        }
        Self::new(rows.concat(), n_features, None, None)
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_features)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Rows at `indices`, in that order, keeping names and ids.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::NoRows);
        }
        let mut values = Vec::with_capacity(indices.len() * self.n_features);
        let mut ids = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.n_points {
                return Err(Error::DimensionMismatch(format!(
                    "row index {i} out of range for {} rows",
                    self.n_points
                )));
            }
            values.extend_from_slice(self.row(i));
            ids.push(self.row_ids[i].clone());
        }
        Self::new(values, self.n_features, Some(self.feature_names.clone()), Some(ids))
    }

    /// Keeps only the listed columns.
    pub fn select_features(&self, columns: &[usize]) -> Result<Self> {
        if columns.iter().any(|&c| c >= self.n_features) {
            return Err(Error::DimensionMismatch("column index out of range".into()));
        }
        let values = self.rows().flat_map(|r| columns.iter().map(move |&c| r[c])).collect();
        let names = columns.iter().map(|&c| self.feature_names[c].clone()).collect();
        Self::new(values, columns.len(), Some(names), Some(self.row_ids.clone()))
    }

    /// Writes the matrix as CSV with a header row. Values use the shortest
    /// representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{}", self.feature_names.join(","))?;
        for r in self.rows() {
            let line: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn default_names(n: usize) -> Vec<String> {
    (0..n).map(|j| format!("f{j}")).collect()
}

/// Loads a comma-separated numeric table from disk.
pub fn load_csv(path: impl AsRef<Path>, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(BufReader::new(file), has_header).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses CSV from any buffered reader. Blank lines are skipped; rows and
/// columns in error messages are 1-based and count data rows only.
pub fn read_csv<R: BufRead>(reader: R, has_header: bool) -> Result<Dataset> {
    let mut names: Option<Vec<String>> = None;
    let mut values = Vec::new();
    let mut n_features = 0usize;
    let mut n_rows = 0usize;
    let mut header_pending = has_header;
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if header_pending {
            let header: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
            n_features = header.len();
            names = Some(header);
            header_pending = false;
            continue;
        }
        let row = n_rows + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if n_features == 0 {
            n_features = cells.len();
        }
        if cells.len() != n_features {
            return Err(Error::RaggedRow {
                row,
                expected: n_features,
                found: cells.len(),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::ParseCell {
                row,
                col: j + 1,
                cell: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col: j + 1 });
            }
            values.push(v);
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::NoRows);
    }
    Dataset::new(values, n_features, names, None)
}

/// True when the first non-blank line contains a cell that is not a number.
pub fn sniff_header(path: impl AsRef<Path>) -> Result<bool> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        return Ok(line.split(',').any(|c| c.trim().parse::<f64>().is_err()));
    }
    Ok(false)
}

/// Per-column location and scale used by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub means: Vec<f64>,
    /// Population standard deviations; zero marks a constant column.
    pub stds: Vec<f64>,
}

impl Scaler {
    pub fn fit(d: &Dataset) -> Self {
        let n = d.n_points() as f64;
        let mut means = Vec::with_capacity(d.n_features());
        let mut stds = Vec::with_capacity(d.n_features());
        for j in 0..d.n_features() {
            let col = d.column(j);
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let mean = col.iter().sum::<f64>() / n;
            means.push(mean);
            if lo == hi {
                stds.push(0.0);
            } else {
                let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                stds.push(var.sqrt());
            }
        }
        Self { means, stds }
    }

    pub fn transform(&self, d: &Dataset) -> Result<Dataset> {
        if d.n_features() != self.means.len() {
            return Err(Error::DimensionMismatch(format!(
                "scaler fitted on {} features, data has {}",
                self.means.len(),
                d.n_features()
            )));
        }
        let values = d
            .rows()
            .flat_map(|r| {
                r.iter()
                    .zip(self.means.iter().zip(&self.stds))
                    .map(|(&v, (&m, &s))| if s == 0.0 { 0.0 } else { (v - m) / s })
            })
            .collect();
        Dataset::new(
            values,
            d.n_features(),
            Some(d.feature_names().to_vec()),
            Some(d.row_ids().to_vec()),
        )
    }
}

/// Centers every column and scales it to unit population standard
/// deviation. Constant columns become zero.
pub fn standardize(d: &Dataset) -> Dataset {
    Scaler::fit(d).transform(d).expect("scaler fitted on the same dataset")
}

/// Assignment of every row to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] != fold)
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Shuffles row indices with a seeded generator, then deals them round-robin
/// into `k` folds.
pub fn split_folds(d: &Dataset, k: usize, seed: u64) -> Result<FoldPlan> {
    split_n(d.n_points(), k, seed)
}

pub(crate) fn split_n(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::InvalidConfig(format!(
            "fold count k={k} must lie in [2, {n}] for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % k;
    }
    Ok(FoldPlan { k, assignments, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn col_dataset(cols: &[&[f64]]) -> Dataset {
        let n = cols[0].len();
        let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        Dataset::from_rows(&rows).unwrap()
    }

    #[test]
    fn single_row_without_header_gets_generated_names() {
        let d = read_csv("1.0,2.0\n".as_bytes(), false).unwrap();
        assert_eq!(d.n_points(), 1);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.feature_names(), ["f0", "f1"]);
        assert_eq!(d.values(), [1.0, 2.0]);
    }

    #[test]
    fn header_names_are_kept() {
        let d = read_csv("a,b\n1,2\n3,4\n".as_bytes(), true).unwrap();
        assert_eq!(d.feature_names(), ["a", "b"]);
        assert_eq!(d.row(1), [3.0, 4.0]);
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let err = read_csv("1,2,3\n4,5,6\n7,abc,9\n".as_bytes(), false).unwrap_err();
        match err {
            Error::ParseCell { row, col, ref cell } => {
                assert_eq!((row, col), (3, 2));
                assert_eq!(cell, "abc");
            }
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("row 3, column 2"));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = read_csv("1,2\n3\n".as_bytes(), false).unwrap_err();
        assert!(matches!(
            err,
            Error::RaggedRow {
                row: 2,
                expected: 2,
                found: 1
            }
        ));
    }

    #[test]
    fn empty_input_has_no_rows() {
        assert!(matches!(read_csv("".as_bytes(), false), Err(Error::NoRows)));
        assert!(matches!(read_csv("a,b\n".as_bytes(), true), Err(Error::NoRows)));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            load_csv("/definitely/not/here.csv", true),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn nan_is_rejected() {
        assert!(matches!(
            read_csv("1,NaN\n".as_bytes(), false),
            Err(Error::NonFinite { row: 1, col: 2 })
        ));
    }

    #[test]
    fn standardize_uses_population_std() {
        let d = standardize(&col_dataset(&[&[1.0, 2.0, 3.0]]));
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert_abs_diff_eq!(d.values()[0], -expected, epsilon = 1e-12);
        assert_abs_diff_eq!(d.values()[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d.values()[2], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn constant_column_becomes_zero() {
        let d = standardize(&col_dataset(&[&[5.0, 5.0, 5.0], &[0.1, 0.1, 0.1]]));
        assert!(d.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardize_keeps_names_and_ids() {
        let d = read_csv("x,y\n1,4\n2,5\n4,9\n".as_bytes(), true).unwrap();
        let s = standardize(&d);
        assert_eq!(s.feature_names(), d.feature_names());
        assert_eq!(s.row_ids(), d.row_ids());
    }

    #[test]
    fn folds_divide_exactly() {
        let plan = split_n(10, 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
    }

    #[test]
    fn folds_distribute_remainder() {
        let plan = split_n(7, 5, 3).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2, 2, 1, 1, 1]);
    }

    #[test]
    fn folds_are_deterministic() {
        let d = col_dataset(&[&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        assert_eq!(split_folds(&d, 3, 11).unwrap(), split_folds(&d, 3, 11).unwrap());
    }

    #[test]
    fn fold_count_out_of_range() {
        assert!(split_n(4, 1, 0).is_err());
        assert!(split_n(4, 5, 0).is_err());
        assert!(split_n(4, 4, 0).is_ok());
    }

    proptest! {
        #[test]
        fn folds_partition_all_rows(n in 2usize..200, k_frac in 0.0f64..1.0, seed: u64) {
            let k = 2 + ((n - 2) as f64 * k_frac) as usize;
            let plan = split_n(n, k, seed).unwrap();
            let mut seen = vec![0u32; n];
            for f in 0..k {
                let test = plan.test_indices(f);
                prop_assert!(!test.is_empty());
                for i in test { seen[i] += 1; }
            }
            prop_assert!(seen.iter().all(|&c| c == 1));
            let sizes = plan.fold_sizes();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }

        #[test]
        fn standardize_is_idempotent(
            rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 2..40)
        ) {
            let once = standardize(&Dataset::from_rows(&rows).unwrap());
            let twice = standardize(&once);
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
            }
        }

        #[test]
        fn csv_write_then_read_is_exact(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 4), 1..20)
        ) {
            let d = Dataset::from_rows(&rows).unwrap();
            let mut buf = Vec::new();
            d.write_csv(&mut buf).unwrap();
            let back = read_csv(buf.as_slice(), true).unwrap();
            prop_assert_eq!(back.values(), d.values());
        }
    }
}
