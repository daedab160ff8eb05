//! Sparse patient×measurement matrices: CSV ingestion, per-column
//! normalization, support filtering, and seeded fold assignment.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Sparse table of observed values; unlisted cells are missing.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationMatrix {
    n_rows: usize,
    n_cols: usize,
    entries: Vec<Entry>,
    row_ids: Vec<String>,
    col_names: Vec<String>,
}

/// Column kind as declared by an external manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Binary,
    Date,
    Ordinal,
    Unknown,
}

impl std::str::FromStr for ColumnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(ColumnKind::Continuous),
            "binary" => Ok(ColumnKind::Binary),
            "date" => Ok(ColumnKind::Date),
            "ordinal" => Ok(ColumnKind::Ordinal),
            "unknown" => Ok(ColumnKind::Unknown),
            other => Err(Error::Schema(format!("unknown column kind `{other}`"))),
        }
    }
}

/// Per-column metadata: name, declared kind, observed count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnMeta {
    pub name: String,
    pub kind: ColumnKind,
    pub n_known: usize,
}

/// Min/max of one column over the fitting data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: f64,
    pub max: f64,
    pub degenerate: bool,
}

/// Per-column min-max rescaling to the unit interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub columns: Vec<ColumnScale>,
}

/// Assignment of every observed entry to one of `k` folds.
///
/// `fold_of[j]` is the fold of the j-th entry of the matrix the assignment
/// was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: Vec<usize>,
}

/// Counts of observed vs missing cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MissingnessStats {
    pub total: usize,
    pub observed: usize,
    pub missing: usize,
    pub fraction_missing: f64,
}

impl std::fmt::Display for MissingnessStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "total {} observed {} missing {} fraction_missing {:.6}",
            self.total, self.observed, self.missing, self.fraction_missing
        )
    }
}

/// Tokens treated as a missing cell, matched case-insensitively after
/// trimming surrounding whitespace.
#[derive(Debug, Clone)]
pub struct MissingTokens(HashSet<String>);

impl Default for MissingTokens {
    fn default() -> Self {
        Self::new(["", "na", "nan"])
    }
}

impl MissingTokens {
    pub fn new<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            tokens
                .into_iter()
                .map(|t| t.as_ref().trim().to_ascii_lowercase())
                .collect(),
        )
    }

    pub fn is_missing(&self, cell: &str) -> bool {
        self.0.contains(&cell.trim().to_ascii_lowercase())
    }
}

impl ObservationMatrix {
    /// Builds a matrix, validating bounds, finiteness and uniqueness of the
    /// observed cells.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<Entry>,
        row_ids: Vec<String>,
        col_names: Vec<String>,
    ) -> Result<Self> {
        if row_ids.len() != n_rows {
            return Err(Error::Shape(format!(
                "{} row ids for {} rows",
                row_ids.len(),
                n_rows
            )));
        }
        if col_names.len() != n_cols {
            return Err(Error::Shape(format!(
                "{} column names for {} columns",
                col_names.len(),
                n_cols
            )));
        }
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if e.row >= n_rows || e.col >= n_cols {
                return Err(Error::Argument(format!(
                    "entry ({}, {}) outside a {}x{} matrix",
                    e.row, e.col, n_rows, n_cols
                )));
            }
            if !e.value.is_finite() {
                return Err(Error::Argument(format!(
                    "non-finite value {} at ({}, {})",
                    e.value, e.row, e.col
                )));
            }
            if !seen.insert((e.row, e.col)) {
                return Err(Error::Argument(format!(
                    "duplicate entry at ({}, {})",
                    e.row, e.col
                )));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            entries,
            row_ids,
            col_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_names(&self) -> &[String] {
        &self.col_names
    }

    /// Observed count per column.
    pub fn col_support(&self) -> Vec<usize> {
        let mut support = vec![0usize; self.n_cols];
        for e in &self.entries {
            support[e.col] += 1;
        }
        support
    }

    /// Lookup table keyed by cell coordinates.
    pub fn value_map(&self) -> HashMap<(usize, usize), f64> {
        self.entries
            .iter()
            .map(|e| ((e.row, e.col), e.value))
            .collect()
    }

    pub fn column_meta(&self) -> Vec<ColumnMeta> {
        let support = self.col_support();
        self.col_names
            .iter()
            .zip(support)
            .map(|(name, n_known)| ColumnMeta {
                name: name.clone(),
                kind: ColumnKind::Unknown,
                n_known,
            })
            .collect()
    }

    pub fn missingness_stats(&self) -> MissingnessStats {
        let total = self.n_rows * self.n_cols;
        let observed = self.entries.len();
        let missing = total - observed;
        let fraction_missing = if total == 0 {
            0.0
        } else {
            missing as f64 / total as f64
        };
        MissingnessStats {
            total,
            observed,
            missing,
            fraction_missing,
        }
    }

    /// Keeps the columns whose observed count strictly exceeds `min_known`.
    ///
    /// Returns the reduced matrix and the original indices of the kept
    /// columns, in order.
    pub fn filter_columns_by_support(
        &self,
        min_known: usize,
    ) -> Result<(ObservationMatrix, Vec<usize>)> {
        let support = self.col_support();
        let kept: Vec<usize> = (0..self.n_cols)
            .filter(|&j| support[j] > min_known)
            .collect();
        if kept.is_empty() {
            return Err(Error::EmptyResult(format!(
                "no column has more than {min_known} observed values"
            )));
        }
        let matrix = self.select_columns(&kept)?;
        Ok((matrix, kept))
    }

    /// Projects onto the given original column indices (ascending, unique).
    pub fn select_columns(&self, keep: &[usize]) -> Result<ObservationMatrix> {
        let mut new_index = vec![None; self.n_cols];
        for (new_j, &j) in keep.iter().enumerate() {
            if j >= self.n_cols {
                return Err(Error::Argument(format!(
                    "column index {j} out of range for {} columns",
                    self.n_cols
                )));
            }
            if new_index[j].is_some() {
                return Err(Error::Argument(format!("column index {j} repeated")));
            }
            new_index[j] = Some(new_j);
        }
        let entries = self
            .entries
            .iter()
            .filter_map(|e| {
                new_index[e.col].map(|col| Entry {
                    row: e.row,
                    col,
                    value: e.value,
                })
            })
            .collect();
        let col_names = keep.iter().map(|&j| self.col_names[j].clone()).collect();
        ObservationMatrix::new(
            self.n_rows,
            keep.len(),
            entries,
            self.row_ids.clone(),
            col_names,
        )
    }

    /// Deals the observed entries into `k` folds after a seeded shuffle.
    pub fn split_folds(&self, k: usize, seed: u64) -> Result<FoldAssignment> {
        if k < 2 {
            return Err(Error::Argument(format!("k must be at least 2, got {k}")));
        }
        if self.entries.len() < k {
            return Err(Error::Argument(format!(
                "k = {k} exceeds the {} observed entries",
                self.entries.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut fold_of = vec![0usize; self.entries.len()];
        for (pos, &entry_idx) in order.iter().enumerate() {
            fold_of[entry_idx] = pos % k;
        }
        Ok(FoldAssignment { k, seed, fold_of })
    }

    /// Splits into (train, test): test holds the entries of `fold_index`.
    pub fn mask_fold(
        &self,
        folds: &FoldAssignment,
        fold_index: usize,
    ) -> Result<(ObservationMatrix, ObservationMatrix)> {
        if fold_index >= folds.k {
            return Err(Error::Argument(format!(
                "fold index {fold_index} out of range for k = {}",
                folds.k
            )));
        }
        if folds.fold_of.len() != self.entries.len() {
            return Err(Error::Shape(format!(
                "fold assignment covers {} entries, matrix has {}",
                folds.fold_of.len(),
                self.entries.len()
            )));
        }
        let mut train = Vec::with_capacity(self.entries.len());
        let mut test = Vec::new();
        for (e, &fold) in self.entries.iter().zip(&folds.fold_of) {
            if fold == fold_index {
                test.push(*e);
            } else {
                train.push(*e);
            }
        }
        let train = ObservationMatrix::new(
            self.n_rows,
            self.n_cols,
            train,
            self.row_ids.clone(),
            self.col_names.clone(),
        )?;
        let test = ObservationMatrix::new(
            self.n_rows,
            self.n_cols,
            test,
            self.row_ids.clone(),
            self.col_names.clone(),
        )?;
        Ok((train, test))
    }
}

impl NormalizationParams {
    /// Per-column min/max over the observed entries of `matrix`.
    pub fn fit(matrix: &ObservationMatrix) -> Self {
        let mut min = vec![f64::INFINITY; matrix.n_cols()];
        let mut max = vec![f64::NEG_INFINITY; matrix.n_cols()];
        for e in matrix.entries() {
            min[e.col] = min[e.col].min(e.value);
            max[e.col] = max[e.col].max(e.value);
        }
        let columns = min
            .into_iter()
            .zip(max)
            .map(|(lo, hi)| {
                if lo.is_finite() {
                    ColumnScale {
                        min: lo,
                        max: hi,
                        degenerate: lo == hi,
                    }
                } else {
                    // Empty column.
                    ColumnScale {
                        min: 0.0,
                        max: 0.0,
                        degenerate: true,
                    }
                }
            })
            .collect();
        Self { columns }
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    /// Maps one value of column `col` into [0, 1], clamped.
    pub fn apply_value(&self, col: usize, value: f64) -> f64 {
        let scale = &self.columns[col];
        if scale.degenerate {
            0.5
        } else {
            ((value - scale.min) / (scale.max - scale.min)).clamp(0.0, 1.0)
        }
    }

    /// Maps one normalized value of column `col` back to original units.
    pub fn invert_value(&self, col: usize, value: f64) -> f64 {
        let scale = &self.columns[col];
        if scale.degenerate {
            scale.min
        } else {
            scale.min + value * (scale.max - scale.min)
        }
    }

    pub fn apply(&self, matrix: &ObservationMatrix) -> Result<ObservationMatrix> {
        self.check_shape(matrix)?;
        let entries = matrix
            .entries()
            .iter()
            .map(|e| Entry {
                value: self.apply_value(e.col, e.value),
                ..*e
            })
            .collect();
        ObservationMatrix::new(
            matrix.n_rows(),
            matrix.n_cols(),
            entries,
            matrix.row_ids().to_vec(),
            matrix.col_names().to_vec(),
        )
    }

    pub fn invert(&self, matrix: &ObservationMatrix) -> Result<ObservationMatrix> {
        self.check_shape(matrix)?;
        let entries = matrix
            .entries()
            .iter()
            .map(|e| Entry {
                value: self.invert_value(e.col, e.value),
                ..*e
            })
            .collect();
        ObservationMatrix::new(
            matrix.n_rows(),
            matrix.n_cols(),
            entries,
            matrix.row_ids().to_vec(),
            matrix.col_names().to_vec(),
        )
    }

    fn check_shape(&self, matrix: &ObservationMatrix) -> Result<()> {
        if self.columns.len() != matrix.n_cols() {
            return Err(Error::Shape(format!(
                "normalizer fitted on {} columns, matrix has {}",
                self.columns.len(),
                matrix.n_cols()
            )));
        }
        Ok(())
    }
}

/// Serializes a value with 17 significant digits, enough to round-trip f64.
pub fn format_value(value: f64) -> String {
    format!("{value:.16e}")
}

/// Reads a sparse matrix from CSV: header row, optional leading
/// `patient_id` column, numeric cells, missing cells matching
/// `missing_tokens`.
pub fn load_csv<R: Read>(
    reader: R,
    missing_tokens: &MissingTokens,
) -> Result<(ObservationMatrix, Vec<ColumnMeta>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Schema("empty header row".into()));
    }

    let mut names: Vec<String> = headers.iter().map(str::to_string).collect();
    let mut seen = HashSet::new();
    for name in &names {
        if !seen.insert(name.clone()) {
            return Err(Error::Schema(format!("duplicate column name `{name}`")));
        }
    }
    let has_id_col = names.first().map(String::as_str) == Some("patient_id");
    if has_id_col {
        names.remove(0);
    }
    let n_cols = names.len();
    let n_fields = headers.len();

    let mut entries = Vec::new();
    let mut row_ids = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e
                .position()
                .map(|p| p.line())
                .unwrap_or((row + 2) as u64),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or((row + 2) as u64);
        if record.len() != n_fields {
            return Err(Error::Parse {
                line,
                message: format!("expected {n_fields} fields, found {}", record.len()),
            });
        }
        let mut fields = record.iter();
        let row_id = if has_id_col {
            fields.next().unwrap_or("").trim().to_string()
        } else {
            row.to_string()
        };
        row_ids.push(row_id);
        for (col, cell) in fields.enumerate() {
            if missing_tokens.is_missing(cell) {
                continue;
            }
            let value: f64 = cell.trim().parse().map_err(|_| Error::ParseCell {
                row,
                col,
                name: names[col].clone(),
                message: format!("cannot parse `{}` as a number", cell.trim()),
            })?;
            if !value.is_finite() {
                return Err(Error::ParseCell {
                    row,
                    col,
                    name: names[col].clone(),
                    message: format!("non-finite value `{}`", cell.trim()),
                });
            }
            entries.push(Entry { row, col, value });
        }
    }

    let matrix = ObservationMatrix::new(row_ids.len(), n_cols, entries, row_ids, names)?;
    let meta = matrix.column_meta();
    Ok((matrix, meta))
}

/// Writes the matrix in the `load_csv` format; missing cells are empty.
pub fn write_sparse_csv<W: Write>(matrix: &ObservationMatrix, mut w: W) -> Result<()> {
    write_header(matrix.col_names(), &mut w)?;
    let lookup = matrix.value_map();
    for (row, id) in matrix.row_ids().iter().enumerate() {
        let mut line = String::from(id.as_str());
        for col in 0..matrix.n_cols() {
            line.push(',');
            if let Some(v) = lookup.get(&(row, col)) {
                line.push_str(&format_value(*v));
            }
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Writes a fully observed matrix in the same CSV layout.
pub fn write_dense_csv<W: Write>(
    row_ids: &[String],
    col_names: &[String],
    values: &DMatrix<f64>,
    mut w: W,
) -> Result<()> {
    if values.nrows() != row_ids.len() || values.ncols() != col_names.len() {
        return Err(Error::Shape(format!(
            "{}x{} values for {} ids and {} names",
            values.nrows(),
            values.ncols(),
            row_ids.len(),
            col_names.len()
        )));
    }
    write_header(col_names, &mut w)?;
    for (row, id) in row_ids.iter().enumerate() {
        let mut line = String::from(id.as_str());
        for col in 0..col_names.len() {
            line.push(',');
            line.push_str(&format_value(values[(row, col)]));
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn write_header<W: Write>(col_names: &[String], w: &mut W) -> Result<()> {
    let mut header = String::from("patient_id");
    for name in col_names {
        header.push(',');
        header.push_str(name);
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    Ok(())
}

/// One row of the column-kind manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: ColumnKind,
}

/// Parses a JSON manifest and folds the declared kinds into `meta`.
///
/// Every manifest name must match a column; unmentioned columns keep kind
/// `unknown`.
pub fn apply_manifest(meta: &mut [ColumnMeta], manifest_json: &str) -> Result<()> {
    let manifest: Vec<ManifestEntry> = serde_json::from_str(manifest_json)
        .map_err(|e| Error::Schema(format!("bad manifest: {e}")))?;
    let mut by_name: HashMap<&str, usize> = HashMap::new();
    for (idx, m) in meta.iter().enumerate() {
        by_name.insert(m.name.as_str(), idx);
    }
    for entry in manifest {
        match by_name.get(entry.name.as_str()) {
            Some(&idx) => meta[idx].kind = entry.kind,
            None => {
                return Err(Error::Schema(format!(
                    "manifest names column `{}` absent from the header",
                    entry.name
                )))
            }
        }
    }
    Ok(())
}
