//! Cross-validation, error reporting, mean-imputation baselines, and the
//! prior-mean grid search.

use std::collections::HashMap;
use std::io::Write;

use serde::Serialize;

use crate::data::{format_value, Entry, NormalizationParams, ObservationMatrix};
use crate::error::{Error, Result};
use crate::inference::{fit, FitConfig};
use crate::model::Hyperparams;

/// Per-column mean errors at or below this are classified green.
pub const CLASS_THRESHOLD_MAE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnClass {
    Green,
    Red,
    Untested,
}

impl std::fmt::Display for ColumnClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ColumnClass::Green => "green",
            ColumnClass::Red => "red",
            ColumnClass::Untested => "untested",
        };
        f.write_str(s)
    }
}

/// Pure classification law: green iff MAE ≤ 0.2, red above, untested when
/// nothing was predicted.
pub fn classify(mae: Option<f64>, n_test: usize) -> ColumnClass {
    match mae {
        None => ColumnClass::Untested,
        Some(_) if n_test == 0 => ColumnClass::Untested,
        Some(m) if m <= CLASS_THRESHOLD_MAE => ColumnClass::Green,
        Some(_) => ColumnClass::Red,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnReport {
    pub name: String,
    pub n_known: usize,
    pub n_test: usize,
    pub mae: Option<f64>,
    pub class: ColumnClass,
}

/// Absolute error of one tested cell, in normalized space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryError {
    pub row: usize,
    pub col: usize,
    pub abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub columns: Vec<ColumnReport>,
    /// Unweighted mean of the per-column MAEs over tested columns.
    pub overall_column_mean_mae: f64,
    /// Entry-weighted MAE over every tested cell.
    pub overall_entry_mae: f64,
    pub entry_errors: Vec<EntryError>,
}

/// Builds the per-measurement error report of a prediction set against the
/// held-out truth.
///
/// `predictions` must cover exactly the entries of `truth`; `n_known`
/// carries the observed counts from the full matrix for reporting.
pub fn mae_report(
    predictions: &HashMap<(usize, usize), f64>,
    truth: &ObservationMatrix,
    col_names: &[String],
    n_known: &[usize],
) -> Result<EvalReport> {
    if col_names.len() != truth.n_cols() || n_known.len() != truth.n_cols() {
        return Err(Error::Shape(format!(
            "{} names / {} supports for {} columns",
            col_names.len(),
            n_known.len(),
            truth.n_cols()
        )));
    }
    if predictions.len() != truth.entries().len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} truth entries",
            predictions.len(),
            truth.entries().len()
        )));
    }
    if truth.entries().is_empty() {
        return Err(Error::Argument("no test entries to score".into()));
    }

    let mut col_abs_sum = vec![0.0f64; truth.n_cols()];
    let mut col_count = vec![0usize; truth.n_cols()];
    let mut entry_errors = Vec::with_capacity(truth.entries().len());
    let mut total_abs = 0.0f64;
    for e in truth.entries() {
        let pred = predictions.get(&(e.row, e.col)).ok_or_else(|| {
            Error::Argument(format!("missing prediction for cell ({}, {})", e.row, e.col))
        })?;
        let abs_error = (pred - e.value).abs();
        col_abs_sum[e.col] += abs_error;
        col_count[e.col] += 1;
        total_abs += abs_error;
        entry_errors.push(EntryError {
            row: e.row,
            col: e.col,
            abs_error,
        });
    }

    let mut columns = Vec::with_capacity(truth.n_cols());
    let mut tested_cols = 0usize;
    let mut mae_sum = 0.0f64;
    for j in 0..truth.n_cols() {
        let n_test = col_count[j];
        let mae = if n_test > 0 {
            Some(col_abs_sum[j] / n_test as f64)
        } else {
            None
        };
        if let Some(m) = mae {
            tested_cols += 1;
            mae_sum += m;
        }
        columns.push(ColumnReport {
            name: col_names[j].clone(),
            n_known: n_known[j],
            n_test,
            mae,
            class: classify(mae, n_test),
        });
    }

    Ok(EvalReport {
        columns,
        overall_column_mean_mae: mae_sum / tested_cols as f64,
        overall_entry_mae: total_abs / truth.entries().len() as f64,
        entry_errors,
    })
}

/// Whether CV folds normalize with their own train statistics or with
/// statistics of the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    FoldTrain,
    WholeDataset,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    ColumnMean,
    GlobalMean,
}

/// Predicts held-out cells from train-set means in normalized space.
pub fn baseline_predict(
    train: &ObservationMatrix,
    test_keys: &[(usize, usize)],
    kind: BaselineKind,
) -> Result<HashMap<(usize, usize), f64>> {
    if train.entries().is_empty() {
        return Err(Error::Argument("baseline needs at least one train entry".into()));
    }
    let mut col_sum = vec![0.0f64; train.n_cols()];
    let mut col_count = vec![0usize; train.n_cols()];
    let mut total = 0.0f64;
    for e in train.entries() {
        col_sum[e.col] += e.value;
        col_count[e.col] += 1;
        total += e.value;
    }
    let global_mean = total / train.entries().len() as f64;
    let mut predictions = HashMap::with_capacity(test_keys.len());
    for &(row, col) in test_keys {
        if col >= train.n_cols() {
            return Err(Error::Argument(format!("test column {col} out of range")));
        }
        let value = match kind {
            BaselineKind::GlobalMean => global_mean,
            BaselineKind::ColumnMean => {
                if col_count[col] > 0 {
                    col_sum[col] / col_count[col] as f64
                } else {
                    global_mean
                }
            }
        };
        predictions.insert((row, col), value.clamp(0.0, 1.0));
    }
    Ok(predictions)
}

/// Runs the shared k-fold pipeline: normalize per scope, call the predictor
/// on each fold, and aggregate every held-out entry exactly once.
fn cross_validate_with<F>(
    matrix: &ObservationMatrix,
    k: usize,
    seed: u64,
    scope: NormScope,
    mut predict_fold: F,
) -> Result<EvalReport>
where
    F: FnMut(&ObservationMatrix, &[(usize, usize)]) -> Result<HashMap<(usize, usize), f64>>,
{
    let folds = matrix.split_folds(k, seed)?;
    let whole_params = NormalizationParams::fit(matrix);
    let mut predictions: HashMap<(usize, usize), f64> = HashMap::new();
    let mut truth_entries: Vec<Entry> = Vec::with_capacity(matrix.entries().len());

    for fold in 0..k {
        let (train, test) = matrix.mask_fold(&folds, fold)?;
        let params = match scope {
            NormScope::FoldTrain => NormalizationParams::fit(&train),
            NormScope::WholeDataset => whole_params.clone(),
        };
        let norm_train = params.apply(&train)?;
        let keys: Vec<(usize, usize)> = test.entries().iter().map(|e| (e.row, e.col)).collect();
        let fold_predictions = predict_fold(&norm_train, &keys)?;
        for key in &keys {
            let value = fold_predictions.get(key).ok_or_else(|| {
                Error::Argument(format!("fold {fold} produced no prediction for {key:?}"))
            })?;
            predictions.insert(*key, *value);
        }
        for e in test.entries() {
            truth_entries.push(Entry {
                row: e.row,
                col: e.col,
                value: params.apply_value(e.col, e.value),
            });
        }
    }

    let truth = ObservationMatrix::new(
        matrix.n_rows(),
        matrix.n_cols(),
        truth_entries,
        matrix.row_ids().to_vec(),
        matrix.col_names().to_vec(),
    )?;
    mae_report(
        &predictions,
        &truth,
        matrix.col_names(),
        &matrix.col_support(),
    )
}

/// 5-fold-style cross-validation of the trait/bias model. The matrix is in
/// original units; errors are reported in normalized space with predictions
/// clamped to the unit interval.
pub fn cross_validate(
    matrix: &ObservationMatrix,
    hyper: &Hyperparams,
    k: usize,
    seed: u64,
    fit_config: &FitConfig,
    scope: NormScope,
) -> Result<EvalReport> {
    cross_validate_with(matrix, k, seed, scope, |norm_train, keys| {
        let result = fit(norm_train, hyper, fit_config)?;
        let mut predictions = HashMap::with_capacity(keys.len());
        for &(row, col) in keys {
            let value = result.state.predict_mean(row, col)?.clamp(0.0, 1.0);
            predictions.insert((row, col), value);
        }
        Ok(predictions)
    })
}

/// Cross-validation of a mean-imputation baseline on the same fold
/// assignment as [`cross_validate`] for the same `(k, seed)`.
pub fn cross_validate_baseline(
    matrix: &ObservationMatrix,
    kind: BaselineKind,
    k: usize,
    seed: u64,
    scope: NormScope,
) -> Result<EvalReport> {
    cross_validate_with(matrix, k, seed, scope, |norm_train, keys| {
        baseline_predict(norm_train, keys, kind)
    })
}

/// Equally spaced grid `lo, lo+step, …` including `hi` up to
/// floating-point drift (values within step/2 past `hi` are kept).
pub fn grid_values(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !lo.is_finite() || !hi.is_finite() || !step.is_finite() {
        return Err(Error::Argument("grid bounds must be finite".into()));
    }
    if step <= 0.0 {
        return Err(Error::Argument(format!("step must be positive, got {step}")));
    }
    if lo > hi {
        return Err(Error::Argument(format!("grid range [{lo}, {hi}] is empty")));
    }
    let mut values = Vec::new();
    for n in 0.. {
        let v = lo + n as f64 * step;
        if v > hi + step / 2.0 {
            break;
        }
        values.push(v);
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Joint,
    Coordinate,
}

/// One scored grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub mu_p: f64,
    pub mu_r: f64,
    pub mu_bp: f64,
    pub mu_br: f64,
    pub cv_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchResult {
    pub table: Vec<GridPoint>,
    pub best: Hyperparams,
    pub best_score: f64,
    pub mode: GridMode,
}

/// Searches the four prior means over `grid`, scoring each candidate by the
/// column-mean MAE of a cross-validation with a shared fold seed.
///
/// Joint mode scores the full product grid; coordinate mode sweeps one
/// prior mean at a time in the order (mu_p, mu_r, mu_bp, mu_br), adopting
/// the best value after each sweep.
pub fn grid_search(
    matrix: &ObservationMatrix,
    base_hyper: &Hyperparams,
    mode: GridMode,
    grid: &[f64],
    k: usize,
    seed: u64,
    fit_config: &FitConfig,
    scope: NormScope,
) -> Result<GridSearchResult> {
    if grid.is_empty() {
        return Err(Error::Argument("empty grid".into()));
    }
    let mut table = Vec::new();
    let mut score = |means: [f64; 4]| -> Result<f64> {
        let hyper = Hyperparams {
            mu_p: means[0],
            mu_r: means[1],
            mu_bp: means[2],
            mu_br: means[3],
            ..*base_hyper
        };
        let report = cross_validate(matrix, &hyper, k, seed, fit_config, scope)?;
        Ok(report.overall_column_mean_mae)
    };

    match mode {
        GridMode::Joint => {
            for &mu_p in grid {
                for &mu_r in grid {
                    for &mu_bp in grid {
                        for &mu_br in grid {
                            let cv_score = score([mu_p, mu_r, mu_bp, mu_br])?;
                            table.push(GridPoint { mu_p, mu_r, mu_bp, mu_br, cv_score });
                        }
                    }
                }
            }
        }
        GridMode::Coordinate => {
            let mut current = [
                base_hyper.mu_p,
                base_hyper.mu_r,
                base_hyper.mu_bp,
                base_hyper.mu_br,
            ];
            for coord in 0..4 {
                let mut sweep_best: Option<(f64, f64)> = None;
                for &v in grid {
                    let mut candidate = current;
                    candidate[coord] = v;
                    let cv_score = score(candidate)?;
                    table.push(GridPoint {
                        mu_p: candidate[0],
                        mu_r: candidate[1],
                        mu_bp: candidate[2],
                        mu_br: candidate[3],
                        cv_score,
                    });
                    // ascending grid: strict < keeps the smallest tied value
                    if sweep_best.map_or(true, |(s, _)| cv_score < s) {
                        sweep_best = Some((cv_score, v));
                    }
                }
                current[coord] = sweep_best.expect("non-empty grid").1;
            }
        }
    }

    let best_point = best_of(&table).expect("non-empty table");
    let best = Hyperparams {
        mu_p: best_point.mu_p,
        mu_r: best_point.mu_r,
        mu_bp: best_point.mu_bp,
        mu_br: best_point.mu_br,
        ..*base_hyper
    };
    Ok(GridSearchResult {
        best,
        best_score: best_point.cv_score,
        table,
        mode,
    })
}

/// Minimal cv_score; ties resolved by the lexicographically smallest
/// (mu_p, mu_r, mu_bp, mu_br).
fn best_of(table: &[GridPoint]) -> Option<GridPoint> {
    let mut best: Option<GridPoint> = None;
    for p in table {
        let better = match &best {
            None => true,
            Some(b) => {
                p.cv_score < b.cv_score
                    || (p.cv_score == b.cv_score
                        && (p.mu_p, p.mu_r, p.mu_bp, p.mu_br)
                            < (b.mu_p, b.mu_r, b.mu_bp, b.mu_br))
            }
        };
        if better {
            best = Some(*p);
        }
    }
    best
}

/// `name,n_known,n_test,mae,class` rows; untested columns leave mae empty.
pub fn write_report_csv<W: Write>(report: &EvalReport, mut w: W) -> Result<()> {
    w.write_all(b"name,n_known,n_test,mae,class\n")?;
    for c in &report.columns {
        let mae = c.mae.map(format_value).unwrap_or_default();
        let line = format!("{},{},{},{},{}\n", c.name, c.n_known, c.n_test, mae, c.class);
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// `mu_P,mu_R,mu_bP,mu_bR,cv_score` rows in evaluation order.
pub fn write_grid_csv<W: Write>(result: &GridSearchResult, mut w: W) -> Result<()> {
    w.write_all(b"mu_P,mu_R,mu_bP,mu_bR,cv_score\n")?;
    for p in &result.table {
        let line = format!(
            "{},{},{},{},{}\n",
            format_value(p.mu_p),
            format_value(p.mu_r),
            format_value(p.mu_bp),
            format_value(p.mu_br),
            format_value(p.cv_score)
        );
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Top-level summary serialized to `summary.json` by the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub overall_column_mean_mae: f64,
    pub overall_entry_mae: f64,
    pub k: usize,
    pub seed: u64,
    pub hyperparams: Hyperparams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<BaselineSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BaselineSummary {
    pub kind: BaselineKind,
    pub overall_column_mean_mae: f64,
    pub overall_entry_mae: f64,
}
