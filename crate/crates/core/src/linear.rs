// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear baseline: last-day, previous-day and window-average columns,
//! ordinary least squares and greedy backward elimination by AIC.
//!
//! Fits run on standardized columns (a correlation-scale Gram matrix), which
//! keeps the normal equations well conditioned; coefficients are reported
//! both in original units (`b`) and standardized (`beta`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diary::{encode_record, Feature, FeatureSchema, UserHistory, Variable, WINDOW_STEPS};
use crate::stats;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinearError {
    #[error("no user has a reported quality on the anchor day")]
    NoEligibleUsers,
    #[error("design matrix is rank deficient ({rows} rows, {cols} columns)")]
    RankDeficient { rows: usize, cols: usize },
    #[error("row has {got} columns, model expects {expected}")]
    ColumnMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Last,
    Previous,
    Average,
}

impl Position {
    fn tag(self) -> &'static str {
        match self {
            Position::Last => "last",
            Position::Previous => "prev",
            Position::Average => "avg",
        }
    }
}

/// One candidate column. `indicator` columns flag an imputed base cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignColumn {
    pub name: String,
    /// Encoded feature index; the schema's quality slot for quality columns.
    pub feature: usize,
    pub variable: Option<Variable>,
    pub position: Position,
    pub indicator: bool,
}

/// Column layout and the imputation means fitted on training users.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrixSpec {
    pub schema: FeatureSchema,
    pub columns: Vec<DesignColumn>,
    /// Mean of each base column over rows where it is observed.
    pub impute_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub spec: DesignMatrixSpec,
    pub user_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

/// Raw base cells (before imputation) for one user's last window.
fn base_cells(
    history: &UserHistory,
    schema: &FeatureSchema,
    bases: &[(usize, Position)],
) -> Vec<Option<f64>> {
    let n = history.records.len();
    let start = n.saturating_sub(WINDOW_STEPS);
    let window = &history.records[start..];
    let encoded: Vec<(Vec<f64>, Vec<bool>)> = window
        .iter()
        .enumerate()
        .map(|(k, r)| encode_record(r, schema, k + 1 < window.len()))
        .collect();
    let last = encoded.len() - 1;
    bases
        .iter()
        .map(|&(f, pos)| match pos {
            Position::Last => (!encoded[last].1[f]).then(|| encoded[last].0[f]),
            Position::Previous => last
                .checked_sub(1)
                .and_then(|p| (!encoded[p].1[f]).then(|| encoded[p].0[f])),
            Position::Average => {
                let vals: Vec<f64> = encoded
                    .iter()
                    .filter(|(_, m)| !m[f])
                    .map(|(v, _)| v[f])
                    .collect();
                stats::mean(&vals)
            }
        })
        .collect()
}

impl DesignMatrixSpec {
    /// Base columns: every behaviour feature at last/previous/average, plus
    /// previous-day and window-average quality. Anchor quality never enters.
    fn base_layout(schema: &FeatureSchema) -> Vec<(usize, Position)> {
        let q = schema.quality_index();
        let mut out = Vec::new();
        for f in 0..schema.len() {
            let positions: &[Position] = if f == q {
                &[Position::Previous, Position::Average]
            } else {
                &[Position::Last, Position::Previous, Position::Average]
            };
            out.extend(positions.iter().map(|p| (f, *p)));
        }
        out
    }

    fn column_name(feature: &Feature, pos: Position, indicator: bool) -> String {
        let base = format!("{}:{}", pos.tag(), feature.name);
        if indicator {
            format!("{base}:missing")
        } else {
            base
        }
    }

    pub fn n_base(&self) -> usize {
        self.impute_means.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    /// Full design row: imputed base values followed by missing indicators.
    pub fn row(&self, history: &UserHistory) -> Vec<f64> {
        let bases = Self::base_layout(&self.schema);
        let cells = base_cells(history, &self.schema, &bases);
        let mut row: Vec<f64> = cells
            .iter()
            .zip(&self.impute_means)
            .map(|(c, m)| c.unwrap_or(*m))
            .collect();
        row.extend(cells.iter().map(|c| if c.is_none() { 1.0 } else { 0.0 }));
        row
    }

    pub fn column_index(
        &self,
        variable: Variable,
        position: Position,
        indicator: bool,
    ) -> Option<usize> {
        self.columns.iter().position(|c| {
            c.variable == Some(variable) && c.position == position && c.indicator == indicator
        })
    }
}

/// One row per user whose last record has a reported quality.
pub fn build_design_matrix(
    histories: &[UserHistory],
    schema: &FeatureSchema,
) -> Result<DesignMatrix, LinearError> {
    let eligible: Vec<&UserHistory> = histories
        .iter()
        .filter(|h| h.anchor_quality().is_some())
        .collect();
    if eligible.is_empty() {
        return Err(LinearError::NoEligibleUsers);
    }
    let bases = DesignMatrixSpec::base_layout(schema);
    let features = schema.features();
    let cells: Vec<Vec<Option<f64>>> = eligible
        .iter()
        .map(|h| base_cells(h, schema, &bases))
        .collect();
    let impute_means: Vec<f64> = (0..bases.len())
        .map(|j| {
            let vals: Vec<f64> = cells.iter().filter_map(|r| r[j]).collect();
            stats::mean(&vals).unwrap_or(0.0)
        })
        .collect();
    let mut columns = Vec::with_capacity(2 * bases.len());
    for indicator in [false, true] {
        for &(f, pos) in &bases {
            columns.push(DesignColumn {
                name: DesignMatrixSpec::column_name(&features[f], pos, indicator),
                feature: f,
                variable: features[f].variable,
                position: pos,
                indicator,
            });
        }
    }
    let spec = DesignMatrixSpec {
        schema: *schema,
        columns,
        impute_means,
    };
    let rows = eligible.iter().map(|h| spec.row(h)).collect();
    Ok(DesignMatrix {
        user_ids: eligible.iter().map(|h| h.user_id.clone()).collect(),
        y: eligible
            .iter()
            .map(|h| f64::from(h.anchor_quality().expect("filtered")))
            .collect(),
        rows,
        spec,
    })
}

/// `n·ln(RSS/n) + 2k`; `−∞` when the fit is exact.
pub fn aic(n: usize, rss: f64, k: usize) -> f64 {
    if rss <= 0.0 {
        return f64::NEG_INFINITY;
    }
    n as f64 * (rss / n as f64).ln() + 2.0 * k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Indices into the design columns, ascending.
    pub columns: Vec<usize>,
    pub names: Vec<String>,
    pub b: Vec<f64>,
    pub beta: Vec<f64>,
    pub intercept: f64,
    pub p_values: Vec<f64>,
    pub rss: f64,
    pub n: usize,
    pub aic: f64,
    pub r2: f64,
    /// Width of the full design row the model reads.
    pub width: usize,
    /// Column means and population stds over the fitting rows.
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
}

impl LinearModel {
    /// Coefficients plus intercept plus the residual variance.
    pub fn k(&self) -> usize {
        self.columns.len() + 2
    }

    pub fn predict(&self, row: &[f64]) -> Result<f64, LinearError> {
        if row.len() != self.width {
            return Err(LinearError::ColumnMismatch {
                expected: self.width,
                got: row.len(),
            });
        }
        Ok(self.intercept
            + self
                .columns
                .iter()
                .zip(&self.b)
                .map(|(&j, b)| b * row[j])
                .sum::<f64>())
    }

    pub fn coefficient(&self, column: usize) -> Option<f64> {
        self.columns
            .iter()
            .position(|&c| c == column)
            .map(|k| self.b[k])
    }
}

/// Column moments and the standardized cross-products shared by all subset fits.
struct Moments {
    n: usize,
    x_mean: Vec<f64>,
    x_std: Vec<f64>,
    y_mean: f64,
    y_ss: f64,
    /// Correlation-scale Gram matrix `ZᵀZ` of standardized columns.
    gram: DMatrix<f64>,
    /// `Zᵀ(y − ȳ)`.
    zy: DVector<f64>,
}

fn moments(x: &[Vec<f64>], y: &[f64], width: usize) -> Moments {
    let n = x.len();
    let x_mean: Vec<f64> = (0..width)
        .map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let x_std: Vec<f64> = (0..width)
        .map(|j| (x.iter().map(|r| (r[j] - x_mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt())
        .collect();
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_ss = y.iter().map(|v| (v - y_mean).powi(2)).sum();
    let z = DMatrix::from_fn(n, width, |i, j| {
        if x_std[j] > 0.0 {
            (x[i][j] - x_mean[j]) / x_std[j]
        } else {
            0.0
        }
    });
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
    Moments {
        n,
        gram: z.transpose() * &z,
        zy: z.transpose() * yc,
        x_mean,
        x_std,
        y_mean,
        y_ss,
    }
}

/// Fit on column subset `cols`: standardized coefficients, RSS and the
/// diagonal of `(Z_SᵀZ_S)⁻¹`.
fn subset_fit(m: &Moments, cols: &[usize]) -> Result<(Vec<f64>, f64, Vec<f64>), LinearError> {
    let k = cols.len();
    let rank_err = LinearError::RankDeficient { rows: m.n, cols: k };
    if m.n < k + 2 {
        return Err(rank_err);
    }
    if k == 0 {
        return Ok((vec![], m.y_ss, vec![]));
    }
    let g = DMatrix::from_fn(k, k, |a, b| m.gram[(cols[a], cols[b])]);
    let rhs = DVector::from_iterator(k, cols.iter().map(|&j| m.zy[j]));
    let chol = g.cholesky().ok_or(rank_err.clone())?;
    let l = chol.l();
    let diag_min = (0..k).map(|i| l[(i, i)]).fold(f64::INFINITY, f64::min);
    // pivots of a correlation matrix below this mean a (near) exact dependency
    if diag_min < 1e-7 * (m.n as f64).sqrt() {
        return Err(rank_err);
    }
    let coef = chol.solve(&rhs);
    let rss = (m.y_ss - coef.dot(&rhs)).max(0.0);
    let inv = chol.inverse();
    Ok((
        coef.iter().copied().collect(),
        rss,
        (0..k).map(|i| inv[(i, i)]).collect(),
    ))
}

fn model_from(
    m: &Moments,
    data: (&[Vec<f64>], &[f64]),
    cols: &[usize],
    names: &[String],
) -> Result<LinearModel, LinearError> {
    let (x, y) = data;
    let width = m.x_mean.len();
    let (coef, _, inv_diag) = subset_fit(m, cols)?;
    let n = m.n;
    let k = cols.len();
    let df = (n - k - 1) as f64;
    let y_std = (m.y_ss / n as f64).sqrt();
    let b: Vec<f64> = cols
        .iter()
        .zip(&coef)
        .map(|(&j, c)| c / m.x_std[j])
        .collect();
    let beta: Vec<f64> = coef
        .iter()
        .map(|c| if y_std > 0.0 { c / y_std } else { 0.0 })
        .collect();
    let intercept = m.y_mean
        - cols
            .iter()
            .zip(&b)
            .map(|(&j, bj)| bj * m.x_mean[j])
            .sum::<f64>();
    let mut rss: f64 = x
        .iter()
        .zip(y)
        .map(|(r, t)| {
            (t - intercept - cols.iter().zip(&b).map(|(&j, bj)| bj * r[j]).sum::<f64>()).powi(2)
        })
        .sum();
    // residuals at round-off level are an exact fit
    if rss <= EXACT_FIT * m.y_ss.max(f64::MIN_POSITIVE) {
        rss = 0.0;
    }
    let sigma2 = rss / df;
    let p_values = coef
        .iter()
        .zip(&inv_diag)
        .map(|(c, d)| {
            let se = (sigma2 * d).sqrt();
            if se > 0.0 {
                stats::t_two_sided(c / se, df)
            } else {
                0.0
            }
        })
        .collect();
    Ok(LinearModel {
        columns: cols.to_vec(),
        names: cols.iter().map(|&j| names[j].clone()).collect(),
        b,
        beta,
        intercept,
        p_values,
        rss,
        n,
        aic: aic(n, rss, k + 2),
        r2: if m.y_ss > 0.0 {
            1.0 - rss / m.y_ss
        } else {
            0.0
        },
        width,
        x_mean: m.x_mean.clone(),
        x_std: m.x_std.clone(),
    })
}

const EXACT_FIT: f64 = 1e-24;

fn default_names(width: usize) -> Vec<String> {
    (0..width).map(|j| format!("x{j}")).collect()
}

fn check_shape(x: &[Vec<f64>], y: &[f64]) -> Result<usize, LinearError> {
    let width = x.first().map_or(0, Vec::len);
    if x.is_empty() || x.len() != y.len() {
        return Err(LinearError::NoEligibleUsers);
    }
    if let Some(r) = x.iter().find(|r| r.len() != width) {
        return Err(LinearError::ColumnMismatch {
            expected: width,
            got: r.len(),
        });
    }
    Ok(width)
}

/// OLS with an intercept on every column of `x`.
pub fn ols_fit(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel, LinearError> {
    let width = check_shape(x, y)?;
    let m = moments(x, y, width);
    if m.x_std.iter().any(|&s| s == 0.0) {
        return Err(LinearError::RankDeficient {
            rows: x.len(),
            cols: width,
        });
    }
    let cols: Vec<usize> = (0..width).collect();
    model_from(&m, (x, y), &cols, &default_names(width))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Column removed to reach this step; `None` for the starting model.
    pub dropped: Option<usize>,
    pub dropped_name: Option<String>,
    pub aic: f64,
    pub n_columns: usize,
}

/// Columns that are constant or exact duplicates of an earlier column.
pub fn redundant_columns(x: &[Vec<f64>]) -> Vec<usize> {
    let width = x.first().map_or(0, Vec::len);
    let mut out = Vec::new();
    for j in 0..width {
        let constant = x.iter().all(|r| r[j] == x[0][j]);
        let duplicate = (0..j).any(|i| !out.contains(&i) && x.iter().all(|r| r[i] == r[j]));
        if constant || duplicate {
            out.push(j);
        }
    }
    out
}

/// Greedy backward elimination: repeatedly drop the column whose removal
/// lowers AIC the most (ties to the smaller index) until none does.
/// Constant and duplicate columns are excluded from the start.
pub fn backward_stepwise(
    x: &[Vec<f64>],
    y: &[f64],
    names: Option<&[String]>,
) -> Result<(LinearModel, Vec<TraceStep>), LinearError> {
    let width = check_shape(x, y)?;
    let names: Vec<String> = names.map_or_else(|| default_names(width), <[String]>::to_vec);
    let m = moments(x, y, width);
    let skip = redundant_columns(x);
    let mut cols: Vec<usize> = (0..width).filter(|j| !skip.contains(j)).collect();
    let mut model = model_from(&m, (x, y), &cols, &names)?;
    let mut trace = vec![TraceStep {
        dropped: None,
        dropped_name: None,
        aic: model.aic,
        n_columns: cols.len(),
    }];
    loop {
        if cols.is_empty() {
            break;
        }
        let (coef, rss, inv_diag) = subset_fit(&m, &cols)?;
        let k_after = cols.len() + 1;
        let mut best: Option<(usize, f64)> = None;
        for (pos, (c, d)) in coef.iter().zip(&inv_diag).enumerate() {
            // exact RSS after removing one column from an OLS fit
            let rss_drop = rss + c * c / d;
            let a = aic(m.n, rss_drop, k_after);
            if best.is_none_or(|(_, ba)| a < ba) {
                best = Some((pos, a));
            }
        }
        let (pos, best_aic) = best.expect("non-empty");
        if !(best_aic < aic(m.n, rss, cols.len() + 2)) {
            break;
        }
        let dropped = cols.remove(pos);
        model = model_from(&m, (x, y), &cols, &names)?;
        trace.push(TraceStep {
            dropped: Some(dropped),
            dropped_name: Some(names[dropped].clone()),
            aic: model.aic,
            n_columns: cols.len(),
        });
    }
    Ok((model, trace))
}

/// Stepwise model on the design matrix of `histories`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearQualityModel {
    pub spec: DesignMatrixSpec,
    pub model: LinearModel,
    pub trace: Vec<TraceStep>,
}

impl LinearQualityModel {
    pub fn fit(histories: &[UserHistory], schema: &FeatureSchema) -> Result<Self, LinearError> {
        let dm = build_design_matrix(histories, schema)?;
        let names: Vec<String> = dm.spec.columns.iter().map(|c| c.name.clone()).collect();
        let (model, trace) = backward_stepwise(&dm.rows, &dm.y, Some(&names))?;
        Ok(Self {
            spec: dm.spec,
            model,
            trace,
        })
    }

    pub fn predict(&self, history: &UserHistory) -> f64 {
        self.model
            .predict(&self.spec.row(history))
            .expect("row built from own spec")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diary::DiaryRecord;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn noiseless_line() {
        let xs: Vec<f64> = (0..10).map(f64::from).collect();
        let y: Vec<f64> = xs.iter().map(|x| 2.0 * x + 1.0).collect();
        let m = ols_fit(&col(&xs), &y).unwrap();
        assert!((m.b[0] - 2.0).abs() < 1e-12);
        assert!((m.intercept - 1.0).abs() < 1e-12);
        assert!((m.r2 - 1.0).abs() < 1e-12);
        assert!((m.predict(&[3.0]).unwrap() - 7.0).abs() < 1e-12);
    }

    #[test]
    fn three_points() {
        let m = ols_fit(&col(&[0.0, 1.0, 2.0]), &[0.0, 1.0, 2.0]).unwrap();
        assert!((m.b[0] - 1.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
        assert!(m.rss < 1e-20);
        assert_eq!(m.aic, f64::NEG_INFINITY);
        assert_eq!(m.predict(&[0.0]).unwrap(), m.intercept);
    }

    #[test]
    fn aic_arithmetic() {
        assert_eq!(aic(100, 100.0, 3), 6.0);
        assert_eq!(aic(100, 37.0, 5) - aic(100, 37.0, 4), 2.0);
    }

    #[test]
    fn rank_deficiency_detected() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert!(matches!(
            ols_fit(&x, &y),
            Err(LinearError::RankDeficient { .. })
        ));
        let c: Vec<Vec<f64>> = (0..20).map(|_| vec![1.0]).collect();
        assert!(matches!(
            ols_fit(&c, &y),
            Err(LinearError::RankDeficient { .. })
        ));
    }

    #[test]
    fn column_mismatch() {
        let m = ols_fit(&col(&[0.0, 1.0, 2.0, 4.0]), &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(
            m.predict(&[1.0, 2.0]),
            Err(LinearError::ColumnMismatch { .. })
        ));
    }

    #[test]
    fn informative_columns_survive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| r[0] - 2.0 * r[1] + 0.5 * r[2] + 0.05 * rng.random_range(-1.0..1.0))
            .collect();
        let (m, trace) = backward_stepwise(&x, &y, None).unwrap();
        assert_eq!(trace.len(), 1);
        assert_eq!(m.columns, vec![0, 1, 2]);
    }

    #[test]
    fn elimination_drop_matches_refit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| r[0] + rng.random_range(-1.0..1.0))
            .collect();
        let (m, trace) = backward_stepwise(&x, &y, None).unwrap();
        for w in trace.windows(2) {
            assert!(w[1].aic < w[0].aic);
        }
        let refit: Vec<Vec<f64>> = x
            .iter()
            .map(|r| m.columns.iter().map(|&j| r[j]).collect())
            .collect();
        let direct = ols_fit(&refit, &y).unwrap();
        assert!((direct.aic - m.aic).abs() < 1e-9);
        assert_eq!(trace.last().unwrap().aic, m.aic);
    }

    #[test]
    fn redundant_columns_are_skipped() {
        let x: Vec<Vec<f64>> = (0..30)
            .map(|i| vec![i as f64, 5.0, i as f64, (i * i) as f64])
            .collect();
        assert_eq!(redundant_columns(&x), vec![1, 2]);
    }

    fn record(day: u32, alcohol: Option<f64>, q: Option<i8>) -> DiaryRecord {
        let mut r = DiaryRecord::empty("u", NaiveDate::from_ymd_opt(2017, 5, day).unwrap());
        r.set_calendar_fields();
        r.set(Variable::Alcohol, alcohol);
        r.quality = q;
        r
    }

    #[test]
    fn design_rows_and_indicators() {
        let schema = FeatureSchema::default();
        let single = UserHistory::new("a", vec![record(1, Some(1.0), Some(1))]).unwrap();
        let many = UserHistory::new(
            "b",
            (1..=12)
                .map(|d| record(d, Some(f64::from(d % 2)), Some(0)))
                .collect(),
        )
        .unwrap();
        let dm = build_design_matrix(&[single.clone(), many.clone()], &schema).unwrap();
        let spec = &dm.spec;
        let n_base = 3 * (schema.len() - 1) + 2;
        assert_eq!(spec.n_base(), n_base);
        assert_eq!(spec.width(), 2 * n_base);
        let prev_alc = spec
            .column_index(Variable::Alcohol, Position::Previous, true)
            .unwrap();
        let last_alc = spec
            .column_index(Variable::Alcohol, Position::Last, false)
            .unwrap();
        let avg_alc = spec
            .column_index(Variable::Alcohol, Position::Average, false)
            .unwrap();
        assert_eq!(dm.rows[0][prev_alc], 1.0);
        assert_eq!(dm.rows[1][prev_alc], 0.0);
        assert_eq!(dm.rows[1][last_alc], 0.0);
        // days 3..=12: five odd days
        assert_eq!(dm.rows[1][avg_alc], 0.5);
        let q_prev = spec
            .columns
            .iter()
            .position(|c| c.variable.is_none() && c.position == Position::Previous && !c.indicator)
            .unwrap();
        assert_eq!(dm.rows[1][q_prev], 0.0);
        assert!(spec
            .columns
            .iter()
            .all(|c| !(c.variable.is_none() && c.position == Position::Last)));
        assert_eq!(dm.y, vec![1.0, 0.0]);
    }

    #[test]
    fn no_eligible_users() {
        let h = UserHistory::new("a", vec![record(1, None, None)]).unwrap();
        assert!(matches!(
            build_design_matrix(&[h], &FeatureSchema::default()),
            Err(LinearError::NoEligibleUsers)
        ));
    }
}
