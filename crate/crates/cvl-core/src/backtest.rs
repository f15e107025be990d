//! Constrained Markowitz backtester: covariance estimation, control
//! projection, portfolio construction, weight smoothing, and performance /
//! half-life reporting.

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{CharacteristicPanel, PanelError};
use crate::signal::{half_life, CorrelationKind, SignalError, SignalSeries};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("insufficient return history on {date}: have {have} days, need {need}")]
    InsufficientHistory {
        date: NaiveDate,
        have: usize,
        need: usize,
    },
    #[error("non-finite return for firm {firm} on {date}")]
    NonFiniteReturn { date: NaiveDate, firm: String },
    #[error("covariance matrix on {date} is not positive definite")]
    NotPositiveDefinite { date: NaiveDate },
    #[error("control matrix on {date} is rank deficient")]
    RankDeficientControls { date: NaiveDate },
    #[error("projection identity violated on {date}: {detail}")]
    ProjectionCheckFailed { date: NaiveDate, detail: String },
    #[error("signals and panel share no evaluable dates")]
    EmptyOverlap,
    #[error("signals must be normalized before evaluation")]
    UnnormalizedSignal,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// Tolerance of the in-run projection identity checks.
const PROJECTION_TOL: f64 = 1e-8;
/// Columns are dropped as collinear below this relative residual norm.
const RANK_TOL: f64 = 1e-10;

/// Backtester parameters. The covariance estimator is an exponentially
/// weighted sample covariance shrunk toward its own diagonal with an
/// eigenvalue floor; all knobs live here so alternative estimators can be
/// swapped without touching the run contract.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BacktestConfig {
    /// EWMA half-life in trading days.
    pub cov_half_life: f64,
    /// Shrinkage intensity toward the diagonal, in [0, 1].
    pub cov_shrinkage: f64,
    /// Minimum eigenvalue of the covariance, in daily variance units.
    pub eigenvalue_floor: f64,
    /// Trailing window for portfolio-weight smoothing.
    pub smoothing_window: usize,
    /// Minimum days of return history before portfolios form.
    pub min_history: usize,
    /// Explicit sub-period boundaries; None splits the sample into thirds.
    pub subperiods: Option<Vec<(NaiveDate, NaiveDate)>>,
    /// Trading days per year for Sharpe annualization.
    pub annualization_days: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            cov_half_life: 126.0,
            cov_shrinkage: 0.5,
            eigenvalue_floor: 1e-8,
            smoothing_window: 21,
            min_history: 60,
            subperiods: None,
            annualization_days: 252.0,
        }
    }
}

impl BacktestConfig {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if !(self.cov_half_life > 0.0) {
            return Err(BacktestError::BadConfig("covariance half-life must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.cov_shrinkage) {
            return Err(BacktestError::BadConfig("shrinkage must lie in [0, 1]".into()));
        }
        if !(self.eigenvalue_floor > 0.0) {
            return Err(BacktestError::BadConfig("eigenvalue floor must be positive".into()));
        }
        if self.smoothing_window == 0 {
            return Err(BacktestError::BadConfig("smoothing window must be at least 1".into()));
        }
        if self.min_history < 2 {
            return Err(BacktestError::BadConfig("minimum history must be at least 2 days".into()));
        }
        if !(self.annualization_days > 0.0) {
            return Err(BacktestError::BadConfig("annualization must be positive".into()));
        }
        Ok(())
    }
}

/// Daily covariance estimate for one date's cross-section.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub date: NaiveDate,
    pub firm_indices: Vec<usize>,
    pub matrix: DMatrix<f64>,
}

/// Exponentially weighted zero-mean sample covariance over days `..= t`,
/// shrunk toward its diagonal and floored in eigenvalue.
///
/// Weights decay by `0.5^(1/half_life)` per day and the window is truncated
/// at four half-lives (weights renormalized), which keeps the estimator
/// O(window) per date while discarding under 7% of the raw weight mass.
pub fn ewma_covariance(
    returns: &DMatrix<f64>,
    t: usize,
    firms: &[usize],
    config: &BacktestConfig,
    date: NaiveDate,
) -> Result<DMatrix<f64>, BacktestError> {
    config.validate()?;
    let have = t + 1;
    if have < config.min_history {
        return Err(BacktestError::InsufficientHistory {
            date,
            have,
            need: config.min_history,
        });
    }
    let window = have.min((4.0 * config.cov_half_life).ceil() as usize);
    let lambda = 0.5_f64.powf(1.0 / config.cov_half_life);
    let j = firms.len();
    let mut cov = DMatrix::zeros(j, j);
    let mut total_weight = 0.0;
    let mut weight = 1.0;
    let mut row = DVector::zeros(j);
    for s in (t + 1 - window..=t).rev() {
        for (a, &firm) in firms.iter().enumerate() {
            let r = returns[(s, firm)];
            if !r.is_finite() {
                return Err(BacktestError::NonFiniteReturn {
                    date,
                    firm: format!("index {firm}"),
                });
            }
            row[a] = r;
        }
        cov.syger(weight, &row, &row, 1.0);
        total_weight += weight;
        weight *= lambda;
    }
    cov /= total_weight;
    // syger fills one triangle; mirror it.
    for a in 0..j {
        for b in (a + 1)..j {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    // Shrink toward the diagonal.
    let delta = config.cov_shrinkage;
    for a in 0..j {
        for b in 0..j {
            if a != b {
                cov[(a, b)] *= 1.0 - delta;
            }
        }
    }
    // Eigenvalue floor.
    let eig = cov.clone().symmetric_eigen();
    let needs_floor = eig.eigenvalues.iter().any(|&l| l < config.eigenvalue_floor);
    if needs_floor {
        let mut lifted = DMatrix::zeros(j, j);
        for k in 0..j {
            let lam = eig.eigenvalues[k].max(config.eigenvalue_floor);
            let q = eig.eigenvectors.column(k);
            lifted.syger(lam, &q.into_owned(), &q.into_owned(), 1.0);
        }
        for a in 0..j {
            for b in (a + 1)..j {
                lifted[(a, b)] = lifted[(b, a)];
            }
        }
        cov = lifted;
    }
    Ok(cov)
}

/// Covariance for a panel date, packaged with its firm indices.
pub fn estimate_covariance(
    panel: &CharacteristicPanel,
    t: usize,
    firms: &[usize],
    config: &BacktestConfig,
) -> Result<CovarianceEstimate, BacktestError> {
    let matrix = ewma_covariance(panel.returns(), t, firms, config, panel.dates()[t])?;
    Ok(CovarianceEstimate {
        date: panel.dates()[t],
        firm_indices: firms.to_vec(),
        matrix,
    })
}

/// Control exposures for one date: an intercept, the z-scored control
/// columns, and one indicator per industry group, with collinear columns
/// dropped by a deterministic Gram-Schmidt rank check (earlier columns win).
pub fn assemble_controls(
    panel: &CharacteristicPanel,
    t: usize,
    firms: &[usize],
) -> Result<DMatrix<f64>, BacktestError> {
    let n = firms.len();
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    let controls = panel.controls_at(t);
    for k in 0..panel.n_controls() {
        let raw: Vec<f64> = firms.iter().map(|&j| controls[(j, k)]).collect();
        if raw.iter().any(|x| !x.is_finite()) {
            continue; // control not available for the full set on this date
        }
        match crate::panel::zscore(&raw) {
            Ok(z) => cols.push(z),
            Err(PanelError::ZeroDispersion { .. }) | Err(PanelError::NotEnoughData { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let labels: Vec<i32> = firms.iter().map(|&j| panel.groups_at(t)[j]).collect();
    let mut distinct: Vec<i32> = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    for g in distinct {
        cols.push(labels.iter().map(|&l| if l == g { 1.0 } else { 0.0 }).collect());
    }
    // Deterministic rank pruning: project each column on the kept basis and
    // drop it when the residual is negligible.
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept: Vec<DVector<f64>> = Vec::new();
    for col in cols {
        let v = DVector::from_vec(col);
        let norm0 = v.norm();
        if norm0 <= 0.0 {
            continue;
        }
        let mut resid = v.clone();
        for b in &basis {
            let coef = b.dot(&resid);
            resid -= b * coef;
        }
        if resid.norm() > RANK_TOL * norm0 {
            basis.push(&resid / resid.norm());
            kept.push(v);
        }
    }
    if kept.is_empty() {
        return Err(BacktestError::RankDeficientControls {
            date: panel.dates()[t],
        });
    }
    Ok(DMatrix::from_columns(&kept))
}

/// Projection away from the controls under inverse-variance weighting:
/// `R = I - M (M' V^-1 M)^-1 M' V^-1`. `R` is idempotent and `V^-1 R f` has
/// zero exposure to every column of `M`.
pub fn projection(v: &DMatrix<f64>, m: &DMatrix<f64>, date: NaiveDate) -> Result<DMatrix<f64>, BacktestError> {
    let n = v.nrows();
    if m.ncols() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    if m.nrows() != n {
        return Err(BacktestError::BadConfig(format!(
            "controls have {} rows for {} firms",
            m.nrows(),
            n
        )));
    }
    let chol = Cholesky::new(v.clone()).ok_or(BacktestError::NotPositiveDefinite { date })?;
    let vinv_m = chol.solve(m);
    let gram = m.transpose() * &vinv_m;
    let gram_chol = Cholesky::new(gram).ok_or(BacktestError::RankDeficientControls { date })?;
    let gram_inv = gram_chol.inverse();
    Ok(DMatrix::identity(n, n) - m * gram_inv * vinv_m.transpose())
}

/// Risk-optimal weights `w = V^-1 R f`, rescaled to unit predicted portfolio
/// volatility. A zero forecast yields zero weights and sets the flag.
pub fn markowitz_weights(
    v: &DMatrix<f64>,
    r: &DMatrix<f64>,
    f: &DVector<f64>,
    date: NaiveDate,
) -> Result<(DVector<f64>, bool), BacktestError> {
    let chol = Cholesky::new(v.clone()).ok_or(BacktestError::NotPositiveDefinite { date })?;
    let rf = r * f;
    let w_raw = chol.solve(&rf);
    // w' V w = w . (V w) = w . (R f)
    let pred_var = w_raw.dot(&rf).max(0.0);
    let pred_vol = pred_var.sqrt();
    if pred_vol <= 1e-12 {
        return Ok((DVector::zeros(v.nrows()), true));
    }
    Ok((w_raw / pred_vol, false))
}

/// Equal-weighted trailing mean of the most recent target-weight vectors.
pub fn smooth_weights(history: &[DVector<f64>], window: usize) -> DVector<f64> {
    assert!(!history.is_empty(), "smoothing needs at least one day of weights");
    let take = history.len().min(window.max(1));
    let n = history[0].len();
    let mut acc = DVector::zeros(n);
    for w in &history[history.len() - take..] {
        acc += w;
    }
    acc / take as f64
}

/// Annualized Sharpe ratio with its degeneracy flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharpeCell {
    pub sharpe: f64,
    pub degenerate: bool,
}

/// Sample-standard-deviation Sharpe ratio, annualized. Degenerate samples
/// (fewer than 2 days or zero dispersion) report 0 with the flag set.
pub fn sharpe_ratio(returns: &[f64], annualization_days: f64) -> SharpeCell {
    if returns.len() < 2 {
        return SharpeCell {
            sharpe: 0.0,
            degenerate: true,
        };
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= 0.0 {
        return SharpeCell {
            sharpe: 0.0,
            degenerate: true,
        };
    }
    SharpeCell {
        sharpe: mean / sd * annualization_days.sqrt(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodDef {
    pub label: String,
    pub start: NaiveDate,
    pub end: NaiveDate,
}

/// Everything a run produces: daily returns per horizon, Sharpe and
/// half-life tables over the full sample and each sub-period, and the
/// configuration digest that ties outputs to inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub horizon_labels: Vec<String>,
    /// Dates on which portfolio returns accrue (day after formation).
    pub dates: Vec<NaiveDate>,
    /// Per horizon, aligned with `dates`.
    pub daily_returns: Vec<Vec<f64>>,
    /// Daily returns rescaled by full-sample realized volatility.
    pub scaled_returns: Vec<Vec<f64>>,
    /// First entry covers the full sample; the rest are sub-periods.
    pub periods: Vec<PeriodDef>,
    /// periods x horizons.
    pub sharpe: Vec<Vec<SharpeCell>>,
    /// periods x horizons; None when the decay estimate admits no half-life.
    pub half_life: Vec<Vec<Option<f64>>>,
    pub config_digest: String,
}

fn sub_series(series: &SignalSeries, keep: &[usize]) -> SignalSeries {
    SignalSeries {
        horizon: series.horizon,
        date_indices: keep.iter().map(|&p| series.date_indices[p]).collect(),
        dates: keep.iter().map(|&p| series.dates[p]).collect(),
        values: keep.iter().map(|&p| series.values[p].clone()).collect(),
        normalized: series.normalized,
    }
}

/// Evaluate a set of normalized signal series on a panel.
///
/// For every evaluable date the run estimates covariance, assembles the
/// control matrix, projects the forecast away from the controls, forms
/// unit-volatility Markowitz weights, smooths them over the configured
/// window, and accrues the next day's portfolio return. Dates are evaluable
/// when every series has a value, history suffices, and the cross-section is
/// large enough to support the control projection; all series share one date
/// grid so periods are comparable across horizons.
pub fn run_backtest(
    panel: &CharacteristicPanel,
    signals: &[SignalSeries],
    config: &BacktestConfig,
    config_digest: &str,
) -> Result<BacktestReport, BacktestError> {
    config.validate()?;
    if signals.is_empty() {
        return Err(BacktestError::BadConfig("no signal series supplied".into()));
    }
    if signals.iter().any(|s| !s.normalized) {
        return Err(BacktestError::UnnormalizedSignal);
    }
    let n_firms = panel.n_firms();
    let n_dates = panel.n_dates();

    // Candidate dates: present in every series, enough history, a next day
    // to accrue returns, and a workable cross-section for every series.
    let pos_by_signal: Vec<std::collections::HashMap<usize, usize>> = signals
        .iter()
        .map(|s| {
            s.date_indices
                .iter()
                .enumerate()
                .map(|(p, &t)| (t, p))
                .collect()
        })
        .collect();

    let firm_set_for = |series: &SignalSeries, pos: usize, t: usize| -> Vec<usize> {
        (0..n_firms)
            .filter(|&j| {
                series.values[pos][j].is_finite()
                    && panel.groups_at(t)[j] != crate::panel::NO_GROUP
                    && panel.returns()[(t + 1, j)].is_finite()
                    && panel
                        .controls_at(t)
                        .row(j)
                        .iter()
                        .all(|x| x.is_finite())
                    && {
                        // full history over the covariance window
                        let window = (t + 1).min((4.0 * config.cov_half_life).ceil() as usize);
                        ((t + 1 - window)..=t).all(|s| panel.returns()[(s, j)].is_finite())
                    }
            })
            .collect()
    };

    let mut shared: Vec<usize> = Vec::new();
    'date: for t in config.min_history.max(1) - 1..n_dates.saturating_sub(1) {
        for (s, series) in signals.iter().enumerate() {
            let Some(&pos) = pos_by_signal[s].get(&t) else {
                continue 'date;
            };
            let firms = firm_set_for(series, pos, t);
            // upper bound on control columns: intercept + controls + groups
            let groups: std::collections::BTreeSet<i32> =
                firms.iter().map(|&j| panel.groups_at(t)[j]).collect();
            let max_cols = 1 + panel.n_controls() + groups.len();
            if firms.len() < max_cols + 2 {
                continue 'date;
            }
        }
        shared.push(t);
    }
    if shared.is_empty() {
        return Err(BacktestError::EmptyOverlap);
    }

    let mut daily_returns: Vec<Vec<f64>> = vec![Vec::with_capacity(shared.len()); signals.len()];
    let mut histories: Vec<Vec<DVector<f64>>> = vec![Vec::new(); signals.len()];
    let mut realized_dates: Vec<NaiveDate> = Vec::with_capacity(shared.len());
    let mut shared_positions: Vec<Vec<usize>> = vec![Vec::new(); signals.len()];

    for &t in &shared {
        realized_dates.push(panel.dates()[t + 1]);
        let mut cache: Option<(Vec<usize>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = None;
        for (s, series) in signals.iter().enumerate() {
            let pos = pos_by_signal[s][&t];
            shared_positions[s].push(pos);
            let firms = firm_set_for(series, pos, t);
            let (v, m, r) = match &cache {
                Some((cached_firms, v, m, r)) if cached_firms == &firms => {
                    (v.clone(), m.clone(), r.clone())
                }
                _ => {
                    let v = ewma_covariance(panel.returns(), t, &firms, config, panel.dates()[t])?;
                    let m = assemble_controls(panel, t, &firms)?;
                    let r = projection(&v, &m, panel.dates()[t])?;
                    // In-run identity checks: R is idempotent and the final
                    // weights have no exposure to the controls.
                    let drift = (&r * &r - &r).amax();
                    if drift > PROJECTION_TOL {
                        return Err(BacktestError::ProjectionCheckFailed {
                            date: panel.dates()[t],
                            detail: format!("|R^2 - R|_max = {drift:.3e}"),
                        });
                    }
                    cache = Some((firms.clone(), v.clone(), m.clone(), r.clone()));
                    (v, m, r)
                }
            };
            let f = DVector::from_iterator(firms.len(), firms.iter().map(|&j| series.values[pos][j]));
            let (w, _zero) = markowitz_weights(&v, &r, &f, panel.dates()[t])?;
            for k in 0..m.ncols() {
                let expo = w.dot(&m.column(k).into_owned());
                let scale = w.norm() * m.column(k).norm();
                if expo.abs() > PROJECTION_TOL * scale.max(1e-300) && scale > 0.0 {
                    return Err(BacktestError::ProjectionCheckFailed {
                        date: panel.dates()[t],
                        detail: format!("|w' m_{k}| = {:.3e} (scale {scale:.3e})", expo.abs()),
                    });
                }
            }
            let mut w_global = DVector::zeros(n_firms);
            for (local, &j) in firms.iter().enumerate() {
                w_global[j] = w[local];
            }
            histories[s].push(w_global);
            let smoothed = smooth_weights(&histories[s], config.smoothing_window);
            let mut ret = 0.0;
            for j in 0..n_firms {
                let wj = smoothed[j];
                if wj != 0.0 {
                    let rj = panel.returns()[(t + 1, j)];
                    if rj.is_finite() {
                        ret += wj * rj;
                    }
                }
            }
            daily_returns[s].push(ret);
        }
    }

    // Periods: full sample first, then explicit or default thirds.
    let first = realized_dates[0];
    let last = *realized_dates.last().expect("nonempty");
    let mut periods = vec![PeriodDef {
        label: "full".into(),
        start: first,
        end: last,
    }];
    match &config.subperiods {
        Some(ranges) => {
            for (i, (s, e)) in ranges.iter().enumerate() {
                if s > e {
                    return Err(BacktestError::BadConfig(format!(
                        "sub-period {i} has start after end"
                    )));
                }
                periods.push(PeriodDef {
                    label: format!("P{}", i + 1),
                    start: *s,
                    end: *e,
                });
            }
            for d in &realized_dates {
                if !ranges.iter().any(|(s, e)| d >= s && d <= e) {
                    return Err(BacktestError::BadConfig(format!(
                        "sub-periods do not cover realized date {d}"
                    )));
                }
            }
            for i in 0..ranges.len() {
                for k in (i + 1)..ranges.len() {
                    if ranges[i].0 <= ranges[k].1 && ranges[k].0 <= ranges[i].1 {
                        return Err(BacktestError::BadConfig(format!(
                            "sub-periods {} and {} overlap",
                            i + 1,
                            k + 1
                        )));
                    }
                }
            }
        }
        None => {
            let n = realized_dates.len();
            let third = n / 3;
            if third >= 1 {
                let bounds = [0, third, 2 * third, n];
                for i in 0..3 {
                    periods.push(PeriodDef {
                        label: format!("P{}", i + 1),
                        start: realized_dates[bounds[i]],
                        end: realized_dates[bounds[i + 1] - 1],
                    });
                }
            }
        }
    }

    let ann = config.annualization_days;
    let mut sharpe = Vec::with_capacity(periods.len());
    let mut half_lives = Vec::with_capacity(periods.len());
    for period in &periods {
        let keep: Vec<usize> = realized_dates
            .iter()
            .enumerate()
            .filter(|(_, d)| **d >= period.start && **d <= period.end)
            .map(|(i, _)| i)
            .collect();
        let mut row_sharpe = Vec::with_capacity(signals.len());
        let mut row_hl = Vec::with_capacity(signals.len());
        for (s, series) in signals.iter().enumerate() {
            let rets: Vec<f64> = keep.iter().map(|&i| daily_returns[s][i]).collect();
            row_sharpe.push(sharpe_ratio(&rets, ann));
            let positions: Vec<usize> = keep.iter().map(|&i| shared_positions[s][i]).collect();
            let sub = sub_series(series, &positions);
            row_hl.push(half_life(&sub, CorrelationKind::Pearson).ok());
        }
        sharpe.push(row_sharpe);
        half_lives.push(row_hl);
    }

    let scaled_returns = daily_returns
        .iter()
        .map(|rets| {
            let cell = sharpe_ratio(rets, ann);
            if cell.degenerate {
                vec![0.0; rets.len()]
            } else {
                let n = rets.len() as f64;
                let mean = rets.iter().sum::<f64>() / n;
                let sd = (rets.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                rets.iter().map(|r| r / sd).collect()
            }
        })
        .collect();

    Ok(BacktestReport {
        horizon_labels: signals.iter().map(|s| s.horizon.label()).collect(),
        dates: realized_dates,
        daily_returns,
        scaled_returns,
        periods,
        sharpe,
        half_life: half_lives,
        config_digest: config_digest.to_string(),
    })
}
