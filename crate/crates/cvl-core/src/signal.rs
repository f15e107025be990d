//! Momentum-spillover signals: linkage weights from similarity matrices,
//! window returns of linked firms, per-horizon and combined signals, and
//! half-life diagnostics.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricsError, SimilarityMatrix};
use crate::panel::{group_demean, zscore, CharacteristicPanel, PanelError};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error("firm {firm} on {date} has no positive linkage weight (isolated node)")]
    IsolatedFirm { date: NaiveDate, firm: String },
    #[error("firm id {0} is not part of the panel")]
    UnknownFirm(String),
    #[error("signal series needs at least 2 dates")]
    NotEnoughDates,
    #[error("signal decay d = {d} admits no half-life (need 0 < d < 1)")]
    HalfLifeUndefined { d: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// Signal horizon: the lookback of the input returns, or the average of all
/// configured lookbacks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Horizon {
    Days(usize),
    Combined,
}

impl Horizon {
    pub fn label(&self) -> String {
        match self {
            Horizon::Days(d) => d.to_string(),
            Horizon::Combined => "combined".to_string(),
        }
    }

    pub fn parse(s: &str) -> Result<Self, SignalError> {
        if s == "combined" {
            Ok(Horizon::Combined)
        } else {
            s.parse::<usize>()
                .map(Horizon::Days)
                .map_err(|_| SignalError::BadConfig(format!("unknown horizon label '{s}'")))
        }
    }
}

/// A per-date, firm-indexed signal. Values are aligned with the panel's
/// global firm list; NaN marks firms without a signal on that date.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSeries {
    pub horizon: Horizon,
    /// Indices into the panel's date axis, strictly increasing.
    pub date_indices: Vec<usize>,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<Vec<f64>>,
    pub normalized: bool,
}

/// Fraction of a return window that may be missing before the firm is
/// excluded for that date and horizon.
pub const MAX_MISSING_FRACTION: f64 = 0.10;

/// Row-normalize a similarity matrix into linkage weights. Every row sums to
/// one; the diagonal stays zero, so a firm never links to itself.
pub fn linkage_weights(sim: &SimilarityMatrix) -> Result<DMatrix<f64>, SignalError> {
    let j = sim.len();
    let mut out = DMatrix::zeros(j, j);
    for a in 0..j {
        let row_sum: f64 = (0..j).map(|b| sim.values()[(a, b)]).sum();
        if row_sum <= 0.0 {
            return Err(SignalError::IsolatedFirm {
                date: sim.date,
                firm: sim.firms[a].clone(),
            });
        }
        for b in 0..j {
            out[(a, b)] = sim.values()[(a, b)] / row_sum;
        }
    }
    Ok(out)
}

/// Cumulative simple return of `firm` compounded over days `t-l ..= t-1`.
/// Returns None when the window extends before the sample or when more than
/// [`MAX_MISSING_FRACTION`] of its days are missing; fewer gaps are skipped.
pub fn window_return(returns: &DMatrix<f64>, firm: usize, t: usize, l: usize) -> Option<f64> {
    if l == 0 || t < l {
        return None;
    }
    let mut acc = 1.0;
    let mut missing = 0usize;
    for s in (t - l)..t {
        let r = returns[(s, firm)];
        if r.is_finite() {
            acc *= 1.0 + r;
        } else {
            missing += 1;
        }
    }
    if (missing as f64) > MAX_MISSING_FRACTION * (l as f64) {
        None
    } else {
        Some(acc - 1.0)
    }
}

/// Weighted average of the linked firms' window returns. Firms whose window
/// return is unavailable drop out of the row and the remaining weights are
/// renormalized; a row with no available linked firm yields NaN.
pub fn spillover_signal(weights: &DMatrix<f64>, window_returns: &[Option<f64>]) -> Vec<f64> {
    let j = weights.nrows();
    debug_assert_eq!(window_returns.len(), j);
    (0..j)
        .map(|a| {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for (b, wr) in window_returns.iter().enumerate() {
                if let Some(r) = wr {
                    let w = weights[(a, b)];
                    acc += w * r;
                    mass += w;
                }
            }
            if mass > 0.0 {
                acc / mass
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Per-firm average of the per-horizon window returns; None unless every
/// horizon is available for the firm.
pub fn combined_window_returns(per_horizon: &[Vec<Option<f64>>]) -> Vec<Option<f64>> {
    debug_assert!(!per_horizon.is_empty());
    let j = per_horizon[0].len();
    (0..j)
        .map(|i| {
            let mut acc = 0.0;
            for h in per_horizon {
                acc += h[i]?;
            }
            Some(acc / per_horizon.len() as f64)
        })
        .collect()
}

/// Demean by industry group and z-score each date's cross-section. Dates
/// whose raw signal has fewer than two finite values stay unavailable; a
/// date with values but zero dispersion is an error.
pub fn normalize_signal(series: &SignalSeries, panel: &CharacteristicPanel) -> Result<SignalSeries, SignalError> {
    let mut out = series.clone();
    for (pos, &t) in series.date_indices.iter().enumerate() {
        if series.values[pos].iter().filter(|x| x.is_finite()).count() < 2 {
            continue;
        }
        let labels = panel.groups_at(t);
        let demeaned = group_demean(&series.values[pos], labels);
        out.values[pos] = zscore(&demeaned)?;
    }
    out.normalized = true;
    Ok(out)
}

/// Correlation used by the half-life diagnostic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationKind {
    Pearson,
    Spearman,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for k in 0..n {
        let dx = x[k] - mx;
        let dy = y[k] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite values"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        // average ranks over ties
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Mean day-over-day cross-sectional correlation of the series.
pub fn signal_decay(series: &SignalSeries, kind: CorrelationKind) -> Result<f64, SignalError> {
    if series.values.len() < 2 {
        return Err(SignalError::NotEnoughDates);
    }
    let mut corrs = Vec::new();
    for p in 1..series.values.len() {
        let prev = &series.values[p - 1];
        let cur = &series.values[p];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (a, b) in prev.iter().zip(cur) {
            if a.is_finite() && b.is_finite() {
                xs.push(*a);
                ys.push(*b);
            }
        }
        let pair = match kind {
            CorrelationKind::Pearson => pearson(&xs, &ys),
            CorrelationKind::Spearman => {
                if xs.len() < 2 {
                    None
                } else {
                    pearson(&ranks(&xs), &ranks(&ys))
                }
            }
        };
        if let Some(c) = pair {
            corrs.push(c);
        }
    }
    if corrs.is_empty() {
        return Err(SignalError::NotEnoughDates);
    }
    Ok(corrs.iter().sum::<f64>() / corrs.len() as f64)
}

/// Half-life in days: `ln(0.5) / ln(d)` where `d` is the mean day-over-day
/// cross-sectional autocorrelation. Defined only for 0 < d < 1.
pub fn half_life(series: &SignalSeries, kind: CorrelationKind) -> Result<f64, SignalError> {
    let d = signal_decay(series, kind)?;
    half_life_from_decay(d)
}

pub fn half_life_from_decay(d: f64) -> Result<f64, SignalError> {
    if !(d > 0.0 && d < 1.0) {
        return Err(SignalError::HalfLifeUndefined { d });
    }
    Ok(0.5_f64.ln() / d.ln())
}

/// Horizon set and tolerances used when assembling signal series.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SignalConfig {
    pub horizons: Vec<usize>,
    pub include_combined: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            horizons: vec![21, 63, 126, 252],
            include_combined: true,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<(), SignalError> {
        if self.horizons.is_empty() {
            return Err(SignalError::BadConfig("at least one horizon is required".into()));
        }
        if self.horizons.iter().any(|&h| h == 0) {
            return Err(SignalError::BadConfig("horizons must be positive".into()));
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Horizon> {
        let mut out: Vec<Horizon> = self.horizons.iter().map(|&h| Horizon::Days(h)).collect();
        if self.include_combined {
            out.push(Horizon::Combined);
        }
        out
    }
}

/// Build raw (un-normalized) signal series from per-seed similarity matrices.
///
/// `sims_per_seed[s][p]` is seed `s`'s similarity matrix for the date at
/// `date_indices[p]`, carrying the firm ids of that date's cross-section.
/// Per-seed raw signals are averaged with equal weight; normalization is a
/// separate, later step so that averaging happens on raw signal units.
pub fn build_signal_series(
    panel: &CharacteristicPanel,
    date_indices: &[usize],
    sims_per_seed: &[Vec<SimilarityMatrix>],
    config: &SignalConfig,
) -> Result<Vec<SignalSeries>, SignalError> {
    config.validate()?;
    if sims_per_seed.is_empty() {
        return Err(SignalError::BadConfig("no similarity matrices supplied".into()));
    }
    for sims in sims_per_seed {
        if sims.len() != date_indices.len() {
            return Err(SignalError::BadConfig(format!(
                "seed carries {} similarity matrices for {} dates",
                sims.len(),
                date_indices.len()
            )));
        }
    }
    let firm_index: std::collections::HashMap<&str, usize> = panel
        .firms()
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i))
        .collect();

    let horizons = config.labels();
    let n_firms = panel.n_firms();
    let mut values: Vec<Vec<Vec<f64>>> =
        vec![vec![vec![f64::NAN; n_firms]; date_indices.len()]; horizons.len()];

    for (pos, &t) in date_indices.iter().enumerate() {
        // Per-date accumulation across seeds: sum then divide.
        let mut acc: Vec<Vec<f64>> = vec![vec![0.0; n_firms]; horizons.len()];
        let mut cnt: Vec<Vec<usize>> = vec![vec![0; n_firms]; horizons.len()];
        for sims in sims_per_seed {
            let sim = &sims[pos];
            let global: Vec<usize> = sim
                .firms
                .iter()
                .map(|name| {
                    firm_index
                        .get(name.as_str())
                        .copied()
                        .ok_or_else(|| SignalError::UnknownFirm(name.clone()))
                })
                .collect::<Result<_, _>>()?;
            let weights = linkage_weights(sim)?;
            let per_horizon: Vec<Vec<Option<f64>>> = config
                .horizons
                .iter()
                .map(|&l| {
                    global
                        .iter()
                        .map(|&j| window_return(panel.returns(), j, t, l))
                        .collect()
                })
                .collect();
            for (hi, wr) in per_horizon.iter().enumerate() {
                let raw = spillover_signal(&weights, wr);
                for (local, &j) in global.iter().enumerate() {
                    if raw[local].is_finite() {
                        acc[hi][j] += raw[local];
                        cnt[hi][j] += 1;
                    }
                }
            }
            if config.include_combined {
                let comb = combined_window_returns(&per_horizon);
                let raw = spillover_signal(&weights, &comb);
                let hi = horizons.len() - 1;
                for (local, &j) in global.iter().enumerate() {
                    if raw[local].is_finite() {
                        acc[hi][j] += raw[local];
                        cnt[hi][j] += 1;
                    }
                }
            }
        }
        let n_seeds = sims_per_seed.len();
        for hi in 0..horizons.len() {
            for j in 0..n_firms {
                // a firm's ensemble signal exists only when every seed produced one
                if cnt[hi][j] == n_seeds {
                    values[hi][pos][j] = acc[hi][j] / n_seeds as f64;
                }
            }
        }
    }

    Ok(horizons
        .into_iter()
        .zip(values)
        .map(|(horizon, vals)| SignalSeries {
            horizon,
            date_indices: date_indices.to_vec(),
            dates: date_indices.iter().map(|&t| panel.dates()[t]).collect(),
            values: vals,
            normalized: false,
        })
        .collect())
}
