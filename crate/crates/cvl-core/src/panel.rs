//! Cross-sectional data panel: ingestion layout, preprocessing, target
//! construction, and a synthetic market generator with planted linkages.
//!
//! A panel holds a date-by-firm-by-characteristic tensor together with
//! industry group labels, daily returns, control exposures, and an optional
//! training target. Missing cells are represented as NaN; a firm is part of a
//! date's cross-section only when all of its characteristics and its group
//! label are present.

use chrono::{Datelike, NaiveDate, Weekday};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::derive_seed;

/// Group label marking a missing industry code.
pub const NO_GROUP: i32 = -1;

/// Winsorization bounds applied by [`preprocess`].
pub const WINSOR_LOWER_PCT: f64 = 1.0;
pub const WINSOR_UPPER_PCT: f64 = 99.0;

/// Minimum cross-section size a date must have to survive preprocessing.
pub const DEFAULT_MIN_FIRMS: usize = 10;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("need at least {needed} finite values, got {got}")]
    NotEnoughData { needed: usize, got: usize },
    #[error("zero cross-sectional dispersion in {context}")]
    ZeroDispersion { context: String },
    #[error("date {date} has {available} firms, below the minimum of {minimum}")]
    TooFewFirms {
        date: NaiveDate,
        available: usize,
        minimum: usize,
    },
    #[error("invalid percentile bounds {lower}/{upper}")]
    BadPercentiles { lower: f64, upper: f64 },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// Date x firm x characteristic panel with aligned returns and controls.
#[derive(Debug, Clone)]
pub struct CharacteristicPanel {
    dates: Vec<NaiveDate>,
    firms: Vec<String>,
    characteristic_names: Vec<String>,
    control_names: Vec<String>,
    /// One firms x C matrix per date; NaN marks a missing cell.
    characteristics: Vec<DMatrix<f64>>,
    /// One firms x K matrix per date.
    controls: Vec<DMatrix<f64>>,
    /// Per-date industry label per firm; [`NO_GROUP`] when missing.
    groups: Vec<Vec<i32>>,
    /// T x J daily simple returns; row t is the return realized over day t.
    returns: DMatrix<f64>,
    /// Optional T x J training target.
    target: Option<DMatrix<f64>>,
}

fn matrix_bits_eq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Bitwise equality so that missing (NaN) cells compare equal; used by the
/// determinism contracts.
impl PartialEq for CharacteristicPanel {
    fn eq(&self, other: &Self) -> bool {
        self.dates == other.dates
            && self.firms == other.firms
            && self.characteristic_names == other.characteristic_names
            && self.control_names == other.control_names
            && self.groups == other.groups
            && matrix_bits_eq(&self.returns, &other.returns)
            && self.characteristics.len() == other.characteristics.len()
            && self
                .characteristics
                .iter()
                .zip(&other.characteristics)
                .all(|(a, b)| matrix_bits_eq(a, b))
            && self.controls.len() == other.controls.len()
            && self.controls.iter().zip(&other.controls).all(|(a, b)| matrix_bits_eq(a, b))
            && match (&self.target, &other.target) {
                (None, None) => true,
                (Some(a), Some(b)) => matrix_bits_eq(a, b),
                _ => false,
            }
    }
}

impl CharacteristicPanel {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        dates: Vec<NaiveDate>,
        firms: Vec<String>,
        characteristic_names: Vec<String>,
        control_names: Vec<String>,
        characteristics: Vec<DMatrix<f64>>,
        controls: Vec<DMatrix<f64>>,
        groups: Vec<Vec<i32>>,
        returns: DMatrix<f64>,
    ) -> Result<Self, PanelError> {
        let t = dates.len();
        let j = firms.len();
        let c = characteristic_names.len();
        let k = control_names.len();
        if characteristics.len() != t || controls.len() != t || groups.len() != t {
            return Err(PanelError::Shape(format!(
                "per-date blocks must cover {t} dates (got {}, {}, {})",
                characteristics.len(),
                controls.len(),
                groups.len()
            )));
        }
        for (idx, m) in characteristics.iter().enumerate() {
            if m.nrows() != j || m.ncols() != c {
                return Err(PanelError::Shape(format!(
                    "characteristics[{idx}] is {}x{}, expected {j}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        for (idx, m) in controls.iter().enumerate() {
            if m.nrows() != j || m.ncols() != k {
                return Err(PanelError::Shape(format!(
                    "controls[{idx}] is {}x{}, expected {j}x{k}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        if groups.iter().any(|g| g.len() != j) {
            return Err(PanelError::Shape("group rows must cover all firms".into()));
        }
        if returns.nrows() != t || returns.ncols() != j {
            return Err(PanelError::Shape(format!(
                "returns is {}x{}, expected {t}x{j}",
                returns.nrows(),
                returns.ncols()
            )));
        }
        let mut sorted = dates.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != dates.len() || sorted != dates {
            return Err(PanelError::Shape("dates must be strictly increasing".into()));
        }
        Ok(Self {
            dates,
            firms,
            characteristic_names,
            control_names,
            characteristics,
            controls,
            groups,
            returns,
            target: None,
        })
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn n_firms(&self) -> usize {
        self.firms.len()
    }

    pub fn n_characteristics(&self) -> usize {
        self.characteristic_names.len()
    }

    pub fn n_controls(&self) -> usize {
        self.control_names.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn firms(&self) -> &[String] {
        &self.firms
    }

    pub fn characteristic_names(&self) -> &[String] {
        &self.characteristic_names
    }

    pub fn control_names(&self) -> &[String] {
        &self.control_names
    }

    pub fn characteristics_at(&self, t: usize) -> &DMatrix<f64> {
        &self.characteristics[t]
    }

    pub fn controls_at(&self, t: usize) -> &DMatrix<f64> {
        &self.controls[t]
    }

    pub fn groups_at(&self, t: usize) -> &[i32] {
        &self.groups[t]
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    pub fn target(&self) -> Option<&DMatrix<f64>> {
        self.target.as_ref()
    }

    pub fn set_target(&mut self, target: DMatrix<f64>) -> Result<(), PanelError> {
        if target.nrows() != self.n_dates() || target.ncols() != self.n_firms() {
            return Err(PanelError::Shape("target shape must match dates x firms".into()));
        }
        self.target = Some(target);
        Ok(())
    }

    /// Characteristic vector of firm `j` on date `t`, or None if any entry is
    /// missing.
    pub fn characteristic_vector(&self, t: usize, j: usize) -> Option<Vec<f64>> {
        let row = self.characteristics[t].row(j);
        let v: Vec<f64> = row.iter().copied().collect();
        if v.iter().all(|x| x.is_finite()) {
            Some(v)
        } else {
            None
        }
    }

    pub fn target_at(&self, t: usize, j: usize) -> Option<f64> {
        self.target
            .as_ref()
            .map(|m| m[(t, j)])
            .filter(|x| x.is_finite())
    }

    /// Firms forming the cross-section on date `t`: all characteristics
    /// present and a group label available.
    pub fn available_firms(&self, t: usize) -> Vec<usize> {
        (0..self.n_firms())
            .filter(|&j| {
                self.groups[t][j] != NO_GROUP
                    && self.characteristics[t].row(j).iter().all(|x| x.is_finite())
            })
            .collect()
    }

    /// Copy of the rows `firms` of the characteristics matrix on date `t`.
    pub fn characteristics_slice(&self, t: usize, firms: &[usize]) -> DMatrix<f64> {
        let c = self.n_characteristics();
        DMatrix::from_fn(firms.len(), c, |r, col| self.characteristics[t][(firms[r], col)])
    }

    /// Restrict the panel to a contiguous date range.
    pub fn slice_dates(&self, start: usize, end: usize) -> Result<Self, PanelError> {
        if start >= end || end > self.n_dates() {
            return Err(PanelError::Shape(format!(
                "invalid date slice {start}..{end} of {}",
                self.n_dates()
            )));
        }
        Ok(Self {
            dates: self.dates[start..end].to_vec(),
            firms: self.firms.clone(),
            characteristic_names: self.characteristic_names.clone(),
            control_names: self.control_names.clone(),
            characteristics: self.characteristics[start..end].to_vec(),
            controls: self.controls[start..end].to_vec(),
            groups: self.groups[start..end].to_vec(),
            returns: self.returns.rows(start, end - start).into_owned(),
            target: self
                .target
                .as_ref()
                .map(|m| m.rows(start, end - start).into_owned()),
        })
    }
}

/// Empirical percentile of a sample, by linear interpolation between closest
/// ranks: rank `p/100 * (n-1)` on the sorted values. This convention is part
/// of the file-format contract because winsorization bounds depend on it.
pub fn percentile(sorted: &[f64], pct: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=100.0).contains(&pct));
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = pct / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Clip values to the [lower_pct, upper_pct] empirical percentiles of their
/// finite entries. NaN entries pass through unchanged.
pub fn winsorize(values: &[f64], lower_pct: f64, upper_pct: f64) -> Result<Vec<f64>, PanelError> {
    if !(0.0..=100.0).contains(&lower_pct) || !(0.0..=100.0).contains(&upper_pct) || lower_pct >= upper_pct {
        return Err(PanelError::BadPercentiles {
            lower: lower_pct,
            upper: upper_pct,
        });
    }
    let mut finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.len() < 2 {
        return Err(PanelError::NotEnoughData {
            needed: 2,
            got: finite.len(),
        });
    }
    finite.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let lo = percentile(&finite, lower_pct);
    let hi = percentile(&finite, upper_pct);
    Ok(values
        .iter()
        .map(|&x| if x.is_finite() { x.clamp(lo, hi) } else { x })
        .collect())
}

/// Cross-sectional z-score over finite entries, using the population
/// (divide-by-n) standard deviation. NaN entries stay NaN.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>, PanelError> {
    zscore_in(values, "cross-section")
}

fn zscore_in(values: &[f64], context: &str) -> Result<Vec<f64>, PanelError> {
    let finite: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if finite.len() < 2 {
        return Err(PanelError::NotEnoughData {
            needed: 2,
            got: finite.len(),
        });
    }
    let n = finite.len() as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd <= 0.0 {
        return Err(PanelError::ZeroDispersion {
            context: context.to_string(),
        });
    }
    Ok(values
        .iter()
        .map(|&x| if x.is_finite() { (x - mean) / sd } else { x })
        .collect())
}

/// Subtract the per-label mean from each finite value. Values sharing a label
/// form one group; a singleton group demeans to zero.
pub fn group_demean(values: &[f64], labels: &[i32]) -> Vec<f64> {
    debug_assert_eq!(values.len(), labels.len());
    let mut sums: std::collections::BTreeMap<i32, (f64, usize)> = std::collections::BTreeMap::new();
    for (&v, &g) in values.iter().zip(labels) {
        if v.is_finite() {
            let e = sums.entry(g).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    values
        .iter()
        .zip(labels)
        .map(|(&v, &g)| {
            if v.is_finite() {
                let (s, n) = sums[&g];
                v - s / n as f64
            } else {
                v
            }
        })
        .collect()
}

/// Full preprocessing pass: per date and characteristic, demean by industry
/// group, z-score, then winsorize at the 1st/99th percentiles. Firms missing
/// any characteristic (or a group label) are dropped from that date's
/// cross-section. Group means are exactly zero and the pooled standard
/// deviation exactly one immediately after the z-score step; the final
/// winsorization can re-clip tails, which is why repeated application is only
/// idempotent up to boundary effects.
pub fn preprocess(panel: &CharacteristicPanel, min_firms: usize) -> Result<CharacteristicPanel, PanelError> {
    let mut out = panel.clone();
    let c = panel.n_characteristics();
    for t in 0..panel.n_dates() {
        let avail = panel.available_firms(t);
        if avail.len() < min_firms {
            return Err(PanelError::TooFewFirms {
                date: panel.dates[t],
                available: avail.len(),
                minimum: min_firms,
            });
        }
        let mask: Vec<bool> = {
            let mut m = vec![false; panel.n_firms()];
            for &j in &avail {
                m[j] = true;
            }
            m
        };
        // Drop incomplete firms from the date's cross-section entirely.
        for j in 0..panel.n_firms() {
            if !mask[j] {
                for col in 0..c {
                    out.characteristics[t][(j, col)] = f64::NAN;
                }
            }
        }
        let labels: Vec<i32> = avail.iter().map(|&j| panel.groups[t][j]).collect();
        for col in 0..c {
            let column: Vec<f64> = avail.iter().map(|&j| out.characteristics[t][(j, col)]).collect();
            let demeaned = group_demean(&column, &labels);
            let scored = zscore_in(
                &demeaned,
                &format!(
                    "characteristic '{}' on {}",
                    panel.characteristic_names[col], panel.dates[t]
                ),
            )?;
            let clipped = winsorize(&scored, WINSOR_LOWER_PCT, WINSOR_UPPER_PCT)?;
            for (r, &j) in avail.iter().enumerate() {
                out.characteristics[t][(j, col)] = clipped[r];
            }
        }
    }
    Ok(out)
}

/// Cumulative simple return compounded over `returns[range]`, or None if any
/// day in the window is missing.
fn compound(returns: &DMatrix<f64>, firm: usize, from: usize, to_incl: usize) -> Option<f64> {
    let mut acc = 1.0;
    for t in from..=to_incl {
        let r = returns[(t, firm)];
        if !r.is_finite() {
            return None;
        }
        acc *= 1.0 + r;
    }
    Some(acc - 1.0)
}

/// Attach the training target: the cross-sectionally z-scored cumulative
/// simple return over days `t+1 ..= t+horizon`. Dates (or firms) without the
/// full forward window carry no target; they are unavailable, not errors.
pub fn build_target(panel: &CharacteristicPanel, horizon: usize) -> Result<CharacteristicPanel, PanelError> {
    if horizon == 0 {
        return Err(PanelError::BadConfig("target horizon must be positive".into()));
    }
    let t_count = panel.n_dates();
    let j_count = panel.n_firms();
    let mut target = DMatrix::from_element(t_count, j_count, f64::NAN);
    for t in 0..t_count {
        if t + horizon >= t_count {
            continue;
        }
        let mut cum = vec![f64::NAN; j_count];
        for j in panel.available_firms(t) {
            if let Some(r) = compound(&panel.returns, j, t + 1, t + horizon) {
                cum[j] = r;
            }
        }
        let finite = cum.iter().filter(|x| x.is_finite()).count();
        if finite < 2 {
            continue;
        }
        let scored = zscore_in(&cum, &format!("forward returns on {}", panel.dates[t]))?;
        for j in 0..j_count {
            target[(t, j)] = scored[j];
        }
    }
    let mut out = panel.clone();
    out.target = Some(target);
    Ok(out)
}

// --- synthetic market generator ------------------------------------------

/// Configuration for the planted-linkage synthetic market.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticConfig {
    pub firms: usize,
    pub dates: usize,
    pub characteristics: usize,
    pub clusters: usize,
    /// Share of characteristic variance common to a cluster, in [0, 1].
    pub intra_cluster_correlation: f64,
    /// Fraction of a leader's past return transmitted to followers, in [0, 1].
    pub lead_lag_strength: f64,
    /// Daily idiosyncratic return volatility.
    pub noise_volatility: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            firms: 50,
            dates: 600,
            characteristics: 6,
            clusters: 5,
            intra_cluster_correlation: 0.75,
            lead_lag_strength: 0.5,
            noise_volatility: 0.02,
            seed: 42,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), PanelError> {
        if self.firms == 0 || self.dates == 0 || self.characteristics == 0 || self.clusters == 0 {
            return Err(PanelError::BadConfig("all counts must be positive".into()));
        }
        if self.clusters > self.firms {
            return Err(PanelError::BadConfig(format!(
                "cluster count {} exceeds firm count {}",
                self.clusters, self.firms
            )));
        }
        if !(0.0..=1.0).contains(&self.lead_lag_strength) {
            return Err(PanelError::BadConfig("lead-lag strength must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.intra_cluster_correlation) {
            return Err(PanelError::BadConfig(
                "intra-cluster correlation must lie in [0, 1]".into(),
            ));
        }
        if self.noise_volatility <= 0.0 {
            return Err(PanelError::BadConfig("noise volatility must be positive".into()));
        }
        Ok(())
    }
}

/// Daily noise added to the otherwise static firm characteristics.
const CHAR_TEMPORAL_NOISE: f64 = 0.3;
/// Volatility of the market component shared by every firm (beta 1).
const MARKET_VOL: f64 = 0.008;
/// Followers absorb the leader's returns lagged by this inclusive range.
const SPILL_LAG_MIN: usize = 2;
const SPILL_LAG_MAX: usize = 11;
/// Industry labels are assigned independently of clusters.
const INDUSTRY_COUNT: usize = 4;
/// Momentum control: compounded return over `t-126 ..= t-22`.
const MOMENTUM_LOOKBACK: usize = 126;
const MOMENTUM_SKIP: usize = 21;

/// Cluster of firm `j` under the generator's layout.
pub fn synthetic_cluster_of(j: usize, clusters: usize) -> usize {
    j % clusters
}

/// True if firm `j` is its cluster's designated leader.
pub fn synthetic_is_leader(j: usize, clusters: usize) -> bool {
    j < clusters
}

/// Generate a panel in which firms within a cluster have similar
/// characteristic vectors and followers' returns echo their cluster leader's
/// returns at lags 2..=11 days, scaled by `lead_lag_strength`.
///
/// Industry groups are assigned independently of clusters so that industry
/// demeaning cannot erase the planted structure, mirroring the role the
/// preprocessing is meant to play on real data.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<CharacteristicPanel, PanelError> {
    config.validate()?;
    let j_count = config.firms;
    let t_count = config.dates;
    let c_count = config.characteristics;
    let g_count = config.clusters;

    let dates = weekday_sequence(NaiveDate::from_ymd_opt(2014, 1, 2).unwrap(), t_count);
    let firms: Vec<String> = (0..j_count).map(|j| format!("F{j:04}")).collect();
    let characteristic_names: Vec<String> = (0..c_count).map(|c| format!("char_{c}")).collect();
    let control_names = vec!["size".to_string(), "momentum".to_string()];

    // Independent streams so that structure blocks cannot interact.
    let mut rng_centers = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 0));
    let mut rng_bases = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut rng_chars = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 2));
    let mut rng_market = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 3));
    let mut rng_idio = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 4));
    let mut rng_size = ChaCha20Rng::seed_from_u64(derive_seed(config.seed, 5));

    let normal = |rng: &mut ChaCha20Rng| -> f64 { rng.sample(StandardNormal) };

    let centers: Vec<Vec<f64>> = (0..g_count)
        .map(|_| (0..c_count).map(|_| normal(&mut rng_centers)).collect())
        .collect();
    let lambda = config.intra_cluster_correlation;
    let bases: Vec<Vec<f64>> = (0..j_count)
        .map(|j| {
            let g = synthetic_cluster_of(j, g_count);
            (0..c_count)
                .map(|c| lambda.sqrt() * centers[g][c] + (1.0 - lambda).sqrt() * normal(&mut rng_bases))
                .collect()
        })
        .collect();

    let characteristics: Vec<DMatrix<f64>> = (0..t_count)
        .map(|_| {
            DMatrix::from_fn(j_count, c_count, |j, c| {
                bases[j][c] + CHAR_TEMPORAL_NOISE * normal(&mut rng_chars)
            })
        })
        .collect();

    // Returns: market + idiosyncratic noise, plus the lagged-leader echo for
    // followers. Generated date-major so followers can see leader history.
    let vol = config.noise_volatility;
    let strength = config.lead_lag_strength;
    let mut returns = DMatrix::zeros(t_count, j_count);
    for t in 0..t_count {
        let market = MARKET_VOL * normal(&mut rng_market);
        // Leaders first: their day-t returns never depend on followers.
        for j in 0..j_count {
            if synthetic_is_leader(j, g_count) {
                returns[(t, j)] = market + vol * normal(&mut rng_idio);
            }
        }
        for j in 0..j_count {
            if synthetic_is_leader(j, g_count) {
                continue;
            }
            let leader = synthetic_cluster_of(j, g_count);
            let mut echo = 0.0;
            let mut n_lags = 0usize;
            for lag in SPILL_LAG_MIN..=SPILL_LAG_MAX {
                if t >= lag {
                    echo += returns[(t - lag, leader)];
                    n_lags += 1;
                }
            }
            if n_lags > 0 {
                echo /= (SPILL_LAG_MAX - SPILL_LAG_MIN + 1) as f64;
            }
            returns[(t, j)] = market + strength * echo + vol * normal(&mut rng_idio);
        }
    }

    let sizes: Vec<f64> = (0..j_count).map(|_| normal(&mut rng_size)).collect();
    let controls: Vec<DMatrix<f64>> = (0..t_count)
        .map(|t| {
            DMatrix::from_fn(j_count, 2, |j, k| {
                if k == 0 {
                    sizes[j]
                } else if t >= MOMENTUM_LOOKBACK {
                    compound(&returns, j, t - MOMENTUM_LOOKBACK, t - MOMENTUM_SKIP - 1)
                        .unwrap_or(f64::NAN)
                } else {
                    f64::NAN
                }
            })
        })
        .collect();

    let groups: Vec<Vec<i32>> = (0..t_count)
        .map(|_| {
            (0..j_count)
                .map(|j| ((j / g_count) % INDUSTRY_COUNT) as i32)
                .collect()
        })
        .collect();

    CharacteristicPanel::new(
        dates,
        firms,
        characteristic_names,
        control_names,
        characteristics,
        controls,
        groups,
        returns,
    )
}

/// Consecutive weekdays starting at `start`.
pub fn weekday_sequence(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if d.weekday() != Weekday::Sat && d.weekday() != Weekday::Sun {
            out.push(d);
        }
        d = d.succ_opt().expect("date overflow");
    }
    out
}
