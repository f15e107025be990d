//! End-to-end orchestration: run configuration, configuration digests, and
//! the in-memory composition of generate, preprocess, train, similarity,
//! signal, and backtest stages.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backtest::{run_backtest, BacktestConfig, BacktestError, BacktestReport};
use crate::metrics::{
    bures_distance, embed_rows, pairwise_euclidean, pairwise_qcml, similarity_matrix, MetricsError,
    SimilarityMatrix,
};
use crate::panel::{build_target, generate_synthetic, preprocess, CharacteristicPanel, PanelError, SyntheticConfig};
use crate::qcml::{train_ensemble, QcmlError, QcmlModel, TrainingConfig};
use crate::seed::derive_seed;
use crate::signal::{build_signal_series, normalize_signal, SignalConfig, SignalError, SignalSeries};

/// Seed streams hanging off the global seed.
const STREAM_SYNTHETIC: u64 = 1;
const STREAM_TRAINING: u64 = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Panel(#[from] PanelError),
    #[error(transparent)]
    Qcml(#[from] QcmlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Backtest(#[from] BacktestError),
    #[error("invalid run configuration: {0}")]
    BadConfig(String),
}

/// Similarity family driving the linkage weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Euclidean,
    Qcml,
}

impl Measure {
    pub fn label(&self) -> &'static str {
        match self {
            Measure::Euclidean => "euclidean",
            Measure::Qcml => "qcml",
        }
    }
}

/// Full run configuration. The digest of the scientific parameters is stamped
/// into every output file; output locations and thread counts deliberately do
/// not participate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; every stream below derives from it.
    pub seed: u64,
    pub measures: Vec<Measure>,
    /// Synthetic generator parameters. Its `seed` field is derived from the
    /// global seed at run time; the value in the file is ignored.
    pub synthetic: SyntheticConfig,
    /// Training parameters. The `seed` field is likewise derived.
    pub training: TrainingConfig,
    pub gamma_euclidean: f64,
    /// None calibrates by median matching on the training window.
    pub gamma_qcml: Option<f64>,
    pub signal: SignalConfig,
    /// Leading fraction of dates reserved for model training.
    pub train_fraction: f64,
    /// Gap between the training window and the evaluation window.
    pub embargo_days: usize,
    /// Forward-return horizon of the training target.
    pub target_horizon: usize,
    /// Minimum cross-section size enforced by preprocessing.
    pub min_firms: usize,
    pub backtest: BacktestConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            measures: vec![Measure::Euclidean, Measure::Qcml],
            synthetic: SyntheticConfig::default(),
            training: TrainingConfig::default(),
            gamma_euclidean: 1.0,
            gamma_qcml: None,
            signal: SignalConfig::default(),
            train_fraction: 0.4,
            embargo_days: 63,
            target_horizon: 63,
            min_firms: 10,
            backtest: BacktestConfig::default(),
        }
    }
}

impl RunConfig {
    /// Hex digest of the scientific parameters (SHA-256 of the canonical JSON
    /// serialization).
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.measures.is_empty() {
            return Err(PipelineError::BadConfig("at least one measure is required".into()));
        }
        self.synthetic.validate()?;
        self.training.validate()?;
        self.signal.validate()?;
        self.backtest.validate()?;
        if !(self.gamma_euclidean > 0.0) {
            return Err(PipelineError::BadConfig("gamma_euclidean must be positive".into()));
        }
        if let Some(g) = self.gamma_qcml {
            if !(g > 0.0) {
                return Err(PipelineError::BadConfig("gamma_qcml must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.train_fraction) {
            return Err(PipelineError::BadConfig("train_fraction must lie in [0, 1)".into()));
        }
        if self.target_horizon == 0 {
            return Err(PipelineError::BadConfig("target horizon must be positive".into()));
        }
        if self.measures.contains(&Measure::Qcml) {
            if self.train_fraction <= 0.0 {
                return Err(PipelineError::BadConfig(
                    "training-based measures need train_fraction > 0".into(),
                ));
            }
            if self.embargo_days < self.target_horizon {
                return Err(PipelineError::BadConfig(format!(
                    "embargo ({} days) must cover the target horizon ({} days) to keep \
                     training targets out of the evaluation window",
                    self.embargo_days, self.target_horizon
                )));
            }
        }
        Ok(())
    }

    /// Generator config with its seed derived from the global seed.
    pub fn effective_synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: derive_seed(self.seed, STREAM_SYNTHETIC),
            ..self.synthetic.clone()
        }
    }

    /// Training config with its seed derived from the global seed.
    pub fn effective_training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: derive_seed(self.seed, STREAM_TRAINING),
            ..self.training.clone()
        }
    }
}

/// Training and evaluation windows on the date axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windows {
    /// Training uses dates `0..train_end`.
    pub train_end: usize,
    /// Evaluation uses dates `eval_start..`.
    pub eval_start: usize,
}

pub fn windows(config: &RunConfig, n_dates: usize) -> Result<Windows, PipelineError> {
    let train_end = (((n_dates as f64) * config.train_fraction).floor() as usize).max(1);
    let eval_start = train_end + config.embargo_days;
    if eval_start + 2 >= n_dates {
        return Err(PipelineError::BadConfig(format!(
            "no evaluation window: {n_dates} dates, training ends at {train_end}, embargo {}",
            config.embargo_days
        )));
    }
    Ok(Windows { train_end, eval_start })
}

/// Generate the raw synthetic panel for this configuration.
pub fn generate(config: &RunConfig) -> Result<CharacteristicPanel, PipelineError> {
    Ok(generate_synthetic(&config.effective_synthetic())?)
}

/// Preprocess a raw panel and attach the training target.
pub fn prepare(config: &RunConfig, raw: &CharacteristicPanel) -> Result<CharacteristicPanel, PipelineError> {
    let processed = preprocess(raw, config.min_firms)?;
    Ok(build_target(&processed, config.target_horizon)?)
}

/// Train the model ensemble on the leading training window.
pub fn train_models(config: &RunConfig, processed: &CharacteristicPanel) -> Result<Vec<QcmlModel>, PipelineError> {
    let w = windows(config, processed.n_dates())?;
    let train_panel = processed.slice_dates(0, w.train_end)?;
    Ok(train_ensemble(&train_panel, &config.effective_training())?)
}

/// Per-date Euclidean similarity matrices over the given date indices,
/// wrapped as a single-seed family.
pub fn euclidean_similarities(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    date_indices: &[usize],
) -> Result<Vec<Vec<SimilarityMatrix>>, PipelineError> {
    let sims = date_indices
        .par_iter()
        .map(|&t| {
            let firms = panel.available_firms(t);
            let slice = panel.characteristics_slice(t, &firms);
            let d = pairwise_euclidean(&slice)?;
            let names = firms.iter().map(|&j| panel.firms()[j].clone()).collect();
            similarity_matrix(panel.dates()[t], names, &d, config.gamma_euclidean)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(vec![sims])
}

/// Per-seed, per-date quantum-similarity matrices.
pub fn qcml_similarities(
    panel: &CharacteristicPanel,
    date_indices: &[usize],
    models: &[QcmlModel],
    gamma_qcml: f64,
) -> Result<Vec<Vec<SimilarityMatrix>>, PipelineError> {
    models
        .iter()
        .map(|model| {
            let sims = date_indices
                .par_iter()
                .map(|&t| {
                    let firms = panel.available_firms(t);
                    let slice = panel.characteristics_slice(t, &firms);
                    let d = pairwise_qcml(model, &slice)?;
                    let names = firms.iter().map(|&j| panel.firms()[j].clone()).collect();
                    similarity_matrix(panel.dates()[t], names, &d, gamma_qcml)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(sims)
        })
        .collect()
}

/// Calibrate the quantum-similarity bandwidth by matching the median of
/// `gamma * d^2` to the Euclidean counterpart over every firm pair of every
/// training date, pooled across ensemble members.
pub fn calibrate_gamma_qcml(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    models: &[QcmlModel],
) -> Result<f64, PipelineError> {
    let w = windows(config, panel.n_dates())?;
    let train_dates: Vec<usize> = (0..w.train_end).collect();
    let per_date: Vec<(Vec<f64>, Vec<f64>)> = train_dates
        .par_iter()
        .map(|&t| {
            let firms = panel.available_firms(t);
            let slice = panel.characteristics_slice(t, &firms);
            let mut euclid = Vec::new();
            let mut quantum = Vec::new();
            let de = pairwise_euclidean(&slice)?;
            for a in 0..firms.len() {
                for b in (a + 1)..firms.len() {
                    euclid.push(de[(a, b)] * de[(a, b)]);
                }
            }
            for model in models {
                let states = embed_rows(model, &slice)?;
                for a in 0..states.len() {
                    for b in (a + 1)..states.len() {
                        let d = bures_distance(&states[a], &states[b])?;
                        quantum.push(d * d);
                    }
                }
            }
            Ok::<_, PipelineError>((euclid, quantum))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut euclid = Vec::new();
    let mut quantum = Vec::new();
    for (e, q) in per_date {
        euclid.extend(e);
        quantum.extend(q);
    }
    Ok(crate::metrics::calibrate_gamma(&euclid, &quantum, config.gamma_euclidean)?)
}

/// Build and normalize the signal series for one measure.
pub fn signals_for_measure(
    config: &RunConfig,
    panel: &CharacteristicPanel,
    date_indices: &[usize],
    sims_per_seed: &[Vec<SimilarityMatrix>],
) -> Result<Vec<SignalSeries>, PipelineError> {
    let raw = build_signal_series(panel, date_indices, sims_per_seed, &config.signal)?;
    Ok(raw
        .iter()
        .map(|s| normalize_signal(s, panel))
        .collect::<Result<Vec<_>, _>>()?)
}

/// One measure's full output.
pub struct MeasureRun {
    pub measure: Measure,
    pub gamma: f64,
    pub sims_per_seed: Vec<Vec<SimilarityMatrix>>,
    pub signals: Vec<SignalSeries>,
    pub report: BacktestReport,
}

/// Whole-run output of [`run_full`].
pub struct FullRun {
    pub raw: CharacteristicPanel,
    pub processed: CharacteristicPanel,
    pub models: Vec<QcmlModel>,
    pub gamma_euclidean: f64,
    pub gamma_qcml: Option<f64>,
    pub gamma_calibrated: bool,
    pub measures: Vec<MeasureRun>,
}

/// Run every stage in memory: generate, preprocess, train (if needed),
/// similarity, signals, backtest.
pub fn run_full(config: &RunConfig) -> Result<FullRun, PipelineError> {
    config.validate()?;
    let digest = config.digest();
    let raw = generate(config)?;
    let processed = prepare(config, &raw)?;
    let w = windows(config, processed.n_dates())?;
    let eval_dates: Vec<usize> = (w.eval_start..processed.n_dates()).collect();

    let needs_models = config.measures.contains(&Measure::Qcml);
    let models = if needs_models {
        train_models(config, &processed)?
    } else {
        Vec::new()
    };
    let (gamma_qcml, calibrated) = if needs_models {
        match config.gamma_qcml {
            Some(g) => (Some(g), false),
            None => (Some(calibrate_gamma_qcml(config, &processed, &models)?), true),
        }
    } else {
        (config.gamma_qcml, false)
    };

    let mut measures = Vec::new();
    for &measure in &config.measures {
        let (gamma, sims) = match measure {
            Measure::Euclidean => (
                config.gamma_euclidean,
                euclidean_similarities(config, &processed, &eval_dates)?,
            ),
            Measure::Qcml => {
                let g = gamma_qcml.ok_or_else(|| {
                    PipelineError::BadConfig("quantum measure requires gamma_qcml".into())
                })?;
                (g, qcml_similarities(&processed, &eval_dates, &models, g)?)
            }
        };
        let signals = signals_for_measure(config, &processed, &eval_dates, &sims)?;
        let report = run_backtest(&processed, &signals, &config.backtest, &digest)?;
        measures.push(MeasureRun {
            measure,
            gamma,
            sims_per_seed: sims,
            signals,
            report,
        });
    }

    Ok(FullRun {
        raw,
        processed,
        models,
        gamma_euclidean: config.gamma_euclidean,
        gamma_qcml,
        gamma_calibrated: calibrated,
        measures,
    })
}

/// Ensemble-average similarity check helper: mean off-diagonal similarity
/// between pairs in the same generator cluster minus pairs across clusters.
/// Positive values mean the measure recovered the planted structure. Used by
/// diagnostics and tests.
pub fn cluster_contrast(sim: &SimilarityMatrix, clusters: &[usize]) -> Option<f64> {
    let j = sim.len();
    if j != clusters.len() {
        return None;
    }
    let mut same = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    for a in 0..j {
        for b in (a + 1)..j {
            let v = sim.values()[(a, b)];
            if clusters[a] == clusters[b] {
                same.0 += v;
                same.1 += 1;
            } else {
                cross.0 += v;
                cross.1 += 1;
            }
        }
    }
    if same.1 == 0 || cross.1 == 0 {
        return None;
    }
    Some(same.0 / same.1 as f64 - cross.0 / cross.1 as f64)
}

/// Mean day-over-day change of the linkage structure: average absolute
/// entry-wise difference between consecutive similarity matrices that share
/// a firm set. A diagnostic for similarity stability.
pub fn similarity_turnover(sims: &[SimilarityMatrix]) -> Option<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for pair in sims.windows(2) {
        if pair[0].firms != pair[1].firms {
            continue;
        }
        let diff: DMatrix<f64> = pair[1].values() - pair[0].values();
        acc += diff.abs().sum() / (diff.len() as f64);
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(acc / count as f64)
    }
}
