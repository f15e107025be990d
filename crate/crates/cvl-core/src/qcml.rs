//! Supervised quantum-state regression model.
//!
//! Each feature (and the target) gets a learned Hermitian observable. A data
//! vector is embedded as the ground state of its error Hamiltonian
//! `H(x) = sum_c (A_c - x_c I)^2`; reading the observables back off that
//! state gives the reconstruction ("position") and the forecast. Training
//! minimizes squared forecast error plus a weighted input-bias penalty with
//! an Adam-style optimizer, holding the ground state constant inside each
//! gradient step.

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermitian::{expectation, ground_state, HermitianError, HermitianOperator, QuantumState};
use crate::panel::CharacteristicPanel;
use crate::seed::derive_seed;

#[derive(Debug, Error)]
pub enum QcmlError {
    #[error(transparent)]
    Hermitian(#[from] HermitianError),
    #[error("feature count mismatch: model has {expected}, input has {actual}")]
    FeatureCountMismatch { expected: usize, actual: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("inconsistent feature counts across samples: {expected} vs {actual}")]
    InconsistentFeatures { expected: usize, actual: usize },
    #[error("non-finite loss at epoch {epoch}; lower the learning rate")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("panel carries no training target")]
    NoTarget,
    #[error("firm subsample is empty ({names} names at fraction {fraction})")]
    EmptySubsample { names: usize, fraction: f64 },
    #[error("date sub-group {subgroup} of {count} contains no dates")]
    EmptyDateSubgroup { subgroup: usize, count: usize },
    #[error("seed {seed} drew no valid training samples")]
    NoSamples { seed: u64 },
}

/// Learned observables: one Hermitian operator per input feature plus one for
/// the target.
#[derive(Debug, Clone, PartialEq)]
pub struct QcmlModel {
    dim: usize,
    feature_ops: Vec<HermitianOperator>,
    target_op: HermitianOperator,
}

impl QcmlModel {
    pub fn new(feature_ops: Vec<HermitianOperator>, target_op: HermitianOperator) -> Result<Self, QcmlError> {
        if feature_ops.is_empty() {
            return Err(QcmlError::BadConfig("model needs at least one feature operator".into()));
        }
        let dim = target_op.dim();
        for op in &feature_ops {
            if op.dim() != dim {
                return Err(HermitianError::DimensionMismatch {
                    expected: dim,
                    actual: op.dim(),
                }
                .into());
            }
        }
        Ok(Self {
            dim,
            feature_ops,
            target_op,
        })
    }

    /// Random initialization: Gaussian entries with standard deviation
    /// `1/sqrt(N)`, then projected to the symmetric/antisymmetric parts, so
    /// initial spectra are O(1) regardless of dimension.
    pub fn random_init(dim: usize, feature_count: usize, rng: &mut impl Rng) -> Result<Self, QcmlError> {
        if dim == 0 {
            return Err(QcmlError::BadConfig("Hilbert dimension must be at least 1".into()));
        }
        if feature_count == 0 {
            return Err(QcmlError::BadConfig("feature count must be at least 1".into()));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        let draw = |rng: &mut dyn RngCore| {
            let g = DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng));
            let h = DMatrix::from_fn(dim, dim, |_, _| normal.sample(rng));
            HermitianOperator::from_parts(g, h).expect("square matrices")
        };
        let feature_ops: Vec<_> = (0..feature_count).map(|_| draw(rng)).collect();
        let target_op = draw(rng);
        Self::new(feature_ops, target_op)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature_count(&self) -> usize {
        self.feature_ops.len()
    }

    pub fn feature_ops(&self) -> &[HermitianOperator] {
        &self.feature_ops
    }

    pub fn target_op(&self) -> &HermitianOperator {
        &self.target_op
    }

    fn check_features(&self, features: &[f64]) -> Result<(), QcmlError> {
        if features.len() != self.feature_count() {
            return Err(QcmlError::FeatureCountMismatch {
                expected: self.feature_count(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Error Hamiltonian `sum_c (A_c - x_c I)^2`; positive semidefinite by
    /// construction.
    pub fn error_hamiltonian(&self, features: &[f64]) -> Result<HermitianOperator, QcmlError> {
        self.check_features(features)?;
        let mut h = HermitianOperator::zeros(self.dim);
        for (op, &x) in self.feature_ops.iter().zip(features) {
            h.add_assign(&op.shift_identity(x).squared())?;
        }
        Ok(h)
    }

    /// Ground state of the error Hamiltonian for `features`.
    pub fn ground_state_of(&self, features: &[f64]) -> Result<QuantumState, QcmlError> {
        Ok(ground_state(&self.error_hamiltonian(features)?).0)
    }

    /// Reconstruction of a state: expectation of each feature observable.
    pub fn position(&self, state: &QuantumState) -> Result<Vec<f64>, QcmlError> {
        let (p_sym, p_anti) = state.density_parts();
        if state.dim() != self.dim {
            return Err(HermitianError::DimensionMismatch {
                expected: self.dim,
                actual: state.dim(),
            }
            .into());
        }
        Ok(self
            .feature_ops
            .iter()
            .map(|op| op.expectation_with_density(&p_sym, &p_anti))
            .collect())
    }

    /// Ground-state energy `<psi|H|psi>`; the squared embedding displacement
    /// plus a nonnegative measurement variance.
    pub fn ground_energy(&self, features: &[f64]) -> Result<f64, QcmlError> {
        let h = self.error_hamiltonian(features)?;
        let (psi, _) = ground_state(&h);
        Ok(expectation(&h, &psi)?)
    }

    /// Forecast: expectation of the target observable on the ground state.
    pub fn forecast(&self, features: &[f64]) -> Result<f64, QcmlError> {
        let psi = self.ground_state_of(features)?;
        Ok(expectation(&self.target_op, &psi)?)
    }

    /// Squared forecast error plus `w` times the squared reconstruction error.
    pub fn loss(&self, sample: &TrainingSample, w: f64) -> Result<f64, QcmlError> {
        let psi = self.ground_state_of(&sample.features)?;
        self.loss_given_state(&psi, sample, w)
    }

    /// Loss evaluated at a fixed, externally supplied state. This is the
    /// function the training gradients differentiate: the state is treated as
    /// a constant, mirroring the step ordering of the training loop.
    pub fn loss_given_state(&self, state: &QuantumState, sample: &TrainingSample, w: f64) -> Result<f64, QcmlError> {
        self.check_features(&sample.features)?;
        let (p_sym, p_anti) = state.density_parts();
        let y_hat = self.target_op.expectation_with_density(&p_sym, &p_anti);
        let mut bias = 0.0;
        for (op, &x) in self.feature_ops.iter().zip(&sample.features) {
            let x_hat = op.expectation_with_density(&p_sym, &p_anti);
            bias += (x_hat - x).powi(2);
        }
        Ok((y_hat - sample.target).powi(2) + w * bias)
    }

    fn to_checkpoint(&self, config: &TrainingConfig) -> ModelCheckpoint {
        ModelCheckpoint {
            config: config.clone(),
            seed: config.seed,
            feature_ops: self.feature_ops.clone(),
            target_op: self.target_op.clone(),
        }
    }
}

/// Gradient of [`QcmlModel::loss_given_state`] with respect to every operator,
/// split into symmetric and antisymmetric parts. With the state held constant
/// each expectation is linear in its operator, so the gradients are the
/// density parts scaled by the loss residuals.
pub struct LossGradients {
    /// Per feature operator: (d/d sym, d/d antisym).
    pub feature: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    pub target: (DMatrix<f64>, DMatrix<f64>),
}

pub fn loss_gradients(
    model: &QcmlModel,
    state: &QuantumState,
    sample: &TrainingSample,
    w: f64,
) -> Result<LossGradients, QcmlError> {
    model.check_features(&sample.features)?;
    let (p_sym, p_anti) = state.density_parts();
    let y_hat = model.target_op.expectation_with_density(&p_sym, &p_anti);
    let cy = 2.0 * (y_hat - sample.target);
    let feature = model
        .feature_ops
        .iter()
        .zip(&sample.features)
        .map(|(op, &x)| {
            let cx = 2.0 * w * (op.expectation_with_density(&p_sym, &p_anti) - x);
            (&p_sym * cx, &p_anti * cx)
        })
        .collect();
    Ok(LossGradients {
        feature,
        target: (&p_sym * cy, &p_anti * cy),
    })
}

/// One observation: a feature vector with its scalar target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub target: f64,
    pub firm: String,
    pub date: NaiveDate,
}

/// Training hyperparameters and the ensemble protocol knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainingConfig {
    /// Hilbert space dimension N.
    pub dim: usize,
    /// Input-bias penalty weight w.
    pub bias_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// None trains full-batch.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Fraction of available names each ensemble member trains on.
    pub name_fraction: f64,
    /// Training dates are partitioned into this many interleaved sub-groups.
    pub date_subgroup_count: usize,
    pub ensemble_size: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            dim: 12,
            bias_weight: 1.0,
            learning_rate: 1e-2,
            epochs: 300,
            batch_size: None,
            seed: 0,
            name_fraction: 0.10,
            date_subgroup_count: 5,
            ensemble_size: 50,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), QcmlError> {
        if self.dim < 1 {
            return Err(QcmlError::BadConfig("Hilbert dimension must be at least 1".into()));
        }
        if !(self.name_fraction > 0.0 && self.name_fraction <= 1.0) {
            return Err(QcmlError::BadConfig("name fraction must lie in (0, 1]".into()));
        }
        if self.ensemble_size < 1 {
            return Err(QcmlError::BadConfig("ensemble size must be at least 1".into()));
        }
        if self.date_subgroup_count < 1 {
            return Err(QcmlError::BadConfig("date sub-group count must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QcmlError::BadConfig("learning rate must be positive".into()));
        }
        if !(self.bias_weight >= 0.0 && self.bias_weight.is_finite()) {
            return Err(QcmlError::BadConfig("bias weight must be nonnegative".into()));
        }
        Ok(())
    }

    /// Non-fatal configuration smells.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(4..=32).contains(&self.dim) {
            out.push(format!(
                "Hilbert dimension {} is outside the well-tested band [4, 32]",
                self.dim
            ));
        }
        out
    }
}

/// Serialized model: config, seed, and every operator. Round-trips through
/// JSON bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelCheckpoint {
    pub config: TrainingConfig,
    pub seed: u64,
    pub feature_ops: Vec<HermitianOperator>,
    pub target_op: HermitianOperator,
}

impl ModelCheckpoint {
    pub fn model(&self) -> Result<QcmlModel, QcmlError> {
        QcmlModel::new(self.feature_ops.clone(), self.target_op.clone())
    }
}

/// Elementwise Adam state for one parameter matrix.
struct AdamState {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl AdamState {
    fn new(dim: usize) -> Self {
        Self {
            m: DMatrix::zeros(dim, dim),
            v: DMatrix::zeros(dim, dim),
        }
    }

    fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, lr: f64, t: usize) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for idx in 0..param.len() {
            let g = grad[idx];
            self.m[idx] = BETA1 * self.m[idx] + (1.0 - BETA1) * g;
            self.v[idx] = BETA2 * self.v[idx] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[idx] / bc1;
            let v_hat = self.v[idx] / bc2;
            param[idx] -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

/// Per-sample training statistics: the density decomposition of the ground
/// state plus the residual coefficients that scale it into gradients.
struct SampleStats {
    p_sym: DMatrix<f64>,
    p_anti: DMatrix<f64>,
    coeff_target: f64,
    coeff_features: Vec<f64>,
    loss: f64,
}

fn sample_stats(model: &QcmlModel, sample: &TrainingSample, w: f64) -> Result<SampleStats, QcmlError> {
    let h = model.error_hamiltonian(&sample.features)?;
    let (psi, _) = ground_state(&h);
    let (p_sym, p_anti) = psi.density_parts();
    let y_hat = model.target_op.expectation_with_density(&p_sym, &p_anti);
    let mut coeff_features = Vec::with_capacity(model.feature_count());
    let mut bias = 0.0;
    for (op, &x) in model.feature_ops.iter().zip(&sample.features) {
        let x_hat = op.expectation_with_density(&p_sym, &p_anti);
        bias += (x_hat - x).powi(2);
        coeff_features.push(2.0 * w * (x_hat - x));
    }
    Ok(SampleStats {
        p_sym,
        p_anti,
        coeff_target: 2.0 * (y_hat - sample.target),
        coeff_features,
        loss: (y_hat - sample.target).powi(2) + w * bias,
    })
}

/// Train a model by gradient descent on the penalized squared error.
///
/// Samples are sorted to a canonical (date, firm) order before training, so
/// the result is independent of the order in which they are supplied, and
/// gradient reductions happen in that fixed order regardless of how many
/// worker threads run the per-sample solves. Training is fully deterministic
/// given `config.seed`.
pub fn train(samples: &[TrainingSample], config: &TrainingConfig) -> Result<QcmlModel, QcmlError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(QcmlError::EmptyTrainingSet);
    }
    let feature_count = samples[0].features.len();
    for s in samples {
        if s.features.len() != feature_count {
            return Err(QcmlError::InconsistentFeatures {
                expected: feature_count,
                actual: s.features.len(),
            });
        }
        if s.features.iter().any(|x| !x.is_finite()) || !s.target.is_finite() {
            return Err(QcmlError::BadConfig(format!(
                "non-finite sample for firm {} on {}",
                s.firm, s.date
            )));
        }
    }
    if feature_count == 0 {
        return Err(QcmlError::BadConfig("samples carry no features".into()));
    }

    let mut ordered: Vec<&TrainingSample> = samples.iter().collect();
    ordered.sort_by(|a, b| (a.date, &a.firm).cmp(&(b.date, &b.firm)));

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut model = QcmlModel::random_init(config.dim, feature_count, &mut rng)?;

    let n = ordered.len();
    let dim = config.dim;
    let w = config.bias_weight;
    let mut adam_feat: Vec<(AdamState, AdamState)> = (0..feature_count)
        .map(|_| (AdamState::new(dim), AdamState::new(dim)))
        .collect();
    let mut adam_target = (AdamState::new(dim), AdamState::new(dim));
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let batches: Vec<Vec<usize>> = match config.batch_size {
            None => vec![(0..n).collect()],
            Some(b) => {
                let b = b.max(1);
                let mut idx: Vec<usize> = (0..n).collect();
                idx.shuffle(&mut rng);
                idx.chunks(b).map(|c| c.to_vec()).collect()
            }
        };
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let stats: Vec<SampleStats> = batch
                .par_iter()
                .map(|&i| sample_stats(&model, ordered[i], w))
                .collect::<Result<_, _>>()?;
            let scale = 1.0 / batch.len() as f64;
            let mut g_target_sym = DMatrix::zeros(dim, dim);
            let mut g_target_anti = DMatrix::zeros(dim, dim);
            let mut g_feat: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..feature_count)
                .map(|_| (DMatrix::zeros(dim, dim), DMatrix::zeros(dim, dim)))
                .collect();
            fn accumulate(acc: &mut DMatrix<f64>, m: &DMatrix<f64>, scale: f64) {
                for i in 0..acc.len() {
                    acc[i] += scale * m[i];
                }
            }
            for s in &stats {
                epoch_loss += s.loss;
                accumulate(&mut g_target_sym, &s.p_sym, s.coeff_target * scale);
                accumulate(&mut g_target_anti, &s.p_anti, s.coeff_target * scale);
                for (c, g) in g_feat.iter_mut().enumerate() {
                    accumulate(&mut g.0, &s.p_sym, s.coeff_features[c] * scale);
                    accumulate(&mut g.1, &s.p_anti, s.coeff_features[c] * scale);
                }
            }
            step += 1;
            let lr = config.learning_rate;
            let mut feature_ops = model.feature_ops.clone();
            let mut target_op = model.target_op.clone();
            for (c, op) in feature_ops.iter_mut().enumerate() {
                let mut sym = op.sym().clone();
                let mut anti = op.antisym().clone();
                adam_feat[c].0.step(&mut sym, &g_feat[c].0, lr, step);
                adam_feat[c].1.step(&mut anti, &g_feat[c].1, lr, step);
                *op = HermitianOperator::from_parts(sym, anti)?;
            }
            {
                let mut sym = target_op.sym().clone();
                let mut anti = target_op.antisym().clone();
                adam_target.0.step(&mut sym, &g_target_sym, lr, step);
                adam_target.1.step(&mut anti, &g_target_anti, lr, step);
                target_op = HermitianOperator::from_parts(sym, anti)?;
            }
            model = QcmlModel::new(feature_ops, target_op)?;
        }
        if !epoch_loss.is_finite() {
            return Err(QcmlError::NonFiniteLoss { epoch });
        }
    }
    Ok(model)
}

/// Mean loss of a model over a sample set.
pub fn mean_loss(model: &QcmlModel, samples: &[TrainingSample], w: f64) -> Result<f64, QcmlError> {
    if samples.is_empty() {
        return Err(QcmlError::EmptyTrainingSet);
    }
    let total: f64 = samples
        .par_iter()
        .map(|s| model.loss(s, w))
        .collect::<Result<Vec<_>, _>>()?
        .iter()
        .sum();
    Ok(total / samples.len() as f64)
}

/// All valid training samples of a panel: firm available on the date and a
/// finite target.
pub fn samples_from_panel(panel: &CharacteristicPanel) -> Result<Vec<TrainingSample>, QcmlError> {
    if panel.target().is_none() {
        return Err(QcmlError::NoTarget);
    }
    let mut out = Vec::new();
    for t in 0..panel.n_dates() {
        for j in panel.available_firms(t) {
            if let (Some(features), Some(target)) = (panel.characteristic_vector(t, j), panel.target_at(t, j)) {
                out.push(TrainingSample {
                    features,
                    target,
                    firm: panel.firms()[j].clone(),
                    date: panel.dates()[t],
                });
            }
        }
    }
    Ok(out)
}

/// Date indices whose position is congruent to `subgroup` modulo `count`:
/// interleaved, equally spaced groups that all span the full training window.
pub fn date_subgroup(n_dates: usize, subgroup: usize, count: usize) -> Vec<usize> {
    (0..n_dates).filter(|t| t % count == subgroup).collect()
}

/// Train the seed ensemble.
///
/// Member k trains on date sub-group `k mod date_subgroup_count` with an
/// independent firm subsample of size `floor(names * name_fraction)` drawn
/// without replacement from seed-derived randomness; its seed is
/// `derive_seed(config.seed, k)`. Members are independent and train in
/// parallel.
pub fn train_ensemble(panel: &CharacteristicPanel, config: &TrainingConfig) -> Result<Vec<QcmlModel>, QcmlError> {
    config.validate()?;
    if panel.target().is_none() {
        return Err(QcmlError::NoTarget);
    }
    // Names available for training: at least one valid sample in the window.
    let mut has_sample = vec![false; panel.n_firms()];
    for t in 0..panel.n_dates() {
        for j in panel.available_firms(t) {
            if panel.target_at(t, j).is_some() && panel.characteristic_vector(t, j).is_some() {
                has_sample[j] = true;
            }
        }
    }
    let names: Vec<usize> = (0..panel.n_firms()).filter(|&j| has_sample[j]).collect();
    let n_pick = ((names.len() as f64) * config.name_fraction).floor() as usize;
    if n_pick == 0 {
        return Err(QcmlError::EmptySubsample {
            names: names.len(),
            fraction: config.name_fraction,
        });
    }
    for g in 0..config.date_subgroup_count {
        if date_subgroup(panel.n_dates(), g, config.date_subgroup_count).is_empty() {
            return Err(QcmlError::EmptyDateSubgroup {
                subgroup: g,
                count: config.date_subgroup_count,
            });
        }
    }

    (0..config.ensemble_size)
        .into_par_iter()
        .map(|k| {
            let member_seed = derive_seed(config.seed, k as u64);
            let subgroup = k % config.date_subgroup_count;
            let dates = date_subgroup(panel.n_dates(), subgroup, config.date_subgroup_count);
            let mut rng = ChaCha20Rng::seed_from_u64(member_seed);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, names.len(), n_pick)
                .iter()
                .map(|i| names[i])
                .collect();
            picked.sort_unstable();
            let in_pick = {
                let mut mask = vec![false; panel.n_firms()];
                for &j in &picked {
                    mask[j] = true;
                }
                mask
            };
            let mut samples = Vec::new();
            for &t in &dates {
                for j in panel.available_firms(t) {
                    if !in_pick[j] {
                        continue;
                    }
                    if let (Some(features), Some(target)) =
                        (panel.characteristic_vector(t, j), panel.target_at(t, j))
                    {
                        samples.push(TrainingSample {
                            features,
                            target,
                            firm: panel.firms()[j].clone(),
                            date: panel.dates()[t],
                        });
                    }
                }
            }
            if samples.is_empty() {
                return Err(QcmlError::NoSamples { seed: member_seed });
            }
            let member_config = TrainingConfig {
                seed: member_seed,
                ..config.clone()
            };
            train(&samples, &member_config)
        })
        .collect()
}

/// Checkpoint a trained ensemble member.
pub fn checkpoint(model: &QcmlModel, config: &TrainingConfig) -> ModelCheckpoint {
    model.to_checkpoint(config)
}
