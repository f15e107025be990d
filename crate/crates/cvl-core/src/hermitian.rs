//! Complex Hermitian operators and pure quantum states.
//!
//! Operators are stored as a real symmetric part plus a real antisymmetric
//! part, realizing `O = sym + i*antisym`. This keeps every parameter real,
//! guarantees Hermiticity by construction, and matches the parameterization
//! used by the model-training code.

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Complex scalar used throughout.
pub type C64 = Complex<f64>;

/// Tolerance used when canonicalizing the global phase of a state.
const PHASE_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum HermitianError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("operator matrices must be square and non-empty (got {rows}x{cols})")]
    BadShape { rows: usize, cols: usize },
    #[error("cannot normalize a zero-norm amplitude vector")]
    ZeroNorm,
}

/// N x N complex Hermitian operator, stored as `sym + i*antisym`.
///
/// `sym` is exactly symmetric and `antisym` exactly antisymmetric: the
/// constructor projects its inputs onto those subspaces, so any matrix pair
/// yields a valid operator.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianOperator {
    dim: usize,
    sym: DMatrix<f64>,
    antisym: DMatrix<f64>,
}

impl HermitianOperator {
    /// Build an operator from arbitrary square matrices by projecting onto the
    /// symmetric / antisymmetric subspaces.
    pub fn from_parts(sym: DMatrix<f64>, antisym: DMatrix<f64>) -> Result<Self, HermitianError> {
        let n = sym.nrows();
        if n == 0 || sym.ncols() != n {
            return Err(HermitianError::BadShape {
                rows: sym.nrows(),
                cols: sym.ncols(),
            });
        }
        if antisym.nrows() != n || antisym.ncols() != n {
            return Err(HermitianError::DimensionMismatch {
                expected: n,
                actual: antisym.nrows(),
            });
        }
        let sym_p = (&sym + sym.transpose()) * 0.5;
        let anti_p = (&antisym - antisym.transpose()) * 0.5;
        Ok(Self {
            dim: n,
            sym: sym_p,
            antisym: anti_p,
        })
    }

    /// Zero operator.
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            sym: DMatrix::zeros(dim, dim),
            antisym: DMatrix::zeros(dim, dim),
        }
    }

    /// Identity operator.
    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// `s * I`.
    pub fn scaled_identity(dim: usize, s: f64) -> Self {
        Self {
            dim,
            sym: DMatrix::identity(dim, dim) * s,
            antisym: DMatrix::zeros(dim, dim),
        }
    }

    /// Real diagonal operator.
    pub fn from_diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut sym = DMatrix::zeros(dim, dim);
        for (k, &d) in diag.iter().enumerate() {
            sym[(k, k)] = d;
        }
        Self {
            dim,
            sym,
            antisym: DMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sym(&self) -> &DMatrix<f64> {
        &self.sym
    }

    pub fn antisym(&self) -> &DMatrix<f64> {
        &self.antisym
    }

    /// Entry (a, b) of the realized complex matrix.
    pub fn entry(&self, a: usize, b: usize) -> C64 {
        C64::new(self.sym[(a, b)], self.antisym[(a, b)])
    }

    /// Materialize the complex matrix `sym + i*antisym`.
    pub fn to_complex(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.dim, self.dim, |a, b| self.entry(a, b))
    }

    /// Sum of two operators.
    pub fn add(&self, other: &Self) -> Result<Self, HermitianError> {
        self.check_dim(other.dim)?;
        Ok(Self {
            dim: self.dim,
            sym: &self.sym + &other.sym,
            antisym: &self.antisym + &other.antisym,
        })
    }

    /// Real scaling.
    pub fn scale(&self, s: f64) -> Self {
        Self {
            dim: self.dim,
            sym: &self.sym * s,
            antisym: &self.antisym * s,
        }
    }

    /// `self - x * I`.
    pub fn shift_identity(&self, x: f64) -> Self {
        let mut sym = self.sym.clone();
        for k in 0..self.dim {
            sym[(k, k)] -= x;
        }
        Self {
            dim: self.dim,
            sym,
            antisym: self.antisym.clone(),
        }
    }

    /// Operator square `O * O`, which is again Hermitian.
    ///
    /// With `O = S + iA`: `O^2 = (S^2 - A^2) + i(SA + AS)`.
    pub fn squared(&self) -> Self {
        let s2 = &self.sym * &self.sym;
        let a2 = &self.antisym * &self.antisym;
        let sa = &self.sym * &self.antisym;
        let as_ = &self.antisym * &self.sym;
        Self {
            dim: self.dim,
            sym: s2 - a2,
            antisym: sa + as_,
        }
    }

    /// Add `other` into `self` in place.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), HermitianError> {
        self.check_dim(other.dim)?;
        self.sym += &other.sym;
        self.antisym += &other.antisym;
        Ok(())
    }

    /// Apply the operator to a complex vector.
    pub fn apply(&self, v: &DVector<C64>) -> Result<DVector<C64>, HermitianError> {
        self.check_dim(v.len())?;
        let u: DVector<f64> = v.map(|z| z.re);
        let w: DVector<f64> = v.map(|z| z.im);
        // (S + iA)(u + iw) = (Su - Aw) + i(Sw + Au)
        let re = &self.sym * &u - &self.antisym * &w;
        let im = &self.sym * &w + &self.antisym * &u;
        Ok(DVector::from_fn(self.dim, |k, _| C64::new(re[k], im[k])))
    }

    /// Frobenius norm of the realized complex matrix.
    pub fn frobenius_norm(&self) -> f64 {
        (self.sym.norm_squared() + self.antisym.norm_squared()).sqrt()
    }

    /// Expectation value against a precomputed density decomposition
    /// (see [`QuantumState::density_parts`]). This is the hot path used by
    /// model training: one elementwise dot per operator.
    pub fn expectation_with_density(&self, dens_sym: &DMatrix<f64>, dens_anti: &DMatrix<f64>) -> f64 {
        self.sym.dot(dens_sym) + self.antisym.dot(dens_anti)
    }

    fn check_dim(&self, other: usize) -> Result<(), HermitianError> {
        if self.dim != other {
            return Err(HermitianError::DimensionMismatch {
                expected: self.dim,
                actual: other,
            });
        }
        Ok(())
    }
}

/// Unit-norm complex state vector with a canonical global phase.
///
/// The first component whose magnitude exceeds 1e-12 is made real and
/// nonnegative, so equal states serialize identically. Fidelity and every
/// expectation value are invariant under this choice.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    amplitudes: DVector<C64>,
}

impl QuantumState {
    /// Normalize and phase-canonicalize an amplitude vector.
    pub fn new(amplitudes: DVector<C64>) -> Result<Self, HermitianError> {
        if amplitudes.is_empty() {
            return Err(HermitianError::BadShape { rows: 0, cols: 1 });
        }
        let norm = amplitudes.norm();
        if norm <= 0.0 || !norm.is_finite() {
            return Err(HermitianError::ZeroNorm);
        }
        let mut amp = amplitudes / C64::new(norm, 0.0);
        if let Some(k) = amp.iter().position(|z| z.norm() > PHASE_EPS) {
            let phase = amp[k] / C64::new(amp[k].norm(), 0.0);
            let rot = phase.conj();
            amp *= rot;
            amp[k] = C64::new(amp[k].re.abs(), 0.0);
        }
        Ok(Self { amplitudes: amp })
    }

    /// Basis state `e_k`.
    pub fn basis(dim: usize, k: usize) -> Self {
        let mut amp = DVector::from_element(dim, C64::new(0.0, 0.0));
        amp[k] = C64::new(1.0, 0.0);
        Self { amplitudes: amp }
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    /// Inner product `<self|other>` (conjugate-linear in `self`).
    pub fn inner(&self, other: &Self) -> Result<C64, HermitianError> {
        if self.dim() != other.dim() {
            return Err(HermitianError::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        let mut acc = C64::new(0.0, 0.0);
        for (a, b) in self.amplitudes.iter().zip(other.amplitudes.iter()) {
            acc += a.conj() * b;
        }
        Ok(acc)
    }

    /// Real and imaginary parts of the rank-1 density `psi psi^dagger`.
    ///
    /// Returns `(P_sym, P_anti)` with `P_sym = uu' + vv'` symmetric and
    /// `P_anti = vu' - uv'` antisymmetric, where `psi = u + iv`. Together with
    /// [`HermitianOperator::expectation_with_density`] this evaluates many
    /// expectations of the same state cheaply.
    pub fn density_parts(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dim();
        let u: DVector<f64> = self.amplitudes.map(|z| z.re);
        let v: DVector<f64> = self.amplitudes.map(|z| z.im);
        let mut p_sym = DMatrix::zeros(n, n);
        let mut p_anti = DMatrix::zeros(n, n);
        for a in 0..n {
            for b in 0..n {
                p_sym[(a, b)] = u[a] * u[b] + v[a] * v[b];
                p_anti[(a, b)] = v[a] * u[b] - u[a] * v[b];
            }
        }
        (p_sym, p_anti)
    }
}

/// Real expectation value `<psi|O|psi>`.
///
/// The imaginary residual of the quadratic form is asserted to be below
/// 1e-10; a violation indicates a broken Hermiticity invariant.
pub fn expectation(op: &HermitianOperator, state: &QuantumState) -> Result<f64, HermitianError> {
    if op.dim() != state.dim() {
        return Err(HermitianError::DimensionMismatch {
            expected: op.dim(),
            actual: state.dim(),
        });
    }
    let applied = op.apply(state.amplitudes())?;
    let mut acc = C64::new(0.0, 0.0);
    for (a, b) in state.amplitudes().iter().zip(applied.iter()) {
        acc += a.conj() * b;
    }
    assert!(
        acc.im.abs() < 1e-10 * acc.re.abs().max(1.0),
        "non-real expectation value: {acc}"
    );
    Ok(acc.re)
}

/// Ground state and lowest eigenvalue of a Hermitian operator.
///
/// Uses a dense full-spectrum eigendecomposition; intended for small
/// dimensions (the model code uses N <= 32). The returned eigenvector is
/// normalized and phase-canonicalized; among equal minimal eigenvalues the
/// first index reported by the solver is taken.
pub fn ground_state(op: &HermitianOperator) -> (QuantumState, f64) {
    let h = op.to_complex();
    let eig = h.symmetric_eigen();
    let mut min_idx = 0;
    for k in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[k] < eig.eigenvalues[min_idx] {
            min_idx = k;
        }
    }
    let lambda = eig.eigenvalues[min_idx];
    let vec = eig.eigenvectors.column(min_idx).into_owned();
    let state = QuantumState::new(vec).expect("eigenvector of a Hermitian matrix is nonzero");
    debug_assert!({
        let r = op.apply(state.amplitudes()).unwrap()
            - state.amplitudes().map(|z| z * C64::new(lambda, 0.0));
        r.norm() <= 1e-8 * op.frobenius_norm().max(1.0)
    });
    (state, lambda)
}

/// Full real spectrum of a Hermitian operator, sorted ascending.
pub fn spectrum(op: &HermitianOperator) -> Vec<f64> {
    let eig = op.to_complex().symmetric_eigen();
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("Hermitian spectrum is real"));
    vals
}

/// Fidelity `|<a|b>|^2` between two pure states.
pub fn fidelity(a: &QuantumState, b: &QuantumState) -> Result<f64, HermitianError> {
    let ov = a.inner(b)?;
    Ok(ov.norm_sqr())
}

// --- serialization ------------------------------------------------------
//
// Text format: nested arrays of reals. States serialize their amplitudes as
// `[re, im]` pairs. Round-trips are bit-exact (shortest-roundtrip floats).

#[derive(Serialize, Deserialize)]
struct OperatorRepr {
    dim: usize,
    sym: Vec<Vec<f64>>,
    antisym: Vec<Vec<f64>>,
}

impl Serialize for HermitianOperator {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..self.dim)
                .map(|a| (0..self.dim).map(|b| m[(a, b)]).collect())
                .collect()
        };
        OperatorRepr {
            dim: self.dim,
            sym: rows(&self.sym),
            antisym: rows(&self.antisym),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for HermitianOperator {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = OperatorRepr::deserialize(deserializer)?;
        let build = |rows: &[Vec<f64>]| -> Result<DMatrix<f64>, D::Error> {
            if rows.len() != repr.dim || rows.iter().any(|r| r.len() != repr.dim) {
                return Err(serde::de::Error::custom("ragged operator matrix"));
            }
            Ok(DMatrix::from_fn(repr.dim, repr.dim, |a, b| rows[a][b]))
        };
        let sym = build(&repr.sym)?;
        let antisym = build(&repr.antisym)?;
        HermitianOperator::from_parts(sym, antisym).map_err(serde::de::Error::custom)
    }
}

impl Serialize for QuantumState {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let pairs: Vec<[f64; 2]> = self.amplitudes.iter().map(|z| [z.re, z.im]).collect();
        pairs.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for QuantumState {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let pairs = Vec::<[f64; 2]>::deserialize(deserializer)?;
        let amp = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| C64::new(p[0], p[1])));
        QuantumState::new(amp).map_err(serde::de::Error::custom)
    }
}
