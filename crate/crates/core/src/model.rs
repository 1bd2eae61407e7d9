//! Domain types of the multi-study factor model and the deterministic model
//! math: covariance assembly and the marginal Gaussian log-likelihood.
//!
//! Study `s` is modelled as `x_is = Φ f_is + Λ_s l_is + e_is` with standard
//! normal scores and diagonal Gaussian noise, so marginally
//! `x_is ~ N(0, Φ Φᵀ + Λ_s Λ_sᵀ + Ψ_s)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MsfaError, Result};

/// Tolerance on column means accepted as "centered".
pub const CENTERING_TOL: f64 = 1e-8;

/// Centered data for one study: `n_s` rows (samples) by `P` columns (variables).
#[derive(Debug, Clone, PartialEq)]
pub struct StudyData {
    id: usize,
    x: DMatrix<f64>,
    var_names: Vec<String>,
}

impl StudyData {
    /// Wraps an already-centered matrix. Fails if a column mean exceeds
    /// [`CENTERING_TOL`] (scaled by the column's magnitude), if `n_s < 2`, if
    /// `P == 0`, or if the names do not match the column count.
    pub fn new(id: usize, x: DMatrix<f64>, var_names: Vec<String>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 {
            return Err(MsfaError::input(format!("study {id}: need at least 2 samples, got {n}")));
        }
        if p == 0 {
            return Err(MsfaError::input(format!("study {id}: no variables")));
        }
        if var_names.len() != p {
            return Err(MsfaError::input(format!(
                "study {id}: {} variable names for {p} columns",
                var_names.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(MsfaError::input(format!("study {id}: non-finite measurement")));
        }
        for (j, col) in x.column_iter().enumerate() {
            let mean = col.mean();
            let scale = col.amax().max(1.0);
            if mean.abs() > CENTERING_TOL * scale {
                return Err(MsfaError::input(format!(
                    "study {id}: column {} ({}) has mean {mean:e}; data must be centered",
                    j, var_names[j]
                )));
            }
        }
        Ok(StudyData { id, x, var_names })
    }

    /// Centers each column at its sample mean, then wraps it.
    pub fn centered(id: usize, mut x: DMatrix<f64>, var_names: Vec<String>) -> Result<Self> {
        center_columns(&mut x);
        Self::new(id, x, var_names)
    }

    /// Wraps data simulated directly from the model, which is mean-zero in
    /// expectation but not centered. Used by the sampler self-checks.
    pub(crate) fn from_model_draw(id: usize, x: DMatrix<f64>, var_names: Vec<String>) -> Self {
        debug_assert_eq!(var_names.len(), x.ncols());
        StudyData { id, x, var_names }
    }

    /// Default variable names `v1..vP`.
    pub fn default_names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("v{j}")).collect()
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn var_names(&self) -> &[String] {
        &self.var_names
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }
}

/// Subtracts each column's mean in place.
pub fn center_columns(x: &mut DMatrix<f64>) {
    for mut col in x.column_iter_mut() {
        let mean = col.mean();
        col.add_scalar_mut(-mean);
    }
}

/// Checks that a set of studies is non-empty and shares `P` and variable names.
pub fn validate_studies(studies: &[StudyData]) -> Result<usize> {
    let first = studies
        .first()
        .ok_or_else(|| MsfaError::input("at least one study is required"))?;
    for s in &studies[1..] {
        if s.p() != first.p() {
            return Err(MsfaError::input(format!(
                "study {} has {} variables, study {} has {}",
                s.id(),
                s.p(),
                first.id(),
                first.p()
            )));
        }
        if s.var_names() != first.var_names() {
            return Err(MsfaError::input(format!(
                "study {} variable names differ from study {}",
                s.id(),
                first.id()
            )));
        }
    }
    Ok(first.p())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoadingKind {
    Shared,
    Specific(usize),
}

/// A `P × m` loading matrix. `m = 0` means no factors of this kind.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatrix {
    values: DMatrix<f64>,
    kind: LoadingKind,
}

impl LoadingMatrix {
    pub fn new(values: DMatrix<f64>, kind: LoadingKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MsfaError::numerical(format!("non-finite entry in {kind:?} loadings")));
        }
        Ok(LoadingMatrix { values, kind })
    }

    pub fn shared(values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, LoadingKind::Shared)
    }

    pub fn specific(study: usize, values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, LoadingKind::Specific(study))
    }

    pub fn zeros(p: usize, m: usize, kind: LoadingKind) -> Self {
        LoadingMatrix { values: DMatrix::zeros(p, m), kind }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn kind(&self) -> LoadingKind {
        self.kind
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// `L Lᵀ`, exactly symmetric.
    pub fn gram(&self) -> DMatrix<f64> {
        outer_gram(&self.values)
    }
}

/// Shared (`f`, `n × K`) and specific (`l`, `n × J`) scores of one study.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorScores {
    pub f: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

impl FactorScores {
    pub fn zeros(n: usize, k: usize, j: usize) -> Self {
        FactorScores { f: DMatrix::zeros(n, k), l: DMatrix::zeros(n, j) }
    }

    pub fn n(&self) -> usize {
        self.f.nrows()
    }
}

/// Diagonal of `Ψ_s`: one strictly positive error variance per variable.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseVariances(DVector<f64>);

impl NoiseVariances {
    pub fn new(psi: DVector<f64>) -> Result<Self> {
        if let Some((p, v)) = psi.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v > 0.0)) {
            return Err(MsfaError::numerical(format!(
                "error variance {p} must be finite and positive, got {v}"
            )));
        }
        Ok(NoiseVariances(psi))
    }

    pub fn constant(p: usize, value: f64) -> Result<Self> {
        Self::new(DVector::from_element(p, value))
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Posterior covariance summaries plus the ranks selected from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub sigma_phi: DMatrix<f64>,
    pub sigma_lambda: Vec<DMatrix<f64>>,
    pub psi_hat: Vec<DVector<f64>>,
    pub k_hat: usize,
    pub j_hat: Vec<usize>,
}

/// `A Aᵀ` computed on the upper triangle and mirrored, so the result is
/// exactly symmetric.
pub fn outer_gram(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut g = a * a.transpose();
    symmetrize_exact(&mut g);
    g
}

/// Copies the upper triangle onto the lower one.
pub fn symmetrize_exact(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            m[(i, j)] = m[(j, i)];
        }
    }
}

/// `Σ_s = Φ Φᵀ + Λ_s Λ_sᵀ + diag(ψ)`.
pub fn assemble_sigma(
    phi: &LoadingMatrix,
    lambda: &LoadingMatrix,
    psi: &NoiseVariances,
) -> Result<DMatrix<f64>> {
    let p = phi.p();
    if lambda.p() != p || psi.len() != p {
        return Err(MsfaError::input(format!(
            "dimension mismatch: Φ has {p} rows, Λ has {}, ψ has {}",
            lambda.p(),
            psi.len()
        )));
    }
    let mut sigma = phi.values() * phi.values().transpose();
    sigma.gemm(1.0, lambda.values(), &lambda.values().transpose(), 1.0);
    for (i, v) in psi.values().iter().enumerate() {
        sigma[(i, i)] += v;
    }
    symmetrize_exact(&mut sigma);
    Ok(sigma)
}

/// `Σ_i log N(x_is; 0, Σ_s)` via a Cholesky factorization of `Σ_s`.
pub fn log_likelihood(
    data: &StudyData,
    phi: &LoadingMatrix,
    lambda: &LoadingMatrix,
    psi: &NoiseVariances,
) -> Result<f64> {
    if data.p() != phi.p() {
        return Err(MsfaError::input(format!(
            "data has {} variables but Φ has {} rows",
            data.p(),
            phi.p()
        )));
    }
    let sigma = assemble_sigma(phi, lambda, psi)?;
    gaussian_log_likelihood(data.x(), sigma)
}

/// Log-likelihood of the rows of `x` under `N(0, sigma)`.
pub fn gaussian_log_likelihood(x: &DMatrix<f64>, sigma: DMatrix<f64>) -> Result<f64> {
    let p = sigma.nrows();
    let chol = sigma
        .cholesky()
        .ok_or_else(|| MsfaError::numerical("covariance is not positive definite"))?;
    let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // Solve L z = xᵀ for all rows at once; the quadratic form is ‖z‖².
    let z = chol
        .l()
        .solve_lower_triangular(&x.transpose())
        .ok_or_else(|| MsfaError::numerical("triangular solve failed"))?;
    let quad = z.norm_squared();
    let n = x.nrows() as f64;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(-0.5 * (n * (p as f64 * ln_2pi + log_det) + quad))
}
