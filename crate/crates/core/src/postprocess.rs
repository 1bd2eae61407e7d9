//! From raw chain draws to identified estimates: posterior covariance
//! components, eigenvalue-threshold rank selection, and orthogonal Procrustes
//! alignment of the loading draws.

use nalgebra::{DMatrix, DVector};

use crate::error::{MsfaError, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{checked_svd, symmetric_eigen_desc};
use crate::model::{outer_gram, CovarianceEstimate};
use crate::sampler::ChainDraws;

/// Eigenvalue threshold used for rank selection unless configured otherwise.
/// Selections were reported to be unchanged at 0.1.
pub const DEFAULT_EIGEN_THRESHOLD: f64 = 0.05;

/// Draws summed per parallel work item. Fixed so that the summation order,
/// and hence every bit of the result, is independent of the thread count.
const REDUCTION_CHUNK: usize = 64;

/// Posterior means of `Φ Φᵀ`, `Λ_s Λ_sᵀ` and `ψ_s` over all retained draws.
///
/// These are rotation-invariant, so no alignment is needed first. `k_hat`
/// and `j_hat` are set to the truncation widths until [`select_ranks`] runs.
pub fn estimate_covariances(draws: &ChainDraws, mode: Parallelism) -> Result<CovarianceEstimate> {
    if draws.is_empty() {
        return Err(MsfaError::input("cannot estimate covariances from zero draws"));
    }
    let (p, n_studies) = (draws.p, draws.n_studies());
    let chunks: Vec<_> = draws.draws.chunks(REDUCTION_CHUNK).collect();
    let partial = exec::map_slice(&chunks, mode, |chunk| {
        let mut phi = DMatrix::zeros(p, p);
        let mut lambda = vec![DMatrix::zeros(p, p); n_studies];
        let mut psi = vec![DVector::zeros(p); n_studies];
        for d in chunk.iter() {
            phi += outer_gram(&d.phi);
            for s in 0..n_studies {
                lambda[s] += outer_gram(&d.lambdas[s]);
                psi[s] += &d.psis[s];
            }
        }
        (phi, lambda, psi)
    });

    let mut sigma_phi = DMatrix::zeros(p, p);
    let mut sigma_lambda = vec![DMatrix::zeros(p, p); n_studies];
    let mut psi_hat = vec![DVector::zeros(p); n_studies];
    for (phi, lambda, psi) in partial {
        sigma_phi += phi;
        for s in 0..n_studies {
            sigma_lambda[s] += &lambda[s];
            psi_hat[s] += &psi[s];
        }
    }
    let r = draws.len() as f64;
    sigma_phi /= r;
    sigma_lambda.iter_mut().for_each(|m| *m /= r);
    psi_hat.iter_mut().for_each(|v| *v /= r);
    Ok(CovarianceEstimate {
        sigma_phi,
        sigma_lambda,
        psi_hat,
        k_hat: draws.k_star,
        j_hat: draws.j_star.clone(),
    })
}

/// Spectrum of a covariance component and its leading eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct RankDecomposition {
    pub rank: usize,
    /// All eigenvalues, decreasing.
    pub eigenvalues: DVector<f64>,
    /// `P × rank` orthonormal eigenvectors, so `U diag(ν_1..ν_rank) Uᵀ ≈ Σ`.
    pub basis: DMatrix<f64>,
}

/// Counts the eigenvalues of `sigma` strictly above `threshold`.
pub fn select_rank(sigma: &DMatrix<f64>, threshold: f64) -> Result<RankDecomposition> {
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(MsfaError::input(format!("eigenvalue threshold must be positive, got {threshold}")));
    }
    if !sigma.is_square() {
        return Err(MsfaError::input("rank selection needs a square matrix"));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(MsfaError::numerical("non-finite entry in covariance estimate"));
    }
    let (eigenvalues, vectors) = symmetric_eigen_desc(sigma);
    if let Some(min) = eigenvalues.iter().copied().reduce(f64::min) {
        if min < -1e-6 {
            log::warn!("covariance estimate has a negative eigenvalue {min:e}");
        }
    }
    let rank = eigenvalues.iter().filter(|&&v| v > threshold).count();
    let basis = vectors.columns(0, rank).into_owned();
    Ok(RankDecomposition { rank, eigenvalues, basis })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankSelection {
    pub k_hat: usize,
    pub j_hat: Vec<usize>,
    pub threshold: f64,
    pub shared: RankDecomposition,
    pub specific: Vec<RankDecomposition>,
}

/// Selects `K̂` from `Σ̂_Φ` and each `Ĵ_s` from `Σ̂_{Λ_s}`, recording them in
/// the estimate.
pub fn select_ranks(estimate: &mut CovarianceEstimate, threshold: f64) -> Result<RankSelection> {
    let shared = select_rank(&estimate.sigma_phi, threshold)?;
    let specific = estimate
        .sigma_lambda
        .iter()
        .map(|m| select_rank(m, threshold))
        .collect::<Result<Vec<_>>>()?;
    estimate.k_hat = shared.rank;
    estimate.j_hat = specific.iter().map(|d| d.rank).collect();
    Ok(RankSelection {
        k_hat: estimate.k_hat,
        j_hat: estimate.j_hat.clone(),
        threshold,
        shared,
        specific,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpOptions {
    /// Outer iterations; one is the recommended setting.
    pub max_iters: usize,
    /// Stop when successive targets differ by less than this (Frobenius).
    pub tol: f64,
    pub keep_rotations: bool,
}

impl Default for OpOptions {
    fn default() -> Self {
        OpOptions { max_iters: 1, tol: 1e-6, keep_rotations: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpResult {
    pub phi_star: DMatrix<f64>,
    /// Final per-draw rotations, when requested.
    pub rotations: Option<Vec<DMatrix<f64>>>,
    pub iterations: usize,
    /// `Σ_r ‖Φ^(r) Q^(r) − Φ*‖²_F` after each outer iteration.
    pub objective: Vec<f64>,
    pub converged: bool,
}

/// Orthogonal `Q` minimizing `‖draw · Q − target‖_F`: with
/// `drawᵀ target = U S Vᵀ`, `Q = U Vᵀ`.
pub fn procrustes_rotation(draw: &DMatrix<f64>, target: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let m = draw.ncols();
    if m == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let (u, _, v_t) = checked_svd(&(draw.transpose() * target))?;
    Some(u * v_t)
}

/// `‖a − b‖²_F`, the Procrustes loss `tr{(a − b)ᵀ(a − b)}`.
pub fn procrustes_loss(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm_squared()
}

/// Aligns a set of loading draws by alternating (1) the per-draw Procrustes
/// rotation onto the current target and (2) averaging the rotated draws into
/// the new target, until the target moves less than `tol` or `max_iters`
/// iterations have run.
pub fn op_align(
    draws: &[&DMatrix<f64>],
    init: &DMatrix<f64>,
    opts: &OpOptions,
    mode: Parallelism,
) -> Result<OpResult> {
    if draws.is_empty() {
        return Err(MsfaError::input("Procrustes alignment needs at least one draw"));
    }
    let shape = init.shape();
    if let Some(r) = draws.iter().position(|d| d.shape() != shape) {
        return Err(MsfaError::input(format!(
            "draw {r} has shape {:?}, expected {shape:?}",
            draws[r].shape()
        )));
    }
    if opts.max_iters == 0 {
        return Err(MsfaError::input("max_iters must be at least 1"));
    }
    let r = draws.len() as f64;
    let mut target = init.clone();
    let mut objective = Vec::new();
    let mut rotations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let rotated = exec::try_map_indexed(draws.len(), mode, |i| {
            let q = procrustes_rotation(draws[i], &target)
                .ok_or_else(|| MsfaError::numerical(format!("SVD failed for draw {i}")))?;
            Ok::<_, MsfaError>((draws[i] * &q, q))
        })?;
        let mut next = DMatrix::zeros(shape.0, shape.1);
        for (a, _) in &rotated {
            next += a;
        }
        next /= r;
        objective.push(rotated.iter().map(|(a, _)| procrustes_loss(a, &next)).sum());
        let moved = (&next - &target).norm();
        target = next;
        rotations = rotated.into_iter().map(|(_, q)| q).collect();
        if moved < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(OpResult {
        phi_star: target,
        rotations: opts.keep_rotations.then_some(rotations),
        iterations,
        objective,
        converged,
    })
}

/// Reduces a `P × m` draw to `P × k` columns spanning its projection onto the
/// orthonormal `basis` (`P × k`): with `C = Uᵀ Φ = W S Zᵀ`, returns `U W S`,
/// whose Gram matrix is exactly `U Uᵀ Φ Φᵀ U Uᵀ`.
pub fn truncate_draw(draw: &DMatrix<f64>, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (p, k) = basis.shape();
    if draw.nrows() != p {
        return Err(MsfaError::input("draw and basis have different row counts"));
    }
    let mut out = DMatrix::zeros(p, k);
    if k == 0 || draw.ncols() == 0 {
        return Ok(out);
    }
    let coords = basis.transpose() * draw;
    let (w, singular_values, _) =
        checked_svd(&coords).ok_or_else(|| MsfaError::numerical("SVD failed while truncating a draw"))?;
    let used = singular_values.len();
    let scaled = w * DMatrix::from_diagonal(&singular_values);
    out.columns_mut(0, used).copy_from(&(basis * scaled));
    Ok(out)
}

/// Flips column signs so each column's largest-magnitude entry is positive.
/// Returns the signs applied.
pub fn fix_column_signs(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let idx = col.iamax();
        let sign = if col.is_empty() || col[idx] >= 0.0 { 1.0 } else { -1.0 };
        if sign < 0.0 {
            col.neg_mut();
        }
        signs.push(sign);
    }
    signs
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedLoadings {
    pub phi_star: DMatrix<f64>,
    pub lambda_star: Vec<DMatrix<f64>>,
    pub q_phi: Option<Vec<DMatrix<f64>>>,
    pub q_lambda: Vec<Option<Vec<DMatrix<f64>>>>,
}

fn align_component(
    draws: Vec<&DMatrix<f64>>,
    decomposition: &RankDecomposition,
    opts: &OpOptions,
    mode: Parallelism,
) -> Result<(DMatrix<f64>, Option<Vec<DMatrix<f64>>>)> {
    let p = draws[0].nrows();
    let width = draws[0].ncols();
    let rank = decomposition.rank;
    if rank == 0 {
        let rotations = opts.keep_rotations.then(|| vec![DMatrix::zeros(0, 0); draws.len()]);
        return Ok((DMatrix::zeros(p, 0), rotations));
    }
    let result = if rank == width {
        let init = (*draws.last().expect("non-empty")).clone();
        op_align(&draws, &init, opts, mode)?
    } else {
        let truncated = exec::map_slice(&draws, mode, |d| truncate_draw(d, &decomposition.basis))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DMatrix<f64>> = truncated.iter().collect();
        let init = truncated.last().expect("non-empty").clone();
        op_align(&refs, &init, opts, mode)?
    };
    let mut phi_star = result.phi_star;
    let signs = fix_column_signs(&mut phi_star);
    let rotations = result.rotations.map(|qs| {
        qs.into_iter()
            .map(|mut q| {
                for (mut col, s) in q.column_iter_mut().zip(&signs) {
                    col *= *s;
                }
                q
            })
            .collect()
    });
    Ok((phi_star, rotations))
}

/// Truncates every draw to the selected rank (skipped when the rank equals
/// the sampled width), then aligns `Φ` and each `Λ_s` independently. Column
/// signs of the result follow [`fix_column_signs`].
pub fn align_all(
    draws: &ChainDraws,
    ranks: &RankSelection,
    opts: &OpOptions,
    mode: Parallelism,
) -> Result<AlignedLoadings> {
    if draws.is_empty() {
        return Err(MsfaError::input("cannot align zero draws"));
    }
    if ranks.specific.len() != draws.n_studies() {
        return Err(MsfaError::input("rank selection and draws disagree on the number of studies"));
    }
    let (phi_star, q_phi) = align_component(draws.phi_draws(), &ranks.shared, opts, mode)?;
    let mut lambda_star = Vec::new();
    let mut q_lambda = Vec::new();
    for s in 0..draws.n_studies() {
        let (l, q) = align_component(draws.lambda_draws(s), &ranks.specific[s], opts, mode)?;
        lambda_star.push(l);
        q_lambda.push(q);
    }
    Ok(AlignedLoadings { phi_star, lambda_star, q_phi, q_lambda })
}
