//! Full conditional updates of the Gibbs sampler.
//!
//! Every gamma distribution here is in shape/rate form: `Γ(a, b)` has mean
//! `a / b`. `rand_distr::Gamma` takes a *scale*, so draws go through
//! [`gamma_rate`] and nowhere else.
//!
//! Standard normals for the loading and score updates are drawn from the
//! chain RNG up front, in a fixed order, before any (possibly parallel)
//! per-row work. The result therefore does not depend on [`Parallelism`].

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{MsfaError, Result};
use crate::exec::{self, Parallelism};
use crate::linalg::{gaussian_from_precision, standard_normal_matrix};
use crate::model::{FactorScores, LoadingKind, LoadingMatrix, NoiseVariances, StudyData};

use super::ShrinkageState;

/// Draw from `Γ(shape, rate)`.
pub fn gamma_rate<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| MsfaError::numerical(format!("invalid gamma(shape={shape}, rate={rate}): {e}")))?;
    let v = dist.sample(rng);
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(MsfaError::numerical(format!("gamma(shape={shape}, rate={rate}) produced {v}")))
    }
}

fn check_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MsfaError::numerical(format!("non-finite value in {what}")))
    }
}

/// Joint draw of the shared and specific scores of every subject in one study:
/// `h_i = (f_i, l_i) ~ N(V Aᵀ Ψ⁻¹ x_i, V)` with `A = [Φ | Λ_s]` and
/// `V = (I + Aᵀ Ψ⁻¹ A)⁻¹`. `V` is common to all subjects, so a single
/// Cholesky factorization serves the whole study.
pub fn sample_factors<R: Rng + ?Sized>(
    data: &StudyData,
    phi: &LoadingMatrix,
    lambda: &LoadingMatrix,
    psi: &NoiseVariances,
    rng: &mut R,
) -> Result<FactorScores> {
    let (n, p) = (data.n(), data.p());
    if phi.p() != p || lambda.p() != p || psi.len() != p {
        return Err(MsfaError::input(format!(
            "study {}: dimension mismatch in factor update",
            data.id()
        )));
    }
    check_finite(data.x(), "data")?;
    let (k, j) = (phi.width(), lambda.width());
    let m = k + j;
    let mut a = DMatrix::zeros(p, m);
    a.columns_mut(0, k).copy_from(phi.values());
    a.columns_mut(k, j).copy_from(lambda.values());

    // Aᵀ Ψ⁻¹
    let mut at_psi_inv = a.transpose();
    for (col, &v) in psi.values().iter().enumerate() {
        at_psi_inv.column_mut(col).scale_mut(1.0 / v);
    }
    let mut precision = &at_psi_inv * &a;
    for d in 0..m {
        precision[(d, d)] += 1.0;
    }
    let b = &at_psi_inv * data.x().transpose(); // m × n
    let z = standard_normal_matrix(m, n, rng);

    let chol = precision.cholesky().ok_or_else(|| {
        MsfaError::numerical(format!("study {}: score precision not positive definite", data.id()))
    })?;
    let l = chol.l();
    let mut w = l
        .solve_lower_triangular(&b)
        .ok_or_else(|| MsfaError::numerical("score solve failed"))?;
    w += z;
    let h = l
        .tr_solve_lower_triangular(&w)
        .ok_or_else(|| MsfaError::numerical("score solve failed"))?;
    check_finite(&h, "factor scores")?;
    let ht = h.transpose();
    Ok(FactorScores { f: ht.columns(0, k).into_owned(), l: ht.columns(k, j).into_owned() })
}

/// Row-wise Gaussian draws for a loading matrix. `row_conditional(p)` gives
/// the conditional precision `V⁻¹` and canonical mean `b` of row `p`; `z`
/// holds the pre-drawn standard normals (row `p`, column `k`).
fn draw_loading_rows<F>(
    p: usize,
    width: usize,
    z: &DMatrix<f64>,
    mode: Parallelism,
    row_conditional: F,
    what: &str,
) -> Result<DMatrix<f64>>
where
    F: Fn(usize) -> (DMatrix<f64>, DVector<f64>) + Sync + Send,
{
    let rows = exec::try_map_indexed(p, mode, |row| {
        let (precision, b) = row_conditional(row);
        let zr = z.row(row).transpose();
        gaussian_from_precision(precision, &b, &zr).ok_or_else(|| {
            MsfaError::numerical(format!("{what}: conditional precision of row {row} is not positive definite"))
        })
    })?;
    let mut out = DMatrix::zeros(p, width);
    for (row, v) in rows.iter().enumerate() {
        out.row_mut(row).copy_from(&v.transpose());
    }
    check_finite(&out, what)?;
    Ok(out)
}

/// Shared loadings, pooling evidence from every study. Row `p` is drawn from
/// `N(V b, V)` with `V⁻¹ = D_p + Σ_s ψ_sp⁻¹ F_sᵀ F_s` and
/// `b = Σ_s ψ_sp⁻¹ F_sᵀ (x_·p − L_s λ_sp)`, where `D_p = diag(ω_pk τ_k)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_shared_loadings<R: Rng + ?Sized>(
    data: &[StudyData],
    scores: &[FactorScores],
    shrink: &ShrinkageState,
    lambdas: &[LoadingMatrix],
    psis: &[NoiseVariances],
    mode: Parallelism,
    rng: &mut R,
) -> Result<LoadingMatrix> {
    let n_studies = data.len();
    if scores.len() != n_studies || lambdas.len() != n_studies || psis.len() != n_studies {
        return Err(MsfaError::input("shared loading update needs scores, Λ and ψ for every study"));
    }
    let p = data[0].p();
    let k = shrink.width();
    if shrink.p() != p {
        return Err(MsfaError::input("shrinkage state does not match P"));
    }
    let mut grams = Vec::with_capacity(n_studies);
    let mut cross = Vec::with_capacity(n_studies);
    for s in 0..n_studies {
        let f = &scores[s].f;
        if f.ncols() != k || f.nrows() != data[s].n() {
            return Err(MsfaError::input(format!("study {s}: shared scores have wrong shape")));
        }
        let mut resid = data[s].x().clone();
        resid.gemm(-1.0, &scores[s].l, &lambdas[s].values().transpose(), 1.0);
        grams.push(f.transpose() * f);
        cross.push(f.transpose() * resid); // K × P
    }
    let z = standard_normal_matrix(k, p, rng).transpose();
    let values = draw_loading_rows(
        p,
        k,
        &z,
        mode,
        |row| {
            let mut precision = DMatrix::from_diagonal(&shrink.row_precisions(row));
            let mut b = DVector::zeros(k);
            for s in 0..n_studies {
                let w = 1.0 / psis[s].values()[row];
                precision += &grams[s] * w;
                b += cross[s].column(row) * w;
            }
            (precision, b)
        },
        "shared loadings",
    )?;
    LoadingMatrix::new(values, LoadingKind::Shared)
}

/// Specific loadings of one study: as the shared update but with the single
/// study's specific scores, residual `x − F_s Φᵀ`, and that study's shrinkage.
pub fn sample_specific_loadings<R: Rng + ?Sized>(
    data: &StudyData,
    scores: &FactorScores,
    shrink: &ShrinkageState,
    phi: &LoadingMatrix,
    psi: &NoiseVariances,
    mode: Parallelism,
    rng: &mut R,
) -> Result<LoadingMatrix> {
    let p = data.p();
    let j = shrink.width();
    let kind = LoadingKind::Specific(data.id());
    if j == 0 {
        return Ok(LoadingMatrix::zeros(p, 0, kind));
    }
    if scores.l.ncols() != j || scores.n() != data.n() {
        return Err(MsfaError::input(format!("study {}: specific scores have wrong shape", data.id())));
    }
    let mut resid = data.x().clone();
    resid.gemm(-1.0, &scores.f, &phi.values().transpose(), 1.0);
    let gram = scores.l.transpose() * &scores.l;
    let cross = scores.l.transpose() * resid;
    let z = standard_normal_matrix(j, p, rng).transpose();
    let values = draw_loading_rows(
        p,
        j,
        &z,
        mode,
        |row| {
            let w = 1.0 / psi.values()[row];
            let mut precision = &gram * w;
            for (d, v) in shrink.row_precisions(row).iter().enumerate() {
                precision[(d, d)] += v;
            }
            (precision, cross.column(row) * w)
        },
        "specific loadings",
    )?;
    LoadingMatrix::new(values, kind)
}

/// Shape and rate of `ω_pk | φ_pk, τ_k`: `Γ((ν+1)/2, (ν + τ_k φ_pk²)/2)`.
pub fn local_shrinkage_conditional(loading: f64, tau: f64, nu: f64) -> (f64, f64) {
    (0.5 * (nu + 1.0), 0.5 * (nu + tau * loading * loading))
}

/// Redraws every local precision `ω_pk` in place.
pub fn sample_local_shrinkage<R: Rng + ?Sized>(
    loadings: &LoadingMatrix,
    shrink: &mut ShrinkageState,
    nu: f64,
    rng: &mut R,
) -> Result<()> {
    let (p, m) = (shrink.p(), shrink.width());
    for k in 0..m {
        let tau = shrink.tau[k];
        for row in 0..p {
            let (shape, rate) = local_shrinkage_conditional(loadings.values()[(row, k)], tau, nu);
            shrink.omega[(row, k)] = gamma_rate(shape, rate, rng)?;
        }
    }
    Ok(())
}

/// Shape and rate of `δ_h` given everything else (`h` is 0-based):
/// shape `a + P (m − h) / 2` with `a = a1` for the first column and `a2`
/// otherwise; rate `1 + ½ Σ_{k ≥ h} τ_k^{(h)} Σ_p ω_pk φ_pk²`, where
/// `τ_k^{(h)}` is the product of `δ_1..δ_k` with `δ_h` left out.
pub fn delta_conditional(
    h: usize,
    loadings: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    delta: &DVector<f64>,
    a1: f64,
    a2: f64,
) -> (f64, f64) {
    let (p, m) = loadings.shape();
    let a = if h == 0 { a1 } else { a2 };
    let shape = a + 0.5 * (p * (m - h)) as f64;
    let mut tau_without_h: f64 = (0..h).map(|t| delta[t]).product();
    let mut sum = 0.0;
    for k in h..m {
        if k > h {
            tau_without_h *= delta[k];
        }
        let col: f64 = (0..p).map(|row| omega[(row, k)] * loadings[(row, k)].powi(2)).sum();
        sum += tau_without_h * col;
    }
    (shape, 1.0 + 0.5 * sum)
}

/// Redraws `δ_1..δ_m` one at a time, refreshing `τ` after each so every
/// update conditions on the current values.
pub fn sample_delta<R: Rng + ?Sized>(
    loadings: &LoadingMatrix,
    shrink: &mut ShrinkageState,
    a1: f64,
    a2: f64,
    rng: &mut R,
) -> Result<()> {
    for h in 0..shrink.width() {
        let (shape, rate) = delta_conditional(h, loadings.values(), &shrink.omega, &shrink.delta, a1, a2);
        shrink.delta[h] = gamma_rate(shape, rate, rng)?;
        shrink.recompute_tau();
    }
    Ok(())
}

/// Residual sums of squares `Σ_i (x_ip − φ_pᵀ f_i − λ_pᵀ l_i)²` per variable.
pub fn residual_sum_of_squares(
    data: &StudyData,
    scores: &FactorScores,
    phi: &LoadingMatrix,
    lambda: &LoadingMatrix,
) -> DVector<f64> {
    let mut resid = data.x().clone();
    resid.gemm(-1.0, &scores.f, &phi.values().transpose(), 1.0);
    resid.gemm(-1.0, &scores.l, &lambda.values().transpose(), 1.0);
    DVector::from_iterator(data.p(), resid.column_iter().map(|c| c.norm_squared()))
}

/// `ψ_sp⁻¹ ~ Γ(a_ψ + n_s/2, b_ψ + ½ SSR_p)`, independently over `p`.
pub fn sample_noise<R: Rng + ?Sized>(
    data: &StudyData,
    scores: &FactorScores,
    phi: &LoadingMatrix,
    lambda: &LoadingMatrix,
    a_psi: f64,
    b_psi: f64,
    rng: &mut R,
) -> Result<NoiseVariances> {
    let ssr = residual_sum_of_squares(data, scores, phi, lambda);
    let shape = a_psi + 0.5 * data.n() as f64;
    let mut psi = DVector::zeros(data.p());
    for (row, r) in ssr.iter().enumerate() {
        psi[row] = 1.0 / gamma_rate(shape, b_psi + 0.5 * r, rng)?;
    }
    NoiseVariances::new(psi)
}
