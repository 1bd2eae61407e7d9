use msfa::exec::Parallelism;
use msfa::linalg::{checked_svd, orthogonality_error, random_orthogonal, standard_normal_matrix};
use msfa::metrics::loading_correlation;
use msfa::model::outer_gram;
use msfa::postprocess::{
    align_all, estimate_covariances, op_align, procrustes_loss, select_rank, select_ranks, OpOptions, RankDecomposition,
    RankSelection,
};
use msfa::sampler::{chain_rng, run_chain, ChainDraws, Draw, PriorHyperparams, SamplerConfig};
use msfa::simgen::{generate_data, generate_truth, scenario, Scale};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn chain_from_phis(phis: Vec<DMatrix<f64>>) -> ChainDraws {
    let p = phis[0].nrows();
    let mut c = ChainDraws::new(p, phis[0].ncols(), vec![0], vec![10]);
    for phi in phis {
        c.draws.push(Draw {
            phi,
            lambdas: vec![DMatrix::zeros(p, 0)],
            psis: vec![DVector::from_element(p, 1.0)],
            scores: None,
        });
    }
    c
}

/// Cyclic Jacobi rotations on a copy of `a`; eigenvalues sorted decreasing.
fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

#[test]
fn jacobi_oracle_recovers_known_spectrum() {
    let mut rng = chain_rng(40, 0);
    let q = random_orthogonal(5, &mut rng);
    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.5, 1.0, 0.3, 0.0]));
    let ev = jacobi_eigenvalues(&(&q * d * q.transpose()));
    for (a, b) in ev.iter().zip([4.0, 2.5, 1.0, 0.3, 0.0]) {
        assert!((a - b).abs() < 1e-12, "{ev:?}");
    }
}

#[test]
fn rank_of_fixed_six_by_three_loadings_matches_jacobi() {
    let phi0 = DMatrix::from_row_slice(
        6,
        3,
        &[
            0.9, 0.0, 0.2, //
            0.8, 0.1, 0.0, //
            0.0, 0.7, -0.3, //
            -0.2, 0.6, 0.0, //
            0.0, 0.0, 0.5, //
            0.3, -0.4, 0.4,
        ],
    );
    let sigma = outer_gram(&phi0);
    let r = select_rank(&sigma, 0.05).unwrap();
    assert_eq!(r.rank, 3);
    let oracle = jacobi_eigenvalues(&sigma);
    for (a, b) in r.eigenvalues.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-12, "{} vs {oracle:?}", r.eigenvalues);
    }
    assert!(oracle[2] > 0.05 && oracle[3].abs() < 1e-12);
}

#[test]
fn synthetic_rotations_are_undone() {
    let mut rng = chain_rng(41, 0);
    let phi0 = standard_normal_matrix(12, 3, &mut rng);
    let draws: Vec<_> = (0..200).map(|_| &phi0 * random_orthogonal(3, &mut rng)).collect();
    let refs: Vec<_> = draws.iter().collect();
    let opts = OpOptions { keep_rotations: true, ..OpOptions::default() };
    let res = op_align(&refs, draws.last().unwrap(), &opts, Parallelism::Sequential).unwrap();
    assert!((outer_gram(&res.phi_star) - outer_gram(&phi0)).amax() < 1e-6);
    for (d, q) in draws.iter().zip(res.rotations.as_ref().unwrap()) {
        assert!(orthogonality_error(q) < 1e-8);
        assert!(procrustes_loss(&(d * q), &res.phi_star) < 1e-10);
    }
}

#[test]
fn wide_draws_with_exact_rank_deficiency_stay_aligned() {
    // More columns than rows makes every `Φᵀ Φ*` exactly singular.
    let mut rng = chain_rng(1982378650162878420, 0);
    let phi0 = standard_normal_matrix(2, 3, &mut rng);
    let draws: Vec<_> = (0..18).map(|_| &phi0 * random_orthogonal(3, &mut rng)).collect();
    let refs: Vec<_> = draws.iter().collect();
    let opts = OpOptions { max_iters: 6, tol: 0.0, keep_rotations: true };
    let res = op_align(&refs, &draws[0], &opts, Parallelism::Sequential).unwrap();
    assert!(res.objective.iter().all(|&v| v < 1e-20), "{:?}", res.objective);
    for (d, q) in draws.iter().zip(res.rotations.as_ref().unwrap()) {
        assert!(procrustes_loss(&(d * q), &res.phi_star) < 1e-20);
    }
}

#[test]
fn modes_agree_on_alignment() {
    let mut rng = chain_rng(42, 0);
    let phi0 = standard_normal_matrix(15, 4, &mut rng);
    let draws: Vec<_> = (0..64)
        .map(|_| (&phi0 + standard_normal_matrix(15, 4, &mut rng) * 0.2) * random_orthogonal(4, &mut rng))
        .collect();
    let chain = chain_from_phis(draws);
    let a = estimate_covariances(&chain, Parallelism::Sequential).unwrap();
    let b = estimate_covariances(&chain, Parallelism::Parallel).unwrap();
    assert_eq!(a, b);
    let mut est = a;
    let ranks = select_ranks(&mut est, 0.05).unwrap();
    let opts = OpOptions { max_iters: 5, tol: 0.0, keep_rotations: true };
    let x = align_all(&chain, &ranks, &opts, Parallelism::Sequential).unwrap();
    let y = align_all(&chain, &ranks, &opts, Parallelism::Parallel).unwrap();
    assert_eq!(x, y);
}

/// The shared rank forced to `k`, using the top `k` eigenvectors of `Σ̂_Φ`.
fn at_rank(ranks: &RankSelection, sigma_phi: &DMatrix<f64>, k: usize) -> RankSelection {
    let mut r = ranks.clone();
    let full = select_rank(sigma_phi, f64::MIN_POSITIVE).unwrap();
    r.shared = RankDecomposition { rank: k, eigenvalues: full.eigenvalues, basis: full.basis.columns(0, k).into_owned() };
    r.k_hat = k;
    r
}

#[test]
fn scenario_one_shared_loadings_recovered() {
    let spec = scenario(1, Scale::Desk).unwrap();
    let truth = generate_truth(&spec).unwrap();
    let mut corr = Vec::new();
    for rep in 1..=3 {
        let data = generate_data(&truth, &spec, rep).unwrap();
        let cfg = SamplerConfig { n_iter: 4000, burn_in: 1000, seed: rep, ..SamplerConfig::new(spec.p, data.len()) };
        let draws = run_chain(&data, &PriorHyperparams::defaults(data.len()), &cfg).unwrap();
        let mut est = estimate_covariances(&draws, Parallelism::Parallel).unwrap();
        let ranks = select_ranks(&mut est, 0.05).unwrap();
        let fixed = at_rank(&ranks, &est.sigma_phi, spec.k_true);
        let aligned = align_all(&draws, &fixed, &OpOptions::default(), Parallelism::Parallel).unwrap();
        corr.push(loading_correlation(&aligned.phi_star, truth.phi.values()).unwrap().abs());
    }
    corr.sort_by(f64::total_cmp);
    eprintln!("loading correlations {corr:?}");
    assert!(corr[1] > 0.9, "{corr:?}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn rank_invariant_under_conjugation(seed in any::<u64>(), p in 2usize..9, k in 0usize..5, threshold in 0.01f64..2.0) {
        let mut rng = chain_rng(seed, 0);
        let sigma = outer_gram(&standard_normal_matrix(p, k.min(p), &mut rng));
        let q = random_orthogonal(p, &mut rng);
        let a = select_rank(&sigma, threshold).unwrap();
        let b = select_rank(&(&q * &sigma * q.transpose()), threshold).unwrap();
        prop_assert!((&a.eigenvalues - &b.eigenvalues).amax() < 1e-8);
        // Eigenvalues within rounding of the threshold may legitimately flip.
        let near = a.eigenvalues.iter().any(|v| (v - threshold).abs() < 1e-8);
        prop_assert!(near || a.rank == b.rank);
    }

    #[test]
    fn rank_monotone_in_threshold(seed in any::<u64>(), p in 1usize..9, t1 in 0.001f64..3.0, t2 in 0.001f64..3.0) {
        let mut rng = chain_rng(seed, 0);
        let sigma = outer_gram(&standard_normal_matrix(p, p, &mut rng));
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        prop_assert!(select_rank(&sigma, lo).unwrap().rank >= select_rank(&sigma, hi).unwrap().rank);
    }

    #[test]
    fn estimate_invariant_under_per_draw_rotation(seed in any::<u64>(), p in 1usize..8, m in 1usize..5, r in 1usize..12) {
        let mut rng = chain_rng(seed, 0);
        let draws: Vec<_> = (0..r).map(|_| standard_normal_matrix(p, m, &mut rng)).collect();
        let rotated: Vec<_> = draws.iter().map(|d| d * random_orthogonal(m, &mut rng)).collect();
        let a = estimate_covariances(&chain_from_phis(draws), Parallelism::Sequential).unwrap();
        let b = estimate_covariances(&chain_from_phis(rotated), Parallelism::Sequential).unwrap();
        prop_assert!((&a.sigma_phi - &b.sigma_phi).amax() < 1e-10);
    }

    #[test]
    fn op_rotations_orthogonal_and_objective_non_increasing(seed in any::<u64>(), p in 2usize..10, m in 1usize..5, r in 1usize..20, noise in 0.0f64..2.0) {
        let mut rng = chain_rng(seed, 0);
        let phi0 = standard_normal_matrix(p, m, &mut rng);
        let draws: Vec<_> = (0..r)
            .map(|_| (&phi0 + standard_normal_matrix(p, m, &mut rng) * noise) * random_orthogonal(m, &mut rng))
            .collect();
        let refs: Vec<_> = draws.iter().collect();
        let opts = OpOptions { max_iters: 6, tol: 0.0, keep_rotations: true };
        let res = op_align(&refs, &draws[0], &opts, Parallelism::Sequential).unwrap();
        for q in res.rotations.unwrap() {
            prop_assert!(orthogonality_error(&q) < 1e-8);
        }
        for w in res.objective.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-10) + 1e-12, "{:?}", res.objective);
        }
    }

    #[test]
    fn checked_svd_reconstructs_low_rank(seed in any::<u64>(), r in 1usize..8, c in 1usize..8, rank in 0usize..4) {
        let mut rng = chain_rng(seed, 0);
        let a = standard_normal_matrix(r, rank, &mut rng) * standard_normal_matrix(rank, c, &mut rng);
        let (u, s, v_t) = checked_svd(&a).unwrap();
        prop_assert!((&u * DMatrix::from_diagonal(&s) * &v_t - &a).amax() < 1e-10);
        prop_assert!((u.transpose() * &u - DMatrix::<f64>::identity(u.ncols(), u.ncols())).amax() < 1e-10);
        prop_assert!((&v_t * v_t.transpose() - DMatrix::<f64>::identity(v_t.nrows(), v_t.nrows())).amax() < 1e-10);
    }
}
