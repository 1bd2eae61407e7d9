//! Gibbs sampler for the multi-study factor model under the multiplicative
//! gamma shrinkage prior, at fixed truncation levels `K*` and `J_s*`.
//!
//! Loading entries have prior `N(0, 1/(ω_pk τ_k))` with local precisions
//! `ω_pk ~ Γ(ν/2, ν/2)` and column precisions `τ_k = δ_1 ⋯ δ_k`,
//! `δ_1 ~ Γ(a1, 1)`, `δ_l ~ Γ(a2, 1)` for `l ≥ 2`; error precisions are
//! `ψ⁻¹ ~ Γ(a_ψ, b_ψ)`. All gammas are shape/rate.
//!
//! One sweep updates, in order: factor scores (jointly per subject), shared
//! loadings, specific loadings, local shrinkage, column multipliers, error
//! variances.

mod conditionals;

pub use conditionals::{
    delta_conditional, gamma_rate, local_shrinkage_conditional, residual_sum_of_squares, sample_delta,
    sample_factors, sample_local_shrinkage, sample_noise, sample_shared_loadings, sample_specific_loadings,
};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MsfaError, Result};
use crate::exec::{self, Parallelism};
use crate::model::{validate_studies, FactorScores, LoadingMatrix, NoiseVariances, StudyData};

/// Hyperparameters of one multiplicative gamma shrinkage prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShrinkagePrior {
    pub nu: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Default for ShrinkagePrior {
    fn default() -> Self {
        ShrinkagePrior { nu: 3.0, a1: 2.1, a2: 3.1 }
    }
}

impl ShrinkagePrior {
    fn validate(&self, what: &str) -> Result<()> {
        for (name, v) in [("nu", self.nu), ("a1", self.a1), ("a2", self.a2)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(MsfaError::input(format!("{what}: {name} must be positive, got {v}")));
            }
        }
        if self.a2 <= 1.0 {
            log::warn!("{what}: a2 = {} ≤ 1, so column shrinkage need not increase with the column index", self.a2);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorHyperparams {
    pub shared: ShrinkagePrior,
    /// One prior per study.
    pub specific: Vec<ShrinkagePrior>,
    pub a_psi: f64,
    pub b_psi: f64,
}

impl PriorHyperparams {
    /// ν = 3, a1 = 2.1, a2 = 3.1 for every loading matrix; a_ψ = 1, b_ψ = 0.3.
    pub fn defaults(n_studies: usize) -> Self {
        PriorHyperparams {
            shared: ShrinkagePrior::default(),
            specific: vec![ShrinkagePrior::default(); n_studies],
            a_psi: 1.0,
            b_psi: 0.3,
        }
    }

    pub fn validate(&self, n_studies: usize) -> Result<()> {
        self.shared.validate("shared prior")?;
        if self.specific.len() != n_studies {
            return Err(MsfaError::input(format!(
                "{} specific priors for {n_studies} studies",
                self.specific.len()
            )));
        }
        for (s, prior) in self.specific.iter().enumerate() {
            prior.validate(&format!("study {s} prior"))?;
        }
        if !(self.a_psi > 0.0 && self.b_psi > 0.0 && self.a_psi.is_finite() && self.b_psi.is_finite()) {
            return Err(MsfaError::input("a_psi and b_psi must be positive"));
        }
        Ok(())
    }
}

/// Local (`omega`, `P × m`) and global (`delta`, `tau`) shrinkage of one
/// loading matrix. `tau` is always the running product of `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageState {
    pub omega: DMatrix<f64>,
    pub delta: DVector<f64>,
    pub tau: DVector<f64>,
}

impl ShrinkageState {
    pub fn from_delta(omega: DMatrix<f64>, delta: DVector<f64>) -> Self {
        assert_eq!(omega.ncols(), delta.len(), "omega and delta widths differ");
        let mut s = ShrinkageState { omega, tau: delta.clone(), delta };
        s.recompute_tau();
        s
    }

    /// ω at its prior mean 1, δ at its prior means (a1, a2, a2, ...).
    pub fn prior_mean(p: usize, m: usize, prior: &ShrinkagePrior) -> Self {
        let delta = DVector::from_fn(m, |h, _| if h == 0 { prior.a1 } else { prior.a2 });
        Self::from_delta(DMatrix::from_element(p, m, 1.0), delta)
    }

    pub fn draw_prior<R: Rng + ?Sized>(p: usize, m: usize, prior: &ShrinkagePrior, rng: &mut R) -> Result<Self> {
        let mut omega = DMatrix::zeros(p, m);
        for k in 0..m {
            for row in 0..p {
                omega[(row, k)] = gamma_rate(0.5 * prior.nu, 0.5 * prior.nu, rng)?;
            }
        }
        let mut delta = DVector::zeros(m);
        for h in 0..m {
            delta[h] = gamma_rate(if h == 0 { prior.a1 } else { prior.a2 }, 1.0, rng)?;
        }
        Ok(Self::from_delta(omega, delta))
    }

    /// Recomputes `tau` from scratch as the running product of `delta`.
    pub fn recompute_tau(&mut self) {
        let mut acc = 1.0;
        for (t, d) in self.tau.iter_mut().zip(self.delta.iter()) {
            acc *= d;
            *t = acc;
        }
    }

    pub fn p(&self) -> usize {
        self.omega.nrows()
    }

    pub fn width(&self) -> usize {
        self.delta.len()
    }

    /// Prior precisions `ω_pk τ_k` of row `p`.
    pub fn row_precisions(&self, row: usize) -> DVector<f64> {
        DVector::from_fn(self.width(), |k, _| self.omega[(row, k)] * self.tau[k])
    }

    /// Draws a loading matrix from `N(0, 1/(ω τ))` entrywise.
    pub fn draw_loadings<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        DMatrix::from_fn(self.p(), self.width(), |row, k| {
            let sd = (self.omega[(row, k)] * self.tau[k]).sqrt().recip();
            sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        })
    }
}

/// Default truncation: `min(⌈P/2⌉, 20)`, at least 1.
pub fn default_truncation(p: usize) -> usize {
    p.div_ceil(2).clamp(1, 20)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k_star: usize,
    /// Truncation per study.
    pub j_star: Vec<usize>,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub n_chains: usize,
    /// Keep the factor scores of every retained draw.
    pub store_scores: bool,
    /// On failure, hand back the draws retained so far inside the error.
    pub keep_partial: bool,
    pub parallelism: Parallelism,
}

impl SamplerConfig {
    /// Defaults: default truncation for every matrix, 15000 iterations with
    /// 5000 burn-in, no thinning, one chain.
    pub fn new(p: usize, n_studies: usize) -> Self {
        let t = default_truncation(p);
        SamplerConfig {
            k_star: t,
            j_star: vec![t; n_studies],
            n_iter: 15_000,
            burn_in: 5_000,
            thin: 1,
            seed: 0,
            n_chains: 1,
            store_scores: false,
            keep_partial: false,
            parallelism: Parallelism::default(),
        }
    }

    pub fn validate(&self, n_studies: usize) -> Result<()> {
        if self.k_star == 0 {
            return Err(MsfaError::input("k_star must be at least 1"));
        }
        if self.j_star.len() != n_studies {
            return Err(MsfaError::input(format!("{} j_star values for {n_studies} studies", self.j_star.len())));
        }
        if self.burn_in >= self.n_iter {
            return Err(MsfaError::input(format!(
                "burn_in ({}) must be smaller than n_iter ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(MsfaError::input("thin must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(MsfaError::input("n_chains must be at least 1"));
        }
        Ok(())
    }

    /// Number of retained draws per chain, `(n_iter − burn_in) / thin`
    /// (integer division). Iteration `i` (1-based) is kept when `i > burn_in`
    /// and `(i − burn_in)` is a multiple of `thin`.
    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// One retained posterior draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub phi: DMatrix<f64>,
    pub lambdas: Vec<DMatrix<f64>>,
    pub psis: Vec<DVector<f64>>,
    pub scores: Option<Vec<FactorScores>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub p: usize,
    pub k_star: usize,
    pub j_star: Vec<usize>,
    pub n_per_study: Vec<usize>,
    pub draws: Vec<Draw>,
}

impl ChainDraws {
    pub fn new(p: usize, k_star: usize, j_star: Vec<usize>, n_per_study: Vec<usize>) -> Self {
        ChainDraws { p, k_star, j_star, n_per_study, draws: Vec::new() }
    }

    pub fn n_studies(&self) -> usize {
        self.j_star.len()
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Concatenates chains over the same model, in order.
    pub fn merge(chains: Vec<ChainDraws>) -> Result<ChainDraws> {
        let mut it = chains.into_iter();
        let mut out = it.next().ok_or_else(|| MsfaError::input("no chains to merge"))?;
        for c in it {
            if c.p != out.p || c.k_star != out.k_star || c.j_star != out.j_star {
                return Err(MsfaError::input("cannot merge chains with different dimensions"));
            }
            out.draws.extend(c.draws);
        }
        Ok(out)
    }

    /// Shared loading draws.
    pub fn phi_draws(&self) -> Vec<&DMatrix<f64>> {
        self.draws.iter().map(|d| &d.phi).collect()
    }

    /// Specific loading draws of study `s`.
    pub fn lambda_draws(&self, s: usize) -> Vec<&DMatrix<f64>> {
        self.draws.iter().map(|d| &d.lambdas[s]).collect()
    }
}

/// Complete sampler state: parameters, shrinkage variables and scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub phi: LoadingMatrix,
    pub lambdas: Vec<LoadingMatrix>,
    pub psis: Vec<NoiseVariances>,
    pub shared: ShrinkageState,
    pub specific: Vec<ShrinkageState>,
    pub scores: Vec<FactorScores>,
}

impl GibbsState {
    /// Starting point: ω and δ at prior means, ψ at the pooled column
    /// variances, loadings `N(0, 0.1²)`, scores drawn from their conditional.
    pub fn initialize<R: Rng + ?Sized>(
        data: &[StudyData],
        hyper: &PriorHyperparams,
        k_star: usize,
        j_star: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let p = validate_studies(data)?;
        let shared = ShrinkageState::prior_mean(p, k_star, &hyper.shared);
        let specific: Vec<_> = j_star
            .iter()
            .zip(&hyper.specific)
            .map(|(&j, prior)| ShrinkageState::prior_mean(p, j, prior))
            .collect();

        let mut sum_sq = DVector::<f64>::zeros(p);
        let mut total = 0usize;
        for s in data {
            for (col, c) in s.x().column_iter().enumerate() {
                sum_sq[col] += c.norm_squared();
            }
            total += s.n();
        }
        let psi0 = NoiseVariances::new(sum_sq.map(|v| (v / (total as f64 - 1.0)).max(1e-6)))?;

        let small = Normal::new(0.0, 0.1).expect("valid normal");
        let phi = LoadingMatrix::shared(DMatrix::from_fn(p, k_star, |_, _| small.sample(rng)))?;
        let mut lambdas = Vec::with_capacity(data.len());
        for (s, &j) in j_star.iter().enumerate() {
            lambdas.push(LoadingMatrix::specific(s, DMatrix::from_fn(p, j, |_, _| small.sample(rng)))?);
        }
        let psis = vec![psi0; data.len()];
        let mut scores = Vec::with_capacity(data.len());
        for s in 0..data.len() {
            scores.push(sample_factors(&data[s], &phi, &lambdas[s], &psis[s], rng)?);
        }
        Ok(GibbsState { phi, lambdas, psis, shared, specific, scores })
    }

    /// A draw of every parameter from the prior, with scores from `N(0, I)`.
    pub fn draw_prior<R: Rng + ?Sized>(
        p: usize,
        n_per_study: &[usize],
        hyper: &PriorHyperparams,
        k_star: usize,
        j_star: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let shared = ShrinkageState::draw_prior(p, k_star, &hyper.shared, rng)?;
        let phi = LoadingMatrix::shared(shared.draw_loadings(rng))?;
        let mut specific = Vec::new();
        let mut lambdas = Vec::new();
        let mut psis = Vec::new();
        let mut scores = Vec::new();
        for (s, (&j, prior)) in j_star.iter().zip(&hyper.specific).enumerate() {
            let st = ShrinkageState::draw_prior(p, j, prior, rng)?;
            lambdas.push(LoadingMatrix::specific(s, st.draw_loadings(rng))?);
            specific.push(st);
        }
        for _ in 0..j_star.len() {
            let mut psi = DVector::zeros(p);
            for v in psi.iter_mut() {
                *v = 1.0 / gamma_rate(hyper.a_psi, hyper.b_psi, rng)?;
            }
            psis.push(NoiseVariances::new(psi)?);
        }
        for (&n, &j) in n_per_study.iter().zip(j_star) {
            scores.push(FactorScores {
                f: crate::linalg::standard_normal_matrix(n, k_star, rng),
                l: crate::linalg::standard_normal_matrix(n, j, rng),
            });
        }
        Ok(GibbsState { phi, lambdas, psis, shared, specific, scores })
    }

    /// One full Gibbs sweep.
    pub fn sweep<R: Rng + ?Sized>(
        &mut self,
        data: &[StudyData],
        hyper: &PriorHyperparams,
        mode: Parallelism,
        rng: &mut R,
    ) -> Result<()> {
        for s in 0..data.len() {
            self.scores[s] = sample_factors(&data[s], &self.phi, &self.lambdas[s], &self.psis[s], rng)?;
        }
        self.phi = sample_shared_loadings(data, &self.scores, &self.shared, &self.lambdas, &self.psis, mode, rng)?;
        for s in 0..data.len() {
            self.lambdas[s] =
                sample_specific_loadings(&data[s], &self.scores[s], &self.specific[s], &self.phi, &self.psis[s], mode, rng)?;
        }
        sample_local_shrinkage(&self.phi, &mut self.shared, hyper.shared.nu, rng)?;
        for s in 0..data.len() {
            sample_local_shrinkage(&self.lambdas[s], &mut self.specific[s], hyper.specific[s].nu, rng)?;
        }
        sample_delta(&self.phi, &mut self.shared, hyper.shared.a1, hyper.shared.a2, rng)?;
        for s in 0..data.len() {
            let prior = &hyper.specific[s];
            sample_delta(&self.lambdas[s], &mut self.specific[s], prior.a1, prior.a2, rng)?;
        }
        for s in 0..data.len() {
            self.psis[s] =
                sample_noise(&data[s], &self.scores[s], &self.phi, &self.lambdas[s], hyper.a_psi, hyper.b_psi, rng)?;
        }
        Ok(())
    }

    fn snapshot(&self, with_scores: bool) -> Draw {
        Draw {
            phi: self.phi.values().clone(),
            lambdas: self.lambdas.iter().map(|l| l.values().clone()).collect(),
            psis: self.psis.iter().map(|p| p.values().clone()).collect(),
            scores: with_scores.then(|| self.scores.clone()),
        }
    }
}

/// RNG of chain `chain` under master seed `seed`: one ChaCha8 stream per chain.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Runs chain 0 of `cfg`.
pub fn run_chain(data: &[StudyData], hyper: &PriorHyperparams, cfg: &SamplerConfig) -> Result<ChainDraws> {
    run_chain_with_index(data, hyper, cfg, 0)
}

/// Runs all `cfg.n_chains` chains, in parallel when enabled. Chain `c` uses
/// [`chain_rng`]`(cfg.seed, c)`, so results do not depend on scheduling.
pub fn run_chains(data: &[StudyData], hyper: &PriorHyperparams, cfg: &SamplerConfig) -> Result<Vec<ChainDraws>> {
    validate_inputs(data, hyper, cfg)?;
    exec::try_map_indexed(cfg.n_chains, cfg.parallelism, |c| run_chain_with_index(data, hyper, cfg, c))
}

fn validate_inputs(data: &[StudyData], hyper: &PriorHyperparams, cfg: &SamplerConfig) -> Result<usize> {
    let p = validate_studies(data)?;
    cfg.validate(data.len())?;
    hyper.validate(data.len())?;
    Ok(p)
}

pub fn run_chain_with_index(
    data: &[StudyData],
    hyper: &PriorHyperparams,
    cfg: &SamplerConfig,
    chain: usize,
) -> Result<ChainDraws> {
    let p = validate_inputs(data, hyper, cfg)?;
    let mut rng = chain_rng(cfg.seed, chain);
    let mut out = ChainDraws::new(p, cfg.k_star, cfg.j_star.clone(), data.iter().map(|s| s.n()).collect());
    out.draws.reserve(cfg.retained());

    let fail = |iteration: usize, err: MsfaError, out: ChainDraws| MsfaError::ChainFailed {
        chain,
        iteration,
        source: Box::new(err),
        partial: cfg.keep_partial.then(|| Box::new(out)),
    };

    let mut state = match GibbsState::initialize(data, hyper, cfg.k_star, &cfg.j_star, &mut rng) {
        Ok(s) => s,
        Err(e) => return Err(fail(0, e, out)),
    };
    for iter in 1..=cfg.n_iter {
        if let Err(e) = state.sweep(data, hyper, cfg.parallelism, &mut rng) {
            return Err(fail(iter, e, out));
        }
        if iter > cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            out.draws.push(state.snapshot(cfg.store_scores));
        }
    }
    debug_assert_eq!(out.draws.len(), cfg.retained());
    Ok(out)
}
