//! Joint-distribution ("getting it right") check of the Gibbs sampler.
//!
//! Two simulators target the same joint distribution of parameters and data:
//!
//! * marginal-conditional: parameters from the prior, data given parameters,
//!   independently every time;
//! * successive-conditional: one Gibbs sweep on the current data, then fresh
//!   scores and data given the updated parameters, repeated.
//!
//! If every conditional update is correct, the parameter marginals of both
//! simulators equal the prior. Moments are compared with batch-means
//! standard errors to account for autocorrelation in the second simulator.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::exec::Parallelism;
use crate::linalg::standard_normal_matrix;
use crate::model::StudyData;
use crate::sampler::{chain_rng, GibbsState, PriorHyperparams};

#[derive(Debug, Clone, PartialEq)]
pub struct GirConfig {
    pub p: usize,
    pub n_per_study: Vec<usize>,
    pub k_star: usize,
    pub j_star: Vec<usize>,
    pub hyper: PriorHyperparams,
    pub sweeps: usize,
    pub seed: u64,
    pub batches: usize,
}

impl GirConfig {
    /// `P = 4`, two studies of six subjects, one shared and one specific
    /// factor, default priors, 50 000 sweeps.
    pub fn small() -> Self {
        GirConfig {
            p: 4,
            n_per_study: vec![6, 6],
            k_star: 1,
            j_star: vec![1, 1],
            hyper: PriorHyperparams::defaults(2),
            sweeps: 50_000,
            seed: 20_240_501,
            batches: 50,
        }
    }
}

/// Scalar quantities tracked by the check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tracked {
    /// `φ_11`
    SharedLoading,
    /// `λ_{1,11}` (first study)
    SpecificLoading,
    /// `ψ_{1,1}⁻¹`, the error precision of variable 1 in study 1.
    NoisePrecision,
    /// `τ_1` of the shared loadings.
    SharedTau,
}

impl Tracked {
    pub const ALL: [Tracked; 4] =
        [Tracked::SharedLoading, Tracked::SpecificLoading, Tracked::NoisePrecision, Tracked::SharedTau];

    pub fn name(self) -> &'static str {
        match self {
            Tracked::SharedLoading => "phi_11",
            Tracked::SpecificLoading => "lambda_1_11",
            Tracked::NoisePrecision => "psi_1_1^-1",
            Tracked::SharedTau => "tau_1",
        }
    }

    fn read(self, st: &GibbsState) -> f64 {
        match self {
            Tracked::SharedLoading => st.phi.values()[(0, 0)],
            Tracked::SpecificLoading => st.lambdas[0].values()[(0, 0)],
            Tracked::NoisePrecision => 1.0 / st.psis[0].values()[0],
            Tracked::SharedTau => st.shared.tau[0],
        }
    }
}

/// One trace per [`Tracked`] quantity, in [`Tracked::ALL`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Traces(pub Vec<Vec<f64>>);

impl Traces {
    fn new(len: usize) -> Self {
        Traces(vec![Vec::with_capacity(len); Tracked::ALL.len()])
    }

    fn record(&mut self, st: &GibbsState) {
        for (trace, q) in self.0.iter_mut().zip(Tracked::ALL) {
            trace.push(q.read(st));
        }
    }
}

/// Data for every study given the state's parameters and scores,
/// `x_i = Φ f_i + Λ l_i + e_i`.
fn simulate_data<R: Rng + ?Sized>(st: &GibbsState, rng: &mut R) -> Vec<StudyData> {
    let p = st.phi.p();
    st.scores
        .iter()
        .enumerate()
        .map(|(s, sc)| {
            let mut x = &sc.f * st.phi.values().transpose();
            x.gemm(1.0, &sc.l, &st.lambdas[s].values().transpose(), 1.0);
            let sd = st.psis[s].values().map(f64::sqrt);
            for i in 0..x.nrows() {
                for j in 0..p {
                    x[(i, j)] += sd[j] * rng.sample::<f64, _>(StandardNormal);
                }
            }
            StudyData::from_model_draw(s, x, StudyData::default_names(p))
        })
        .collect()
}

/// Independent prior draws.
pub fn marginal_conditional(cfg: &GirConfig) -> Result<Traces> {
    let mut rng = chain_rng(cfg.seed, 0);
    let mut traces = Traces::new(cfg.sweeps);
    for _ in 0..cfg.sweeps {
        let st = GibbsState::draw_prior(cfg.p, &cfg.n_per_study, &cfg.hyper, cfg.k_star, &cfg.j_star, &mut rng)?;
        traces.record(&st);
    }
    Ok(traces)
}

/// Alternates Gibbs sweeps with fresh scores and data.
pub fn successive_conditional(cfg: &GirConfig) -> Result<Traces> {
    let mut rng = chain_rng(cfg.seed, 1);
    let mut st = GibbsState::draw_prior(cfg.p, &cfg.n_per_study, &cfg.hyper, cfg.k_star, &cfg.j_star, &mut rng)?;
    let mut data = simulate_data(&st, &mut rng);
    let mut traces = Traces::new(cfg.sweeps);
    for _ in 0..cfg.sweeps {
        st.sweep(&data, &cfg.hyper, Parallelism::Sequential, &mut rng)?;
        traces.record(&st);
        for (s, sc) in st.scores.iter_mut().enumerate() {
            sc.f = standard_normal_matrix(cfg.n_per_study[s], cfg.k_star, &mut rng);
            sc.l = standard_normal_matrix(cfg.n_per_study[s], cfg.j_star[s], &mut rng);
        }
        data = simulate_data(&st, &mut rng);
    }
    Ok(traces)
}

/// Mean and batch-means standard error of a trace.
pub fn batch_mean_se(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let size = n / batches;
    let batch_means: Vec<f64> = (0..batches)
        .map(|b| xs[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bm = batch_means.iter().sum::<f64>() / batches as f64;
    let var = batch_means.iter().map(|m| (m - bm).powi(2)).sum::<f64>() / (batches as f64 - 1.0);
    (mean, (var / batches as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentCheck {
    pub quantity: &'static str,
    /// 1 for the mean, 2 for the raw second moment.
    pub order: u32,
    pub prior: (f64, f64),
    pub gibbs: (f64, f64),
}

impl MomentCheck {
    /// Difference in units of the combined standard error.
    pub fn z(&self) -> f64 {
        (self.prior.0 - self.gibbs.0) / self.prior.1.hypot(self.gibbs.1)
    }
}

/// First and second raw moments of every tracked quantity under both simulators.
pub fn compare_moments(prior: &Traces, gibbs: &Traces, batches: usize) -> Vec<MomentCheck> {
    let mut out = Vec::new();
    for (i, q) in Tracked::ALL.iter().enumerate() {
        for order in [1u32, 2] {
            let f = |xs: &[f64]| xs.iter().map(|x| x.powi(order as i32)).collect::<Vec<_>>();
            out.push(MomentCheck {
                quantity: q.name(),
                order,
                prior: batch_mean_se(&f(&prior.0[i]), batches),
                gibbs: batch_mean_se(&f(&gibbs.0[i]), batches),
            });
        }
    }
    out
}

/// Runs both simulators and compares moments.
pub fn run(cfg: &GirConfig) -> Result<Vec<MomentCheck>> {
    let prior = marginal_conditional(cfg)?;
    let gibbs = successive_conditional(cfg)?;
    Ok(compare_moments(&prior, &gibbs, cfg.batches))
}
