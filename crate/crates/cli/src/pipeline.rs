//! In-memory pipeline: sampling, covariance estimation, rank selection and
//! loading alignment. The commands add file I/O around it.

use msfa::model::{CovarianceEstimate, StudyData};
use msfa::postprocess::{align_all, estimate_covariances, select_ranks, AlignedLoadings, RankSelection};
use msfa::sampler::{run_chains, ChainDraws, PriorHyperparams};
use nalgebra::DMatrix;

use crate::config::RunConfig;
use crate::error::{Result, StageExt};

#[derive(Debug, Clone)]
pub struct Summary {
    pub estimate: CovarianceEstimate,
    pub ranks: RankSelection,
    pub aligned: AlignedLoadings,
    pub n_draws: usize,
}

/// Runs every chain of the configuration; chain `c` uses stream `c` of the seed.
pub fn sample(studies: &[StudyData], cfg: &RunConfig) -> Result<Vec<ChainDraws>> {
    let p = studies.first().map_or(0, StudyData::p);
    run_chains(studies, &cfg.hyperparams(), &cfg.sampler_config(p)).stage("sample")
}

pub fn summarize(chains: Vec<ChainDraws>, cfg: &RunConfig) -> Result<Summary> {
    let draws = ChainDraws::merge(chains).stage("merge")?;
    let mut estimate = estimate_covariances(&draws, cfg.parallelism).stage("estimate")?;
    let ranks = select_ranks(&mut estimate, cfg.threshold_eigen).stage("select-rank")?;
    let aligned = align_all(&draws, &ranks, &cfg.op_options(), cfg.parallelism).stage("align")?;
    Ok(Summary { estimate, ranks, aligned, n_draws: draws.len() })
}

pub fn fit(studies: &[StudyData], cfg: &RunConfig) -> Result<Summary> {
    summarize(sample(studies, cfg)?, cfg)
}

/// All studies stacked row-wise into a single centered study.
pub fn pooled_study(studies: &[StudyData]) -> Result<StudyData> {
    let p = studies[0].p();
    let n: usize = studies.iter().map(StudyData::n).sum();
    let mut x = DMatrix::zeros(n, p);
    let mut row = 0;
    for s in studies {
        x.rows_mut(row, s.n()).copy_from(s.x());
        row += s.n();
    }
    Ok(StudyData::centered(0, x, studies[0].var_names().to_vec())?)
}

/// Pooled factor analysis baseline: the same model and shared prior fitted to
/// the stacked data with no specific factors.
pub fn fit_pooled(studies: &[StudyData], cfg: &RunConfig) -> Result<Summary> {
    let pooled = [pooled_study(studies)?];
    let p = pooled[0].p();
    let mut sampler = cfg.sampler_config(p);
    sampler.j_star = vec![0];
    let shared = cfg.hyperparams();
    let hyper = PriorHyperparams { specific: vec![shared.shared.clone()], ..shared };
    let chains = run_chains(&pooled, &hyper, &sampler).stage("sample-pooled")?;
    summarize(chains, cfg)
}
