//! Subcommands and the on-disk layout they produce.
//!
//! A run directory holds
//!
//! ```text
//! config.resolved.toml
//! chains/chain-<c>.bin              c = 1..n_chains
//! estimates/sigma_phi.csv           P × P, header = variable names
//! estimates/sigma_lambda_<s>.csv    s = 1..S
//! estimates/psi_hat.csv             P × S
//! estimates/phi_star.csv            P × K̂
//! estimates/lambda_star_<s>.csv     P × Ĵ_s
//! estimates/ranks.json
//! estimates/pooled_sigma_phi.csv    with pooled_baseline
//! metrics/summary.json
//! network/edges.csv, network/nodes.csv
//! ```
//!
//! A simulation directory holds `truth/` (`phi.csv`, `lambda_<s>.csv`,
//! `psi.csv`, `scenario.json`) and one `rep-<r>/` per replicate with
//! `study_<s>.csv` and a ready-to-run `config.toml`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use msfa::metrics::{extract_network, loading_correlation, rv_coefficient, rv_modified, SignedGraph};
use msfa::model::{validate_studies, StudyData};
use msfa::postprocess::RankSelection;
use msfa::error::MsfaError;
use msfa::simgen::{generate_data, generate_truth, scenario, Scale, ScenarioSpec};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::chainio::write_chain;
use crate::config::RunConfig;
use crate::csvio::{ingest, read_matrix_csv, write_matrix_csv};
use crate::error::{CliError, Result, StageExt};
use crate::pipeline::{fit_pooled, sample, summarize};

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| CliError::io(path, e.into()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RanksFile {
    pub threshold: f64,
    pub k_hat: usize,
    pub j_hat: Vec<usize>,
    pub shared_eigenvalues: Vec<f64>,
    pub specific_eigenvalues: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pooled_k_hat: Option<usize>,
}

impl RanksFile {
    fn new(r: &RankSelection) -> Self {
        RanksFile {
            threshold: r.threshold,
            k_hat: r.k_hat,
            j_hat: r.j_hat.clone(),
            shared_eigenvalues: r.shared.eigenvalues.iter().copied().collect(),
            specific_eigenvalues: r.specific.iter().map(|d| d.eigenvalues.iter().copied().collect()).collect(),
            pooled_k_hat: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub threshold: f64,
    pub edges: usize,
    pub positive: usize,
    pub negative: usize,
    pub clusters: usize,
}

impl NetworkSummary {
    fn new(g: &SignedGraph, threshold: f64) -> Self {
        let positive = g.edges.iter().filter(|e| e.weight > 0.0).count();
        NetworkSummary {
            threshold,
            edges: g.edges.len(),
            positive,
            negative: g.edges.len() - positive,
            clusters: g.n_clusters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub studies: Vec<PathBuf>,
    pub n_per_study: Vec<usize>,
    pub p: usize,
    pub n_draws: usize,
    pub k_hat: usize,
    pub j_hat: Vec<usize>,
    pub network: NetworkSummary,
    /// RV between the multi-study and pooled shared covariances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rv_pooled_vs_shared: Option<f64>,
}

/// The full batch pipeline. Inputs are validated before anything is
/// written; after a later failure the artifacts written so far remain.
pub fn run(mut cfg: RunConfig) -> Result<RunSummary> {
    cfg.validate().stage("config")?;
    let studies = ingest(&cfg.studies, cfg.filter_variance).stage("ingest")?;
    let p = validate_studies(&studies).stage("ingest")?;
    cfg.resolve_truncation(p);
    cfg.sampler_config(p).validate(studies.len()).stage("config")?;

    let out = cfg.out.clone();
    for sub in ["chains", "estimates", "metrics", "network"] {
        create_dir(&out.join(sub)).stage("output")?;
    }
    write_text(&out.join("config.resolved.toml"), &cfg.to_toml()).stage("output")?;

    let chains = match sample(&studies, &cfg) {
        Ok(c) => c,
        Err(e) => {
            if let CliError::Stage { source, .. } = &e {
                if let CliError::Model(MsfaError::ChainFailed { chain, partial: Some(draws), .. }) = source.as_ref() {
                    let path = out.join("chains").join(format!("chain-{}.partial.bin", chain + 1));
                    if let Err(w) = write_chain(&path, draws) {
                        log::error!("could not keep partial chain: {w}");
                    }
                }
            }
            return Err(e);
        }
    };
    if cfg.write_chains {
        for (c, chain) in chains.iter().enumerate() {
            write_chain(&out.join("chains").join(format!("chain-{}.bin", c + 1)), chain).stage("write-chains")?;
        }
    }
    let summary = summarize(chains, &cfg)?;
    let names = studies[0].var_names().to_vec();
    let est_dir = out.join("estimates");
    let est = &summary.estimate;
    write_matrix_csv(&est_dir.join("sigma_phi.csv"), &names, &est.sigma_phi).stage("write-estimates")?;
    for (s, m) in est.sigma_lambda.iter().enumerate() {
        write_matrix_csv(&est_dir.join(format!("sigma_lambda_{}.csv", s + 1)), &names, m).stage("write-estimates")?;
    }
    let psi = DMatrix::from_columns(&est.psi_hat);
    write_matrix_csv(&est_dir.join("psi_hat.csv"), &labels("study_", studies.len()), &psi).stage("write-estimates")?;
    let al = &summary.aligned;
    write_matrix_csv(&est_dir.join("phi_star.csv"), &labels("f", al.phi_star.ncols()), &al.phi_star)
        .stage("write-estimates")?;
    for (s, m) in al.lambda_star.iter().enumerate() {
        write_matrix_csv(&est_dir.join(format!("lambda_star_{}.csv", s + 1)), &labels("l", m.ncols()), m)
            .stage("write-estimates")?;
    }
    let mut ranks = RanksFile::new(&summary.ranks);

    let mut rv_pooled = None;
    if cfg.pooled_baseline {
        let pooled = fit_pooled(&studies, &cfg)?;
        write_matrix_csv(&est_dir.join("pooled_sigma_phi.csv"), &names, &pooled.estimate.sigma_phi)
            .stage("write-estimates")?;
        ranks.pooled_k_hat = Some(pooled.ranks.k_hat);
        rv_pooled = Some(rv_coefficient(&est.sigma_phi, &pooled.estimate.sigma_phi).stage("metrics")?);
    }
    write_json(&est_dir.join("ranks.json"), &ranks).stage("write-estimates")?;

    let graph = extract_network(&est.sigma_phi, cfg.threshold_edge, &names).stage("network")?;
    write_network(&out.join("network"), &graph)?;

    let report = RunSummary {
        studies: cfg.studies.clone(),
        n_per_study: studies.iter().map(StudyData::n).collect(),
        p,
        n_draws: summary.n_draws,
        k_hat: summary.ranks.k_hat,
        j_hat: summary.ranks.j_hat.clone(),
        network: NetworkSummary::new(&graph, cfg.threshold_edge),
        rv_pooled_vs_shared: rv_pooled,
    };
    write_json(&out.join("metrics").join("summary.json"), &report).stage("metrics")?;
    Ok(report)
}

fn write_network(dir: &Path, graph: &SignedGraph) -> Result<()> {
    create_dir(dir).stage("network")?;
    let edges = dir.join("edges.csv");
    let f = File::create(&edges).map_err(|e| CliError::io(&edges, e))?;
    graph.write_edges_csv(BufWriter::new(f)).map_err(|e| CliError::io(&edges, e))?;
    let nodes = dir.join("nodes.csv");
    let f = File::create(&nodes).map_err(|e| CliError::io(&nodes, e))?;
    graph.write_nodes_csv(BufWriter::new(f)).map_err(|e| CliError::io(&nodes, e))
}

/// Options copied into the per-replicate `config.toml` files.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateOptions {
    pub scenario: u8,
    pub scale: Scale,
    /// Overrides the scenario's truth seed.
    pub seed: Option<u64>,
    pub replicates: usize,
    pub out: PathBuf,
    pub n_iter: Option<usize>,
    pub burn_in: Option<usize>,
    pub n_chains: Option<usize>,
}

pub fn truth_dir(out: &Path) -> PathBuf {
    out.join("truth")
}

pub fn replicate_dir(out: &Path, r: usize) -> PathBuf {
    out.join(format!("rep-{r}"))
}

/// Writes the truth of a scenario and `replicates` datasets drawn from it.
pub fn simulate(opts: &SimulateOptions) -> Result<ScenarioSpec> {
    let mut spec = scenario(opts.scenario, opts.scale).stage("simulate")?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    let truth = generate_truth(&spec).stage("simulate")?;
    let names = StudyData::default_names(spec.p);
    let tdir = truth_dir(&opts.out);
    create_dir(&tdir)?;
    write_matrix_csv(&tdir.join("phi.csv"), &labels("f", spec.k_true), truth.phi.values())?;
    for (s, l) in truth.lambdas.iter().enumerate() {
        write_matrix_csv(&tdir.join(format!("lambda_{}.csv", s + 1)), &labels("l", l.width()), l.values())?;
    }
    let psi = DMatrix::from_columns(&truth.psis.iter().map(|p| p.values().clone()).collect::<Vec<_>>());
    write_matrix_csv(&tdir.join("psi.csv"), &labels("study_", spec.n_studies()), &psi)?;
    write_json(&tdir.join("scenario.json"), &spec)?;

    for r in 1..=opts.replicates {
        let dir = replicate_dir(&opts.out, r);
        create_dir(&dir)?;
        let data = generate_data(&truth, &spec, r as u64).stage("simulate")?;
        let mut files = Vec::new();
        for (s, d) in data.iter().enumerate() {
            let name = format!("study_{}.csv", s + 1);
            write_matrix_csv(&dir.join(&name), &names, d.x())?;
            files.push(PathBuf::from(name));
        }
        let mut cfg = RunConfig::with_studies(files);
        cfg.out = PathBuf::from("result");
        cfg.seed = r as u64;
        cfg.n_iter = opts.n_iter.unwrap_or(cfg.n_iter);
        cfg.burn_in = opts.burn_in.unwrap_or(cfg.burn_in);
        cfg.n_chains = opts.n_chains.unwrap_or(cfg.n_chains);
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub rv_sigma_phi: f64,
    pub rv_modified_sigma_phi: f64,
    pub rv_sigma_lambda: Vec<f64>,
    /// Absent when `K̂` differs from the true rank.
    pub loading_correlation: Option<f64>,
    pub k_hat: usize,
    pub k_true: usize,
    pub k_hit: bool,
    pub j_hat: Vec<usize>,
    pub j_true: Vec<usize>,
    pub j_hit: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rv_pooled_sigma_phi: Option<f64>,
}

fn check_shape(what: &str, est: &DMatrix<f64>, truth_rows: usize) -> Result<()> {
    if est.nrows() != truth_rows {
        return Err(CliError::input(format!(
            "{what}: estimate is {}×{}, truth has {truth_rows} variables",
            est.nrows(),
            est.ncols()
        )));
    }
    Ok(())
}

/// Scores a run directory against a truth directory and writes
/// `metrics/evaluation.json` into the run directory.
pub fn evaluate(run_dir: &Path, truth: &Path) -> Result<Evaluation> {
    let est_dir = run_dir.join("estimates");
    let (_, sigma_phi) = read_matrix_csv(&est_dir.join("sigma_phi.csv"))?;
    let (_, phi_star) = read_matrix_csv(&est_dir.join("phi_star.csv"))?;
    let ranks: RanksFile = read_json(&est_dir.join("ranks.json"))?;
    let (_, phi_true) = read_matrix_csv(&truth.join("phi.csv"))?;
    let p = phi_true.nrows();
    check_shape("sigma_phi", &sigma_phi, p)?;
    check_shape("phi_star", &phi_star, p)?;
    if !sigma_phi.is_square() {
        return Err(CliError::input(format!("sigma_phi is {}×{}, not square", sigma_phi.nrows(), sigma_phi.ncols())));
    }
    let sigma_phi_true = &phi_true * phi_true.transpose();

    let s = ranks.j_hat.len();
    let mut rv_lambda = Vec::with_capacity(s);
    let mut j_true = Vec::with_capacity(s);
    for i in 1..=s {
        let (_, sl) = read_matrix_csv(&est_dir.join(format!("sigma_lambda_{i}.csv")))?;
        let (_, lt) = read_matrix_csv(&truth.join(format!("lambda_{i}.csv")))
            .map_err(|e| CliError::input(format!("truth has fewer studies than the run: {e}")))?;
        check_shape(&format!("sigma_lambda_{i}"), &sl, p)?;
        check_shape(&format!("lambda_{i}"), &lt, p)?;
        rv_lambda.push(rv_coefficient(&(&lt * lt.transpose()), &sl)?);
        j_true.push(lt.ncols());
    }
    let k_true = phi_true.ncols();
    let loading_correlation = if phi_star.ncols() == k_true {
        Some(loading_correlation(&phi_star, &phi_true)?)
    } else {
        log::warn!("K̂ = {} differs from the true rank {k_true}; loading correlation not computed", phi_star.ncols());
        None
    };
    let pooled_path = est_dir.join("pooled_sigma_phi.csv");
    let rv_pooled = if pooled_path.is_file() {
        let (_, m) = read_matrix_csv(&pooled_path)?;
        check_shape("pooled_sigma_phi", &m, p)?;
        Some(rv_coefficient(&sigma_phi_true, &m)?)
    } else {
        None
    };
    let eval = Evaluation {
        rv_sigma_phi: rv_coefficient(&sigma_phi_true, &sigma_phi)?,
        rv_modified_sigma_phi: rv_modified(&sigma_phi_true, &sigma_phi)?,
        rv_sigma_lambda: rv_lambda,
        loading_correlation,
        k_hat: ranks.k_hat,
        k_true,
        k_hit: ranks.k_hat == k_true,
        j_hit: ranks.j_hat.iter().zip(&j_true).map(|(a, b)| a == b).collect(),
        j_hat: ranks.j_hat,
        j_true,
        rv_pooled_sigma_phi: rv_pooled,
    };
    create_dir(&run_dir.join("metrics"))?;
    write_json(&run_dir.join("metrics").join("evaluation.json"), &eval)?;
    Ok(eval)
}

/// Rebuilds the network of a finished run at a new threshold and writes it
/// to `out/network/`.
pub fn network(run_dir: &Path, threshold: f64, out: &Path) -> Result<NetworkSummary> {
    let (names, sigma) = read_matrix_csv(&run_dir.join("estimates").join("sigma_phi.csv"))?;
    let graph = extract_network(&sigma, threshold, &names)?;
    write_network(&out.join("network"), &graph)?;
    Ok(NetworkSummary::new(&graph, threshold))
}
