//! Run configuration, read from a flat TOML file. Unknown keys are errors.
//! Relative paths resolve against the directory holding the file.

use std::path::{Path, PathBuf};

use msfa::exec::Parallelism;
use msfa::postprocess::{OpOptions, DEFAULT_EIGEN_THRESHOLD};
use msfa::metrics::DEFAULT_EDGE_THRESHOLD;
use msfa::sampler::{default_truncation, PriorHyperparams, SamplerConfig, ShrinkagePrior};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// One CSV per study.
    pub studies: Vec<PathBuf>,
    #[serde(default = "defaults::out")]
    pub out: PathBuf,

    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::one")]
    pub n_chains: usize,
    #[serde(default = "defaults::n_iter")]
    pub n_iter: usize,
    #[serde(default = "defaults::burn_in")]
    pub burn_in: usize,
    #[serde(default = "defaults::one")]
    pub thin: usize,
    /// Shared truncation; `ceil(P / 2)` capped at 20 when absent.
    #[serde(default)]
    pub k_star: Option<usize>,
    /// Specific truncation per study; same default as `k_star`.
    #[serde(default)]
    pub j_star: Option<Vec<usize>>,
    #[serde(default)]
    pub parallelism: Parallelism,
    #[serde(default = "defaults::yes")]
    pub keep_partial: bool,

    #[serde(default = "defaults::nu")]
    pub nu: f64,
    #[serde(default = "defaults::a1")]
    pub a1: f64,
    #[serde(default = "defaults::a2")]
    pub a2: f64,
    #[serde(default = "defaults::nu")]
    pub nu_specific: f64,
    #[serde(default = "defaults::a1")]
    pub a1_specific: f64,
    #[serde(default = "defaults::a2")]
    pub a2_specific: f64,
    #[serde(default = "defaults::a_psi")]
    pub a_psi: f64,
    #[serde(default = "defaults::b_psi")]
    pub b_psi: f64,

    #[serde(default = "defaults::threshold_eigen")]
    pub threshold_eigen: f64,
    #[serde(default = "defaults::threshold_edge")]
    pub threshold_edge: f64,
    #[serde(default = "defaults::one")]
    pub op_max_iters: usize,
    #[serde(default = "defaults::op_tol")]
    pub op_tol: f64,

    /// Keep this fraction of the highest-variance variables.
    #[serde(default)]
    pub filter_variance: Option<f64>,
    #[serde(default = "defaults::yes")]
    pub write_chains: bool,
    /// Also fit the pooled single-study model with no specific factors.
    #[serde(default)]
    pub pooled_baseline: bool,
}

mod defaults {
    use std::path::PathBuf;

    pub fn out() -> PathBuf {
        PathBuf::from("msfa-out")
    }
    pub fn one() -> usize {
        1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn n_iter() -> usize {
        15_000
    }
    pub fn burn_in() -> usize {
        5_000
    }
    pub fn nu() -> f64 {
        3.0
    }
    pub fn a1() -> f64 {
        2.1
    }
    pub fn a2() -> f64 {
        3.1
    }
    pub fn a_psi() -> f64 {
        1.0
    }
    pub fn b_psi() -> f64 {
        0.3
    }
    pub fn threshold_eigen() -> f64 {
        super::DEFAULT_EIGEN_THRESHOLD
    }
    pub fn threshold_edge() -> f64 {
        super::DEFAULT_EDGE_THRESHOLD
    }
    pub fn op_tol() -> f64 {
        1e-6
    }
}

impl RunConfig {
    /// A configuration with every default filled in.
    pub fn with_studies(studies: Vec<PathBuf>) -> Self {
        let text = toml::to_string(&Minimal { studies }).expect("paths serialize");
        toml::from_str(&text).expect("defaults deserialize")
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::input(format!("invalid config: {e}")))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.studies {
            *s = resolve(base, s);
        }
        cfg.out = resolve(base, &cfg.out);
        Ok(cfg)
    }

    /// Checks values that do not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.studies.is_empty() {
            return Err(CliError::input("config lists no study files"));
        }
        for p in &self.studies {
            if !p.is_file() {
                return Err(CliError::input(format!("study file not found: {}", p.display())));
            }
        }
        if let Some(j) = &self.j_star {
            if j.len() != self.studies.len() {
                return Err(CliError::input(format!(
                    "j_star has {} entries for {} studies",
                    j.len(),
                    self.studies.len()
                )));
            }
        }
        for (name, v) in [("threshold_eigen", self.threshold_eigen), ("op_tol", self.op_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CliError::input(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.threshold_edge >= 0.0 && self.threshold_edge.is_finite()) {
            return Err(CliError::input(format!("threshold_edge must be non-negative, got {}", self.threshold_edge)));
        }
        if self.op_max_iters == 0 {
            return Err(CliError::input("op_max_iters must be at least 1"));
        }
        let n = self.studies.len();
        self.sampler_config(1).validate(n)?;
        self.hyperparams().validate(n)?;
        Ok(())
    }

    /// Fills the truncation levels from the variable count.
    pub fn resolve_truncation(&mut self, p: usize) {
        let t = default_truncation(p);
        self.k_star.get_or_insert(t);
        let n = self.studies.len();
        self.j_star.get_or_insert_with(|| vec![t; n]);
    }

    pub fn sampler_config(&self, p: usize) -> SamplerConfig {
        let t = default_truncation(p);
        SamplerConfig {
            k_star: self.k_star.unwrap_or(t),
            j_star: self.j_star.clone().unwrap_or_else(|| vec![t; self.studies.len()]),
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            seed: self.seed,
            n_chains: self.n_chains,
            store_scores: false,
            keep_partial: self.keep_partial,
            parallelism: self.parallelism,
        }
    }

    pub fn hyperparams(&self) -> PriorHyperparams {
        let specific = ShrinkagePrior { nu: self.nu_specific, a1: self.a1_specific, a2: self.a2_specific };
        PriorHyperparams {
            shared: ShrinkagePrior { nu: self.nu, a1: self.a1, a2: self.a2 },
            specific: vec![specific; self.studies.len()],
            a_psi: self.a_psi,
            b_psi: self.b_psi,
        }
    }

    pub fn op_options(&self) -> OpOptions {
        OpOptions { max_iters: self.op_max_iters, tol: self.op_tol, keep_rotations: false }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Serialize)]
struct Minimal {
    studies: Vec<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
