//! Synthetic multi-study data with known sparse loadings.
//!
//! Truth is drawn once per `(spec, seed)`; replicate datasets are drawn from
//! `N(0, Σ_s)` on independent streams of the same seed.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::index::sample;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{MsfaError, Result};
use crate::linalg::{standard_normal_matrix, symmetric_eigen_desc};
use crate::model::{assemble_sigma, outer_gram, LoadingMatrix, NoiseVariances, StudyData};
use crate::sampler::chain_rng;

/// Lower bound applied to simulated noise variances.
pub const PSI_FLOOR: f64 = 0.05;

/// Eigenvalues above this count toward the effective rank of a truth matrix.
pub const RANK_TOL: f64 = 1e-10;

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZeroPattern {
    /// Each column gets its zeros at uniformly random rows.
    Random,
    /// Each column is nonzero on one contiguous block of rows; see
    /// [`block_rows`].
    Structured,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Full,
    Desk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub id: u8,
    pub n: Vec<usize>,
    pub p: usize,
    pub k_true: usize,
    pub j_true: Vec<usize>,
    /// Fraction of zero entries in every loading column, in `[0, 1)`.
    pub sparsity: f64,
    pub zero_pattern: ZeroPattern,
    /// Multiplier on the nonzero study-specific loadings.
    pub specific_scale: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn n_studies(&self) -> usize {
        self.n.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(MsfaError::input(format!("sparsity must be in [0, 1), got {}", self.sparsity)));
        }
        if self.k_true == 0 || self.p == 0 {
            return Err(MsfaError::input("k_true and p must be at least 1"));
        }
        if self.n.is_empty() || self.j_true.len() != self.n.len() {
            return Err(MsfaError::input(format!(
                "{} sample sizes and {} specific ranks",
                self.n.len(),
                self.j_true.len()
            )));
        }
        if self.n.iter().any(|&n| n < 2) {
            return Err(MsfaError::input("every study needs at least 2 samples"));
        }
        let widest = self.j_true.iter().copied().max().unwrap_or(0).max(self.k_true);
        if widest > self.p {
            return Err(MsfaError::input(format!("rank {widest} exceeds p = {}", self.p)));
        }
        if !(self.specific_scale.is_finite() && self.specific_scale > 0.0) {
            return Err(MsfaError::input("specific_scale must be positive"));
        }
        Ok(())
    }

    /// Nonzero entries per loading column: `round((1 − sparsity) P)`, at least 1.
    pub fn nonzeros_per_column(&self) -> usize {
        (((1.0 - self.sparsity) * self.p as f64).round() as usize).clamp(1, self.p)
    }
}

/// Preset scenarios. Sample sizes, `P` and the specific ranks of scenarios
/// 1 to 3 are choices of this crate. Scenario 4 uses the seven sample sizes
/// of the breast-cancer compendium at full scale. Desk scale fixes `P = 30`
/// and shrinks every `n_s` by the same factor as `P`.
pub fn scenario(id: u8, scale: Scale) -> Result<ScenarioSpec> {
    let (full_p, full_n, pattern, specific_scale): (usize, Vec<usize>, _, _) = match id {
        1 => (60, vec![52, 58, 54, 56], ZeroPattern::Random, 1.0),
        2 => (60, vec![56, 50, 58, 48, 54], ZeroPattern::Random, 1.0),
        3 => (60, vec![30, 100, 50, 120], ZeroPattern::Structured, 2.0),
        4 => (100, vec![118, 200, 99, 517, 198, 133, 344], ZeroPattern::Random, 1.0),
        _ => return Err(MsfaError::input(format!("unknown scenario {id}; expected 1 to 4"))),
    };
    let (p, n) = match scale {
        Scale::Full => (full_p, full_n),
        Scale::Desk => {
            let p = 30;
            let n = full_n
                .iter()
                .map(|&n| ((n * p) as f64 / full_p as f64).round() as usize)
                .collect();
            (p, n)
        }
    };
    let s = n.len();
    Ok(ScenarioSpec {
        id,
        n,
        p,
        k_true: 3,
        j_true: vec![2; s],
        sparsity: 0.8,
        zero_pattern: pattern,
        specific_scale,
        seed: 1000 + id as u64,
    })
}

/// Rows of the nonzero block for global column `index` under
/// [`ZeroPattern::Structured`]: `nnz` consecutive rows starting at
/// `index · nnz`, wrapping modulo `P`. Shared columns come first, followed
/// by the specific columns of study 1, study 2, and so on.
pub fn block_rows(index: usize, nnz: usize, p: usize) -> Vec<usize> {
    (0..nnz).map(|i| (index * nnz + i) % p).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub phi: LoadingMatrix,
    pub lambdas: Vec<LoadingMatrix>,
    pub psis: Vec<NoiseVariances>,
}

impl Truth {
    pub fn sigma_phi(&self) -> DMatrix<f64> {
        self.phi.gram()
    }

    pub fn sigma_lambda(&self, s: usize) -> DMatrix<f64> {
        self.lambdas[s].gram()
    }

    pub fn sigma(&self, s: usize) -> Result<DMatrix<f64>> {
        assemble_sigma(&self.phi, &self.lambdas[s], &self.psis[s])
    }
}

/// Number of eigenvalues of `A Aᵀ` above [`RANK_TOL`].
pub fn effective_rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 {
        return 0;
    }
    let (vals, _) = symmetric_eigen_desc(&outer_gram(a));
    vals.iter().filter(|&&v| v > RANK_TOL).count()
}

fn sparse_loadings<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    width: usize,
    first_index: usize,
    scale: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let nnz = spec.nonzeros_per_column();
    let unif = Uniform::new(-1.0, 1.0).expect("valid bounds");
    for _ in 0..MAX_REDRAWS {
        let mut m = DMatrix::zeros(spec.p, width);
        for k in 0..width {
            let rows = match spec.zero_pattern {
                ZeroPattern::Random => sample(rng, spec.p, nnz).into_vec(),
                ZeroPattern::Structured => block_rows(first_index + k, nnz, spec.p),
            };
            for r in rows {
                m[(r, k)] = scale * unif.sample(rng);
            }
        }
        if effective_rank(&m) == width {
            return Ok(m);
        }
    }
    Err(MsfaError::input(format!(
        "could not draw a rank-{width} loading matrix with {nnz} nonzeros per column in {} rows",
        spec.p
    )))
}

/// Draws `Φ`, every `Λ_s` and every `Ψ_s`. Matrices whose effective rank
/// falls short of the target are redrawn whole.
pub fn generate_truth(spec: &ScenarioSpec) -> Result<Truth> {
    spec.validate()?;
    let mut rng = chain_rng(spec.seed, 0);
    let phi = sparse_loadings(spec, spec.k_true, 0, 1.0, &mut rng)?;
    let mut lambdas = Vec::with_capacity(spec.n_studies());
    let mut offset = spec.k_true;
    for (s, &j) in spec.j_true.iter().enumerate() {
        let l = sparse_loadings(spec, j, offset, spec.specific_scale, &mut rng)?;
        offset += j;
        lambdas.push(LoadingMatrix::specific(s, l)?);
    }
    let unit = Uniform::<f64>::new(0.0, 1.0).expect("valid bounds");
    let psis = (0..spec.n_studies())
        .map(|_| {
            let v = DVector::from_fn(spec.p, |_, _| unit.sample(&mut rng).max(PSI_FLOOR));
            NoiseVariances::new(v)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Truth { phi: LoadingMatrix::shared(phi)?, lambdas, psis })
}

/// Replicate dataset `replicate`: rows i.i.d. `N(0, Σ_s)`, then centered.
pub fn generate_data(truth: &Truth, spec: &ScenarioSpec, replicate: u64) -> Result<Vec<StudyData>> {
    spec.validate()?;
    if truth.phi.p() != spec.p || truth.phi.width() != spec.k_true || truth.lambdas.len() != spec.n_studies() {
        return Err(MsfaError::input("truth dimensions do not match the scenario"));
    }
    let stream = replicate
        .checked_add(1)
        .and_then(|r| usize::try_from(r).ok())
        .ok_or_else(|| MsfaError::input("replicate index too large"))?;
    let mut rng = chain_rng(spec.seed, stream);
    let names = StudyData::default_names(spec.p);
    (0..spec.n_studies())
        .map(|s| {
            let sigma = truth.sigma(s)?;
            let chol = sigma
                .cholesky()
                .ok_or_else(|| MsfaError::numerical(format!("study {s}: Σ is not positive definite")))?;
            let z = standard_normal_matrix(spec.n[s], spec.p, &mut rng);
            let x = z * chol.l().transpose();
            StudyData::centered(s, x, names.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(p: usize, k: usize, sparsity: f64) -> ScenarioSpec {
        ScenarioSpec {
            id: 0,
            n: vec![10, 12],
            p,
            k_true: k,
            j_true: vec![2, 1],
            sparsity,
            zero_pattern: ZeroPattern::Random,
            specific_scale: 1.0,
            seed: 7,
        }
    }

    fn zero_fraction(m: &DMatrix<f64>) -> f64 {
        m.iter().filter(|&&v| v == 0.0).count() as f64 / m.len() as f64
    }

    #[test]
    fn dense_when_sparsity_zero() {
        let t = generate_truth(&spec(8, 3, 0.0)).unwrap();
        assert!(t.phi.values().iter().all(|&v| v != 0.0));
        assert!(t.lambdas.iter().all(|l| l.values().iter().all(|&v| v != 0.0)));
    }

    #[test]
    fn truth_and_data_are_deterministic() {
        let sp = spec(10, 3, 0.5);
        let a = generate_truth(&sp).unwrap();
        assert_eq!(a, generate_truth(&sp).unwrap());
        assert_eq!(generate_data(&a, &sp, 3).unwrap(), generate_data(&a, &sp, 3).unwrap());
        assert_ne!(generate_data(&a, &sp, 3).unwrap(), generate_data(&a, &sp, 4).unwrap());
    }

    #[test]
    fn sparsity_and_rank_at_p20_k3() {
        let sp = spec(20, 3, 0.8);
        let t = generate_truth(&sp).unwrap();
        let frac = zero_fraction(t.phi.values());
        assert!((frac - 0.8).abs() <= 2.0 / 60.0, "zero fraction {frac}");
        assert_eq!(effective_rank(t.phi.values()), 3);
        assert_eq!(effective_rank(t.lambdas[0].values()), 2);
        assert_eq!(effective_rank(t.lambdas[1].values()), 1);
    }

    #[test]
    fn truth_entries_follow_their_ranges() {
        let mut sp = spec(30, 3, 0.8);
        sp.specific_scale = 2.0;
        let t = generate_truth(&sp).unwrap();
        assert!(t.phi.values().amax() < 1.0);
        assert!(t.lambdas.iter().all(|l| l.values().amax() < 2.0));
        for psi in &t.psis {
            assert!(psi.values().iter().all(|&v| (PSI_FLOOR..1.0).contains(&v)));
        }
    }

    #[test]
    fn structured_blocks_are_contiguous() {
        let mut sp = spec(20, 3, 0.8);
        sp.zero_pattern = ZeroPattern::Structured;
        let t = generate_truth(&sp).unwrap();
        for k in 0..3 {
            let nz: Vec<usize> = (0..20).filter(|&r| t.phi.values()[(r, k)] != 0.0).collect();
            assert_eq!(nz, block_rows(k, 4, 20));
        }
        let nz: Vec<usize> = (0..20).filter(|&r| t.lambdas[1].values()[(r, 0)] != 0.0).collect();
        assert_eq!(nz, block_rows(5, 4, 20));
        assert_eq!(block_rows(5, 4, 20), vec![0, 1, 2, 3]);
    }

    #[test]
    fn presets() {
        assert_eq!(scenario(4, Scale::Full).unwrap().n, vec![118, 200, 99, 517, 198, 133, 344]);
        for id in 1..=4 {
            let s = scenario(id, Scale::Desk).unwrap();
            assert_eq!((s.k_true, s.p), (3, 30));
            s.validate().unwrap();
        }
        for id in 1..=2 {
            let s = scenario(id, Scale::Desk).unwrap();
            assert!(s.n.iter().all(|&n| n < s.p));
        }
        let s3 = scenario(3, Scale::Desk).unwrap();
        assert!(s3.n.iter().any(|&n| n > s3.p));
        assert_eq!(s3.zero_pattern, ZeroPattern::Structured);
        let t = generate_truth(&s3).unwrap();
        let max_specific = t.lambdas.iter().map(|l| l.values().amax()).fold(0.0, f64::max);
        assert!(max_specific > t.phi.values().amax());
        assert!(scenario(5, Scale::Desk).is_err());
    }

    #[test]
    fn noise_only_covariance_at_large_n() {
        let mut sp = spec(3, 1, 0.0);
        sp.n = vec![5000];
        sp.j_true = vec![1];
        let t = Truth {
            phi: LoadingMatrix::shared(DMatrix::zeros(3, 1)).unwrap(),
            lambdas: vec![LoadingMatrix::specific(0, DMatrix::zeros(3, 1)).unwrap()],
            psis: vec![NoiseVariances::new(DVector::from_vec(vec![4.0, 9.0, 16.0])).unwrap()],
        };
        let d = &generate_data(&t, &sp, 0).unwrap()[0];
        let cov = d.x().transpose() * d.x() / (d.n() as f64 - 1.0);
        for (i, want) in [4.0, 9.0, 16.0].into_iter().enumerate() {
            assert!(((cov[(i, i)] - want) / want).abs() < 0.1);
        }
    }

    /// Each sample covariance entry has standard error
    /// `sqrt((Σ_ij² + Σ_ii Σ_jj) / n)` under Gaussian sampling.
    #[test]
    fn sample_covariance_converges_within_three_se() {
        let mut sp = spec(2, 1, 0.0);
        sp.n = vec![100_000];
        sp.j_true = vec![1];
        let t = Truth {
            phi: LoadingMatrix::shared(DMatrix::from_column_slice(2, 1, &[0.8, -0.5])).unwrap(),
            lambdas: vec![LoadingMatrix::specific(0, DMatrix::from_column_slice(2, 1, &[0.3, 0.6])).unwrap()],
            psis: vec![NoiseVariances::new(DVector::from_vec(vec![0.4, 0.2])).unwrap()],
        };
        let sigma = t.sigma(0).unwrap();
        let d = &generate_data(&t, &sp, 0).unwrap()[0];
        let n = d.n() as f64;
        let cov = d.x().transpose() * d.x() / (n - 1.0);
        for i in 0..2 {
            for j in 0..2 {
                let se = ((sigma[(i, j)].powi(2) + sigma[(i, i)] * sigma[(j, j)]) / n).sqrt();
                assert!((cov[(i, j)] - sigma[(i, j)]).abs() < 3.0 * se, "({i},{j})");
            }
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_truth(&spec(10, 3, 1.0)).is_err());
        assert!(generate_truth(&spec(10, 0, 0.5)).is_err());
        assert!(generate_truth(&spec(2, 3, 0.0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn truth_has_exact_ranks_and_counts(seed in 0u64..10_000, p in 10usize..40, sparsity in 0.0f64..0.85) {
            let mut sp = spec(p, 3, sparsity);
            sp.seed = seed;
            let t = generate_truth(&sp).unwrap();
            let nnz = sp.nonzeros_per_column();
            for k in 0..3 {
                prop_assert_eq!(t.phi.values().column(k).iter().filter(|&&v| v != 0.0).count(), nnz);
            }
            prop_assert_eq!(effective_rank(t.phi.values()), 3);
            for (l, &j) in t.lambdas.iter().zip(&sp.j_true) {
                prop_assert_eq!(effective_rank(l.values()), j);
            }
        }
    }
}
