//! Evaluation metrics: RV and modified RV coefficients, column-matched
//! loading correlation, and the thresholded co-expression network.

use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{MsfaError, Result};

fn check_pair(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<()> {
    if !s1.is_square() || s1.shape() != s2.shape() {
        return Err(MsfaError::input(format!(
            "RV needs two square matrices of equal size, got {:?} and {:?}",
            s1.shape(),
            s2.shape()
        )));
    }
    Ok(())
}

/// `tr(A B)` for symmetric `A`, `B`, i.e. the Frobenius inner product.
fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn rv_raw(s1: &DMatrix<f64>, s2: &DMatrix<f64>, what: &str) -> Result<f64> {
    let n1 = trace_product(s1, s1);
    let n2 = trace_product(s2, s2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(MsfaError::input(format!("{what} is undefined for a zero matrix")));
    }
    Ok(trace_product(s1, s2) / (n1 * n2).sqrt())
}

/// `RV(S1, S2) = tr(S1 S2) / sqrt(tr(S1²) tr(S2²))` for symmetric matrices.
/// In `[0, 1]` for positive semidefinite inputs. Errors if either is zero.
pub fn rv_coefficient(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    check_pair(s1, s2)?;
    rv_raw(s1, s2, "RV coefficient")
}

fn off_diagonal(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = s.clone();
    m.fill_diagonal(0.0);
    m
}

/// RV computed on the matrices with their diagonals zeroed, which removes the
/// upward bias of plain RV in high dimension. In `[−1, 1]`.
pub fn rv_modified(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    check_pair(s1, s2)?;
    rv_raw(&off_diagonal(s1), &off_diagonal(s2), "modified RV coefficient")
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Column matching found by [`loading_correlation`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingMatch {
    pub correlation: f64,
    /// `columns[k]` is the estimate column matched to truth column `k`.
    pub columns: Vec<usize>,
    pub signs: Vec<f64>,
}

/// Greedy column matching by absolute correlation, then the correlation of
/// the vectorized matched (sign-corrected) estimate with the truth.
pub fn loading_match(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<LoadingMatch> {
    if est.shape() != truth.shape() {
        return Err(MsfaError::input(format!(
            "loading shapes differ: estimate {:?}, truth {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let m = truth.ncols();
    if m == 0 || truth.nrows() < 2 {
        return Err(MsfaError::input("loading correlation needs at least one column and two rows"));
    }
    let col = |a: &DMatrix<f64>, j: usize| a.column(j).iter().copied().collect::<Vec<_>>();
    let mut corr = DMatrix::zeros(m, m); // [truth, est]
    for t in 0..m {
        for e in 0..m {
            corr[(t, e)] = pearson(&col(truth, t), &col(est, e)).unwrap_or_else(|| {
                log::warn!("zero-variance loading column (truth {t} or estimate {e}); using correlation 0");
                0.0
            });
        }
    }
    let mut columns = vec![usize::MAX; m];
    let mut signs = vec![1.0; m];
    let mut used_t = vec![false; m];
    let mut used_e = vec![false; m];
    for _ in 0..m {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for t in (0..m).filter(|&t| !used_t[t]) {
            for e in (0..m).filter(|&e| !used_e[e]) {
                if corr[(t, e)].abs() > best.2 {
                    best = (t, e, corr[(t, e)].abs());
                }
            }
        }
        let (t, e, _) = best;
        used_t[t] = true;
        used_e[e] = true;
        columns[t] = e;
        signs[t] = if corr[(t, e)] < 0.0 { -1.0 } else { 1.0 };
    }
    let mut matched = Vec::with_capacity(truth.len());
    for t in 0..m {
        matched.extend(est.column(columns[t]).iter().map(|v| v * signs[t]));
    }
    let correlation = pearson(&matched, truth.as_slice()).unwrap_or(0.0);
    Ok(LoadingMatch { correlation, columns, signs })
}

/// Correlation between true and estimated loadings after column matching.
pub fn loading_correlation(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    loading_match(est, truth).map(|m| m.correlation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeSign {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
    pub sign: EdgeSign,
}

/// Undirected signed graph over the variables. Edges satisfy
/// `source < target`; `clusters[p]` is the connected-component label of node
/// `p`, numbered by smallest member.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SignedGraph {
    pub nodes: Vec<String>,
    pub edges: Vec<Edge>,
    pub clusters: Vec<usize>,
}

impl SignedGraph {
    /// Node importance: number of incident edges.
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.nodes.len()];
        for e in &self.edges {
            d[e.source] += 1;
            d[e.target] += 1;
        }
        d
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.iter().max().map_or(0, |m| m + 1)
    }

    /// Edge list as CSV: `source,target,weight,sign,cluster`.
    pub fn write_edges_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "source,target,weight,sign,cluster")?;
        for e in &self.edges {
            let sign = match e.sign {
                EdgeSign::Positive => "positive",
                EdgeSign::Negative => "negative",
            };
            writeln!(
                w,
                "{},{},{:.16e},{},{}",
                self.nodes[e.source], self.nodes[e.target], e.weight, sign, self.clusters[e.source]
            )?;
        }
        Ok(())
    }

    /// Node table as CSV: `node,degree,cluster`.
    pub fn write_nodes_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "node,degree,cluster")?;
        for ((name, deg), c) in self.nodes.iter().zip(self.degrees()).zip(&self.clusters) {
            writeln!(w, "{name},{deg},{c}")?;
        }
        Ok(())
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Default edge threshold on the shared covariance.
pub const DEFAULT_EDGE_THRESHOLD: f64 = 0.5;

/// Links `p < q` whenever `|Σ[p, q]| > threshold`, signed by the entry.
pub fn extract_network(sigma: &DMatrix<f64>, threshold: f64, var_names: &[String]) -> Result<SignedGraph> {
    let p = sigma.nrows();
    if !sigma.is_square() || var_names.len() != p {
        return Err(MsfaError::input(format!(
            "network needs a square matrix and one name per row, got {:?} and {} names",
            sigma.shape(),
            var_names.len()
        )));
    }
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(MsfaError::input(format!("edge threshold must be non-negative, got {threshold}")));
    }
    let mut edges = Vec::new();
    let mut parent: Vec<usize> = (0..p).collect();
    for a in 0..p {
        for b in (a + 1)..p {
            let w = sigma[(a, b)];
            if w.abs() > threshold {
                let sign = if w > 0.0 { EdgeSign::Positive } else { EdgeSign::Negative };
                edges.push(Edge { source: a, target: b, weight: w, sign });
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut label = vec![usize::MAX; p];
    let mut clusters = vec![0; p];
    let mut next = 0;
    for node in 0..p {
        let root = find(&mut parent, node);
        if label[root] == usize::MAX {
            label[root] = next;
            next += 1;
        }
        clusters[node] = label[root];
    }
    Ok(SignedGraph { nodes: var_names.to_vec(), edges, clusters })
}
