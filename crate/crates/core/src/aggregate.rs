//! Parameter-free neighborhood aggregation: `H ← Â H` repeated λ times,
//! where `Â` is the self-loop-augmented adjacency, optionally with
//! symmetric degree normalization `M^{-1/2} (A + I) M^{-1/2}`.
//!
//! Both operators are symmetric, so the backward pass of λ rounds is the
//! same λ rounds applied to the upstream gradient.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_iterations() -> usize {
    8
}
fn default_true() -> bool {
    true
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            iterations: default_iterations(),
            normalize: true,
        }
    }
}

/// Sparse symmetric propagation matrix in row-compressed form. Each row
/// lists `(column, weight)` pairs in ascending column order, self-loop
/// included.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    rows: Vec<Vec<(usize, f64)>>,
}

/// `M^{-1/2} (A + I) M^{-1/2}`.
pub type NormalizedAdjacency = Propagation;

impl Propagation {
    pub fn normalized(adj: &Adjacency) -> Self {
        let inv_sqrt: Vec<f64> = (0..adj.node_count())
            .map(|i| 1.0 / ((adj.degree(i) + 1) as f64).sqrt())
            .collect();
        Self::build(adj, |i, j| inv_sqrt[i] * inv_sqrt[j])
    }

    /// `A + I` without normalization.
    pub fn self_loops(adj: &Adjacency) -> Self {
        Self::build(adj, |_, _| 1.0)
    }

    pub fn new(adj: &Adjacency, normalize: bool) -> Self {
        if normalize {
            Self::normalized(adj)
        } else {
            Self::self_loops(adj)
        }
    }

    fn build(adj: &Adjacency, weight: impl Fn(usize, usize) -> f64) -> Self {
        let rows = (0..adj.node_count())
            .map(|i| {
                let mut row: Vec<(usize, f64)> = adj
                    .neighbors(i)
                    .iter()
                    .chain(std::iter::once(&i))
                    .map(|&j| (j, weight(i, j)))
                    .collect();
                row.sort_unstable_by_key(|&(j, _)| j);
                row
            })
            .collect();
        Self { rows }
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |k| self.rows[i][k].1)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.size();
        let mut m = Array2::zeros((n, n));
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, w) in row {
                m[[i, j]] = w;
            }
        }
        m
    }

    /// One sparse product `self · h`.
    pub fn multiply(&self, h: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if h.nrows() != self.size() {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows, propagation is {}x{}",
                h.nrows(),
                self.size(),
                self.size()
            )));
        }
        let mut out = Array2::zeros(h.raw_dim());
        for (i, mut dst) in out.axis_iter_mut(Axis(0)).enumerate() {
            for &(j, w) in &self.rows[i] {
                dst.scaled_add(w, &h.row(j));
            }
        }
        Ok(out)
    }

    /// `self^iterations · h` by repeated sparse products.
    pub fn power_apply(&self, h: ArrayView2<'_, f64>, iterations: usize) -> Result<Array2<f64>> {
        let mut cur = h.to_owned();
        if cur.nrows() != self.size() {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows, propagation is {}x{}",
                cur.nrows(),
                self.size(),
                self.size()
            )));
        }
        for _ in 0..iterations {
            cur = self.multiply(cur.view())?;
        }
        Ok(cur)
    }
}

pub fn normalize_adjacency(adj: &Adjacency) -> NormalizedAdjacency {
    Propagation::normalized(adj)
}

/// `A_norm^λ · h`.
pub fn aggregate(h: ArrayView2<'_, f64>, a_norm: &NormalizedAdjacency, iterations: usize) -> Result<Array2<f64>> {
    a_norm.power_apply(h, iterations)
}

/// `(A + I)^λ · h`.
pub fn aggregate_unnormalized(h: ArrayView2<'_, f64>, adj: &Adjacency, iterations: usize) -> Result<Array2<f64>> {
    Propagation::self_loops(adj).power_apply(h, iterations)
}
