//! Synthetic transfer benchmark with planted embeddings.
//!
//! Every dataset gets its own classes, all drawn as unit vectors from one
//! `semantic_rank`-dimensional subspace shared by every dataset. A node's
//! vector is its class vector plus isotropic noise `σ·n` plus a nuisance
//! `γ·z Vᵀ`, where `V` is an orthonormal `dim×ρ` basis shared by all
//! datasets and `z` is drawn per node. Class and dataset descriptions are
//! clean. The nuisance carries no label information, so projecting out `V`
//! (the rank-ρ map `I - V Vᵀ`) helps every dataset alike, and an adapter
//! trained on the sources can reuse it on an unseen target.
//!
//! Edges follow a planted partition whose expected fraction of
//! intra-class edges equals `homophily`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::{write_cache, EmbeddingTable, DEFAULT_CACHE_FILE};
use crate::error::{Error, Result};
use crate::graph::{save_dataset, Adjacency, ClassCatalog, ClassEntry, TextAttributedGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub datasets: usize,
    pub classes_per_dataset: usize,
    pub nodes: usize,
    pub homophily: f64,
    pub noise_sigma: f64,
    /// Rank ρ of the shared nuisance subspace.
    pub rotation_rank: usize,
    pub seed: u64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Dimension of the subspace all class vectors are drawn from.
    #[serde(default = "default_semantic_rank")]
    pub semantic_rank: usize,
    #[serde(default = "default_degree")]
    pub average_degree: f64,
    /// Nuisance scale γ.
    #[serde(default = "default_strength")]
    pub corruption_strength: f64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn default_dim() -> usize {
    32
}
fn default_semantic_rank() -> usize {
    6
}
fn default_degree() -> f64 {
    6.0
}
fn default_strength() -> f64 {
    12.0
}
fn default_output() -> PathBuf {
    PathBuf::from("synthetic")
}

impl SynthSpec {
    pub fn new(datasets: usize, classes_per_dataset: usize, nodes: usize, seed: u64) -> Self {
        Self {
            datasets,
            classes_per_dataset,
            nodes,
            homophily: 0.8,
            noise_sigma: 0.3,
            rotation_rank: 4,
            seed,
            dim: default_dim(),
            semantic_rank: default_semantic_rank(),
            average_degree: default_degree(),
            corruption_strength: default_strength(),
            output_dir: default_output(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: Self = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if spec.output_dir.is_relative() {
            spec.output_dir = path.parent().unwrap_or(Path::new(".")).join(&spec.output_dir);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets == 0 || self.classes_per_dataset == 0 || self.nodes == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic spec: counts and dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.homophily) {
            return Err(Error::Config(format!("homophily {} outside [0, 1]", self.homophily)));
        }
        if !(self.noise_sigma >= 0.0) || !(self.average_degree >= 0.0) || !self.corruption_strength.is_finite() {
            return Err(Error::Config("synthetic spec: sigma and degree must be non-negative".into()));
        }
        if self.rotation_rank > self.dim {
            return Err(Error::Config("rotation_rank exceeds dim".into()));
        }
        if self.semantic_rank == 0 || self.semantic_rank > self.dim {
            return Err(Error::Config("semantic_rank must be in 1..=dim".into()));
        }
        Ok(())
    }

    pub fn dataset_name(i: usize) -> String {
        format!("synth-{i}")
    }
}

/// Gram–Schmidt on the columns of `m`; columns that collapse are left
/// unnormalized.
fn orthonormal_columns(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        for i in 0..j {
            let proj = m.column(i).dot(&m.column(j));
            let ci = m.column(i).to_owned();
            m.column_mut(j).scaled_add(-proj, &ci);
        }
        let n = m.column(j).dot(&m.column(j)).sqrt();
        if n > 1e-12 {
            m.column_mut(j).mapv_inplace(|x| x / n);
        }
    }
    m
}

fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Generated datasets together with the nuisance basis.
#[derive(Debug, Clone)]
pub struct Planted {
    pub datasets: Vec<(TextAttributedGraph, EmbeddingTable)>,
    /// Orthonormal `dim×ρ` basis of the nuisance subspace.
    pub v: Array2<f64>,
}

/// Planted datasets, in memory: graph and embedding table per dataset.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(TextAttributedGraph, EmbeddingTable)>> {
    Ok(plant(spec)?.datasets)
}

pub fn plant(spec: &SynthSpec) -> Result<Planted> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let total_classes = spec.datasets * spec.classes_per_dataset;

    // class vectors as unit rows inside a shared semantic subspace
    let basis = orthonormal_columns(gaussian(&mut rng, d, spec.semantic_rank));
    let mut class_vectors = gaussian(&mut rng, total_classes, spec.semantic_rank).dot(&basis.t());
    for mut r in class_vectors.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }

    let rho = spec.rotation_rank;
    let v = orthonormal_columns(gaussian(&mut rng, d, rho));
    let gamma = spec.corruption_strength;
    let mut out = Vec::with_capacity(spec.datasets);
    for di in 0..spec.datasets {
        let name = SynthSpec::dataset_name(di);
        let c = spec.classes_per_dataset;
        let first = di * c;
        let own = class_vectors.slice(s![first..first + c, ..]).to_owned();

        let mut labels: Vec<usize> = (0..spec.nodes).map(|i| i % c).collect();
        labels.shuffle(&mut rng);

        let adjacency = planted_partition(&labels, spec, &mut rng)?;

        let noise = gaussian(&mut rng, spec.nodes, d);
        let mut nodes = own.select(Axis(0), &labels);
        nodes.scaled_add(spec.noise_sigma, &noise);
        // node texts carry a nuisance in the span of V; the curated class
        // and dataset descriptions stay clean
        let coeff = gaussian(&mut rng, spec.nodes, rho) * gamma;
        nodes += &coeff.dot(&v.t());
        let prompt: Array1<f64> = own.mean_axis(Axis(0)).expect("at least one class");

        let classes = ClassCatalog::new(
            (0..c)
                .map(|k| ClassEntry {
                    name: format!("{name}/class-{k}"),
                    description: format!("Synthetic category {k} of {name}."),
                })
                .collect(),
        )?;
        let graph = TextAttributedGraph::new(
            name.clone(),
            format!(
                "Synthetic planted-partition graph {name} with {c} categories and homophily {:.2}.",
                spec.homophily
            ),
            adjacency,
            (0..spec.nodes).map(|i| format!("{name} node {i}")).collect(),
            labels.into_iter().map(Some).collect(),
            classes,
        )?;
        let table = EmbeddingTable::new(nodes, own, prompt)?;
        out.push((graph, table));
    }
    Ok(Planted { datasets: out, v })
}

fn planted_partition(labels: &[usize], spec: &SynthSpec, rng: &mut impl Rng) -> Result<Adjacency> {
    let n = labels.len();
    let mut sizes = vec![0usize; spec.classes_per_dataset];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let pairs_in: f64 = sizes.iter().map(|&s| (s * s.saturating_sub(1)) as f64 / 2.0).sum();
    let pairs_all = (n * n.saturating_sub(1)) as f64 / 2.0;
    let pairs_out = pairs_all - pairs_in;
    let edges = spec.average_degree * n as f64 / 2.0;
    let p = |share: f64, pairs: f64| if pairs > 0.0 { share * edges / pairs } else { 0.0 };
    let p_in = p(spec.homophily, pairs_in);
    let p_out = p(1.0 - spec.homophily, pairs_out);
    for (what, prob) in [("intra-class", p_in), ("inter-class", p_out)] {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Config(format!(
                "{what} edge probability {prob:.4} is invalid; lower average_degree"
            )));
        }
    }
    let mut list = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let prob = if labels[a] == labels[b] { p_in } else { p_out };
            if rng.gen::<f64>() < prob {
                list.push((a, b));
            }
        }
    }
    Ok(Adjacency::from_edges(n, list))
}

/// Writes every generated dataset to `spec.output_dir/<name>/`, including
/// its embedding cache. Returns the dataset directories.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<PathBuf>> {
    generate(spec)?
        .into_iter()
        .map(|(g, t)| {
            let dir = spec.output_dir.join(&g.name);
            save_dataset(&g, &dir)?;
            write_cache(&t, &dir.join(DEFAULT_CACHE_FILE))?;
            Ok(dir)
        })
        .collect()
}
