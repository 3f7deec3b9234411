//! Helpers shared by the integration tests. The dense oracles here are
//! written from the definitions and share no code with the library.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde_json::json;

/// Writes a dataset directory by hand, bypassing `save_dataset`.
pub fn write_dataset(
    dir: &Path,
    name: &str,
    classes: &[&str],
    nodes: &[(&str, Option<usize>)],
    edges: &[(usize, usize)],
) {
    fs::create_dir_all(dir).unwrap();
    fs::write(
        dir.join("dataset.json"),
        json!({"name": name, "description": format!("The {name} test graph.")}).to_string(),
    )
    .unwrap();
    let cls: Vec<_> = classes
        .iter()
        .map(|c| json!({"name": c, "description": format!("Documents about {c}.")}))
        .collect();
    fs::write(dir.join("classes.json"), serde_json::Value::Array(cls).to_string()).unwrap();
    let mut body = String::new();
    for (i, (text, label)) in nodes.iter().enumerate() {
        body += &json!({"id": i, "text": text, "label": label}).to_string();
        body.push('\n');
    }
    fs::write(dir.join("nodes.jsonl"), body).unwrap();
    let mut body = String::new();
    for (s, d) in edges {
        body += &json!({"src": s, "dst": d}).to_string();
        body.push('\n');
    }
    fs::write(dir.join("edges.jsonl"), body).unwrap();
}

/// Symmetric 0/1 adjacency from an undirected edge list.
pub fn dense_adjacency(n: usize, edges: &[(usize, usize)]) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for &(u, v) in edges {
        if u != v {
            a[[u, v]] = 1.0;
            a[[v, u]] = 1.0;
        }
    }
    a
}

/// `M^-1/2 (A + I) M^-1/2` with `M` the row sums of `A + I`, or plain
/// `A + I` when `normalize` is false.
pub fn dense_operator(a: &Array2<f64>, normalize: bool) -> Array2<f64> {
    let n = a.nrows();
    let mut at = a.clone();
    for i in 0..n {
        at[[i, i]] += 1.0;
    }
    if !normalize {
        return at;
    }
    let m: Vec<f64> = (0..n).map(|i| at.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| at[[i, j]] / (m[i].sqrt() * m[j].sqrt()))
}

pub fn dense_power(op: &Array2<f64>, h: &Array2<f64>, k: usize) -> Array2<f64> {
    let mut out = h.clone();
    for _ in 0..k {
        out = op.dot(&out);
    }
    out
}

/// One loss instance in dense form. Node rows include the prompt row when
/// present; `labels` index into `classes` and `None` marks rows without a
/// loss term.
pub struct DenseProblem {
    pub adjacency: Array2<f64>,
    pub x: Array2<f64>,
    pub classes: Array2<f64>,
    pub labels: Vec<Option<usize>>,
    pub alpha: f64,
    pub iterations: usize,
    pub normalize: bool,
}

impl DenseProblem {
    /// Cross-entropy with dot-product logits after `x ↦ x + α x W_down W_up`.
    pub fn loss(&self, w_down: &Array2<f64>, w_up: &Array2<f64>) -> f64 {
        let delta = w_down.dot(w_up) * self.alpha;
        let y = &self.x + &self.x.dot(&delta);
        let c = &self.classes + &self.classes.dot(&delta);
        let h = dense_power(&dense_operator(&self.adjacency, self.normalize), &y, self.iterations);
        let mut total = 0.0;
        for (i, label) in self.labels.iter().enumerate() {
            let Some(t) = *label else { continue };
            let logits: Array1<f64> = c.dot(&h.row(i));
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
            total += lse - logits[t];
        }
        total
    }

    /// Central differences of [`Self::loss`] for every coordinate.
    pub fn numeric_grads(&self, w_down: &Array2<f64>, w_up: &Array2<f64>, h: f64) -> (Array2<f64>, Array2<f64>) {
        let mut gd = Array2::zeros(w_down.raw_dim());
        let mut gu = Array2::zeros(w_up.raw_dim());
        for idx in ndarray::indices(w_down.raw_dim()) {
            let (mut p, mut m) = (w_down.clone(), w_down.clone());
            p[idx] += h;
            m[idx] -= h;
            gd[idx] = (self.loss(&p, w_up) - self.loss(&m, w_up)) / (2.0 * h);
        }
        for idx in ndarray::indices(w_up.raw_dim()) {
            let (mut p, mut m) = (w_up.clone(), w_up.clone());
            p[idx] += h;
            m[idx] -= h;
            gu[idx] = (self.loss(w_down, &p) - self.loss(w_down, &m)) / (2.0 * h);
        }
        (gd, gu)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)`, maximised over entries.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
pub fn spectral_radius(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    let mut v = Array1::from_shape_fn(n, |i| 1.0 + (i as f64 * 0.37).sin() * 0.5);
    let mut lambda = 0.0;
    for _ in 0..2000 {
        let w = m.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w) / v.dot(&v);
        v = w / norm;
    }
    lambda.abs()
}

/// In-memory graph with generated texts and `classes` catalog entries.
pub fn graph(n: usize, edges: &[(usize, usize)], labels: Vec<Option<usize>>, classes: usize) -> zerog::graph::TextAttributedGraph {
    use zerog::graph::{Adjacency, ClassCatalog, ClassEntry, TextAttributedGraph};
    let catalog = ClassCatalog::new(
        (0..classes)
            .map(|c| ClassEntry {
                name: format!("class{c}"),
                description: format!("about class {c}"),
            })
            .collect(),
    )
    .unwrap();
    TextAttributedGraph::new(
        "g",
        "a test graph",
        Adjacency::from_edges(n, edges.iter().copied()),
        (0..n).map(|i| format!("node {i}")).collect(),
        labels,
        catalog,
    )
    .unwrap()
}

/// Each unordered pair joined with probability `p`.
pub fn random_edges(rng: &mut impl rand::Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(p) {
                out.push((a, b));
            }
        }
    }
    out
}

/// Writes the synthetic transfer benchmark (two sources, one target, ten
/// classes each, 300 nodes, d = 32, rank-4 shared corruption, σ = 0.3,
/// homophily 0.8) under `root` and returns a matching experiment config.
pub fn synthetic_benchmark(root: &Path, seed: u64) -> zerog::pipeline::ExperimentConfig {
    use zerog::embed::ProviderSpec;
    use zerog::pipeline::ExperimentConfig;
    use zerog::synth::{generate_synthetic, SynthSpec};

    let mut spec = SynthSpec::new(3, 10, 300, seed);
    spec.output_dir = root.join("data");
    assert_eq!((spec.dim, spec.rotation_rank, spec.noise_sigma, spec.homophily), (32, 4, 0.3, 0.8));
    let dirs = generate_synthetic(&spec).unwrap();
    let mut cfg = ExperimentConfig::new(ProviderSpec::cache(32), root.join("out"));
    cfg.source_datasets = dirs[..2].to_vec();
    cfg.target_datasets = dirs[2..].to_vec();
    cfg.seed = seed;
    cfg.epochs = 3;
    cfg.adapter.rank = 4;
    cfg.adapter.alpha = 16.0;
    cfg.optimizer.lr = 1e-4;
    cfg.aggregation.iterations = 2;
    cfg.sampler.k = 2;
    cfg
}
