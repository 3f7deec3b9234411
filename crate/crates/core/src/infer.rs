//! Zero-shot prediction on a target graph and evaluation metrics.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::Adapter;
use crate::aggregate::Propagation;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{ClassCatalog, TextAttributedGraph};
use crate::loss::{gather_nodes, LossOptions, Similarity};
use crate::sampler::{attach_prompt, extract_khop};

/// Index of the class with the highest similarity; ties go to the
/// smallest index.
pub fn argmax_predict(node: ArrayView1<'_, f64>, classes: ArrayView2<'_, f64>, sim: Similarity) -> usize {
    assert!(classes.nrows() > 0, "class matrix is empty");
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, c) in classes.rows().into_iter().enumerate() {
        let s = sim.score(node, c);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    best
}

/// Row-wise [`argmax_predict`].
pub fn predict_rows(nodes: ArrayView2<'_, f64>, classes: ArrayView2<'_, f64>, sim: Similarity) -> Vec<usize> {
    nodes.rows().into_iter().map(|n| argmax_predict(n, classes, sim)).collect()
}

/// Pure embedding-similarity classification with no adapter, no
/// aggregation and no prompt.
pub fn raw_similarity_predictions(table: &EmbeddingTable, sim: Similarity) -> Vec<usize> {
    predict_rows(table.nodes(), table.classes(), sim)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Aggregate over the whole target graph, with one prompting node
    /// connected to every node.
    #[default]
    FullGraph,
    /// Aggregate each node's own k-hop ball (prompt attached) and read the
    /// center row.
    Subgraph,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOptions {
    pub loss: LossOptions,
    pub prompt: bool,
    pub mode: InferenceMode,
    pub k: usize,
    pub max_nodes: usize,
}

/// Predicted class of every node of `g`.
pub fn predict_dataset(g: &TextAttributedGraph, table: &EmbeddingTable, adapter: &Adapter, opts: &InferenceOptions) -> Result<Vec<usize>> {
    if table.dim() != adapter.dim() {
        return Err(Error::Shape(format!("embedding dim {} but adapter dim {}", table.dim(), adapter.dim())));
    }
    if table.node_count() != g.node_count() || table.class_count() != g.classes().len() {
        return Err(Error::Shape("embedding table does not match the dataset".into()));
    }
    if g.classes().is_empty() {
        return Err(Error::Dataset(format!("{}: no classes to predict", g.name)));
    }
    let classes = adapter.apply(table.classes())?;
    let sim = opts.loss.similarity;
    match opts.mode {
        InferenceMode::FullGraph => {
            let mut adj = g.adjacency().clone();
            let mut x: Array2<f64> = table.nodes().to_owned();
            if opts.prompt {
                adj.push_hub();
                x.push_row(table.prompt()).expect("row length matches");
            }
            let xa = adapter.apply(x.view())?;
            let h = Propagation::new(&adj, opts.loss.normalize).power_apply(xa.view(), opts.loss.iterations)?;
            Ok(predict_rows(h.slice_axis(Axis(0), (0..g.node_count()).into()), classes.view(), sim))
        }
        InferenceMode::Subgraph => (0..g.node_count())
            .into_par_iter()
            .map(|v| {
                let mut s = extract_khop(g, v, opts.k, opts.max_nodes);
                if opts.prompt {
                    s = attach_prompt(s)?;
                }
                let xa = adapter.apply(gather_nodes(&s, table).view())?;
                let h = Propagation::new(&s.adjacency, opts.loss.normalize).power_apply(xa.view(), opts.loss.iterations)?;
                Ok(argmax_predict(h.row(0), classes.view(), sim))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub support: usize,
    pub predicted: usize,
    /// `None` when the class was never predicted.
    pub precision: Option<f64>,
    /// `None` when the class has no labeled nodes.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub dataset: String,
    pub labeled: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores predictions against the labeled nodes of `labels`.
pub fn evaluate(dataset: &str, classes: &ClassCatalog, labels: &[Option<usize>], predictions: &[usize]) -> Result<DatasetEval> {
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (label, &pred) in labels.iter().zip(predictions) {
        if let Some(y) = *label {
            confusion[y][pred] += 1;
        }
    }
    let labeled: usize = confusion.iter().flatten().sum();
    if labeled == 0 {
        return Err(Error::Dataset(format!("target {dataset:?} has no labeled nodes to score")));
    }
    let correct: usize = (0..k).map(|i| confusion[i][i]).sum();
    let per_class = classes
        .names()
        .enumerate()
        .map(|(i, name)| {
            let support: usize = confusion[i].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[i]).sum();
            let hit = confusion[i][i] as f64;
            ClassMetrics {
                class: name.to_string(),
                support,
                predicted,
                precision: (predicted > 0).then(|| hit / predicted as f64),
                recall: (support > 0).then(|| hit / support as f64),
            }
        })
        .collect();
    Ok(DatasetEval {
        dataset: dataset.to_string(),
        labeled,
        correct,
        accuracy: correct as f64 / labeled as f64,
        per_class,
        confusion,
    })
}
