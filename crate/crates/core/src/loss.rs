//! Subgraph similarity cross-entropy and its analytic gradient.
//!
//! Forward pass for one subgraph:
//!
//! 1. gather raw node rows (plus the prompt row) and the rows of the
//!    classes present in the subgraph;
//! 2. run both blocks through the adapter;
//! 3. aggregate the node block λ rounds;
//! 4. score every labeled node against every present class;
//! 5. sum `-log softmax(logits)[label]` over labeled nodes.
//!
//! The prompt row and unlabeled nodes shape the aggregation but contribute
//! no loss term.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{Adapter, LowRankAdapter};
use crate::aggregate::Propagation;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::sampler::{attach_prompt, Subgraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

impl Similarity {
    pub fn score(self, h: ArrayView1<'_, f64>, c: ArrayView1<'_, f64>) -> f64 {
        match self {
            Similarity::Dot => h.dot(&c),
            Similarity::Cosine => {
                let (nh, nc) = (norm(h), norm(c));
                h.dot(&c) / (nh * nc)
            }
        }
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt().max(NORM_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub iterations: usize,
    pub normalize: bool,
    pub similarity: Similarity,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            iterations: 8,
            normalize: true,
            similarity: Similarity::Dot,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub loss: f64,
    /// Labeled nodes that contributed a term.
    pub node_terms: usize,
    /// Gradients in [`Adapter::params`] order.
    pub grads: Vec<Array2<f64>>,
}

impl LossReport {
    pub fn grad_w_down(&self) -> Option<&Array2<f64>> {
        (self.grads.len() == 2).then(|| &self.grads[0])
    }

    pub fn grad_w_up(&self) -> Option<&Array2<f64>> {
        (self.grads.len() == 2).then(|| &self.grads[1])
    }
}

/// Raw node block of a subgraph: member rows in local order, then the
/// prompt row when attached.
pub fn gather_nodes(s: &Subgraph, table: &EmbeddingTable) -> Array2<f64> {
    let mut x = table.nodes().select(Axis(0), &s.node_ids);
    if s.prompt.is_some() {
        x.push_row(table.prompt()).expect("row length matches");
    }
    x
}

fn check_inputs(s: &Subgraph, table: &EmbeddingTable, adapter: &Adapter) -> Result<Vec<usize>> {
    if table.dim() != adapter.dim() {
        return Err(Error::Shape(format!(
            "embedding dim {} but adapter dim {}",
            table.dim(),
            adapter.dim()
        )));
    }
    let classes: Vec<usize> = s.labels_present.iter().copied().collect();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("subgraph centered at {} has no labeled nodes", s.center)));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= table.class_count()) {
        return Err(Error::Dataset(format!("label {c} outside the class catalog")));
    }
    Ok(classes)
}

/// Loss and analytic adapter gradients for one subgraph. Dropout masks are
/// drawn from `rng` when given; `None` evaluates deterministically.
pub fn subgraph_loss(
    s: &Subgraph,
    table: &EmbeddingTable,
    adapter: &Adapter,
    opts: &LossOptions,
    mut rng: Option<&mut dyn rand::RngCore>,
) -> Result<LossReport> {
    let classes = check_inputs(s, table, adapter)?;
    let x = gather_nodes(s, table);
    let c_raw = table.classes().select(Axis(0), &classes);

    let mask_x = rng.as_deref_mut().and_then(|r| adapter.draw_mask(x.nrows(), r));
    let mask_c = rng.and_then(|r| adapter.draw_mask(c_raw.nrows(), r));
    let (xa, trace_x) = adapter.forward(x.view(), mask_x)?;
    let (ca, trace_c) = adapter.forward(c_raw.view(), mask_c)?;

    let prop = Propagation::new(&s.adjacency, opts.normalize);
    let h = prop.power_apply(xa.view(), opts.iterations)?;

    let mut grad_h = Array2::zeros(h.raw_dim());
    let mut grad_c = Array2::zeros(ca.raw_dim());
    let mut loss = 0.0;
    let mut node_terms = 0;
    let class_norms: Vec<f64> = ca.rows().into_iter().map(norm).collect();

    for (i, label) in s.labels.iter().enumerate() {
        let Some(label) = *label else { continue };
        let target = classes.binary_search(&label).expect("label in labels_present");
        let hi = h.row(i);
        let h_norm = norm(hi);
        let logits: Array1<f64> = ca
            .rows()
            .into_iter()
            .zip(&class_norms)
            .map(|(c, &cn)| match opts.similarity {
                Similarity::Dot => hi.dot(&c),
                Similarity::Cosine => hi.dot(&c) / (h_norm * cn),
            })
            .collect();
        let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps = logits.mapv(|l| (l - max).exp());
        let sum = exps.sum();
        loss += sum.ln() + max - logits[target];
        node_terms += 1;

        let mut dlogits = exps / sum;
        dlogits[target] -= 1.0;
        let mut gh = grad_h.row_mut(i);
        for (j, &dl) in dlogits.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let cj = ca.row(j);
            match opts.similarity {
                Similarity::Dot => {
                    gh.scaled_add(dl, &cj);
                    grad_c.row_mut(j).scaled_add(dl, &hi);
                }
                Similarity::Cosine => {
                    // s = h·c/(|h||c|); ∂s/∂h = c/(|h||c|) - s·h/|h|², symmetric in c
                    let cn = class_norms[j];
                    let sim = logits[j];
                    gh.scaled_add(dl / (h_norm * cn), &cj);
                    gh.scaled_add(-dl * sim / (h_norm * h_norm), &hi);
                    let mut gc = grad_c.row_mut(j);
                    gc.scaled_add(dl / (h_norm * cn), &hi);
                    gc.scaled_add(-dl * sim / (cn * cn), &cj);
                }
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss of subgraph centered at {}", s.center)));
    }

    // the propagation is symmetric, so its adjoint is itself
    let grad_xa = prop.power_apply(grad_h.view(), opts.iterations)?;
    let mut grads = adapter.zero_grads();
    adapter.backward(&trace_x, grad_xa.view(), &mut grads);
    adapter.backward(&trace_c, grad_c.view(), &mut grads);
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of subgraph centered at {}", s.center)));
    }
    Ok(LossReport {
        loss,
        node_terms,
        grads,
    })
}

/// Forward-only loss, no dropout.
pub fn subgraph_loss_value(s: &Subgraph, table: &EmbeddingTable, adapter: &Adapter, opts: &LossOptions) -> Result<f64> {
    subgraph_loss(s, table, adapter, opts, None).map(|r| r.loss)
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares analytic gradients with central differences of step `h` on
/// `samples` randomly chosen parameter coordinates (every coordinate when
/// the adapter has fewer). Returns the largest relative error.
pub fn gradient_check(
    s: &Subgraph,
    table: &EmbeddingTable,
    adapter: &Adapter,
    opts: &LossOptions,
    h: f64,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    assert!(h > 0.0, "perturbation must be positive");
    let analytic = subgraph_loss(s, table, adapter, opts, None)?.grads;
    let coords: Vec<(usize, usize)> = analytic
        .iter()
        .enumerate()
        .flat_map(|(p, g)| (0..g.len()).map(move |k| (p, k)))
        .collect();
    let chosen: Vec<usize> = if coords.len() <= samples {
        (0..coords.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut worst: f64 = 0.0;
    let mut probe = adapter.clone();
    for i in chosen {
        let (p, k) = coords[i];
        let original = *probe.params_mut()[p].iter_mut().nth(k).unwrap();
        let loss_at = |v: f64, probe: &mut Adapter| -> Result<f64> {
            *probe.params_mut()[p].iter_mut().nth(k).unwrap() = v;
            subgraph_loss_value(s, table, probe, opts)
        };
        let plus = loss_at(original + h, &mut probe)?;
        let minus = loss_at(original - h, &mut probe)?;
        loss_at(original, &mut probe)?;
        let numeric = (plus - minus) / (2.0 * h);
        let a = *analytic[p].iter().nth(k).unwrap();
        worst = worst.max(relative_error(a, numeric));
    }
    Ok(worst)
}

/// One randomly drawn gradient-check problem.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub subgraph: Subgraph,
    pub table: EmbeddingTable,
    pub adapter: Adapter,
    pub options: LossOptions,
}

/// Random small problem: 2..=10 nodes, `d = 8`, rank 2, λ in {0, 1, 2},
/// prompt attached on every other draw, both adapter factors non-zero.
pub fn random_gradcheck_case(rng: &mut impl Rng) -> Result<GradcheckCase> {
    const DIM: usize = 8;
    let n = rng.gen_range(2..=10);
    let classes = rng.gen_range(2..=4);
    let mut labels: Vec<Option<usize>> = (0..n)
        .map(|_| rng.gen_bool(0.8).then(|| rng.gen_range(0..classes)))
        .collect();
    if labels.iter().all(Option::is_none) {
        labels[0] = Some(0);
    }
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|_| rng.gen_bool(0.4))
        .collect();
    let mut subgraph = Subgraph {
        dataset: 0,
        center: 0,
        node_ids: (0..n).collect(),
        labels_present: labels.iter().flatten().copied().collect(),
        labels,
        adjacency: Adjacency::from_edges(n, edges),
        prompt: None,
    };
    if rng.gen_bool(0.5) {
        subgraph = attach_prompt(subgraph)?;
    }
    let mut normal = |r: usize, c: usize, scale: f64| Array2::from_shape_simple_fn((r, c), || scale * rng.sample::<f64, _>(StandardNormal));
    let table = EmbeddingTable::new(normal(n, DIM, 1.0), normal(classes, DIM, 1.0), normal(1, DIM, 1.0).row(0).to_owned())?;
    let adapter = Adapter::LowRank(LowRankAdapter {
        w_down: normal(DIM, 2, 0.3),
        w_up: normal(2, DIM, 0.05),
        alpha: 16.0,
        dropout: 0.0,
    });
    let options = LossOptions {
        iterations: rng.gen_range(0..=2),
        normalize: true,
        similarity: Similarity::Dot,
    };
    Ok(GradcheckCase {
        subgraph,
        table,
        adapter,
        options,
    })
}

/// Runs `instances` random cases and returns the worst relative error of
/// each, checking every coordinate with step `h`.
pub fn random_gradient_checks(seed: u64, instances: usize, h: f64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..instances)
        .map(|_| {
            let c = random_gradcheck_case(&mut rng)?;
            gradient_check(&c.subgraph, &c.table, &c.adapter, &c.options, h, usize::MAX, 0)
        })
        .collect()
}
