mod common;

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use zerog::adapter::{Adapter, AdapterConfig, DenseAdapter, LowRankAdapter};
use zerog::embed::EmbeddingTable;
use zerog::graph::Adjacency;
use zerog::loss::{gradient_check, random_gradcheck_case, subgraph_loss, subgraph_loss_value, LossOptions, Similarity};
use zerog::optim::{OptimizerConfig, OptimizerState};
use zerog::sampler::{attach_prompt, Subgraph};
use zerog::train::{pretrain, TrainConfig};

use common::{max_relative_error, DenseProblem};

fn normal(rng: &mut impl Rng, r: usize, c: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || scale * rng.sample::<f64, _>(StandardNormal))
}

fn low_rank(w_down: Array2<f64>, w_up: Array2<f64>, alpha: f64, dropout: f64) -> Adapter {
    Adapter::LowRank(LowRankAdapter { w_down, w_up, alpha, dropout })
}

/// Dense form of a subgraph loss problem, read back from the library's
/// inputs but evaluated by the test-side oracle.
fn dense_problem(s: &Subgraph, table: &EmbeddingTable, alpha: f64, opts: &LossOptions) -> DenseProblem {
    let n = s.len();
    let edges: Vec<(usize, usize)> = s.adjacency.edges().collect();
    let mut x = table.nodes().select(Axis(0), &s.node_ids);
    if s.prompt.is_some() {
        x.push_row(table.prompt()).unwrap();
    }
    let classes: Vec<usize> = s.labels_present.iter().copied().collect();
    let mut labels: Vec<Option<usize>> = s.labels.iter().map(|l| l.map(|c| classes.iter().position(|&k| k == c).unwrap())).collect();
    labels.resize(n, None);
    DenseProblem {
        adjacency: common::dense_adjacency(n, &edges),
        x,
        classes: table.classes().select(Axis(0), &classes),
        labels,
        alpha,
        iterations: opts.iterations,
        normalize: opts.normalize,
    }
}

#[test]
fn adapter_matches_dense_multiply() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let d = rng.gen_range(2..12);
        let x = normal(&mut rng, 7, d, 1.0);
        let (wd, wu) = (normal(&mut rng, d, 2, 1.0), normal(&mut rng, 2, d, 1.0));
        let alpha = rng.gen_range(1.0..32.0);
        let got = low_rank(wd.clone(), wu.clone(), alpha, 0.0).apply(x.view()).unwrap();
        let mut want = x.clone();
        for i in 0..7 {
            for j in 0..d {
                let mut acc = 0.0;
                for k in 0..2 {
                    let xd: f64 = (0..d).map(|m| x[[i, m]] * wd[[m, k]]).sum();
                    acc += xd * wu[[k, j]];
                }
                want[[i, j]] += alpha * acc;
            }
        }
        let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}

#[test]
fn dropout_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = 5;
    let a = low_rank(normal(&mut rng, d, 2, 0.5), normal(&mut rng, 2, d, 0.5), 4.0, 0.3);
    let x = normal(&mut rng, 4, d, 1.0);
    let g = normal(&mut rng, 4, d, 1.0);
    let mask = a.draw_mask(4, &mut rng).unwrap();
    assert!(mask.iter().all(|&m| m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-15));
    let f = |a: &Adapter| (&g * &a.forward(x.view(), Some(mask.clone())).unwrap().0).sum();
    let (_, trace) = a.forward(x.view(), Some(mask.clone())).unwrap();
    let mut grads = a.zero_grads();
    a.backward(&trace, g.view(), &mut grads);
    for (p, analytic) in grads.iter().enumerate() {
        for idx in ndarray::indices(analytic.raw_dim()) {
            let (mut plus, mut minus) = (a.clone(), a.clone());
            plus.params_mut()[p][idx] += 1e-6;
            minus.params_mut()[p][idx] -= 1e-6;
            let numeric = (f(&plus) - f(&minus)) / 2e-6;
            assert!((numeric - analytic[idx]).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }
}

#[test]
fn analytic_gradients_match_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut with_prompt = 0;
    for _ in 0..30 {
        let case = random_gradcheck_case(&mut rng).unwrap();
        with_prompt += case.subgraph.prompt_attached() as usize;
        let Adapter::LowRank(lr) = &case.adapter else { unreachable!() };
        let problem = dense_problem(&case.subgraph, &case.table, lr.alpha, &case.options);
        let report = subgraph_loss(&case.subgraph, &case.table, &case.adapter, &case.options, None).unwrap();
        let oracle_loss = problem.loss(&lr.w_down, &lr.w_up);
        assert!((report.loss - oracle_loss).abs() < 1e-9 * oracle_loss.abs().max(1.0));
        let (gd, gu) = problem.numeric_grads(&lr.w_down, &lr.w_up, 1e-5);
        assert!(max_relative_error(report.grad_w_down().unwrap(), &gd) < 1e-4);
        assert!(max_relative_error(report.grad_w_up().unwrap(), &gu) < 1e-4);
    }
    assert!(with_prompt > 5 && with_prompt < 25);
}

fn toy_subgraph(n: usize, edges: &[(usize, usize)], labels: Vec<Option<usize>>) -> Subgraph {
    Subgraph {
        dataset: 0,
        center: 0,
        node_ids: (0..n).collect(),
        labels_present: labels.iter().flatten().copied().collect(),
        labels,
        adjacency: Adjacency::from_edges(n, edges.iter().copied()),
        prompt: None,
    }
}

#[test]
fn gradient_check_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = toy_subgraph(4, &[(0, 1), (1, 2), (2, 3)], vec![Some(0), Some(1), None, Some(0)]);
    let table = EmbeddingTable::new(normal(&mut rng, 4, 4, 1.0), normal(&mut rng, 2, 4, 1.0), Array1::zeros(4)).unwrap();
    let a = low_rank(normal(&mut rng, 4, 1, 0.4), normal(&mut rng, 1, 4, 0.1), 16.0, 0.0);
    let mut opts = LossOptions {
        iterations: 2,
        normalize: true,
        similarity: Similarity::Dot,
    };
    assert!(gradient_check(&s, &table, &a, &opts, 1e-5, 64, 0).unwrap() < 1e-5);
    opts.iterations = 0;
    assert!(gradient_check(&s, &table, &a, &opts, 1e-5, 64, 0).unwrap() < 1e-6);
    opts.similarity = Similarity::Cosine;
    opts.iterations = 1;
    assert!(gradient_check(&s, &table, &a, &opts, 1e-5, 64, 0).unwrap() < 1e-4);
}

#[test]
fn zero_adapter_on_symmetric_instance() {
    // two mirror-image nodes, opposite labels, mirror classes: the loss is
    // stationary and both gradient estimates vanish
    let s = toy_subgraph(2, &[(0, 1)], vec![Some(0), Some(1)]);
    let nodes = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
    let table = EmbeddingTable::new(nodes.clone(), nodes, Array1::zeros(2)).unwrap();
    let a = low_rank(Array2::zeros((2, 1)), Array2::zeros((1, 2)), 16.0, 0.0);
    let opts = LossOptions {
        iterations: 1,
        normalize: true,
        similarity: Similarity::Dot,
    };
    let report = subgraph_loss(&s, &table, &a, &opts, None).unwrap();
    assert!(report.grads.iter().all(|g| g.iter().all(|v| v.abs() < 1e-15)));
    assert!(gradient_check(&s, &table, &a, &opts, 1e-5, 16, 0).unwrap() < 1e-6);
    // both nodes average to the same vector, so logits tie and each term is ln 2
    assert!((report.loss - 2.0 * 2f64.ln()).abs() < 1e-12);
}

fn separable() -> (Subgraph, EmbeddingTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let classes = normal(&mut rng, 3, d, 1.0);
    let labels: Vec<Option<usize>> = (0..9).map(|i| Some(i % 3)).collect();
    let nodes = Array2::from_shape_fn((9, d), |(i, j)| classes[[i % 3, j]] * 0.3 + 0.5 * ((i * d + j) as f64).sin());
    let s = attach_prompt(toy_subgraph(9, &[(0, 3), (3, 6), (1, 4), (4, 7), (2, 5), (5, 8)], labels)).unwrap();
    (s, EmbeddingTable::new(nodes, classes, Array1::from_elem(d, 0.1)).unwrap())
}

fn train_cfg(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 11,
        optimizer: OptimizerConfig {
            lr,
            ..Default::default()
        },
        loss: LossOptions {
            iterations: 1,
            normalize: true,
            similarity: Similarity::Dot,
        },
    }
}

#[test]
fn two_hundred_steps_reduce_the_loss() {
    let (s, table) = separable();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut a = Adapter::low_rank(6, &AdapterConfig { rank: 2, alpha: 16.0, dropout: 0.0 }, &mut rng);
    let before = subgraph_loss_value(&s, &table, &a, &train_cfg(0, 1e-3).loss).unwrap();
    let log = pretrain(&mut a, std::slice::from_ref(&s), std::slice::from_ref(&table), &train_cfg(200, 1e-3)).unwrap();
    assert_eq!(log.steps.len(), 200);
    assert_eq!(log.steps[0].loss, before);
    let after = subgraph_loss_value(&s, &table, &a, &train_cfg(0, 1e-3).loss).unwrap();
    assert!(after < before, "{after} >= {before}");
    let (head, tail) = log.head_tail_means(0.1).unwrap();
    assert!(tail < head);
}

#[test]
fn zero_epochs_leave_the_adapter_unchanged() {
    let (s, table) = separable();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let init = Adapter::low_rank(6, &AdapterConfig::default(), &mut rng);
    let mut a = init.clone();
    let log = pretrain(&mut a, std::slice::from_ref(&s), std::slice::from_ref(&table), &train_cfg(0, 1e-4)).unwrap();
    assert!(log.steps.is_empty());
    assert_eq!(a, init);
}

#[test]
fn training_with_dropout_is_reproducible() {
    let (s, table) = separable();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut a = Adapter::low_rank(6, &AdapterConfig::default(), &mut rng);
        let log = pretrain(&mut a, &[s.clone(), s.clone()], std::slice::from_ref(&table), &train_cfg(5, 1e-3)).unwrap();
        (a, log)
    };
    let (a1, l1) = run();
    let (a2, l2) = run();
    assert_eq!(a1, a2);
    assert_eq!(l1, l2);
}

/// Textbook Adam with decoupled decay, written out for the test.
fn reference_adam(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, cfg: &OptimizerConfig) {
    let (b1, b2) = cfg.betas;
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mh = m[i] / (1.0 - b1.powi(t));
        let vh = v[i] / (1.0 - b2.powi(t));
        p[i] -= cfg.lr * (mh / (vh.sqrt() + cfg.epsilon) + cfg.weight_decay * p[i]);
    }
}

#[test]
fn adam_on_a_fixed_quadratic() {
    let target = ndarray::array![[1.0, -2.0], [0.5, 3.0]];
    let cfg = OptimizerConfig {
        lr: 0.01,
        weight_decay: 0.01,
        ..Default::default()
    };
    let mut a = Adapter::Dense(DenseAdapter {
        delta: Array2::zeros((2, 2)),
        alpha: 1.0,
        dropout: 0.0,
    });
    let mut st = OptimizerState::new(cfg, &a);
    let (mut p, mut m, mut v) = (vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]);
    let loss = |w: &Array2<f64>| 0.5 * (w - &target).mapv(|x| x * x).sum();
    let mut losses = Vec::new();
    for t in 1..=100 {
        let w = a.params()[0].clone();
        let g = &w - &target;
        losses.push(loss(&w));
        assert!(st.step(&mut a, std::slice::from_ref(&g)).unwrap());
        reference_adam(&mut p, &mut m, &mut v, g.as_slice().unwrap(), t, &cfg);
        let got = a.params()[0].as_slice().unwrap().to_vec();
        assert!(got.iter().zip(&p).all(|(x, y)| (x - y).abs() < 1e-12));
    }
    assert!(losses[5..].windows(2).all(|w| w[1] < w[0]));
    assert_eq!(st.step_count, 100);
}
