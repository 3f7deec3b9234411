//! Pre-training loop: one subgraph per optimizer step, epochs over a
//! per-epoch seeded shuffle of the pre-training set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adapter::Adapter;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::loss::{subgraph_loss, LossOptions};
use crate::optim::{OptimizerConfig, OptimizerState};
use crate::sampler::Subgraph;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub loss: LossOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub dataset: usize,
    pub center: usize,
    pub loss: f64,
    pub node_terms: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// Mean loss over the first and the last `fraction` of steps (at least
    /// one step each).
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.steps.len();
        if n == 0 {
            return None;
        }
        let w = ((n as f64 * fraction).floor() as usize).max(1);
        let mean = |s: &[StepRecord]| s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64;
        Some((mean(&self.steps[..w]), mean(&self.steps[n - w..])))
    }
}

const DROPOUT_SALT: u64 = 0x5eed_d409;

/// Trains `adapter` in place on `subgraphs`, each scored against
/// `tables[subgraph.dataset]`.
pub fn pretrain(adapter: &mut Adapter, subgraphs: &[Subgraph], tables: &[EmbeddingTable], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.optimizer.validate()?;
    if subgraphs.is_empty() {
        return Err(Error::Dataset("pre-training set is empty".into()));
    }
    if let Some(s) = subgraphs.iter().find(|s| s.dataset >= tables.len()) {
        return Err(Error::Dataset(format!("subgraph refers to dataset {} but only {} tables", s.dataset, tables.len())));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(cfg.optimizer, adapter);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..subgraphs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for &i in &order {
            let s = &subgraphs[i];
            // one dropout stream per step, so masks on member rows do not
            // depend on whether a prompt row follows them
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_SALT);
            dropout_rng.set_stream(log.steps.len() as u64);
            let report = subgraph_loss(s, &tables[s.dataset], adapter, &cfg.loss, Some(&mut dropout_rng))
                .map_err(|e| e.context(format!("epoch {epoch}, dataset {}, center {}", s.dataset, s.center)))?;
            let applied = state.step(adapter, &report.grads)?;
            log.steps.push(StepRecord {
                epoch,
                step: log.steps.len(),
                dataset: s.dataset,
                center: s.center,
                loss: report.loss,
                node_terms: report.node_terms,
                skipped: !applied,
            });
        }
        if let Some(last) = log.steps.len().checked_sub(order.len()) {
            let mean = log.steps[last..].iter().map(|r| r.loss).sum::<f64>() / order.len() as f64;
            log::info!("epoch {epoch}: mean loss {mean:.6}");
        }
    }
    Ok(log)
}
