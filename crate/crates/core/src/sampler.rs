//! Pre-training set construction: k-hop balls around every node, the
//! class-diversity filter, and the fully connected prompting node.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Adjacency, TextAttributedGraph};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    /// Position of the source dataset in the list the set was built from.
    pub dataset: usize,
    pub center: usize,
    /// Original node indices, ascending by (hop distance, node id).
    pub node_ids: Vec<usize>,
    /// Labels of `node_ids`, position for position.
    pub labels: Vec<Option<usize>>,
    /// Over local indices; includes the prompt row once attached.
    pub adjacency: Adjacency,
    pub labels_present: BTreeSet<usize>,
    /// Local index of the prompting node, if attached (always the last row).
    pub prompt: Option<usize>,
}

impl Subgraph {
    pub fn prompt_attached(&self) -> bool {
        self.prompt.is_some()
    }

    /// Local row count, prompt included.
    pub fn len(&self) -> usize {
        self.adjacency.node_count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn member_count(&self) -> usize {
        self.node_ids.len()
    }
}

/// Exact non-negative rational `num/den`, written as `"num/den"` or `"num"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::Config("ratio denominator must be positive".into()));
        }
        Ok(Self { num, den })
    }

    pub const HALF: Ratio = Ratio { num: 1, den: 2 };
    pub const ZERO: Ratio = Ratio { num: 0, den: 1 };

    /// `count >= self * total`, compared in integers.
    pub fn le_count(&self, count: usize, total: usize) -> bool {
        count as u128 * self.den as u128 >= self.num as u128 * total as u128
    }
}

impl Default for Ratio {
    fn default() -> Self {
        Ratio::HALF
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid ratio {s:?}, expected \"num/den\""));
        match s.split_once('/') {
            Some((n, d)) => Ratio::new(n.trim().parse().map_err(|_| bad())?, d.trim().parse().map_err(|_| bad())?),
            None => Ratio::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// What to do with k-hop balls larger than `max_nodes`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oversize {
    #[default]
    Truncate,
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_nodes")]
    pub max_nodes: usize,
    #[serde(default)]
    pub filter_ratio: Ratio,
    #[serde(default)]
    pub oversize: Oversize,
}

fn default_k() -> usize {
    2
}
fn default_max_nodes() -> usize {
    256
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: default_k(),
            max_nodes: default_max_nodes(),
            filter_ratio: Ratio::HALF,
            oversize: Oversize::Truncate,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("sampler.k must be at least 1".into()));
        }
        if self.max_nodes == 0 {
            return Err(Error::Config("sampler.max_nodes must be positive".into()));
        }
        Ok(())
    }
}

/// Nodes within `k` hops of `center` as `(distance, node)`, sorted.
pub fn khop_ball(adj: &Adjacency, center: usize, k: usize) -> Vec<(usize, usize)> {
    let mut dist = BTreeMap::new();
    dist.insert(center, 0usize);
    let mut queue = VecDeque::from([center]);
    while let Some(u) = queue.pop_front() {
        let du = dist[&u];
        if du == k {
            continue;
        }
        for &w in adj.neighbors(u) {
            if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(w) {
                e.insert(du + 1);
                queue.push_back(w);
            }
        }
    }
    let mut ball: Vec<(usize, usize)> = dist.into_iter().map(|(v, d)| (d, v)).collect();
    ball.sort_unstable();
    ball
}

/// Induced subgraph on `node_ids` (in the given order).
pub fn induced(g: &TextAttributedGraph, dataset: usize, center: usize, node_ids: Vec<usize>) -> Subgraph {
    let local: BTreeMap<usize, usize> = node_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    let adj = g.adjacency();
    let edges = node_ids.iter().enumerate().flat_map(|(i, &v)| {
        let local = &local;
        adj.neighbors(v).iter().filter_map(move |w| local.get(w).map(|&j| (i, j)))
    });
    let adjacency = Adjacency::from_edges(node_ids.len(), edges);
    let labels: Vec<Option<usize>> = node_ids.iter().map(|&v| g.label(v)).collect();
    let labels_present = labels.iter().flatten().copied().collect();
    Subgraph {
        dataset,
        center,
        node_ids,
        labels,
        adjacency,
        labels_present,
        prompt: None,
    }
}

/// The k-hop ball around `center`, truncated to `max_nodes` by ascending
/// (hop distance, node id), with induced edges and no prompt.
pub fn extract_khop(g: &TextAttributedGraph, center: usize, k: usize, max_nodes: usize) -> Subgraph {
    extract_khop_from(g, 0, center, k, max_nodes)
}

fn extract_khop_from(g: &TextAttributedGraph, dataset: usize, center: usize, k: usize, max_nodes: usize) -> Subgraph {
    assert!(center < g.node_count(), "center {center} out of range");
    assert!(k >= 1, "k must be at least 1");
    let ids = khop_ball(g.adjacency(), center, k)
        .into_iter()
        .take(max_nodes.max(1))
        .map(|(_, v)| v)
        .collect();
    induced(g, dataset, center, ids)
}

/// True iff the subgraph holds at least `ratio * total_classes` distinct
/// labels.
pub fn passes_class_filter(s: &Subgraph, total_classes: usize, ratio: Ratio) -> bool {
    ratio.le_count(s.labels_present.len(), total_classes)
}

/// Appends the prompting node, connected to every existing node.
pub fn attach_prompt(mut s: Subgraph) -> Result<Subgraph> {
    if s.prompt.is_some() {
        return Err(Error::Dataset(format!(
            "prompt already attached to subgraph centered at {}",
            s.center
        )));
    }
    s.prompt = Some(s.adjacency.push_hub());
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleStats {
    pub dataset: String,
    pub candidates: usize,
    pub rejected_size: usize,
    pub rejected_filter: usize,
    pub kept: usize,
    /// Kept subgraph size (prompt excluded) → count.
    pub size_histogram: BTreeMap<usize, usize>,
}

pub fn build_pretrain_set(gs: &[TextAttributedGraph], cfg: &SamplerConfig, attach_prompts: bool) -> Result<Vec<Subgraph>> {
    build_pretrain_set_with_stats(gs, cfg, attach_prompts).map(|(s, _)| s)
}

/// One candidate per node of each dataset, filtered and (optionally) with
/// prompts attached, in (dataset, center) order.
pub fn build_pretrain_set_with_stats(
    gs: &[TextAttributedGraph],
    cfg: &SamplerConfig,
    attach_prompts: bool,
) -> Result<(Vec<Subgraph>, Vec<SampleStats>)> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut stats = Vec::with_capacity(gs.len());
    for (di, g) in gs.iter().enumerate() {
        if g.labeled_count() == 0 {
            return Err(Error::Dataset(format!("source dataset {:?} has no labeled nodes", g.name)));
        }
        let total = g.classes().len();
        let candidates: Vec<std::result::Result<Subgraph, Reject>> = (0..g.node_count())
            .into_par_iter()
            .map(|center| {
                let ball = khop_ball(g.adjacency(), center, cfg.k);
                if ball.len() > cfg.max_nodes && cfg.oversize == Oversize::Skip {
                    return Err(Reject::Size);
                }
                let ids = ball.into_iter().take(cfg.max_nodes).map(|(_, v)| v).collect();
                let s = induced(g, di, center, ids);
                if !passes_class_filter(&s, total, cfg.filter_ratio) {
                    return Err(Reject::Filter);
                }
                Ok(s)
            })
            .collect();
        let mut st = SampleStats {
            dataset: g.name.clone(),
            candidates: candidates.len(),
            rejected_size: 0,
            rejected_filter: 0,
            kept: 0,
            size_histogram: BTreeMap::new(),
        };
        for c in candidates {
            match c {
                Ok(s) => {
                    st.kept += 1;
                    *st.size_histogram.entry(s.member_count()).or_default() += 1;
                    out.push(if attach_prompts { attach_prompt(s)? } else { s });
                }
                Err(Reject::Size) => st.rejected_size += 1,
                Err(Reject::Filter) => st.rejected_filter += 1,
            }
        }
        if st.kept == 0 {
            log::warn!("dataset {:?}: no subgraph passed the sampler filters", g.name);
        }
        stats.push(st);
    }
    Ok((out, stats))
}

enum Reject {
    Size,
    Filter,
}
