//! Text-attributed graphs: in-memory representation, on-disk dataset
//! directories and structural queries.
//!
//! A dataset directory holds four UTF-8 JSON files:
//!
//! * `dataset.json` — `{"name": .., "description": ..}`; the description is
//!   the text of the dataset's prompting node.
//! * `classes.json` — `[{"name": .., "description": ..}, ..]`; position is
//!   the class id.
//! * `nodes.jsonl` — `{"id": int, "text": string, "label": int|null}` per
//!   line, ids contiguous from 0.
//! * `edges.jsonl` — `{"src": int, "dst": int}` per line. Either or both
//!   directions may appear; edges are treated as undirected.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATASET_FILE: &str = "dataset.json";
pub const CLASSES_FILE: &str = "classes.json";
pub const NODES_FILE: &str = "nodes.jsonl";
pub const EDGES_FILE: &str = "edges.jsonl";

/// Symmetric adjacency stored as sorted neighbor lists. Self-loops are
/// never stored.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Adjacency {
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(node_count: usize) -> Self {
        Self {
            neighbors: vec![Vec::new(); node_count],
        }
    }

    /// Builds a symmetric adjacency from undirected pairs. Duplicates and
    /// self-loops are dropped.
    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); node_count];
        for (u, v) in edges {
            assert!(u < node_count && v < node_count, "edge ({u}, {v}) out of range");
            if u != v {
                sets[u].insert(v);
                sets[v].insert(u);
            }
        }
        Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges as `(u, v)` with `u < v`, in ascending order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(u, ns)| ns.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
    }

    /// Appends a node connected to every existing node and returns its index.
    pub fn push_hub(&mut self) -> usize {
        let hub = self.neighbors.len();
        for ns in &mut self.neighbors {
            ns.push(hub);
        }
        self.neighbors.push((0..hub).collect());
        hub
    }

    pub fn is_symmetric(&self) -> bool {
        self.neighbors
            .iter()
            .enumerate()
            .all(|(u, ns)| ns.iter().all(|&v| v != u && self.contains(v, u)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub description: String,
}

/// Ordered class list of a dataset; the position is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassCatalog {
    entries: Vec<ClassEntry>,
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Dataset(format!("duplicate class name {:?}", e.name)));
            }
            if e.description.trim().is_empty() {
                return Err(Error::Dataset(format!("class {:?} has an empty description", e.name)));
            }
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextAttributedGraph {
    pub name: String,
    pub description: String,
    adjacency: Adjacency,
    node_texts: Vec<String>,
    node_labels: Vec<Option<usize>>,
    classes: ClassCatalog,
}

impl TextAttributedGraph {
    pub fn new(
        name: impl Into<String>,
        description: impl Into<String>,
        adjacency: Adjacency,
        node_texts: Vec<String>,
        node_labels: Vec<Option<usize>>,
        classes: ClassCatalog,
    ) -> Result<Self> {
        let n = node_texts.len();
        if adjacency.node_count() != n || node_labels.len() != n {
            return Err(Error::Dataset(format!(
                "inconsistent node counts: {} texts, {} labels, adjacency over {}",
                n,
                node_labels.len(),
                adjacency.node_count()
            )));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::Dataset("adjacency is not symmetric".into()));
        }
        if let Some((v, c)) = node_labels
            .iter()
            .enumerate()
            .find_map(|(v, l)| l.filter(|&c| c >= classes.len()).map(|c| (v, c)))
        {
            return Err(Error::Dataset(format!(
                "node {v} has label {c} but only {} classes are declared",
                classes.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            description: description.into(),
            adjacency,
            node_texts,
            node_labels,
            classes,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_texts.len()
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn node_texts(&self) -> &[String] {
        &self.node_texts
    }

    pub fn node_labels(&self) -> &[Option<usize>] {
        &self.node_labels
    }

    pub fn label(&self, v: usize) -> Option<usize> {
        self.node_labels[v]
    }

    pub fn classes(&self) -> &ClassCatalog {
        &self.classes
    }

    pub fn labeled_count(&self) -> usize {
        self.node_labels.iter().filter(|l| l.is_some()).count()
    }

    /// Neighbors of `v`. Never contains `v` itself.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.node_count() {
            return Err(Error::Dataset(format!(
                "node index {v} out of range for {} nodes",
                self.node_count()
            )));
        }
        Ok(self.adjacency.neighbors(v))
    }

    pub fn stats(&self) -> DatasetStats {
        compute_stats(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub average_degree: f64,
    pub class_count: usize,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "nodes={} edges={} avg_degree={:.2} classes={}",
            self.node_count, self.edge_count, self.average_degree, self.class_count
        )
    }
}

pub fn compute_stats(g: &TextAttributedGraph) -> DatasetStats {
    let node_count = g.node_count();
    let edge_count = g.adjacency.edge_count();
    let average_degree = if node_count == 0 {
        0.0
    } else {
        2.0 * edge_count as f64 / node_count as f64
    };
    DatasetStats {
        node_count,
        edge_count,
        average_degree,
        class_count: g.classes.len(),
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Reject edges whose reverse direction is absent instead of
    /// symmetrizing them.
    pub strict: bool,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    description: String,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    text: String,
    label: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRecord {
    src: usize,
    dst: usize,
}

pub fn load_dataset(dir: &Path) -> Result<TextAttributedGraph> {
    load_dataset_with(dir, LoadOptions::default())
}

pub fn load_dataset_with(dir: &Path, opts: LoadOptions) -> Result<TextAttributedGraph> {
    let meta: DatasetMeta = read_json(&dir.join(DATASET_FILE))?;
    let class_entries: Vec<ClassEntry> = read_json(&dir.join(CLASSES_FILE))?;
    let classes = ClassCatalog::new(class_entries)?;

    let nodes_path = dir.join(NODES_FILE);
    let nodes: Vec<NodeRecord> = read_jsonl(&nodes_path)?;
    let mut node_texts = Vec::with_capacity(nodes.len());
    let mut node_labels = Vec::with_capacity(nodes.len());
    for (line, rec) in nodes.into_iter().enumerate() {
        if rec.id != line {
            return Err(Error::Malformed {
                path: nodes_path,
                line: line + 1,
                message: format!("expected node id {line}, found {}", rec.id),
            });
        }
        if let Some(c) = rec.label.filter(|&c| c >= classes.len()) {
            return Err(Error::Malformed {
                path: nodes_path,
                line: line + 1,
                message: format!("label {c} out of range for {} classes", classes.len()),
            });
        }
        node_texts.push(rec.text);
        node_labels.push(rec.label);
    }
    let n = node_texts.len();

    let edges_path = dir.join(EDGES_FILE);
    let edges: Vec<EdgeRecord> = read_jsonl(&edges_path)?;
    let mut directed = HashSet::with_capacity(edges.len());
    for (i, e) in edges.iter().enumerate() {
        if e.src >= n || e.dst >= n {
            return Err(Error::Malformed {
                path: edges_path,
                line: i + 1,
                message: format!("edge ({}, {}) references a node outside 0..{n}", e.src, e.dst),
            });
        }
        if e.src == e.dst {
            log::warn!("{}: dropping self-loop on node {}", edges_path.display(), e.src);
            continue;
        }
        directed.insert((e.src, e.dst));
    }
    if opts.strict {
        if let Some(&(u, v)) = directed
            .iter()
            .filter(|&&(u, v)| !directed.contains(&(v, u)))
            .min()
        {
            return Err(Error::Dataset(format!(
                "strict mode: edge ({u}, {v}) has no reverse ({v}, {u})"
            )));
        }
    }
    let adjacency = Adjacency::from_edges(n, directed);

    TextAttributedGraph::new(meta.name, meta.description, adjacency, node_texts, node_labels, classes)
        .map_err(|e| e.context(dir.display().to_string()))
}

/// Writes `g` in canonical form: nodes in id order, each undirected edge
/// once as `src < dst`, ascending.
pub fn save_dataset(g: &TextAttributedGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        name: g.name.clone(),
        description: g.description.clone(),
    };
    write_json(&dir.join(DATASET_FILE), &meta)?;
    write_json(&dir.join(CLASSES_FILE), &g.classes.entries)?;
    write_jsonl(
        &dir.join(NODES_FILE),
        g.node_texts
            .iter()
            .zip(&g.node_labels)
            .enumerate()
            .map(|(id, (text, label))| NodeRecord {
                id,
                text: text.clone(),
                label: *label,
            }),
    )?;
    write_jsonl(
        &dir.join(EDGES_FILE),
        g.adjacency.edges().map(|(src, dst)| EdgeRecord { src, dst }),
    )
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec).expect("serializable");
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
