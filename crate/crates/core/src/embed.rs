//! Text embeddings for nodes, classes and the prompting node.
//!
//! Every text of a dataset goes through one [`EmbeddingProvider`]. Vectors
//! are rounded to `f32` on ingestion so that a table read back from its
//! binary cache is bit-identical to the table the live provider produced.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::TextAttributedGraph;

pub const CACHE_MAGIC: &[u8; 7] = b"ZGEMB1\n";
pub const DEFAULT_CACHE_FILE: &str = "embeddings.zgemb";
pub const DEFAULT_MAX_SEQUENCE_LENGTH: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    nodes: Array2<f64>,
    classes: Array2<f64>,
    prompt: Array1<f64>,
}

impl EmbeddingTable {
    /// Validates shapes and finiteness and rounds every entry to `f32`
    /// precision.
    pub fn new(nodes: Array2<f64>, classes: Array2<f64>, prompt: Array1<f64>) -> Result<Self> {
        let dim = prompt.len();
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be positive".into()));
        }
        if nodes.ncols() != dim || classes.ncols() != dim {
            return Err(Error::Shape(format!(
                "row lengths disagree: nodes {}, classes {}, prompt {}",
                nodes.ncols(),
                classes.ncols(),
                dim
            )));
        }
        let round = |x: &mut f64| *x = *x as f32 as f64;
        let (mut nodes, mut classes, mut prompt) = (nodes, classes, prompt);
        for (what, ok) in [
            ("node embeddings", nodes.iter().all(|x| x.is_finite())),
            ("class embeddings", classes.iter().all(|x| x.is_finite())),
            ("prompt embedding", prompt.iter().all(|x| x.is_finite())),
        ] {
            if !ok {
                return Err(Error::NonFinite(what.into()));
            }
        }
        nodes.iter_mut().for_each(round);
        classes.iter_mut().for_each(round);
        prompt.iter_mut().for_each(round);
        if nodes.iter().chain(&classes).chain(&prompt).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embeddings (f32 overflow)".into()));
        }
        Ok(Self {
            dim,
            nodes,
            classes,
            prompt,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node_count(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn class_count(&self) -> usize {
        self.classes.nrows()
    }

    pub fn nodes(&self) -> ArrayView2<'_, f64> {
        self.nodes.view()
    }

    pub fn classes(&self) -> ArrayView2<'_, f64> {
        self.classes.view()
    }

    pub fn prompt(&self) -> ArrayView1<'_, f64> {
        self.prompt.view()
    }

    /// Returns a copy with every row scaled to unit L2 norm (zero rows are
    /// left as they are).
    pub fn l2_normalized(&self) -> Self {
        fn norm_rows(m: &mut Array2<f64>) {
            for mut row in m.rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 0.0 {
                    row /= n;
                }
            }
        }
        let mut out = self.clone();
        norm_rows(&mut out.nodes);
        norm_rows(&mut out.classes);
        let n = out.prompt.dot(&out.prompt).sqrt();
        if n > 0.0 {
            out.prompt /= n;
        }
        out.nodes.iter_mut().chain(&mut out.classes).chain(&mut out.prompt).for_each(|x| *x = *x as f32 as f64);
        out
    }

    /// Replaces the prompt vector, e.g. with the embedding of a generic
    /// prompt text.
    pub fn with_prompt(mut self, prompt: Array1<f64>) -> Result<Self> {
        if prompt.len() != self.dim {
            return Err(Error::Shape(format!("prompt has length {}, expected {}", prompt.len(), self.dim)));
        }
        let t = Self::new(self.nodes, self.classes, prompt)?;
        self.nodes = t.nodes;
        self.classes = t.classes;
        self.prompt = t.prompt;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderKind {
    CacheFile,
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub dim: usize,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_max_len")]
    pub max_sequence_length: usize,
    /// Cache file name inside each dataset directory.
    #[serde(default)]
    pub cache_file: Option<String>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_parallel")]
    pub parallel_requests: usize,
    /// L2-normalize every row after embedding.
    #[serde(default)]
    pub normalize: bool,
}

fn default_max_len() -> usize {
    DEFAULT_MAX_SEQUENCE_LENGTH
}
fn default_batch() -> usize {
    64
}
fn default_parallel() -> usize {
    4
}

impl ProviderSpec {
    pub fn mock(dim: usize, seed: u64) -> Self {
        Self {
            kind: ProviderKind::Mock,
            dim,
            endpoint: None,
            seed: Some(seed),
            max_sequence_length: DEFAULT_MAX_SEQUENCE_LENGTH,
            cache_file: None,
            batch_size: default_batch(),
            parallel_requests: default_parallel(),
            normalize: false,
        }
    }

    pub fn cache(dim: usize) -> Self {
        Self {
            kind: ProviderKind::CacheFile,
            seed: None,
            ..Self::mock(dim, 0)
        }
    }

    pub fn http(dim: usize, endpoint: impl Into<String>) -> Self {
        Self {
            kind: ProviderKind::Http,
            endpoint: Some(endpoint.into()),
            seed: None,
            ..Self::mock(dim, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("provider.dim must be positive".into()));
        }
        if self.max_sequence_length == 0 || self.batch_size == 0 || self.parallel_requests == 0 {
            return Err(Error::Config(
                "provider max_sequence_length, batch_size and parallel_requests must be positive".into(),
            ));
        }
        match self.kind {
            ProviderKind::Http if self.endpoint.is_none() => {
                Err(Error::Config("provider kind http requires an endpoint".into()))
            }
            ProviderKind::Mock if self.seed.is_none() => {
                Err(Error::Config("provider kind mock requires a seed".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn cache_path(&self, dataset_dir: &Path) -> PathBuf {
        dataset_dir.join(self.cache_file.as_deref().unwrap_or(DEFAULT_CACHE_FILE))
    }

    /// Live provider for this spec; `None` for cache-file specs.
    pub fn live_provider(&self) -> Result<Option<Box<dyn EmbeddingProvider>>> {
        self.validate()?;
        Ok(match self.kind {
            ProviderKind::CacheFile => None,
            ProviderKind::Mock => Some(Box::new(MockProvider {
                dim: self.dim,
                seed: self.seed.expect("validated"),
            })),
            ProviderKind::Http => Some(Box::new(HttpProvider::new(self)?)),
        })
    }
}

/// Maps texts to vectors of a fixed dimension, order-preserving.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

/// 64-bit FNV-1a over the little-endian seed bytes followed by the UTF-8
/// text bytes.
pub fn hash64(seed: u64, text: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(text.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(PRIME))
}

/// SplitMix64 generator.
#[derive(Debug, Clone)]
pub struct SplitMix64(u64);

impl SplitMix64 {
    pub fn new(state: u64) -> Self {
        Self(state)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [-1, 1) from the top 53 bits.
    pub fn next_signed_unit(&mut self) -> f64 {
        let u = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        2.0 * u - 1.0
    }
}

/// Deterministic stand-in for a language model: SplitMix64 seeded with
/// `hash64(seed, text)`, `dim` draws in [-1, 1), then L2-normalized.
pub fn mock_embed(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    assert!(dim >= 1, "dim must be positive");
    let mut rng = SplitMix64::new(hash64(seed, text));
    let mut v: Vec<f64> = (0..dim).map(|_| rng.next_signed_unit()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

#[derive(Debug, Clone)]
pub struct MockProvider {
    pub dim: usize,
    pub seed: u64,
}

impl EmbeddingProvider for MockProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        Ok(texts.iter().map(|t| mock_embed(t, self.dim, self.seed)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
    max_length: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

/// Client for an embedding service speaking
/// `POST {endpoint}/embed {"texts", "max_length"} -> {"dim", "vectors"}`.
#[derive(Debug)]
pub struct HttpProvider {
    client: reqwest::blocking::Client,
    url: String,
    dim: usize,
    max_length: usize,
    batch_size: usize,
    parallel: usize,
}

impl HttpProvider {
    pub fn new(spec: &ProviderSpec) -> Result<Self> {
        let endpoint = spec
            .endpoint
            .as_deref()
            .ok_or_else(|| Error::Config("provider kind http requires an endpoint".into()))?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| Error::Provider(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dim: spec.dim,
            max_length: spec.max_sequence_length,
            batch_size: spec.batch_size,
            parallel: spec.parallel_requests,
        })
    }

    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let resp = self
            .client
            .post(&self.url)
            .json(&EmbedRequest {
                texts,
                max_length: self.max_length,
            })
            .send()
            .map_err(|e| Error::Provider(format!("{}: {e}", self.url)))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Provider(format!("{} returned {status}", self.url)));
        }
        let body: EmbedResponse = resp
            .json()
            .map_err(|e| Error::Provider(format!("{}: bad response body: {e}", self.url)))?;
        if body.dim != self.dim {
            return Err(Error::Provider(format!(
                "dimension mismatch: service reports {}, expected {}",
                body.dim, self.dim
            )));
        }
        if body.vectors.len() != texts.len() {
            return Err(Error::Provider(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                body.vectors.len()
            )));
        }
        if let Some(v) = body.vectors.iter().find(|v| v.len() != self.dim) {
            return Err(Error::Provider(format!(
                "dimension mismatch: vector of length {}, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(body.vectors)
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        let batches: Vec<&[String]> = texts.chunks(self.batch_size).collect();
        let mut out = Vec::with_capacity(texts.len());
        for wave in batches.chunks(self.parallel) {
            let results: Vec<Result<Vec<Vec<f64>>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| scope.spawn(move || self.embed_batch(batch)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("embedding request thread panicked"))
                    .collect()
            });
            for r in results {
                out.extend(r?);
            }
        }
        Ok(out)
    }
}

/// All texts of a dataset in cache row order: nodes by id, classes by id,
/// then the dataset description.
pub fn dataset_texts(g: &TextAttributedGraph) -> Vec<String> {
    g.node_texts()
        .iter()
        .cloned()
        .chain(g.classes().entries().iter().map(|c| c.description.clone()))
        .chain(std::iter::once(g.description.clone()))
        .collect()
}

/// Embeds every node text, class description and the dataset description
/// through `provider`.
pub fn embed_with(g: &TextAttributedGraph, provider: &dyn EmbeddingProvider) -> Result<EmbeddingTable> {
    let texts = dataset_texts(g);
    let rows = provider.embed(&texts)?;
    if rows.len() != texts.len() {
        return Err(Error::Provider(format!("{} texts but {} vectors", texts.len(), rows.len())));
    }
    let dim = provider.dim();
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::Provider(format!("vector of length {}, expected {dim}", r.len())));
    }
    let n = g.node_count();
    let c = g.classes().len();
    let to_matrix = |rows: &[Vec<f64>]| {
        Array2::from_shape_vec((rows.len(), dim), rows.iter().flatten().copied().collect())
            .expect("rows checked")
    };
    EmbeddingTable::new(
        to_matrix(&rows[..n]),
        to_matrix(&rows[n..n + c]),
        Array1::from(rows[n + c].clone()),
    )
}

/// Produces the embedding table of `g` according to `spec`. Cache-file
/// specs read `spec.cache_path(dataset_dir)`.
pub fn embed_dataset(g: &TextAttributedGraph, spec: &ProviderSpec, dataset_dir: &Path) -> Result<EmbeddingTable> {
    spec.validate()?;
    let table = match spec.live_provider()? {
        Some(p) => embed_with(g, p.as_ref())?,
        None => {
            let path = spec.cache_path(dataset_dir);
            let t = read_cache(&path)?;
            if t.dim() != spec.dim {
                return Err(Error::Format(format!(
                    "{}: cache dim {} but provider dim {}",
                    path.display(),
                    t.dim(),
                    spec.dim
                )));
            }
            if t.node_count() != g.node_count() || t.class_count() != g.classes().len() {
                return Err(Error::Format(format!(
                    "{}: cache holds {} nodes / {} classes, dataset has {} / {}",
                    path.display(),
                    t.node_count(),
                    t.class_count(),
                    g.node_count(),
                    g.classes().len()
                )));
            }
            t
        }
    };
    Ok(if spec.normalize { table.l2_normalized() } else { table })
}

fn payload_bytes(table: &EmbeddingTable) -> Vec<u8> {
    let mut out = Vec::with_capacity((table.node_count() + table.class_count() + 1) * table.dim * 4);
    for x in table.nodes.iter().chain(&table.classes).chain(&table.prompt) {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
    out
}

/// Serializes `table` in the `ZGEMB1` cache layout.
pub fn encode_cache(table: &EmbeddingTable) -> Vec<u8> {
    let payload = payload_bytes(table);
    let mut out = Vec::with_capacity(CACHE_MAGIC.len() + 16 + payload.len() + 4);
    out.extend_from_slice(CACHE_MAGIC);
    for v in [table.node_count(), table.class_count(), 1, table.dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

pub fn decode_cache(bytes: &[u8]) -> Result<EmbeddingTable> {
    let header_len = CACHE_MAGIC.len() + 16;
    if bytes.len() < CACHE_MAGIC.len() || &bytes[..CACHE_MAGIC.len()] != CACHE_MAGIC {
        return Err(Error::Format("embedding cache: bad magic".into()));
    }
    if bytes.len() < header_len {
        return Err(Error::Format("embedding cache: truncated header".into()));
    }
    let field = |i: usize| {
        let at = CACHE_MAGIC.len() + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
    };
    let (nodes, classes, prompts, dim) = (field(0), field(1), field(2), field(3));
    if prompts != 1 {
        return Err(Error::Format(format!("embedding cache: prompt_count {prompts}, expected 1")));
    }
    if dim == 0 {
        return Err(Error::Format("embedding cache: dim 0".into()));
    }
    let rows = nodes + classes + 1;
    let payload_len = rows * dim * 4;
    let expected = header_len + payload_len + 4;
    if bytes.len() < expected {
        return Err(Error::Format(format!(
            "embedding cache: truncated, header declares {rows} rows of dim {dim} ({expected} bytes) but file has {}",
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "embedding cache: {} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[header_len..header_len + payload_len];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Format("embedding cache: checksum mismatch".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let node_m = Array2::from_shape_vec((nodes, dim), values[..nodes * dim].to_vec()).unwrap();
    let class_m =
        Array2::from_shape_vec((classes, dim), values[nodes * dim..(nodes + classes) * dim].to_vec()).unwrap();
    let prompt = Array1::from(values[(nodes + classes) * dim..].to_vec());
    EmbeddingTable::new(node_m, class_m, prompt)
}

pub fn write_cache(table: &EmbeddingTable, path: &Path) -> Result<()> {
    fs::write(path, encode_cache(table)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<EmbeddingTable> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table3() -> EmbeddingTable {
        EmbeddingTable::new(
            array![[0.1, -0.2], [1.5, 2.25], [3.0, 0.0]],
            array![[1.0, 0.0]],
            array![0.5, 0.5],
        )
        .unwrap()
    }

    #[test]
    fn mock_is_unit_norm_and_deterministic() {
        for text in ["", "a", "hello world", "ünïcødé"] {
            let v = mock_embed(text, 17, 3);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
            assert_eq!(v, mock_embed(text, 17, 3));
        }
        assert_ne!(mock_embed("a", 4, 1), mock_embed("a", 4, 2));
    }

    #[test]
    fn cache_round_trip() {
        let t = table3();
        let back = decode_cache(&encode_cache(&t)).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn cache_truncated_row() {
        let t = table3();
        let mut bytes = encode_cache(&t);
        // drop one full row plus the checksum, then re-append a checksum
        let cut = bytes.len() - 4 - t.dim() * 4;
        bytes.truncate(cut);
        bytes.extend_from_slice(&[0; 4]);
        let err = decode_cache(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn cache_bad_magic_and_checksum() {
        let t = table3();
        let mut bytes = encode_cache(&t);
        bytes[0] = b'X';
        assert!(decode_cache(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode_cache(&t);
        let at = CACHE_MAGIC.len() + 16;
        bytes[at] ^= 0x01;
        assert!(decode_cache(&bytes).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn rejects_non_finite() {
        let r = EmbeddingTable::new(array![[f64::NAN, 0.0]], array![[1.0, 0.0]], array![0.0, 0.0]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
        let r = EmbeddingTable::new(array![[1e300, 0.0]], array![[1.0, 0.0]], array![0.0, 0.0]);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn spec_validation() {
        let mut s = ProviderSpec::mock(8, 1);
        s.seed = None;
        assert!(s.validate().is_err());
        let mut h = ProviderSpec::http(8, "http://x");
        h.endpoint = None;
        assert!(h.validate().is_err());
        assert!(ProviderSpec::cache(8).validate().is_ok());
    }
}
