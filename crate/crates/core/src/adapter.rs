//! Additive embedding adapters `y = x + α · (D∘x) · ΔW`.
//!
//! The low-rank form factors `ΔW = W_down · W_up` with `W_down: d×r` and
//! `W_up: r×d`; `W_up` starts at zero so a fresh adapter is the identity.
//! The dense form (`ΔW: d×d`, also zero-initialized) exists for the
//! full-update ablation. `D` is an inverted-dropout mask, only drawn in
//! training mode.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOW_RANK_MAGIC: &[u8; 7] = b"ZGADP1\n";
pub const DENSE_MAGIC: &[u8; 7] = b"ZGADD1\n";

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    pub w_down: Array2<f64>,
    pub w_up: Array2<f64>,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseAdapter {
    pub delta: Array2<f64>,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    LowRank(LowRankAdapter),
    Dense(DenseAdapter),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_rank() -> usize {
    4
}
fn default_alpha() -> f64 {
    16.0
}
fn default_dropout() -> f64 {
    0.1
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: default_rank(),
            alpha: default_alpha(),
            dropout: default_dropout(),
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter.rank must be at least 1".into()));
        }
        if !(self.alpha >= 1.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("adapter.alpha must be >= 1, got {}", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("adapter.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// Saved forward-pass values needed by [`Adapter::backward`].
#[derive(Debug)]
pub struct AdapterTrace {
    /// `D∘x`.
    input: Array2<f64>,
    /// `(D∘x) · W_down` for the low-rank form.
    projected: Option<Array2<f64>>,
    mask: Option<Array2<f64>>,
}

impl LowRankAdapter {
    /// `W_down ~ U(-1/√d, 1/√d)`, `W_up = 0`.
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &AdapterConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            w_down: Array2::from_shape_simple_fn((dim, cfg.rank), || dist.sample(rng)),
            w_up: Array2::zeros((cfg.rank, dim)),
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_down.nrows()
    }

    pub fn rank(&self) -> usize {
        self.w_down.ncols()
    }
}

impl DenseAdapter {
    pub fn init(dim: usize, cfg: &AdapterConfig) -> Self {
        Self {
            delta: Array2::zeros((dim, dim)),
            alpha: cfg.alpha,
            dropout: cfg.dropout,
        }
    }
}

impl Adapter {
    pub fn low_rank<R: Rng + ?Sized>(dim: usize, cfg: &AdapterConfig, rng: &mut R) -> Self {
        Adapter::LowRank(LowRankAdapter::init(dim, cfg, rng))
    }

    pub fn dense(dim: usize, cfg: &AdapterConfig) -> Self {
        Adapter::Dense(DenseAdapter::init(dim, cfg))
    }

    pub fn dim(&self) -> usize {
        match self {
            Adapter::LowRank(a) => a.dim(),
            Adapter::Dense(a) => a.delta.nrows(),
        }
    }

    pub fn alpha(&self) -> f64 {
        match self {
            Adapter::LowRank(a) => a.alpha,
            Adapter::Dense(a) => a.alpha,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            Adapter::LowRank(a) => a.dropout,
            Adapter::Dense(a) => a.dropout,
        }
    }

    /// Trainable matrices: `[W_down, W_up]` or `[ΔW]`.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        match self {
            Adapter::LowRank(a) => vec![&a.w_down, &a.w_up],
            Adapter::Dense(a) => vec![&a.delta],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        match self {
            Adapter::LowRank(a) => vec![&mut a.w_down, &mut a.w_up],
            Adapter::Dense(a) => vec![&mut a.delta],
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Vec<Array2<f64>> {
        self.params().iter().map(|p| Array2::zeros(p.raw_dim())).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }

    /// Inverted-dropout mask for `rows` inputs, or `None` when no dropout
    /// applies.
    pub fn draw_mask<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Option<Array2<f64>> {
        let p = self.dropout();
        if p <= 0.0 {
            return None;
        }
        let keep = Bernoulli::new(1.0 - p).expect("dropout validated");
        let scale = 1.0 / (1.0 - p);
        Some(Array2::from_shape_simple_fn((rows, self.dim()), || {
            if keep.sample(rng) {
                scale
            } else {
                0.0
            }
        }))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>, mask: Option<Array2<f64>>) -> Result<(Array2<f64>, AdapterTrace)> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::Shape(format!("input has {} columns, adapter dim is {d}", x.ncols())));
        }
        let input = match &mask {
            Some(m) => {
                if m.dim() != x.dim() {
                    return Err(Error::Shape("dropout mask shape differs from input".into()));
                }
                &x * m
            }
            None => x.to_owned(),
        };
        let alpha = self.alpha();
        let (delta, projected) = match self {
            Adapter::LowRank(a) => {
                let z = input.dot(&a.w_down);
                (z.dot(&a.w_up), Some(z))
            }
            Adapter::Dense(a) => (input.dot(&a.delta), None),
        };
        let mut y = x.to_owned();
        y.scaled_add(alpha, &delta);
        Ok((
            y,
            AdapterTrace {
                input,
                projected,
                mask,
            },
        ))
    }

    /// Output only, no dropout.
    pub fn apply(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.forward(x, None).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients into `grads` and returns `∂L/∂x`.
    pub fn backward(&self, trace: &AdapterTrace, grad_out: ArrayView2<'_, f64>, grads: &mut [Array2<f64>]) -> Array2<f64> {
        let alpha = self.alpha();
        let through = match self {
            Adapter::LowRank(a) => {
                let z = trace.projected.as_ref().expect("low-rank trace");
                // ∂/∂W_up = α zᵀ g ; ∂/∂W_down = α (D∘x)ᵀ (g W_upᵀ)
                let g_up_t = grad_out.dot(&a.w_up.t());
                grads[1].scaled_add(alpha, &z.t().dot(&grad_out));
                grads[0].scaled_add(alpha, &trace.input.t().dot(&g_up_t));
                g_up_t.dot(&a.w_down.t())
            }
            Adapter::Dense(a) => {
                grads[0].scaled_add(alpha, &trace.input.t().dot(&grad_out));
                grad_out.dot(&a.delta.t())
            }
        };
        let mut gx = grad_out.to_owned();
        match &trace.mask {
            Some(m) => gx.scaled_add(alpha, &(&through * m)),
            None => gx.scaled_add(alpha, &through),
        }
        gx
    }
}

fn push_f32s(out: &mut Vec<u8>, m: &Array2<f64>) {
    for x in m.iter() {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

/// Serializes an adapter checkpoint. Low-rank: `"ZGADP1\n"`, u32 d, u32 r,
/// f32 alpha, `W_down` and `W_up` as f32 row-major, CRC32 of the weights.
/// Dense: `"ZGADD1\n"`, u32 d, f32 alpha, `ΔW`, CRC32. All little-endian.
pub fn encode_checkpoint(a: &Adapter) -> Vec<u8> {
    let mut out = Vec::new();
    let mut payload = Vec::new();
    match a {
        Adapter::LowRank(l) => {
            out.extend_from_slice(LOW_RANK_MAGIC);
            out.extend_from_slice(&(l.dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.rank() as u32).to_le_bytes());
            out.extend_from_slice(&(l.alpha as f32).to_le_bytes());
            push_f32s(&mut payload, &l.w_down);
            push_f32s(&mut payload, &l.w_up);
        }
        Adapter::Dense(dn) => {
            out.extend_from_slice(DENSE_MAGIC);
            out.extend_from_slice(&(dn.delta.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(dn.alpha as f32).to_le_bytes());
            push_f32s(&mut payload, &dn.delta);
        }
    }
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Parses a checkpoint. Dropout is not persisted and is set to zero.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Adapter> {
    let magic = bytes.get(..7).ok_or_else(|| Error::Format("checkpoint: truncated".into()))?;
    let u32_at = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::Format("checkpoint: truncated header".into()))
    };
    let (header, shapes): (usize, Vec<(usize, usize)>) = if magic == LOW_RANK_MAGIC {
        let (d, r) = (u32_at(7)? as usize, u32_at(11)? as usize);
        (19, vec![(d, r), (r, d)])
    } else if magic == DENSE_MAGIC {
        let d = u32_at(7)? as usize;
        (15, vec![(d, d)])
    } else {
        return Err(Error::Format("checkpoint: bad magic".into()));
    };
    let alpha = f32::from_bits(u32_at(header - 4)?) as f64;
    let payload_len: usize = shapes.iter().map(|(a, b)| a * b * 4).sum();
    let expected = header + payload_len + 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "checkpoint: expected {expected} bytes from header, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[header..header + payload_len];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::Format("checkpoint: checksum mismatch".into()));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut mats: Vec<Array2<f64>> = shapes
        .iter()
        .map(|&(r, c)| Array2::from_shape_vec((r, c), values.by_ref().take(r * c).collect()).unwrap())
        .collect();
    let adapter = if magic == LOW_RANK_MAGIC {
        let w_up = mats.pop().unwrap();
        let w_down = mats.pop().unwrap();
        Adapter::LowRank(LowRankAdapter {
            w_down,
            w_up,
            alpha,
            dropout: 0.0,
        })
    } else {
        Adapter::Dense(DenseAdapter {
            delta: mats.pop().unwrap(),
            alpha,
            dropout: 0.0,
        })
    };
    if !adapter.is_finite() {
        return Err(Error::NonFinite("checkpoint weights".into()));
    }
    Ok(adapter)
}

pub fn write_checkpoint(a: &Adapter, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(a)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Adapter> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| e.context(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_down_is_identity() {
        let a = Adapter::LowRank(LowRankAdapter {
            w_down: Array2::zeros((3, 2)),
            w_up: array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            alpha: 16.0,
            dropout: 0.0,
        });
        let x = array![[0.3, -1.0, 7.5], [1e-3, 2.0, 0.0]];
        assert_eq!(a.apply(x.view()).unwrap(), x);
    }

    #[test]
    fn hand_computed_rank_one() {
        let a = Adapter::LowRank(LowRankAdapter {
            w_down: array![[1.0], [0.0]],
            w_up: array![[0.0, 1.0]],
            alpha: 2.0,
            dropout: 0.0,
        });
        assert_eq!(a.apply(array![[1.0, 0.0]].view()).unwrap(), array![[1.0, 2.0]]);
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::low_rank(6, &AdapterConfig::default(), &mut rng);
        let x = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64 * 0.37 - 3.0);
        assert_eq!(a.apply(x.view()).unwrap(), x);
        assert!(a.params()[0].iter().all(|w| w.abs() <= 1.0 / 6f64.sqrt()));
    }

    #[test]
    fn shape_mismatch() {
        let a = Adapter::dense(3, &AdapterConfig::default());
        assert!(matches!(a.apply(Array2::zeros((1, 2)).view()), Err(Error::Shape(_))));
    }

    #[test]
    fn parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Adapter::low_rank(768, &AdapterConfig::default(), &mut rng);
        assert_eq!(a.param_count(), 2 * 768 * 4);
        assert_eq!(Adapter::dense(8, &AdapterConfig::default()).param_count(), 64);
    }

    #[test]
    fn dropout_mask_is_inverted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Adapter::dense(50, &AdapterConfig { dropout: 0.2, ..Default::default() });
        let m = a.draw_mask(40, &mut rng).unwrap();
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
        let kept = m.iter().filter(|&&v| v > 0.0).count() as f64 / m.len() as f64;
        assert!((kept - 0.8).abs() < 0.05);
        let none = Adapter::dense(5, &AdapterConfig { dropout: 0.0, ..Default::default() });
        assert!(none.draw_mask(3, &mut rng).is_none());
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut a = Adapter::low_rank(5, &AdapterConfig { rank: 2, alpha: 16.0, dropout: 0.0 }, &mut rng);
        if let Adapter::LowRank(l) = &mut a {
            l.w_up.fill(0.25);
        }
        let bytes = encode_checkpoint(&a);
        assert_eq!(bytes.len(), 7 + 12 + 4 * (10 + 10) + 4);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back), bytes);

        let mut bad = bytes.clone();
        bad[25] ^= 0xff;
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("checksum"));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(b"NOTMAGIC").is_err());

        let dense = Adapter::dense(3, &AdapterConfig::default());
        assert_eq!(decode_checkpoint(&encode_checkpoint(&dense)).unwrap().params()[0], dense.params()[0]);
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig { alpha: 0.5, ..Default::default() }.validate().is_err());
        assert!(AdapterConfig { rank: 0, ..Default::default() }.validate().is_err());
        assert!(AdapterConfig { dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(AdapterConfig::default().validate().is_ok());
    }
}
