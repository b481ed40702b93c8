//! Shared MLP encoder, sinusoidal positional encoding, and the dense head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{ParamStore, Tensor};

/// Shape of the shared encoder: `n_blocks` repetitions of (linear → ReLU)
/// followed by one output linear layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub n_blocks: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 || self.n_blocks == 0 {
            return Err(Error::Config(format!("mlp extents must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Learnable scalar count of the encoder.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut width = self.in_dim;
        for _ in 0..self.n_blocks {
            total += width * self.hidden_dim + self.hidden_dim;
            width = self.hidden_dim;
        }
        total + width * self.out_dim + self.out_dim
    }
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Registers the encoder's parameters under `prefix`.
pub fn mlp_init(spec: &MlpSpec, prefix: &str, store: &mut ParamStore) -> Result<()> {
    spec.validate()?;
    let mut width = spec.in_dim;
    for blk in 0..spec.n_blocks {
        let bound = fan_in_bound(width);
        store.insert_uniform(&format!("{prefix}.block{blk}.weight"), vec![width, spec.hidden_dim], bound)?;
        store.insert_uniform(&format!("{prefix}.block{blk}.bias"), vec![spec.hidden_dim], bound)?;
        width = spec.hidden_dim;
    }
    let bound = fan_in_bound(width);
    store.insert_uniform(&format!("{prefix}.out.weight"), vec![width, spec.out_dim], bound)?;
    store.insert_uniform(&format!("{prefix}.out.bias"), vec![spec.out_dim], bound)?;
    Ok(())
}

/// Encoder forward: `n_blocks` × (linear → ReLU), then a final linear layer.
/// `x` is [B × in_dim]; the same parameters serve current and historical
/// samples alike.
pub fn mlp_forward(
    g: &mut Graph,
    store: &ParamStore,
    spec: &MlpSpec,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.len() != 2 || shape[1] != spec.in_dim {
        return Err(Error::Shape(format!(
            "mlp {prefix:?}: input shape {shape:?} does not match in_dim {}",
            spec.in_dim
        )));
    }
    let mut h = x;
    for blk in 0..spec.n_blocks {
        let w = g.param(store, &format!("{prefix}.block{blk}.weight"))?;
        let b = g.param(store, &format!("{prefix}.block{blk}.bias"))?;
        h = g.matmul(h, w)?;
        h = g.add(h, b)?;
        h = g.relu(h);
    }
    let w = g.param(store, &format!("{prefix}.out.weight"))?;
    let b = g.param(store, &format!("{prefix}.out.bias"))?;
    h = g.matmul(h, w)?;
    g.add(h, b)
}

/// Fixed sine/cosine position table.
///
/// `table[pos, 2i] = sin(pos / 10000^(2i/hidden_size))` and
/// `table[pos, 2i+1] = cos(pos / 10000^(2i/hidden_size))`; not learnable.
#[derive(Debug, Clone)]
pub struct PosEncTable {
    pub max_len: usize,
    pub hidden_size: usize,
    pub table: Tensor,
}

pub fn posenc_build(max_len: usize, hidden_size: usize) -> Result<PosEncTable> {
    if max_len == 0 {
        return Err(Error::Config("posenc: max_len must be >= 1".into()));
    }
    if hidden_size < 2 || hidden_size % 2 != 0 {
        return Err(Error::Config(format!(
            "posenc: hidden_size must be even and >= 2, got {hidden_size}"
        )));
    }
    let mut data = vec![0.0; max_len * hidden_size];
    for pos in 0..max_len {
        for i in 0..hidden_size / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / hidden_size as f64);
            let angle = pos as f64 / freq;
            data[pos * hidden_size + 2 * i] = angle.sin();
            data[pos * hidden_size + 2 * i + 1] = angle.cos();
        }
    }
    Ok(PosEncTable {
        max_len,
        hidden_size,
        table: Tensor::new(vec![max_len, hidden_size], data)?,
    })
}

/// Adds table row `s` to every batch element at sequence position `s`.
/// The table is constant; gradients pass through to `x` unchanged.
pub fn posenc_add(g: &mut Graph, x: NodeId, table: &PosEncTable) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("posenc_add: expected [B,S,H], got {shape:?}")));
    }
    let (s, h) = (shape[1], shape[2]);
    if h != table.hidden_size {
        return Err(Error::Shape(format!(
            "posenc_add: feature width {h} does not match table hidden_size {}",
            table.hidden_size
        )));
    }
    if s > table.max_len {
        return Err(Error::Shape(format!(
            "posenc_add: sequence length {s} exceeds table max_len {}",
            table.max_len
        )));
    }
    let rows = g.constant(vec![s, h], table.table.data[..s * h].to_vec())?;
    g.add(x, rows)
}

/// Registers the dense head (single affine map, no activation).
pub fn head_init(in_dim: usize, out_dim: usize, store: &mut ParamStore) -> Result<()> {
    if in_dim == 0 || out_dim == 0 {
        return Err(Error::Config(format!("head extents must be >= 1: {in_dim}x{out_dim}")));
    }
    let bound = fan_in_bound(in_dim);
    store.insert_uniform("head.weight", vec![in_dim, out_dim], bound)?;
    store.insert_uniform("head.bias", vec![out_dim], bound)?;
    Ok(())
}

pub fn head_param_count(in_dim: usize, out_dim: usize) -> usize {
    in_dim * out_dim + out_dim
}

/// Projects concatenated branch features [B × in_dim] to [B × out_dim].
pub fn head_forward(g: &mut Graph, store: &ParamStore, features: NodeId) -> Result<NodeId> {
    let w = g.param(store, "head.weight")?;
    let shape = g.shape(features);
    let expect = g.shape(w)[0];
    if shape.len() != 2 || shape[1] != expect {
        return Err(Error::Shape(format!(
            "head: feature shape {shape:?} does not match weight input width {expect}"
        )));
    }
    let b = g.param(store, "head.bias")?;
    let h = g.matmul(features, w)?;
    g.add(h, b)
}
