//! The two-branch association network.
//!
//! A shared MLP encodes the current sample and each history sample. The
//! history branch stacks [h_1 .. h_S, current] along the sequence axis
//! (current last), optionally adds positional encoding, runs the history
//! Hopfield stack, and keeps the last token. The global branch stacks
//! [g_1 .. g_G, current] where g_i are learnable input-independent tokens,
//! runs its own Hopfield stack, and keeps the last token. Branch outputs are
//! concatenated and projected by the dense head. Ablation flags disable the
//! branches individually; with everything off the network reduces to the
//! MLP encoder followed by the head.

use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::hopfield::{hopfield_init, hopfield_stack, take_last, HopfieldSpec};
use crate::nn::{head_forward, head_init, head_param_count, mlp_forward, mlp_init, posenc_add, posenc_build, MlpSpec};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// History branch (association over [history, current]).
    pub use_hopfield: bool,
    /// Positional encoding on the history branch sequence.
    pub use_posenc: bool,
    /// Global branch (learnable tokens + current feature).
    pub use_lparam: bool,
}

impl AblationFlags {
    pub fn all_off() -> Self {
        AblationFlags { use_hopfield: false, use_posenc: false, use_lparam: false }
    }

    pub fn all_on() -> Self {
        AblationFlags { use_hopfield: true, use_posenc: true, use_lparam: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Feature width shared by the encoder output and both branches.
    pub feat_dim: usize,
    pub mlp: MlpSpec,
    pub hist_hopfield: HopfieldSpec,
    pub global_hopfield: HopfieldSpec,
    /// History samples per window (sequence length minus the current token).
    pub n_history: usize,
    pub n_global_tokens: usize,
    pub ablation: AblationFlags,
}

impl ModelConfig {
    /// Standard configuration: encoder widths tied to `feat_dim`, two encoder
    /// blocks, separate Hopfield parameters per branch, scaled-dot β.
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        feat_dim: usize,
        n_history: usize,
        n_global_tokens: usize,
        n_heads: usize,
        n_layers: usize,
    ) -> Self {
        ModelConfig {
            in_dim,
            out_dim,
            feat_dim,
            mlp: MlpSpec { in_dim, hidden_dim: feat_dim, out_dim: feat_dim, n_blocks: 2 },
            hist_hopfield: HopfieldSpec::new(feat_dim, n_heads, n_layers),
            global_hopfield: HopfieldSpec::new(feat_dim, n_heads, n_layers),
            n_history,
            n_global_tokens,
            ablation: AblationFlags::all_on(),
        }
    }

    pub fn with_ablation(mut self, ablation: AblationFlags) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 {
            return Err(Error::Config("out_dim must be >= 1".into()));
        }
        self.mlp.validate()?;
        if self.mlp.in_dim != self.in_dim {
            return Err(Error::Config(format!(
                "mlp.in_dim {} != in_dim {}",
                self.mlp.in_dim, self.in_dim
            )));
        }
        if self.mlp.out_dim != self.feat_dim {
            return Err(Error::Config(format!(
                "mlp.out_dim {} != feat_dim {}",
                self.mlp.out_dim, self.feat_dim
            )));
        }
        if self.ablation.use_hopfield {
            self.hist_hopfield.validate()?;
            if self.hist_hopfield.hidden_size != self.feat_dim {
                return Err(Error::Config(format!(
                    "history hopfield hidden_size {} != feat_dim {}",
                    self.hist_hopfield.hidden_size, self.feat_dim
                )));
            }
        }
        if self.ablation.use_posenc {
            if !self.ablation.use_hopfield {
                return Err(Error::Config(
                    "use_posenc applies to the history branch and requires use_hopfield".into(),
                ));
            }
            if self.feat_dim % 2 != 0 {
                return Err(Error::Config(format!(
                    "positional encoding requires an even feat_dim, got {}",
                    self.feat_dim
                )));
            }
        }
        if self.ablation.use_lparam {
            self.global_hopfield.validate()?;
            if self.global_hopfield.hidden_size != self.feat_dim {
                return Err(Error::Config(format!(
                    "global hopfield hidden_size {} != feat_dim {}",
                    self.global_hopfield.hidden_size, self.feat_dim
                )));
            }
            if self.n_global_tokens == 0 {
                return Err(Error::Config(
                    "use_lparam requires n_global_tokens >= 1".into(),
                ));
            }
        }
        Ok(())
    }

    /// Width of the feature vector entering the head: one slot per active
    /// branch, or the bare encoder feature when both are off.
    pub fn head_in_dim(&self) -> usize {
        let branches =
            self.ablation.use_hopfield as usize + self.ablation.use_lparam as usize;
        self.feat_dim * branches.max(1)
    }
}

/// Registers every learnable tensor the configuration calls for.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed);
    mlp_init(&cfg.mlp, "mlp", &mut store)?;
    if cfg.ablation.use_hopfield {
        hopfield_init(&cfg.hist_hopfield, "hist_hop", &mut store)?;
    }
    if cfg.ablation.use_lparam {
        let bound = 1.0 / (cfg.feat_dim as f64).sqrt();
        store.insert_uniform("global_tokens", vec![cfg.n_global_tokens, cfg.feat_dim], bound)?;
        hopfield_init(&cfg.global_hopfield, "glob_hop", &mut store)?;
    }
    head_init(cfg.head_in_dim(), cfg.out_dim, &mut store)?;
    Ok(store)
}

/// Exact learnable scalar count, computed from the configuration alone.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    cfg.validate()?;
    let mut total = cfg.mlp.param_count();
    if cfg.ablation.use_hopfield {
        total += cfg.hist_hopfield.param_count();
    }
    if cfg.ablation.use_lparam {
        total += cfg.n_global_tokens * cfg.feat_dim;
        total += cfg.global_hopfield.param_count();
    }
    Ok(total + head_param_count(cfg.head_in_dim(), cfg.out_dim))
}

/// A minibatch of windows packed into tensors.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// [B × in_dim]
    pub current: Tensor,
    /// `n_history` slots of [B × in_dim], oldest slot first.
    pub history: Vec<Tensor>,
    /// [B × out_dim]
    pub targets: Tensor,
}

impl WindowBatch {
    pub fn from_refs(windows: &[&SampleWindow], cfg: &ModelConfig) -> Result<Self> {
        let b = windows.len();
        if b == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        for w in windows {
            if w.current.len() != cfg.in_dim {
                return Err(Error::Shape(format!(
                    "window input width {} does not match model in_dim {}",
                    w.current.len(),
                    cfg.in_dim
                )));
            }
            if w.history.len() != cfg.n_history {
                return Err(Error::Shape(format!(
                    "window has {} history rows, model expects {}",
                    w.history.len(),
                    cfg.n_history
                )));
            }
            if w.target.len() != cfg.out_dim {
                return Err(Error::Shape(format!(
                    "window target width {} does not match model out_dim {}",
                    w.target.len(),
                    cfg.out_dim
                )));
            }
        }
        let current = Tensor::new(
            vec![b, cfg.in_dim],
            windows.iter().flat_map(|w| w.current.iter().copied()).collect(),
        )?;
        let history = (0..cfg.n_history)
            .map(|s| {
                Tensor::new(
                    vec![b, cfg.in_dim],
                    windows.iter().flat_map(|w| w.history[s].iter().copied()).collect(),
                )
            })
            .collect::<Result<_>>()?;
        let targets = Tensor::new(
            vec![b, cfg.out_dim],
            windows.iter().flat_map(|w| w.target.iter().copied()).collect(),
        )?;
        Ok(WindowBatch { current, history, targets })
    }

    pub fn from_windows(windows: &[SampleWindow], cfg: &ModelConfig) -> Result<Self> {
        let refs: Vec<&SampleWindow> = windows.iter().collect();
        Self::from_refs(&refs, cfg)
    }

    pub fn len(&self) -> usize {
        self.current.shape[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Forward pass over already-inserted input nodes; `history` is oldest first
/// and must match `cfg.n_history`.
pub fn forward_nodes(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    current: NodeId,
    history: &[NodeId],
) -> Result<NodeId> {
    cfg.validate()?;
    if history.len() != cfg.n_history {
        return Err(Error::Shape(format!(
            "history count mismatch: got {}, config expects {}",
            history.len(),
            cfg.n_history
        )));
    }
    let batch = g.shape(current)[0];
    let f_cur = mlp_forward(g, store, &cfg.mlp, "mlp", current)?;

    let mut branches: Vec<NodeId> = Vec::with_capacity(2);

    if cfg.ablation.use_hopfield {
        // shared encoder over history, then [h_1 .. h_S, current] with the
        // current sample in the last position
        let mut tokens = Vec::with_capacity(history.len() + 1);
        for &h in history {
            tokens.push(mlp_forward(g, store, &cfg.mlp, "mlp", h)?);
        }
        tokens.push(f_cur);
        let mut seq = g.stack(&tokens, 1)?;
        if cfg.ablation.use_posenc {
            let table = posenc_build(tokens.len(), cfg.feat_dim)?;
            seq = posenc_add(g, seq, &table)?;
        }
        let assoc = hopfield_stack(g, store, &cfg.hist_hopfield, "hist_hop", seq)?;
        branches.push(take_last(g, assoc)?);
    }

    if cfg.ablation.use_lparam {
        let tokens = g.param(store, "global_tokens")?;
        let tokens = g.expand(tokens, batch)?;
        let cur3 = g.reshape(f_cur, vec![batch, 1, cfg.feat_dim])?;
        let seq = g.concat(&[tokens, cur3], 1)?;
        let assoc = hopfield_stack(g, store, &cfg.global_hopfield, "glob_hop", seq)?;
        branches.push(take_last(g, assoc)?);
    }

    let features = match branches.len() {
        0 => f_cur,
        1 => branches[0],
        _ => g.concat(&branches, 1)?,
    };
    head_forward(g, store, features)
}

/// Forward pass over a packed batch; returns the prediction node [B×out_dim].
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    batch: &WindowBatch,
) -> Result<NodeId> {
    let current = g.leaf(&batch.current);
    let history: Vec<NodeId> = batch.history.iter().map(|t| g.leaf(t)).collect();
    forward_nodes(g, store, cfg, current, &history)
}
