//! The merged run configuration: built-in defaults, overridden by a JSON
//! config file, overridden by command-line flags. The fully resolved document
//! is echoed into every run directory as `resolved_config.json`, and feeding
//! that file back through `--config` reproduces the run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qdist_core::hopfield::HopfieldSpec;
use qdist_core::model::{AblationFlags, ModelConfig};
use qdist_core::nn::MlpSpec;
use qdist_core::train::TrainConfig;
use qdist_core::{Error, Result};

pub const DEFAULT_FEAT_DIM: usize = 64;
pub const DEFAULT_N_HISTORY: usize = 4;
pub const DEFAULT_GLOBAL_TOKENS: usize = 4;
pub const DEFAULT_N_HEADS: usize = 2;
pub const DEFAULT_N_LAYERS: usize = 1;
pub const DEFAULT_N_BLOCKS: usize = 2;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub corpus: Option<PathBuf>,
    /// Defaults to `<corpus>/split.json`.
    pub split: Option<PathBuf>,
    /// Defaults to 3 × the corpus sampling cadence.
    pub gap_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Checked against the corpus manifest when set.
    pub in_dim: Option<usize>,
    pub out_dim: Option<usize>,
    pub feat_dim: Option<usize>,
    pub n_history: Option<usize>,
    pub n_global_tokens: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_blocks: Option<usize>,
    /// Defaults to 1/sqrt(feat_dim / n_heads).
    pub beta: Option<f64>,
    pub identity_projections: Option<bool>,
    pub ablation: Option<AblationFlags>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub shuffle: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub data: DataSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainSpec,
}

macro_rules! overlay {
    ($dst:expr, $src:expr, [$($field:ident),* $(,)?]) => {
        $(if $src.$field.is_some() {
            $dst.$field = $src.$field.clone();
        })*
    };
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read config {path:?}: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config {path:?} is not a valid run spec: {e}")))
    }

    /// Applies `other` on top of `self`, field by field.
    pub fn overlay(&mut self, other: &RunSpec) {
        overlay!(self.data, other.data, [corpus, split, gap_ms]);
        overlay!(
            self.model,
            other.model,
            [
                in_dim,
                out_dim,
                feat_dim,
                n_history,
                n_global_tokens,
                n_heads,
                n_layers,
                n_blocks,
                beta,
                identity_projections,
                ablation,
            ]
        );
        overlay!(self.train, other.train, [lr, batch_size, epochs, seed, shuffle]);
    }

    pub fn corpus_dir(&self) -> Result<&Path> {
        self.data
            .corpus
            .as_deref()
            .ok_or_else(|| Error::Config("no corpus directory given (set --corpus or data.corpus)".into()))
    }

    pub fn split_path(&self) -> Result<PathBuf> {
        match &self.data.split {
            Some(p) => Ok(p.clone()),
            None => Ok(self.corpus_dir()?.join("split.json")),
        }
    }

    /// Resolves against the corpus manifest dimensions; mismatching explicit
    /// dimensions are rejected, naming both values.
    pub fn resolve(&self, manifest_in: usize, manifest_out: usize, dt_ms: f64) -> Result<Resolved> {
        if let Some(x) = self.model.in_dim {
            if x != manifest_in {
                return Err(Error::Data(format!(
                    "config in_dim {x} does not match corpus in_dim {manifest_in}"
                )));
            }
        }
        if let Some(x) = self.model.out_dim {
            if x != manifest_out {
                return Err(Error::Data(format!(
                    "config out_dim {x} does not match corpus out_dim {manifest_out}"
                )));
            }
        }
        let feat_dim = self.model.feat_dim.unwrap_or(DEFAULT_FEAT_DIM);
        let n_heads = self.model.n_heads.unwrap_or(DEFAULT_N_HEADS);
        let n_layers = self.model.n_layers.unwrap_or(DEFAULT_N_LAYERS);
        let beta = self.model.beta.unwrap_or_else(|| HopfieldSpec::default_beta(feat_dim, n_heads));
        let identity = self.model.identity_projections.unwrap_or(false);
        let hopfield = |_: ()| {
            let mut spec = HopfieldSpec::new(feat_dim, n_heads, n_layers).with_beta(beta);
            spec.identity_projections = identity;
            spec
        };
        let model = ModelConfig {
            in_dim: manifest_in,
            out_dim: manifest_out,
            feat_dim,
            mlp: MlpSpec {
                in_dim: manifest_in,
                hidden_dim: feat_dim,
                out_dim: feat_dim,
                n_blocks: self.model.n_blocks.unwrap_or(DEFAULT_N_BLOCKS),
            },
            hist_hopfield: hopfield(()),
            global_hopfield: hopfield(()),
            n_history: self.model.n_history.unwrap_or(DEFAULT_N_HISTORY),
            n_global_tokens: self.model.n_global_tokens.unwrap_or(DEFAULT_GLOBAL_TOKENS),
            ablation: self.model.ablation.unwrap_or_else(AblationFlags::all_on),
        };
        model.validate()?;
        let train = TrainConfig {
            lr: self.train.lr.unwrap_or(0.001),
            batch_size: self.train.batch_size.unwrap_or(16),
            epochs: self.train.epochs.unwrap_or(140),
            seed: self.train.seed.unwrap_or(0),
            shuffle: self.train.shuffle.unwrap_or(true),
        };
        train.validate()?;
        let gap_ms = self.data.gap_ms.unwrap_or(3.0 * dt_ms);
        Ok(Resolved { model, train, gap_ms })
    }

    /// The fully explicit document a resolved run echoes to disk.
    pub fn resolved_document(&self, r: &Resolved) -> Result<RunSpec> {
        Ok(RunSpec {
            data: DataSpec {
                corpus: Some(self.corpus_dir()?.to_path_buf()),
                split: Some(self.split_path()?),
                gap_ms: Some(r.gap_ms),
            },
            model: ModelSpec {
                in_dim: Some(r.model.in_dim),
                out_dim: Some(r.model.out_dim),
                feat_dim: Some(r.model.feat_dim),
                n_history: Some(r.model.n_history),
                n_global_tokens: Some(r.model.n_global_tokens),
                n_heads: Some(r.model.hist_hopfield.n_heads),
                n_layers: Some(r.model.hist_hopfield.n_layers),
                n_blocks: Some(r.model.mlp.n_blocks),
                beta: Some(r.model.hist_hopfield.beta),
                identity_projections: Some(r.model.hist_hopfield.identity_projections),
                ablation: Some(r.model.ablation),
            },
            train: TrainSpec {
                lr: Some(r.train.lr),
                batch_size: Some(r.train.batch_size),
                epochs: Some(r.train.epochs),
                seed: Some(r.train.seed),
                shuffle: Some(r.train.shuffle),
            },
        })
    }
}

#[derive(Debug, Clone)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gap_ms: f64,
}

/// Table-2 style ablation presets.
pub fn ablation_preset(name: &str) -> Result<AblationFlags> {
    match name {
        "mlp" => Ok(AblationFlags::all_off()),
        "hopfield" => Ok(AblationFlags { use_hopfield: true, use_posenc: false, use_lparam: false }),
        "hopfield_pos" => {
            Ok(AblationFlags { use_hopfield: true, use_posenc: true, use_lparam: false })
        }
        "mlp_lparam" => {
            Ok(AblationFlags { use_hopfield: false, use_posenc: false, use_lparam: true })
        }
        "full" => Ok(AblationFlags::all_on()),
        other => Err(Error::Config(format!(
            "unknown ablation preset {other:?} (expected mlp, hopfield, hopfield_pos, mlp_lparam, full)"
        ))),
    }
}
