use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model variant: the full model or one of the three ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Ablation {
    #[default]
    #[serde(rename = "full")]
    Full,
    /// Raw embedding table instead of graph-propagated features.
    #[serde(rename = "wo_G")]
    WithoutGraph,
    /// Arithmetic mean of the three view encodings instead of the fusion head.
    #[serde(rename = "wo_A")]
    WithoutAttention,
    /// Both of the above.
    #[serde(rename = "wo_D")]
    WithoutBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::WithoutGraph,
        Ablation::WithoutAttention,
        Ablation::WithoutBoth,
    ];

    pub fn uses_graph(self) -> bool {
        matches!(self, Ablation::Full | Ablation::WithoutAttention)
    }

    pub fn uses_fusion(self) -> bool {
        matches!(self, Ablation::Full | Ablation::WithoutGraph)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::WithoutGraph => "wo_G",
            Ablation::WithoutAttention => "wo_A",
            Ablation::WithoutBoth => "wo_D",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (full, wo_G, wo_A, wo_D)")))
    }
}

/// Hyperparameter presets for the three reference datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Beauty,
    Sports,
    Ml20m,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "beauty" => Ok(Preset::Beauty),
            "sports" => Ok(Preset::Sports),
            "ml20m" | "movielens20m" => Ok(Preset::Ml20m),
            _ => Err(Error::Config(format!("unknown preset `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub n_graph_layers: usize,
    pub graph_dropout_rate: f64,
    pub embed_dim: usize,
    pub k_pop: f64,
    pub k_subj: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub ablation: Ablation,
    pub causal_mask: bool,
    pub mask_padding: bool,
    pub ffn_residual: bool,
    pub fusion_triple_sum: bool,
    pub per_position_targets: bool,
    pub score_against_graph_embeddings: bool,
    pub filter_seen: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Beauty)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            batch_size: 512,
            learning_rate: 0.001,
            max_seq_len: 50,
            dropout_rate: 0.4,
            n_transformer_layers: 2,
            n_heads: 1,
            n_graph_layers: 2,
            graph_dropout_rate: 0.4,
            embed_dim: 64,
            k_pop: 0.5,
            k_subj: 0.5,
            patience: 10,
            max_epochs: 200,
            seed: 42,
            ablation: Ablation::Full,
            causal_mask: true,
            mask_padding: false,
            ffn_residual: true,
            fusion_triple_sum: false,
            per_position_targets: false,
            score_against_graph_embeddings: false,
            filter_seen: false,
        };
        match preset {
            Preset::Beauty => base,
            Preset::Sports => Self {
                graph_dropout_rate: 0.5,
                ..base
            },
            Preset::Ml20m => Self {
                dropout_rate: 0.1,
                n_transformer_layers: 4,
                n_heads: 8,
                n_graph_layers: 4,
                graph_dropout_rate: 0.3,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
            ("n_transformer_layers", self.n_transformer_layers),
            ("n_heads", self.n_heads),
            ("n_graph_layers", self.n_graph_layers),
            ("embed_dim", self.embed_dim),
            ("patience", self.patience),
            ("max_epochs", self.max_epochs),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("dropout_rate", self.dropout_rate),
            ("graph_dropout_rate", self.graph_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1)")));
            }
        }
        for (name, v) in [("k_pop", self.k_pop), ("k_subj", self.k_subj)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0,1]")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate = {}", self.learning_rate)));
        }
        if !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the TOML echo, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Same settings with every dropout disabled.
    pub fn without_dropout(&self) -> Self {
        Self {
            dropout_rate: 0.0,
            graph_dropout_rate: 0.0,
            ..self.clone()
        }
    }
}
