//! The composed recommender: graph-enriched item matrices per view, the
//! shared encoder, the fusion head (or mean pooling), and item scoring.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::Example;
use crate::encoder::{encode_views, encoder_param_count, EncoderConfig, EncoderIds};
use crate::error::{Error, Result};
use crate::fusion::{bias_scores, fuse_features, fusion_param_count, predict_vector, FusionIds};
use crate::item_graph::{propagate_on, NormalizedItemGraph};
use crate::numeric::{ParamSet, Tape, Var};
use crate::trainer::config::TrainConfig;

#[derive(Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub n_items: usize,
    pub encoder: EncoderIds,
    /// Absent for the mean-pooling variants.
    pub fusion: Option<FusionIds>,
    graphs: [NormalizedItemGraph; 3],
    propagations: AtomicUsize,
}

/// Batch outputs; every matrix has one row per example.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub x_p: Var,
    pub x_a: Var,
    pub x_d: Var,
    pub scores: Option<Var>,
    pub e_pred: Var,
    /// `B×|I|`, column `c` scores item `c + 1`.
    pub logits: Var,
}

impl Model {
    /// Build the model and its freshly initialized parameters from `config.seed`.
    pub fn new(n_items: usize, graphs: [NormalizedItemGraph; 3], config: &TrainConfig) -> Result<(Self, ParamSet)> {
        config.validate()?;
        if let Some(g) = graphs.iter().find(|g| g.n_items != n_items) {
            return Err(Error::Shape(format!(
                "graph over {} items, model over {n_items}",
                g.n_items
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let cfg = encoder_config(config);
        let encoder = EncoderIds::init(&mut params, n_items, &cfg, &mut rng)?;
        let fusion = config
            .ablation
            .uses_fusion()
            .then(|| FusionIds::init(&mut params, config.embed_dim, &mut rng));
        let model = Self {
            config: config.clone(),
            n_items,
            encoder,
            fusion,
            graphs,
            propagations: AtomicUsize::new(0),
        };
        Ok((model, params))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        encoder_config(&self.config)
    }

    /// Number of graph propagations run so far.
    pub fn propagation_count(&self) -> usize {
        self.propagations.load(Ordering::Relaxed)
    }

    /// Closed-form trainable scalar count for this variant.
    pub fn expected_param_count(&self) -> usize {
        let c = &self.config;
        encoder_param_count(self.n_items, c.embed_dim, c.n_transformer_layers, c.max_seq_len)
            + self.fusion.map_or(0, |_| fusion_param_count(c.embed_dim))
    }

    /// Check that `params` has this model's layout, e.g. after loading a checkpoint.
    pub fn check_params(&self, params: &ParamSet) -> Result<()> {
        let (_, fresh) = Self::new(self.n_items, self.graphs.clone(), &self.config)?;
        if fresh.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors, model needs {}",
                params.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Per-view item matrices: graph-propagated (with graph dropout on
    /// training tapes) or the raw table for the graph-free variants.
    pub fn item_matrices(&self, tape: &mut Tape, item_emb: Var) -> Result<[Var; 3]> {
        if !self.config.ablation.uses_graph() {
            return Ok([item_emb; 3]);
        }
        let mut out = [item_emb; 3];
        for (slot, graph) in out.iter_mut().zip(&self.graphs) {
            self.propagations.fetch_add(1, Ordering::Relaxed);
            let m = propagate_on(tape, item_emb, graph, self.config.n_graph_layers)?;
            *slot = tape.dropout(m, self.config.graph_dropout_rate)?;
        }
        Ok(out)
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, batch: &[&Example]) -> Result<Forward> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let cfg = self.encoder_config();
        let vars = self.encoder.bind(tape, params);
        let tables = self.item_matrices(tape, vars.item_emb)?;
        let windows: Vec<Vec<_>> = (0..3).map(|v| batch.iter().map(|ex| &ex.views[v]).collect()).collect();
        let stacked = encode_views(tape, &vars, &tables, &windows, &cfg)?;
        let b = batch.len();
        let x_p = tape.slice_rows(stacked, 0, b)?;
        let x_a = tape.slice_rows(stacked, b, b)?;
        let x_d = tape.slice_rows(stacked, 2 * b, b)?;

        let (scores, e_pred) = match self.fusion {
            Some(f) => {
                let fv = f.bind(tape, params);
                let o = fuse_features(tape, x_p, x_a, x_d, self.config.fusion_triple_sum)?;
                let s = bias_scores(tape, o, &fv)?;
                (Some(s), predict_vector(tape, s, x_p, x_a, x_d)?)
            }
            None => (None, tape.mean(&[x_p, x_a, x_d])?),
        };

        let target_table = if self.config.score_against_graph_embeddings && self.config.ablation.uses_graph() {
            tape.mean(&tables)?
        } else {
            vars.item_emb
        };
        let all = tape.matmul_t(e_pred, target_table, false, true)?;
        let logits = tape.slice_cols(all, 1, self.n_items)?;
        Ok(Forward {
            x_p,
            x_a,
            x_d,
            scores,
            e_pred,
            logits,
        })
    }

    /// Mean cross-entropy of the batch against its targets.
    pub fn loss(&self, tape: &mut Tape, params: &ParamSet, batch: &[&Example]) -> Result<(Var, Forward)> {
        let fwd = self.forward(tape, params, batch)?;
        let targets = batch
            .iter()
            .map(|ex| target_column(ex.target, self.n_items))
            .collect::<Result<Vec<_>>>()?;
        Ok((tape.cross_entropy(fwd.logits, &targets)?, fwd))
    }
}

fn target_column(target: u32, n_items: usize) -> Result<usize> {
    if target == 0 || target as usize > n_items {
        return Err(Error::IndexOutOfRange {
            index: target as usize,
            max: n_items,
        });
    }
    Ok(target as usize - 1)
}

pub fn encoder_config(c: &TrainConfig) -> EncoderConfig {
    EncoderConfig {
        embed_dim: c.embed_dim,
        heads: c.n_heads,
        n_layers: c.n_transformer_layers,
        max_len: c.max_seq_len,
        dropout: c.dropout_rate,
        causal: c.causal_mask,
        ffn_residual: c.ffn_residual,
        mask_padding: c.mask_padding,
    }
}

/// `logits[c] = e_pred · E[c + 1]` over all real items.
pub fn score_items(e_pred: &[f64], item_table: &crate::numeric::Tensor) -> Result<Vec<f64>> {
    if item_table.cols() != e_pred.len() {
        return Err(Error::Shape(format!(
            "{}-dim prediction, {}-dim items",
            e_pred.len(),
            item_table.cols()
        )));
    }
    Ok((1..item_table.rows())
        .map(|i| item_table.row(i).iter().zip(e_pred).map(|(a, b)| a * b).sum())
        .collect())
}

/// Full-softmax cross-entropy of one user's logits against `target` (1-based item).
pub fn rec_loss(logits: &[f64], target: u32) -> Result<f64> {
    let col = target_column(target, logits.len())?;
    Ok(crate::numeric::kernels::cross_entropy(logits, col))
}
