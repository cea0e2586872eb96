//! Mini-batch Adam on the next-item cross-entropy with validation-driven
//! early stopping.

pub mod adam;
pub mod config;

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use config::{Ablation, Preset, TrainConfig};

use crate::dataset::{Example, PreparedData};
use crate::error::{Error, Result};
use crate::evaluator::evaluate;
use crate::model::Model;
use crate::numeric::{ParamSet, Tape};

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_recall@10")]
    pub val_recall_10: f64,
    #[serde(rename = "val_ndcg@10")]
    pub val_ndcg_10: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub variant: Ablation,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_recall_10: f64,
}

impl TrainLog {
    pub fn header(&self) -> String {
        format!("# variant={} seed={}", self.variant, self.seed)
    }

    /// Header line, then one JSON object per epoch.
    pub fn write_to(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", self.header())?;
        for r in &self.epochs {
            writeln!(out, "{}", serde_json::to_string(r).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Vec<EpochRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "training log".into(),
                    line: n as u64 + 1,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

pub struct Trainer<'a> {
    data: &'a PreparedData,
    model: Model,
    params: ParamSet,
    adam: Adam,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a PreparedData, config: &TrainConfig) -> Result<Self> {
        if data.settings.max_len != config.max_seq_len {
            return Err(Error::Config(format!(
                "data prepared with max_len {}, config asks for {}",
                data.settings.max_len, config.max_seq_len
            )));
        }
        let (model, params) = Model::new(data.n_items, data.normalized.clone(), config)?;
        let adam = Adam::new(&params, config.learning_rate);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // keep batch order and dropout masks independent of initialization draws
        rng.set_stream(1);
        Ok(Self {
            data,
            model,
            params,
            adam,
            rng,
            epoch: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &[&Example]) -> Result<f64> {
        let mut tape = Tape::training(self.rng.random());
        let (loss, _) = self.model.loss(&mut tape, &self.params, batch)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Ok(value);
        }
        self.params.zero_grad();
        tape.backward(loss, &mut self.params)?;
        self.adam.step(&mut self.params);
        Ok(value)
    }

    /// One pass over the shuffled training set; returns the mean example loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        self.epoch += 1;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(self.model.config.batch_size).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &self.data.train[i]).collect();
            let loss = self.step(&batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    batch: b,
                    loss,
                });
            }
            total += loss * batch.len() as f64;
        }
        Ok(total / self.data.train.len() as f64)
    }

    /// Validation Recall@10 and NDCG@10 with the current parameters.
    pub fn validate(&self) -> Result<(f64, f64)> {
        let report = evaluate(&self.model, &self.params, &self.data.valid, None)?;
        Ok((report.metric("recall@10"), report.metric("ndcg@10")))
    }
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters of the best validation epoch.
    pub params: ParamSet,
    pub log: TrainLog,
}

pub fn train(data: &PreparedData, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(data, config, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
pub fn train_with_progress(
    data: &PreparedData,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(data, config)?;
    let mut log = TrainLog {
        variant: config.ablation,
        seed: config.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_recall_10: f64::NEG_INFINITY,
    };
    let mut best = trainer.params.clone();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let train_loss = trainer.run_epoch()?;
        let (recall, ndcg) = trainer.validate()?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_recall_10: recall,
            val_ndcg_10: ndcg,
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record);
        log.epochs.push(record);
        // ties move the checkpoint forward but do not reset patience
        if recall >= log.best_val_recall_10 {
            log.best_epoch = epoch;
            best = trainer.params.clone();
        }
        if recall > log.best_val_recall_10 {
            log.best_val_recall_10 = recall;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: trainer.model,
        params: best,
        log,
    })
}
