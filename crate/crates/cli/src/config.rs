//! Run configuration: one TOML file per run, layered as
//! preset < file < command-line flags.

use std::path::{Path, PathBuf};

use mabsrec::corpus::DataFormat;
use mabsrec::evaluator::DEFAULT_BUCKET_EDGES;
use mabsrec::trainer::{Ablation, Preset, TrainConfig};
use mabsrec::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction file (`csv_events`) or ratings file (`movielens_ratings`).
    pub path: Option<PathBuf>,
    pub format: DataFormat,
    /// MovieLens `movies.csv` sidecar with genres.
    pub movies: Option<PathBuf>,
    pub min_len: usize,
    /// Users with longer sequences are dropped.
    pub max_keep: Option<usize>,
    /// Name used in reports.
    pub dataset: String,
    /// Prepared artifacts; defaults to `<out>/prepared`.
    pub artifacts: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            format: DataFormat::CsvEvents,
            movies: None,
            min_len: 5,
            max_keep: None,
            dataset: "dataset".into(),
            artifacts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    #[default]
    Test,
}

impl SplitName {
    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Sequence-length bucket edges.
    pub buckets: Vec<usize>,
    pub split: SplitName,
    /// Defaults to `<out>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            buckets: DEFAULT_BUCKET_EDGES.to_vec(),
            split: SplitName::Test,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub out: PathBuf,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Values given on the command line; `None` leaves the layer below alone.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub format: Option<DataFormat>,
    pub movies: Option<PathBuf>,
    pub artifacts: Option<PathBuf>,
    pub dataset: Option<String>,
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub k_pop: Option<f64>,
    pub k_subj: Option<f64>,
    pub max_epochs: Option<usize>,
    pub buckets: Option<Vec<usize>>,
    pub split: Option<SplitName>,
    pub checkpoint: Option<PathBuf>,
    pub filter_seen: bool,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

impl RunConfig {
    /// Resolve the layered configuration. `file` may be absent.
    pub fn load(file: Option<&Path>, flags: &Overrides) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                text.parse::<toml::Table>().map_err(|e| config_err(path, e))?
            }
            None => toml::Table::new(),
        };
        let source = file.unwrap_or(Path::new("<flags>"));

        let preset = match (flags.preset, table.remove("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => v.try_into().map_err(|e| config_err(source, e))?,
            (None, None) => Preset::default(),
        };

        // train keys present in the file replace the preset's
        let mut train = toml::Table::try_from(TrainConfig::preset(preset)).expect("config serializes");
        if let Some(v) = table.remove("train") {
            let toml::Value::Table(file_train) = v else {
                return Err(config_err(source, "`train` must be a table"));
            };
            train.extend(file_train);
        }
        table.insert("train".into(), toml::Value::Table(train));
        table.insert(
            "preset".into(),
            toml::Value::try_from(preset).expect("preset serializes"),
        );
        table.entry("out").or_insert_with(|| toml::Value::String("run".into()));
        table
            .entry("data")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table
            .entry("eval")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));

        let mut cfg: RunConfig = table.try_into().map_err(|e| config_err(source, e))?;
        cfg.apply(flags);
        cfg.train.validate()?;
        if cfg.data.min_len < 2 {
            return Err(Error::Config(format!(
                "min_len must be at least 2, got {}",
                cfg.data.min_len
            )));
        }
        Ok(cfg)
    }

    fn apply(&mut self, f: &Overrides) {
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        if let Some(out) = &f.out {
            self.out.clone_from(out);
        }
        set(&mut self.data.path, &f.data);
        set(&mut self.data.movies, &f.movies);
        set(&mut self.data.artifacts, &f.artifacts);
        set(&mut self.eval.checkpoint, &f.checkpoint);
        if let Some(v) = f.format {
            self.data.format = v;
        }
        if let Some(v) = &f.dataset {
            self.data.dataset.clone_from(v);
        }
        if let Some(v) = f.seed {
            self.train.seed = v;
        }
        if let Some(v) = f.ablation {
            self.train.ablation = v;
        }
        if let Some(v) = f.k_pop {
            self.train.k_pop = v;
        }
        if let Some(v) = f.k_subj {
            self.train.k_subj = v;
        }
        if let Some(v) = f.max_epochs {
            self.train.max_epochs = v;
        }
        if let Some(v) = &f.buckets {
            self.eval.buckets.clone_from(v);
        }
        if let Some(v) = f.split {
            self.eval.split = v;
        }
        if f.filter_seen {
            self.train.filter_seen = true;
        }
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.data.artifacts.clone().unwrap_or_else(|| self.out.join("prepared"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("checkpoint.bin"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Write `<out>/<command>_config.toml`.
    pub fn write_echo(&self, command: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        let path = self.out.join(format!("{command}_config.toml"));
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
