use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mabsrec::ablation::run_ablation;
use mabsrec::corpus::{load_interactions, load_movielens, Corpus, DataFormat};
use mabsrec::dataset::{read_corpus, vocab_hash, write_corpus, write_prepared, DataSettings, Example, PreparedData};
use mabsrec::evaluator::{buckets_from_edges, evaluate, EVAL_BATCH};
use mabsrec::fusion::write_scores_csv;
use mabsrec::model::Model;
use mabsrec::numeric::{read_checkpoint, write_checkpoint, Tape};
use mabsrec::trainer::{train_with_progress, TrainConfig};
use mabsrec::{Error, Result};

use crate::config::{RunConfig, SplitName};

pub const CHECKPOINT_CONFIG: &str = "config";
pub const CHECKPOINT_VOCAB: &str = "vocab_hash";
pub const CHECKPOINT_VARIANT: &str = "variant";
pub const CHECKPOINT_DATASET: &str = "dataset";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io(path))
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let path = cfg
        .data
        .path
        .as_deref()
        .ok_or_else(|| Error::Config("no input data: set data.path or pass --data".into()))?;
    let log = match cfg.data.format {
        DataFormat::CsvEvents => load_interactions(path, DataFormat::CsvEvents)?,
        DataFormat::MovielensRatings => load_movielens(path, cfg.data.movies.as_deref())?,
    };
    Corpus::from_log(&log, cfg.data.min_len, cfg.data.max_keep)
}

fn prepared(corpus: &Corpus, train: &TrainConfig) -> Result<PreparedData> {
    PreparedData::build(corpus, DataSettings::from_config(train))
}

pub fn prepare(cfg: &RunConfig) -> Result<()> {
    cfg.write_echo("prepare")?;
    let corpus = load_corpus(cfg)?;
    let data = prepared(&corpus, &cfg.train)?;
    let dir = cfg.artifacts_dir();
    write_corpus(&dir, &corpus)?;
    write_prepared(&dir, &data)?;
    let s = corpus.summary;
    println!("dataset: {}", cfg.data.dataset);
    println!("{}", corpus.stats());
    println!("#users_in      {}", s.users_in);
    println!("#removed_short {}", s.removed_short);
    println!("#removed_long  {}", s.removed_long);
    println!("artifacts: {}", dir.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    cfg.write_echo("train")?;
    let corpus = read_corpus(&cfg.artifacts_dir())?;
    let data = prepared(&corpus, &cfg.train)?;
    let outcome = train_with_progress(&data, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.5}  val_recall@10 {:.4}  val_ndcg@10 {:.4}  {} ms",
            r.epoch, r.train_loss, r.val_recall_10, r.val_ndcg_10, r.wall_ms
        );
    })?;

    let log_path = cfg.out.join("train_log.jsonl");
    let mut log = Vec::new();
    outcome.log.write_to(&mut log).map_err(io(&log_path))?;
    fs::write(&log_path, log).map_err(io(&log_path))?;

    let meta = BTreeMap::from([
        (CHECKPOINT_CONFIG.to_owned(), cfg.train.to_toml()),
        (CHECKPOINT_VOCAB.to_owned(), vocab_hash(&corpus)),
        (CHECKPOINT_VARIANT.to_owned(), cfg.train.ablation.name().to_owned()),
        (CHECKPOINT_DATASET.to_owned(), cfg.data.dataset.clone()),
    ]);
    let ckpt = cfg.checkpoint_path();
    let file = fs::File::create(&ckpt).map_err(io(&ckpt))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(&mut w, &outcome.params, &meta)?;
    w.flush().map_err(io(&ckpt))?;
    println!(
        "variant {}  best epoch {}  val_recall@10 {:.4}",
        outcome.log.variant, outcome.log.best_epoch, outcome.log.best_val_recall_10
    );
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}

fn meta_value<'a>(meta: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("{}: no `{key}` entry", path.display())))
}

fn split(data: &PreparedData, name: SplitName) -> &[Example] {
    match name {
        SplitName::Train => &data.train,
        SplitName::Valid => &data.valid,
        SplitName::Test => &data.test,
    }
}

/// Per-user fusion scores of `examples`, in example order.
fn fusion_scores(model: &Model, params: &mabsrec::numeric::ParamSet, examples: &[Example]) -> Result<Vec<[f64; 3]>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch: Vec<&Example> = chunk.iter().collect();
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, params, &batch)?;
        let Some(scores) = fwd.scores else {
            return Ok(Vec::new());
        };
        let s = tape.value(scores);
        out.extend((0..chunk.len()).map(|r| [s.get(r, 0), s.get(r, 1), s.get(r, 2)]));
    }
    Ok(out)
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.checkpoint_path();
    let file = fs::File::open(&ckpt).map_err(|_| Error::MissingArtifact(ckpt.clone()))?;
    let (params, meta) = read_checkpoint(&mut BufReader::new(file))?;
    let mut train_cfg = TrainConfig::from_toml(meta_value(&meta, CHECKPOINT_CONFIG, &ckpt)?)?;
    train_cfg.filter_seen |= cfg.train.filter_seen;

    let corpus = read_corpus(&cfg.artifacts_dir())?;
    let expected = meta_value(&meta, CHECKPOINT_VOCAB, &ckpt)?;
    let actual = vocab_hash(&corpus);
    if expected != actual {
        return Err(Error::VocabMismatch {
            checkpoint: expected.to_owned(),
            corpus: actual,
        });
    }
    let data = prepared(&corpus, &train_cfg)?;
    let (model, _) = Model::new(data.n_items, data.normalized.clone(), &train_cfg)?;
    model.check_params(&params)?;

    cfg.write_echo("eval")?;
    let examples = split(&data, cfg.eval.split);
    let buckets = buckets_from_edges(&cfg.eval.buckets)?;
    let mut report = evaluate(&model, &params, examples, Some(&buckets))?;
    report.metadata.config_hash = train_cfg.hash();
    report.metadata.seed = train_cfg.seed;
    report.metadata.dataset = meta
        .get(CHECKPOINT_DATASET)
        .cloned()
        .unwrap_or_else(|| cfg.data.dataset.clone());
    report.metadata.variant = train_cfg.ablation.name().to_owned();

    let tag = cfg.eval.split.name();
    write_text(&cfg.out.join(format!("eval_{tag}.json")), &report.to_json())?;
    write_text(
        &cfg.out.join(format!("eval_{tag}.csv")),
        &format!(
            "{}\n{}\n",
            mabsrec::evaluator::EvalReport::csv_header(),
            report.csv_row()
        ),
    )?;
    let scores = fusion_scores(&model, &params, examples)?;
    if !scores.is_empty() {
        let path = cfg.out.join(format!("fusion_scores_{tag}.csv"));
        let mut buf = Vec::new();
        let rows = examples
            .iter()
            .zip(&scores)
            .map(|(ex, s)| (corpus.users.decode(ex.user).unwrap_or("?"), *s));
        write_scores_csv(&mut buf, rows).map_err(io(&path))?;
        fs::write(&path, buf).map_err(io(&path))?;
    }

    println!(
        "split {tag}  users {}  variant {}",
        report.users, report.metadata.variant
    );
    for (k, v) in &report.metrics {
        println!("{k:<10} {v:.4}");
    }
    for b in &report.buckets {
        println!(
            "bucket {:<10} users {:>6}  recall@10 {:.4}  ndcg@10 {:.4}",
            b.range, b.users, b.metrics["recall@10"], b.metrics["ndcg@10"]
        );
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    cfg.write_echo("ablate")?;
    let corpus = read_corpus(&cfg.artifacts_dir())?;
    let data = prepared(&corpus, &cfg.train)?;
    let table = run_ablation(&data, &cfg.train, &cfg.data.dataset, |row| {
        eprintln!(
            "{:<5} best epoch {:>3}  ndcg@10 {:.4}",
            row.variant.name(),
            row.best_epoch,
            row.report.metric("ndcg@10")
        );
    })?;
    write_text(&cfg.out.join("ablation.csv"), &table.to_csv())?;
    write_text(&cfg.out.join("ablation.txt"), &table.render())?;
    print!("{}", table.render());
    Ok(())
}
