//! Training, validation and test examples with their bias views, the three
//! per-view item graphs, and the on-disk corpus artifacts.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bias_views::{partition_window, popularity_scores, write_partitions, BiasPartition, BiasView};
use crate::corpus::{
    pad_truncate, split_leave_one_out, Corpus, FilterSummary, ItemId, PaddedWindow, UserSequence, Vocab,
};
use crate::error::{Error, Result};
use crate::item_graph::{build_adjacency, normalize, write_edge_list, NormalizedItemGraph, TransitionGraph};

/// One prediction problem: three padded views of the input window and the
/// item to predict.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: u32,
    pub views: [PaddedWindow; 3],
    pub target: ItemId,
    /// Full length of the user's filtered sequence, used for bucketing.
    pub seq_len: usize,
    /// Every item of the input history, in order.
    pub history: Vec<ItemId>,
}

/// Settings that shape the prepared data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSettings {
    pub max_len: usize,
    pub k_pop: f64,
    pub k_subj: f64,
    pub per_position_targets: bool,
}

impl DataSettings {
    pub fn from_config(c: &crate::trainer::TrainConfig) -> Self {
        Self {
            max_len: c.max_seq_len,
            k_pop: c.k_pop,
            k_subj: c.k_subj,
            per_position_targets: c.per_position_targets,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub n_items: usize,
    pub settings: DataSettings,
    /// Training-split occurrence counts, indexed by item.
    pub popularity: Vec<u64>,
    /// Partition of each user's training window, in user order.
    pub partitions: Vec<(u32, BiasPartition)>,
    /// Indexed by [`BiasView::index`].
    pub graphs: [TransitionGraph; 3],
    pub normalized: [NormalizedItemGraph; 3],
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
}

fn make_example(
    user: u32,
    history: &[ItemId],
    target: ItemId,
    seq_len: usize,
    popularity: &[u64],
    corpus: &Corpus,
    s: &DataSettings,
) -> Example {
    let window = pad_truncate(history, s.max_len);
    let part = partition_window(&window, popularity, &corpus.item_categories, s.k_pop, s.k_subj);
    Example {
        user,
        views: BiasView::ALL.map(|v| pad_truncate(part.view(v), s.max_len)),
        target,
        seq_len,
        history: history.to_vec(),
    }
}

impl PreparedData {
    pub fn build(corpus: &Corpus, s: DataSettings) -> Result<Self> {
        if s.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        let n_items = corpus.n_items();
        let splits = corpus
            .sequences
            .iter()
            .map(|seq| split_leave_one_out(seq).map(|sp| (seq, sp)))
            .collect::<Result<Vec<_>>>()?;
        let popularity = popularity_scores(splits.iter().map(|(_, sp)| sp.train.as_slice()), n_items);

        let partitions: Vec<(u32, BiasPartition)> = splits
            .iter()
            .map(|(seq, sp)| {
                let window = pad_truncate(&sp.train, s.max_len);
                (
                    seq.user,
                    partition_window(&window, &popularity, &corpus.item_categories, s.k_pop, s.k_subj),
                )
            })
            .collect();
        let graphs = BiasView::ALL
            .map(|v| build_adjacency(partitions.iter().map(|(_, p)| p.view(v)), n_items))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let graphs: [TransitionGraph; 3] = graphs.try_into().expect("three views");
        let normalized = [normalize(&graphs[0]), normalize(&graphs[1]), normalize(&graphs[2])];

        let mut train = Vec::new();
        let mut valid = Vec::with_capacity(splits.len());
        let mut test = Vec::with_capacity(splits.len());
        for (seq, sp) in &splits {
            let t = seq.len();
            let n = sp.train.len();
            let first = if s.per_position_targets { 1 } else { n - 1 };
            for k in first.max(1)..n {
                train.push(make_example(
                    seq.user,
                    &sp.train[..k],
                    sp.train[k],
                    t,
                    &popularity,
                    corpus,
                    &s,
                ));
            }
            valid.push(make_example(seq.user, &sp.train, sp.valid, t, &popularity, corpus, &s));
            let mut full = sp.train.clone();
            full.push(sp.valid);
            test.push(make_example(seq.user, &full, sp.test, t, &popularity, corpus, &s));
        }
        if train.is_empty() {
            return Err(Error::NoSequences);
        }
        Ok(Self {
            n_items,
            settings: s,
            popularity,
            partitions,
            graphs,
            normalized,
            train,
            valid,
            test,
        })
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn items_tsv(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    for (n, name) in corpus.items.names().enumerate() {
        let cats: Vec<&str> = corpus.item_categories[n + 1]
            .iter()
            .map(|&c| corpus.categories.decode(c).unwrap_or(""))
            .collect();
        writeln!(out, "{}\t{}\t{}", n + 1, name, cats.join("|")).expect("in-memory write");
    }
    out
}

/// SHA-256 of the item vocabulary artifact, hex encoded.
pub fn vocab_hash(corpus: &Corpus) -> String {
    hex::encode(Sha256::digest(items_tsv(corpus)))
}

pub const ITEMS_FILE: &str = "items.tsv";
pub const USERS_FILE: &str = "users.tsv";
pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const STATS_FILE: &str = "stats.txt";
pub const PARTITIONS_FILE: &str = "partitions.txt";

pub fn graph_file(view: BiasView) -> String {
    format!("graph_{}.tsv", view.name())
}

/// Persist the filtered corpus so later commands can rebuild it exactly.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join(ITEMS_FILE), &items_tsv(corpus))?;

    let mut users = Vec::new();
    for (n, name) in corpus.users.names().enumerate() {
        writeln!(users, "{}\t{}", n + 1, name).expect("in-memory write");
    }
    write_file(&dir.join(USERS_FILE), &users)?;

    let mut seqs = Vec::new();
    for s in &corpus.sequences {
        let items: Vec<String> = s.items.iter().map(u32::to_string).collect();
        writeln!(seqs, "{}\t{}", s.user, items.join(" ")).expect("in-memory write");
    }
    write_file(&dir.join(SEQUENCES_FILE), &seqs)?;

    let mut stats = corpus.stats().to_string().into_bytes();
    let FilterSummary {
        users_in,
        removed_short,
        removed_long,
    } = corpus.summary;
    write!(
        stats,
        "\n#users_in     {users_in}\n#removed_short {removed_short}\n#removed_long {removed_long}\n"
    )
    .expect("in-memory write");
    write_file(&dir.join(STATS_FILE), &stats)
}

/// Debug artifacts of prepared data: training-window partitions and the
/// three transition graphs as edge lists.
pub fn write_prepared(dir: &Path, data: &PreparedData) -> Result<()> {
    let mut parts = Vec::new();
    write_partitions(&mut parts, data.partitions.iter().map(|(u, p)| (*u, p))).expect("in-memory write");
    write_file(&dir.join(PARTITIONS_FILE), &parts)?;
    for view in BiasView::ALL {
        let mut buf = Vec::new();
        write_edge_list(&mut buf, &data.graphs[view.index()]).expect("in-memory write");
        write_file(&dir.join(graph_file(view)), &buf)?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(n, l)| l.map(|l| (n + 1, l)).map_err(|e| Error::io(path, e)))
        .collect()
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line: line as u64,
        msg: msg.into(),
    }
}

fn read_indexed(path: &Path, mut each: impl FnMut(usize, &[&str]) -> Result<()>) -> Result<()> {
    for (n, line) in read_lines(path)? {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let idx: usize = fields[0].parse().map_err(|_| parse_err(path, n, "bad index"))?;
        each(idx, &fields[1..]).map_err(|e| match e {
            Error::Shape(msg) => parse_err(path, n, msg),
            other => other,
        })?;
    }
    Ok(())
}

/// Inverse of [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let mut items = Vocab::new();
    let mut categories = Vocab::new();
    let mut item_categories = vec![Vec::new()];
    read_indexed(&dir.join(ITEMS_FILE), |idx, f| {
        let [name, cats] = f else {
            return Err(Error::Shape("expected index, name, categories".into()));
        };
        if items.intern(name) as usize != idx {
            return Err(Error::Shape(format!("item index {idx} out of order")));
        }
        item_categories.push(
            cats.split('|')
                .filter(|c| !c.is_empty())
                .map(|c| categories.intern(c))
                .collect(),
        );
        Ok(())
    })?;
    let mut users = Vocab::new();
    read_indexed(&dir.join(USERS_FILE), |idx, f| {
        let [name] = f else {
            return Err(Error::Shape("expected index, name".into()));
        };
        if users.intern(name) as usize != idx {
            return Err(Error::Shape(format!("user index {idx} out of order")));
        }
        Ok(())
    })?;
    let n_items = items.len();
    let mut sequences = Vec::new();
    read_indexed(&dir.join(SEQUENCES_FILE), |user, f| {
        let [list] = f else {
            return Err(Error::Shape("expected user, items".into()));
        };
        let items = list
            .split(' ')
            .map(|s| match s.parse::<ItemId>() {
                Ok(i) if i >= 1 && i as usize <= n_items => Ok(i),
                _ => Err(Error::Shape(format!("bad item `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(UserSequence {
            user: user as u32,
            items,
        });
        Ok(())
    })?;
    if sequences.is_empty() {
        return Err(Error::NoSequences);
    }
    let summary = FilterSummary {
        users_in: sequences.len(),
        ..Default::default()
    };
    Ok(Corpus {
        users,
        items,
        categories,
        item_categories,
        sequences,
        summary,
    })
}
