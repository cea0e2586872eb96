//! Interaction ingestion, per-user sequence building, leave-one-out splits
//! and fixed-length windowing.
//!
//! Item and user identifiers are interned into dense 1-based indices; item
//! index 0 is the padding token everywhere downstream.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense item index. `0` is padding.
pub type ItemId = u32;

pub const PAD: ItemId = 0;

/// Category name given to items that carry no category information.
pub const UNKNOWN_CATEGORY: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `user_id,item_id,timestamp,categories` with `|`-separated categories.
    CsvEvents,
    /// `userId,movieId,rating,timestamp`, categories from a `movies.csv` sidecar.
    MovielensRatings,
}

impl std::str::FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv_events" => Ok(DataFormat::CsvEvents),
            "movielens_ratings" => Ok(DataFormat::MovielensRatings),
            other => Err(Error::Config(format!("unknown data format `{other}`"))),
        }
    }
}

/// Bijective string <-> dense index map. Index 0 is reserved.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self {
            names: vec![String::new()],
            lookup: HashMap::new(),
        }
    }

    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&idx) = self.lookup.get(name) {
            return idx;
        }
        let idx = self.names.len() as u32;
        self.names.push(name.to_owned());
        self.lookup.insert(name.to_owned(), idx);
        idx
    }

    pub fn encode(&self, name: &str) -> Option<u32> {
        self.lookup.get(name).copied()
    }

    pub fn decode(&self, idx: u32) -> Option<&str> {
        if idx == 0 {
            return None;
        }
        self.names.get(idx as usize).map(String::as_str)
    }

    /// Number of interned entries, excluding the reserved slot.
    pub fn len(&self) -> usize {
        self.names.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names in index order, starting at index 1.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().skip(1).map(String::as_str)
    }
}

/// One interned event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: ItemId,
    pub timestamp: i64,
}

/// Events in input-file order plus per-item category sets.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub users: Vocab,
    pub items: Vocab,
    pub categories: Vocab,
    /// Indexed by item; entry 0 is unused. Never empty for a real item.
    pub item_categories: Vec<Vec<u32>>,
    pub events: Vec<Interaction>,
}

impl InteractionLog {
    fn new() -> Self {
        Self {
            users: Vocab::new(),
            items: Vocab::new(),
            categories: Vocab::new(),
            item_categories: vec![Vec::new()],
            events: Vec::new(),
        }
    }

    fn push(&mut self, user: &str, item: &str, timestamp: i64, cats: &[&str]) -> u32 {
        let user = self.users.intern(user);
        let item = self.items.intern(item);
        if self.item_categories.len() <= item as usize {
            self.item_categories.resize(item as usize + 1, Vec::new());
        }
        for cat in cats {
            let c = self.categories.intern(cat);
            let set = &mut self.item_categories[item as usize];
            if !set.contains(&c) {
                set.push(c);
            }
        }
        self.events.push(Interaction { user, item, timestamp });
        item
    }

    fn fill_unknown_categories(&mut self) {
        let mut unknown = None;
        for idx in 1..self.item_categories.len() {
            if self.item_categories[idx].is_empty() {
                let c = *unknown.get_or_insert_with(|| self.categories.intern(UNKNOWN_CATEGORY));
                self.item_categories[idx].push(c);
            }
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// Load a log from disk. For `movielens_ratings` a `movies.csv` next to the
/// ratings file is used for genres when present.
pub fn load_interactions(path: &Path, format: DataFormat) -> Result<InteractionLog> {
    match format {
        DataFormat::CsvEvents => parse_csv_events(open(path)?, &path.display().to_string()),
        DataFormat::MovielensRatings => {
            let sidecar = path.with_file_name("movies.csv");
            let movies = sidecar.exists().then_some(sidecar);
            load_movielens(path, movies.as_deref())
        }
    }
}

pub fn load_movielens(ratings: &Path, movies: Option<&Path>) -> Result<InteractionLog> {
    let genres = match movies {
        Some(p) => parse_movies(open(p)?, &p.display().to_string())?,
        None => HashMap::new(),
    };
    parse_movielens(open(ratings)?, &ratings.display().to_string(), &genres)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn check_header(rdr: &mut csv::Reader<impl Read>, source: &str, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| parse_err(source, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().collect();
    if got != expected {
        return Err(parse_err(
            source,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_err(source: &str, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_owned(),
        line,
        msg: msg.into(),
    }
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, name: &str, source: &str) -> Result<&'a str> {
    match rec.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(parse_err(source, record_line(rec), format!("empty {name}"))),
    }
}

fn parse_timestamp(raw: &str, rec: &csv::StringRecord, source: &str) -> Result<i64> {
    raw.parse::<i64>()
        .map_err(|_| parse_err(source, record_line(rec), format!("bad timestamp `{raw}`")))
}

/// Parse the `csv_events` format from any reader.
pub fn parse_csv_events<R: Read>(input: R, source: &str) -> Result<InteractionLog> {
    let mut rdr = reader(input);
    check_header(&mut rdr, source, &["user_id", "item_id", "timestamp", "categories"])?;
    let mut log = InteractionLog::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(source, line, e.to_string())
        })?;
        let user = field(&rec, 0, "user_id", source)?;
        let item = field(&rec, 1, "item_id", source)?;
        let ts = parse_timestamp(field(&rec, 2, "timestamp", source)?, &rec, source)?;
        let cats: Vec<&str> = rec
            .get(3)
            .unwrap_or("")
            .split('|')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .collect();
        log.push(user, item, ts, &cats);
    }
    if log.events.is_empty() {
        return Err(Error::EmptyLog);
    }
    log.fill_unknown_categories();
    Ok(log)
}

/// Parse a MovieLens `movies.csv` into movieId -> genres.
pub fn parse_movies<R: Read>(input: R, source: &str) -> Result<HashMap<String, Vec<String>>> {
    let mut rdr = reader(input);
    check_header(&mut rdr, source, &["movieId", "title", "genres"])?;
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(source, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let id = field(&rec, 0, "movieId", source)?;
        let genres = rec
            .get(2)
            .unwrap_or("")
            .split('|')
            .map(str::trim)
            .filter(|g| !g.is_empty())
            .map(str::to_owned)
            .collect();
        out.insert(id.to_owned(), genres);
    }
    Ok(out)
}

pub fn parse_movielens<R: Read>(
    input: R,
    source: &str,
    genres: &HashMap<String, Vec<String>>,
) -> Result<InteractionLog> {
    let mut rdr = reader(input);
    check_header(&mut rdr, source, &["userId", "movieId", "rating", "timestamp"])?;
    let mut log = InteractionLog::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(source, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let user = field(&rec, 0, "userId", source)?;
        let item = field(&rec, 1, "movieId", source)?;
        let rating = field(&rec, 2, "rating", source)?;
        if rating.parse::<f64>().is_err() {
            return Err(parse_err(source, record_line(&rec), format!("bad rating `{rating}`")));
        }
        let ts = parse_timestamp(field(&rec, 3, "timestamp", source)?, &rec, source)?;
        let cats: Vec<&str> = genres
            .get(item)
            .map(|g| g.iter().map(String::as_str).collect())
            .unwrap_or_default();
        log.push(user, item, ts, &cats);
    }
    if log.events.is_empty() {
        return Err(Error::EmptyLog);
    }
    log.fill_unknown_categories();
    Ok(log)
}

/// Chronological item list of one user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: u32,
    pub items: Vec<ItemId>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// How many users each filter removed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub users_in: usize,
    pub removed_short: usize,
    pub removed_long: usize,
}

/// Group events per user in timestamp order (file order on ties) and drop
/// users outside `[min_len, max_keep]`. Output is sorted by user index.
pub fn build_sequences(log: &InteractionLog, min_len: usize, max_keep: Option<usize>) -> Result<Vec<UserSequence>> {
    build_sequences_with_summary(log, min_len, max_keep).map(|(s, _)| s)
}

pub fn build_sequences_with_summary(
    log: &InteractionLog,
    min_len: usize,
    max_keep: Option<usize>,
) -> Result<(Vec<UserSequence>, FilterSummary)> {
    if min_len < 2 {
        return Err(Error::Config(format!("min_len must be at least 2, got {min_len}")));
    }
    let mut per_user: Vec<Vec<(i64, ItemId)>> = vec![Vec::new(); log.users.len() + 1];
    for ev in &log.events {
        per_user[ev.user as usize].push((ev.timestamp, ev.item));
    }
    let mut summary = FilterSummary::default();
    let mut out = Vec::new();
    for (user, mut events) in per_user.into_iter().enumerate().skip(1) {
        if events.is_empty() {
            continue;
        }
        summary.users_in += 1;
        // stable: equal timestamps keep file order
        events.sort_by_key(|&(ts, _)| ts);
        if events.len() < min_len {
            summary.removed_short += 1;
            continue;
        }
        if max_keep.is_some_and(|m| events.len() > m) {
            summary.removed_long += 1;
            continue;
        }
        out.push(UserSequence {
            user: user as u32,
            items: events.into_iter().map(|(_, i)| i).collect(),
        });
    }
    if out.is_empty() {
        return Err(Error::NoSequences);
    }
    Ok((out, summary))
}

/// Leave-one-out split of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<ItemId>,
    pub valid: ItemId,
    pub test: ItemId,
}

pub fn split_leave_one_out(seq: &UserSequence) -> Result<Split> {
    let t = seq.items.len();
    if t < 3 {
        return Err(Error::TooShort { needed: 3, got: t });
    }
    Ok(Split {
        train: seq.items[..t - 2].to_vec(),
        valid: seq.items[t - 2],
        test: seq.items[t - 1],
    })
}

/// Left-padded window of exactly `L` slots; the newest item sits in the last slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PaddedWindow {
    pub slots: Vec<ItemId>,
    pub valid_len: usize,
}

impl PaddedWindow {
    /// Non-padding items in order.
    pub fn items(&self) -> &[ItemId] {
        &self.slots[self.slots.len() - self.valid_len..]
    }

    pub fn is_empty(&self) -> bool {
        self.valid_len == 0
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }
}

pub fn pad_truncate(items: &[ItemId], max_len: usize) -> PaddedWindow {
    let keep = items.len().min(max_len);
    let mut slots = vec![PAD; max_len - keep];
    slots.extend_from_slice(&items[items.len() - keep..]);
    PaddedWindow { slots, valid_len: keep }
}

/// Dataset statistics in the usual users/items/interactions layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub avg_length: f64,
    pub density: f64,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "#users        {}", self.users)?;
        writeln!(f, "#items        {}", self.items)?;
        writeln!(f, "#interactions {}", self.interactions)?;
        writeln!(f, "#avg.length   {:.2}", self.avg_length)?;
        write!(f, "#density      {:.2e}", self.density)
    }
}

/// Filtered corpus re-indexed so that only retained items and users remain.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub users: Vocab,
    pub items: Vocab,
    pub categories: Vocab,
    pub item_categories: Vec<Vec<u32>>,
    pub sequences: Vec<UserSequence>,
    pub summary: FilterSummary,
}

impl Corpus {
    pub fn from_log(log: &InteractionLog, min_len: usize, max_keep: Option<usize>) -> Result<Self> {
        let (seqs, summary) = build_sequences_with_summary(log, min_len, max_keep)?;

        let mut keep_item = vec![false; log.items.len() + 1];
        for s in &seqs {
            for &i in &s.items {
                keep_item[i as usize] = true;
            }
        }
        let mut items = Vocab::new();
        let mut remap = vec![PAD; log.items.len() + 1];
        let mut item_categories = vec![Vec::new()];
        for (old, name) in log.items.names().enumerate() {
            let old = old + 1;
            if keep_item[old] {
                remap[old] = items.intern(name);
                item_categories.push(log.item_categories[old].clone());
            }
        }

        let mut users = Vocab::new();
        let sequences = seqs
            .into_iter()
            .map(|s| {
                let name = log.users.decode(s.user).expect("user interned");
                UserSequence {
                    user: users.intern(name),
                    items: s.items.iter().map(|&i| remap[i as usize]).collect(),
                }
            })
            .collect();

        Ok(Self {
            users,
            items,
            categories: log.categories.clone(),
            item_categories,
            sequences,
            summary,
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn stats(&self) -> CorpusStats {
        let users = self.sequences.len();
        let items = self.items.len();
        let interactions: usize = self.sequences.iter().map(UserSequence::len).sum();
        CorpusStats {
            users,
            items,
            interactions,
            avg_length: interactions as f64 / users as f64,
            density: interactions as f64 / (users as f64 * items as f64),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(csv: &str) -> InteractionLog {
        parse_csv_events(csv.as_bytes(), "fixture.csv").unwrap()
    }

    #[test]
    fn three_row_csv_interns_two_users() {
        let log = log_from("user_id,item_id,timestamp,categories\nu1,a,1,x|y\nu1,b,2,\nu2,a,3,y\n");
        assert_eq!(log.events.len(), 3);
        assert_eq!(log.users.len(), 2);
        assert_eq!(log.items.len(), 2);
        assert_eq!(log.items.encode("a"), Some(1));
        assert_eq!(log.items.encode("b"), Some(2));
        // b had no categories
        let unknown = log.categories.encode(UNKNOWN_CATEGORY).unwrap();
        assert_eq!(log.item_categories[2], vec![unknown]);
        assert_eq!(log.item_categories[1].len(), 2);
    }

    #[test]
    fn empty_item_id_names_the_line() {
        let err = parse_csv_events(
            "user_id,item_id,timestamp,categories\nu1,a,1,\nu1,,2,\n".as_bytes(),
            "f.csv",
        )
        .unwrap_err();
        match err {
            Error::Parse { line, ref msg, .. } => {
                assert_eq!(line, 3);
                assert!(msg.contains("item_id"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty_log() {
        let err = parse_csv_events("user_id,item_id,timestamp,categories\n".as_bytes(), "f").unwrap_err();
        assert!(matches!(err, Error::EmptyLog));
    }

    #[test]
    fn length_filters() {
        let mut csv = String::from("user_id,item_id,timestamp,categories\n");
        for t in 0..4 {
            csv.push_str(&format!("short,i{t},{t},\n"));
        }
        for t in 0..5 {
            csv.push_str(&format!("exact,i{t},{t},\n"));
        }
        for t in 0..60 {
            csv.push_str(&format!("long,i{t},{t},\n"));
        }
        let log = log_from(&csv);
        let (seqs, summary) = build_sequences_with_summary(&log, 5, Some(50)).unwrap();
        assert_eq!(seqs.len(), 1);
        assert_eq!(log.users.decode(seqs[0].user), Some("exact"));
        assert_eq!(seqs[0].len(), 5);
        assert_eq!(summary.removed_short, 1);
        assert_eq!(summary.removed_long, 1);
        // without the cap the long user stays, whole
        let seqs = build_sequences(&log, 5, None).unwrap();
        assert_eq!(seqs.iter().map(UserSequence::len).collect::<Vec<_>>(), vec![5, 60]);
    }

    #[test]
    fn everything_filtered_is_an_error() {
        let log = log_from("user_id,item_id,timestamp,categories\nu,a,1,\n");
        assert!(matches!(build_sequences(&log, 5, None), Err(Error::NoSequences)));
        assert!(matches!(build_sequences(&log, 1, None), Err(Error::Config(_))));
    }

    #[test]
    fn equal_timestamps_keep_file_order() {
        let log = log_from("user_id,item_id,timestamp,categories\nu,c,5,\nu,a,5,\nu,b,1,\n");
        let seqs = build_sequences(&log, 2, None).unwrap();
        let names: Vec<_> = seqs[0].items.iter().map(|&i| log.items.decode(i).unwrap()).collect();
        assert_eq!(names, ["b", "c", "a"]);
    }

    #[test]
    fn leave_one_out() {
        let seq = UserSequence {
            user: 1,
            items: vec![1, 2, 3, 4, 5],
        };
        let s = split_leave_one_out(&seq).unwrap();
        assert_eq!((s.train.as_slice(), s.valid, s.test), (&[1, 2, 3][..], 4, 5));
        let s = split_leave_one_out(&UserSequence {
            user: 1,
            items: vec![7, 8, 9],
        })
        .unwrap();
        assert_eq!((s.train.as_slice(), s.valid, s.test), (&[7][..], 8, 9));
        assert!(split_leave_one_out(&UserSequence {
            user: 1,
            items: vec![1, 2],
        })
        .is_err());
    }

    #[test]
    fn padding_and_truncation() {
        let w = pad_truncate(&[1, 2, 3], 5);
        assert_eq!(w.slots, vec![0, 0, 1, 2, 3]);
        assert_eq!(w.valid_len, 3);
        assert_eq!(w.items(), &[1, 2, 3]);

        let long: Vec<ItemId> = (1..=60).collect();
        let w = pad_truncate(&long, 50);
        assert_eq!(w.slots, (11..=60).collect::<Vec<_>>());
        assert_eq!(w.valid_len, 50);

        let w = pad_truncate(&[], 5);
        assert_eq!(w.slots, vec![0; 5]);
        assert!(w.is_empty());
    }

    #[test]
    fn corpus_compacts_vocabulary() {
        let mut csv = String::from("user_id,item_id,timestamp,categories\n");
        csv.push_str("drop,z,0,\n");
        for t in 0..5 {
            csv.push_str(&format!("keep,i{t},{t},c{t}\n"));
        }
        let corpus = Corpus::from_log(&log_from(&csv), 5, None).unwrap();
        assert_eq!(corpus.n_items(), 5);
        assert_eq!(corpus.items.decode(1), Some("i0"));
        assert_eq!(corpus.sequences[0].items, vec![1, 2, 3, 4, 5]);
        assert_eq!(corpus.item_categories.len(), 6);
        let stats = corpus.stats();
        assert_eq!(stats.interactions, 5);
        assert!((stats.density - 5.0 / 5.0).abs() < 1e-15);
    }
}
