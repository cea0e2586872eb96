//! Popularity and subjectivity scoring, and the tri-partition of a window into
//! popularity-biased, subjectivity-biased and debiased short sequences.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use crate::corpus::{ItemId, PaddedWindow};

/// The three bias views, in fusion order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BiasView {
    Popular,
    Subjective,
    Debiased,
}

impl BiasView {
    pub const ALL: [BiasView; 3] = [BiasView::Popular, BiasView::Subjective, BiasView::Debiased];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            BiasView::Popular => "popular",
            BiasView::Subjective => "subjective",
            BiasView::Debiased => "debiased",
        }
    }
}

/// Occurrence count of each item over the given sequences, indexed by item.
/// Items never seen get 0.
pub fn popularity_scores<'a>(sequences: impl IntoIterator<Item = &'a [ItemId]>, n_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_items + 1];
    for seq in sequences {
        for &i in seq {
            counts[i as usize] += 1;
        }
    }
    counts[0] = 0;
    counts
}

/// Exact non-negative rational `num / den`, ordered by value.
#[derive(Debug, Clone, Copy)]
pub struct Subjectivity {
    pub num: u64,
    pub den: u64,
}

impl Subjectivity {
    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl PartialEq for Subjectivity {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Subjectivity {}

impl PartialOrd for Subjectivity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Subjectivity {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num as u128 * other.den as u128).cmp(&(other.num as u128 * self.den as u128))
    }
}

/// Per-category occurrence counts over a window. An item with `m` categories
/// adds one to each of them, once per occurrence.
pub fn category_profile(window_items: &[ItemId], item_categories: &[Vec<u32>]) -> HashMap<u32, u64> {
    let mut profile = HashMap::new();
    for &i in window_items {
        for &c in &item_categories[i as usize] {
            *profile.entry(c).or_insert(0) += 1;
        }
    }
    profile
}

/// Indicator-weighted category overlap between `item` and the window profile,
/// divided by the item's category count.
pub fn subjectivity_score(window_items: &[ItemId], item: ItemId, item_categories: &[Vec<u32>]) -> Subjectivity {
    score_against(
        &category_profile(window_items, item_categories),
        &item_categories[item as usize],
    )
}

fn score_against(profile: &HashMap<u32, u64>, cats: &[u32]) -> Subjectivity {
    let num = cats.iter().map(|c| profile.get(c).copied().unwrap_or(0)).sum();
    Subjectivity {
        num,
        den: cats.len().max(1) as u64,
    }
}

/// Three order-preserving short sequences cut from one window.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BiasPartition {
    pub popular: Vec<ItemId>,
    pub subjective: Vec<ItemId>,
    pub debiased: Vec<ItemId>,
}

impl BiasPartition {
    pub fn view(&self, view: BiasView) -> &[ItemId] {
        match view {
            BiasView::Popular => &self.popular,
            BiasView::Subjective => &self.subjective,
            BiasView::Debiased => &self.debiased,
        }
    }

    pub fn total_len(&self) -> usize {
        self.popular.len() + self.subjective.len() + self.debiased.len()
    }
}

/// Number of top-ranked items selected by fraction `k` out of `n`.
fn top_count(k: f64, n: usize) -> usize {
    // guard against representation error such as 0.3 * 10 = 3.0000000000000004
    let raw = k * n as f64;
    let c = (raw - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// Set of items ranked within the top `count` by descending score, ties
/// broken by smaller item index.
fn top_set<S: PartialOrd>(distinct: &[ItemId], score: impl Fn(ItemId) -> S, count: usize) -> Vec<ItemId> {
    let mut ranked: Vec<(ItemId, S)> = distinct.iter().map(|&i| (i, score(i))).collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(count).map(|(i, _)| i).collect()
}

/// Partition a window's items by popularity rank and subjectivity rank.
///
/// With `n` distinct items, an item is popularity-high when it ranks in the
/// top `ceil(k_pop * n)` by popularity and subjectivity-high likewise with
/// `k_subj`. Popular-view items are popularity-high only, subjective-view
/// items are subjectivity-high only, and everything else is debiased. Each
/// occurrence keeps its position in the source window.
pub fn partition_sequence<P, S>(
    window: &PaddedWindow,
    popularity: impl Fn(ItemId) -> P,
    subjectivity: impl Fn(ItemId) -> S,
    k_pop: f64,
    k_subj: f64,
) -> BiasPartition
where
    P: PartialOrd,
    S: PartialOrd,
{
    let items = window.items();
    let mut distinct: Vec<ItemId> = items.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let n = distinct.len();

    let pop_high = top_set(&distinct, popularity, top_count(k_pop, n));
    let subj_high = top_set(&distinct, subjectivity, top_count(k_subj, n));

    let mut out = BiasPartition::default();
    for &i in items {
        match (pop_high.contains(&i), subj_high.contains(&i)) {
            (true, false) => out.popular.push(i),
            (false, true) => out.subjective.push(i),
            _ => out.debiased.push(i),
        }
    }
    out
}

/// Partition with training-split popularity counts and category subjectivity.
pub fn partition_window(
    window: &PaddedWindow,
    popularity: &[u64],
    item_categories: &[Vec<u32>],
    k_pop: f64,
    k_subj: f64,
) -> BiasPartition {
    let profile = category_profile(window.items(), item_categories);
    partition_sequence(
        window,
        |i| popularity[i as usize],
        |i| score_against(&profile, &item_categories[i as usize]),
        k_pop,
        k_subj,
    )
}

fn write_list(out: &mut impl Write, items: &[ItemId]) -> std::io::Result<()> {
    for (n, i) in items.iter().enumerate() {
        if n > 0 {
            out.write_all(b" ")?;
        }
        write!(out, "{i}")?;
    }
    Ok(())
}

/// Debug dump: one line per user, `user<TAB>popular<TAB>subjective<TAB>debiased`
/// with space-separated item indices.
pub fn write_partitions<'a>(
    out: &mut impl Write,
    rows: impl IntoIterator<Item = (u32, &'a BiasPartition)>,
) -> std::io::Result<()> {
    for (user, p) in rows {
        write!(out, "{user}")?;
        for view in BiasView::ALL {
            out.write_all(b"\t")?;
            write_list(out, p.view(view))?;
        }
        out.write_all(b"\n")?;
    }
    Ok(())
}
