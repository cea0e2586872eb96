//! Generated interaction logs for tests, benchmarks and smoke runs.

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::corpus::{parse_csv_events, Corpus};
use crate::error::Result;

pub const CSV_HEADER: &str = "user_id,item_id,timestamp,categories";

/// Successor of `item` on the cycle `1 → 2 → … → n_items → 1`.
pub fn cyclic_successor(item: u32, n_items: u32) -> u32 {
    item % n_items + 1
}

/// Memorization fixture: every user walks the item cycle from a user-specific
/// start, so the next item is a fixed function of the most recent one.
pub fn memorization_csv(n_users: usize, n_items: u32, min_len: usize, max_len: usize) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let span = max_len - min_len + 1;
    for u in 0..n_users {
        let len = min_len + (u * 7) % span;
        let mut item = (u as u32 * 11) % n_items + 1;
        for t in 0..len {
            writeln!(out, "user{u:03},item{item:03},{t},cat{}", item % 5).expect("string write");
            item = cyclic_successor(item, n_items);
        }
    }
    out
}

/// The 50-user, 30-item memorization corpus.
pub fn memorization_corpus() -> Result<Corpus> {
    let text = memorization_csv(50, 30, 8, 12);
    let log = parse_csv_events(text.as_bytes(), "memorization fixture")?;
    Corpus::from_log(&log, 5, None)
}

#[derive(Debug, Clone, Copy)]
pub struct BeautyLikeSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next item follows the previous one's fixed successor.
    pub transition_prob: f64,
    pub seed: u64,
}

impl Default for BeautyLikeSpec {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 800,
            n_categories: 20,
            min_len: 5,
            max_len: 30,
            transition_prob: 0.5,
            seed: 7,
        }
    }
}

/// Sparse review-style log: Zipf item popularity, per-user favourite
/// categories, and a share of fixed item-to-item transitions.
pub fn beauty_like_csv(spec: &BeautyLikeSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_items;
    let categories: Vec<Vec<usize>> = (0..n)
        .map(|_| {
            let first = rng.random_range(0..spec.n_categories);
            if rng.random_bool(0.3) {
                vec![first, rng.random_range(0..spec.n_categories)]
            } else {
                vec![first]
            }
        })
        .collect();
    let successor: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    let zipf = Zipf::new(n as f64, 1.1).expect("valid zipf");
    let draw = |rng: &mut ChaCha8Rng| zipf.sample(rng) as usize - 1;

    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let mut ts = 1_400_000_000i64;
    for u in 0..spec.n_users {
        let favourite = rng.random_range(0..spec.n_categories);
        let len =
            spec.min_len + (rng.random_range(0.0f64..1.0).powi(3) * (spec.max_len - spec.min_len + 1) as f64) as usize;
        let len = len.min(spec.max_len);
        let mut prev = draw(&mut rng);
        for _ in 0..len {
            let item = if rng.random_bool(spec.transition_prob) {
                successor[prev]
            } else {
                // prefer the favourite category among a few popularity draws
                let mut pick = draw(&mut rng);
                for _ in 0..3 {
                    if categories[pick].contains(&favourite) {
                        break;
                    }
                    pick = draw(&mut rng);
                }
                pick
            };
            ts += rng.random_range(1..5000);
            let cats: Vec<String> = categories[item].iter().map(|c| format!("c{c}")).collect();
            writeln!(out, "u{u},i{item},{ts},{}", cats.join("|")).expect("string write");
            prev = item;
        }
    }
    out
}
