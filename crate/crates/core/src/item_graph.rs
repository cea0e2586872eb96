//! Cross-user item-transition graphs, symmetric normalization with self-loops,
//! and activation-free multi-layer propagation of item embeddings.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use crate::corpus::{ItemId, PAD};
use crate::error::{Error, Result};
use crate::numeric::{CsrMatrix, Tape, Tensor, Var};

/// Symmetric transition counts between items `1..=n_items`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionGraph {
    pub n_items: usize,
    pub entries: BTreeMap<(ItemId, ItemId), u64>,
}

impl TransitionGraph {
    pub fn weight(&self, i: ItemId, j: ItemId) -> u64 {
        self.entries.get(&(i, j)).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Count adjacent pairs in every sequence. Each pair at positions `p`, `p+1`
/// adds one to `(i_p, i_{p+1})` and one to `(i_{p+1}, i_p)`.
pub fn build_adjacency<'a>(
    sequences: impl IntoIterator<Item = &'a [ItemId]>,
    n_items: usize,
) -> Result<TransitionGraph> {
    let mut entries = BTreeMap::new();
    for seq in sequences {
        if let Some(&bad) = seq.iter().find(|&&i| i == PAD || i as usize > n_items) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                max: n_items,
            });
        }
        for pair in seq.windows(2) {
            *entries.entry((pair[0], pair[1])).or_insert(0) += 1;
            *entries.entry((pair[1], pair[0])).or_insert(0) += 1;
        }
    }
    Ok(TransitionGraph { n_items, entries })
}

/// `D^{-1/2} (A + I) D^{-1/2}` over rows/cols `0..=n_items`; the padding
/// row and column stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedItemGraph {
    pub n_items: usize,
    pub matrix: Arc<CsrMatrix>,
}

impl NormalizedItemGraph {
    pub fn get(&self, i: ItemId, j: ItemId) -> f64 {
        self.matrix.get(i as usize, j as usize)
    }
}

pub fn normalize(graph: &TransitionGraph) -> NormalizedItemGraph {
    let n = graph.n_items;
    let mut with_loops: BTreeMap<(ItemId, ItemId), f64> = graph.entries.iter().map(|(&k, &w)| (k, w as f64)).collect();
    for i in 1..=n as ItemId {
        *with_loops.entry((i, i)).or_insert(0.0) += 1.0;
    }
    let mut degree = vec![0.0; n + 1];
    for (&(i, _), &w) in &with_loops {
        degree[i as usize] += w;
    }
    let triplets = with_loops.into_iter().map(|((i, j), w)| {
        (
            i as usize,
            j as usize,
            w / (degree[i as usize] * degree[j as usize]).sqrt(),
        )
    });
    let matrix =
        CsrMatrix::from_sorted_triplets(n + 1, n + 1, triplets).expect("BTreeMap keys are sorted and in range");
    NormalizedItemGraph {
        n_items: n,
        matrix: Arc::new(matrix),
    }
}

/// Record `(Σ_{l=1..layers} Ŝ^l · x0) / layers` on the tape.
pub fn propagate_on(tape: &mut Tape, x0: Var, graph: &NormalizedItemGraph, layers: usize) -> Result<Var> {
    if layers == 0 {
        return Err(Error::Config("graph propagation needs at least one layer".into()));
    }
    if tape.value(x0).rows() != graph.n_items + 1 {
        return Err(Error::Shape(format!(
            "embedding table has {} rows, graph expects {}",
            tape.value(x0).rows(),
            graph.n_items + 1
        )));
    }
    let mut x = x0;
    let mut outs = Vec::with_capacity(layers);
    for _ in 0..layers {
        x = tape.spmm(graph.matrix.clone(), x)?;
        outs.push(x);
    }
    if layers == 1 {
        return Ok(outs[0]);
    }
    tape.mean(&outs)
}

/// Plain evaluation of [`propagate_on`]. `x0` is `(n_items + 1) × d` with the
/// padding row first; the padding row of the result is zero.
pub fn propagate(x0: &Tensor, graph: &NormalizedItemGraph, layers: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(x0.clone());
    let out = propagate_on(&mut tape, x, graph, layers)?;
    Ok(tape.value(out).clone())
}

/// Edge list export: one `i j weight` line per stored entry, both directions.
pub fn write_edge_list(out: &mut impl Write, graph: &TransitionGraph) -> std::io::Result<()> {
    writeln!(out, "# n_items {}", graph.n_items)?;
    for (&(i, j), &w) in &graph.entries {
        writeln!(out, "{i} {j} {w}")?;
    }
    Ok(())
}

pub fn read_edge_list(input: impl BufRead, source: &str) -> Result<TransitionGraph> {
    let err = |line: usize, msg: String| Error::Parse {
        path: source.to_owned(),
        line: line as u64,
        msg,
    };
    let mut n_items = None;
    let mut entries = BTreeMap::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line_no = n + 1;
        if let Some(rest) = line.strip_prefix("# n_items ") {
            n_items = Some(rest.trim().parse::<usize>().map_err(|e| err(line_no, e.to_string()))?);
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [i, j, w] = fields.as_slice() else {
            return Err(err(line_no, format!("expected `i j weight`, got `{line}`")));
        };
        let i: ItemId = i.parse().map_err(|_| err(line_no, format!("bad index `{i}`")))?;
        let j: ItemId = j.parse().map_err(|_| err(line_no, format!("bad index `{j}`")))?;
        let w: u64 = w.parse().map_err(|_| err(line_no, format!("bad weight `{w}`")))?;
        entries.insert((i, j), w);
    }
    let n_items = n_items.ok_or_else(|| err(1, "missing `# n_items` header".into()))?;
    if let Some(&(i, j)) = entries
        .keys()
        .find(|&&(i, j)| i == PAD || j == PAD || i as usize > n_items || j as usize > n_items)
    {
        return Err(Error::IndexOutOfRange {
            index: i.max(j) as usize,
            max: n_items,
        });
    }
    let graph = TransitionGraph { n_items, entries };
    if graph.entries.iter().any(|(&(i, j), &w)| graph.weight(j, i) != w) {
        return Err(err(0, "edge list is not symmetric".into()));
    }
    Ok(graph)
}
