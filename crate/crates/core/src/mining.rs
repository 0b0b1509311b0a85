//! Offline positive-neighbor mining.
//!
//! For each sample the table lists up to `k` other samples with the highest
//! combined (semantic x appearance) score. Only same-class candidates can
//! score above zero, so every listed neighbor shares the query's label.
//!
//! Scores are rounded to `f32` before ranking, which is also the precision the
//! table file stores. Ranking is by score descending, then gallery index
//! ascending. [`mine_bruteforce`] is the reference; [`mine_fast`] must
//! reproduce it exactly.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::binfmt::{self, ByteReader};
use crate::embedding::{
    appearance_from_dot, dot, semantic_similarity, EmbeddingMatrix, LabelVector,
};
use crate::error::{Error, Result};

const TABLE_MAGIC: &[u8; 4] = b"SCNT";

const QUERY_BLOCK: usize = 32;
const GALLERY_BLOCK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: u32,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborTable {
    k: usize,
    entries: Vec<Vec<Neighbor>>,
}

impl NeighborTable {
    pub fn new(k: usize, entries: Vec<Vec<Neighbor>>) -> Result<Self> {
        if let Some(q) = entries.iter().position(|e| e.len() > k) {
            return Err(Error::BadShape(format!(
                "query {q} lists {} neighbors, k = {k}",
                entries[q].len()
            )));
        }
        Ok(Self { k, entries })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of queries (= gallery size the table was mined over).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn neighbors(&self, q: usize) -> &[Neighbor] {
        &self.entries[q]
    }

    pub fn shortfall(&self, q: usize) -> usize {
        self.k - self.entries[q].len()
    }

    pub fn entries(&self) -> &[Vec<Neighbor>] {
        &self.entries
    }

    /// Keeps only the first `k` neighbors of every list. Because lists are
    /// ranked, the result equals mining directly with the smaller `k`.
    pub fn truncated(&self, k: usize) -> Self {
        let k = k.min(self.k);
        Self {
            k,
            entries: self
                .entries
                .iter()
                .map(|e| e[..e.len().min(k)].to_vec())
                .collect(),
        }
    }
}

fn check_inputs(matrix: &EmbeddingMatrix, labels: &LabelVector) -> Result<()> {
    labels.check_aligned(matrix)?;
    if !matrix.is_normalized() {
        return Err(Error::NotNormalized { norm: f64::NAN });
    }
    Ok(())
}

/// `true` when `a` ranks strictly ahead of `b`.
#[inline]
fn ranks_before(a: &Neighbor, b: &Neighbor) -> bool {
    a.score > b.score || (a.score == b.score && a.index < b.index)
}

/// Reference miner: score every pair, sort, truncate.
pub fn mine_bruteforce(
    matrix: &EmbeddingMatrix,
    labels: &LabelVector,
    k: usize,
) -> Result<NeighborTable> {
    check_inputs(matrix, labels)?;
    let n = matrix.rows();
    let mut entries = Vec::with_capacity(n);
    for q in 0..n {
        let mut cands: Vec<Neighbor> = Vec::new();
        for j in 0..n {
            if j == q {
                continue;
            }
            let sim = semantic_similarity(labels.labels[q], labels.labels[j])
                * appearance_from_dot(dot(matrix.row(q), matrix.row(j)));
            let score = sim as f32;
            if score > 0.0 {
                cands.push(Neighbor {
                    index: j as u32,
                    score,
                });
            }
        }
        cands.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then(a.index.cmp(&b.index))
        });
        cands.truncate(k);
        entries.push(cands);
    }
    NeighborTable::new(k, entries)
}

/// Bounded, ranked insertion list.
struct TopK {
    k: usize,
    items: Vec<Neighbor>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            items: Vec::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, cand: Neighbor) {
        if self.items.len() == self.k {
            match self.items.last() {
                Some(last) if ranks_before(&cand, last) => {}
                _ => return,
            }
        }
        let pos = self
            .items
            .iter()
            .position(|it| ranks_before(&cand, it))
            .unwrap_or(self.items.len());
        self.items.insert(pos, cand);
        self.items.truncate(self.k);
    }
}

/// Same result as [`mine_bruteforce`], computed per class with blocked scans
/// over query shards on a `workers`-thread pool.
pub fn mine_fast(
    matrix: &EmbeddingMatrix,
    labels: &LabelVector,
    k: usize,
    workers: usize,
) -> Result<NeighborTable> {
    check_inputs(matrix, labels)?;
    let n = matrix.rows();
    if k == 0 {
        return NeighborTable::new(0, vec![Vec::new(); n]);
    }

    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.labels.iter().enumerate() {
        classes.entry(y).or_default().push(i);
    }
    // (class members, query block start) shards
    let shards: Vec<(&[usize], usize)> = classes
        .values()
        .flat_map(|members| {
            (0..members.len())
                .step_by(QUERY_BLOCK)
                .map(move |s| (members.as_slice(), s))
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;

    let shard_results: Vec<Vec<(usize, Vec<Neighbor>)>> = pool.install(|| {
        shards
            .par_iter()
            .map(|&(members, start)| mine_block(matrix, members, start, k))
            .collect()
    });

    let mut entries = vec![Vec::new(); n];
    for (q, list) in shard_results.into_iter().flatten() {
        entries[q] = list;
    }
    NeighborTable::new(k, entries)
}

fn mine_block(
    matrix: &EmbeddingMatrix,
    members: &[usize],
    start: usize,
    k: usize,
) -> Vec<(usize, Vec<Neighbor>)> {
    let queries = &members[start..(start + QUERY_BLOCK).min(members.len())];
    let mut tops: Vec<TopK> = queries.iter().map(|_| TopK::new(k)).collect();
    for gallery in members.chunks(GALLERY_BLOCK) {
        for (qi, &q) in queries.iter().enumerate() {
            let aq = matrix.row(q);
            let top = &mut tops[qi];
            for &j in gallery {
                if j == q {
                    continue;
                }
                // same class, so the semantic factor is exactly 1
                let score = (1.0 * appearance_from_dot(dot(aq, matrix.row(j)))) as f32;
                if score > 0.0 {
                    top.offer(Neighbor {
                        index: j as u32,
                        score,
                    });
                }
            }
        }
    }
    queries
        .iter()
        .zip(tops)
        .map(|(&q, t)| (q, t.items))
        .collect()
}

pub fn save_table(t: &NeighborTable, path: &Path) -> Result<()> {
    binfmt::write_file(path, |buf| {
        binfmt::put_header(buf, TABLE_MAGIC);
        binfmt::put_u32(buf, t.len(), "table size")?;
        binfmt::put_u32(buf, t.k, "k")?;
        for (q, list) in t.entries.iter().enumerate() {
            let len = u16::try_from(list.len()).map_err(|_| {
                Error::BadShape(format!("query {q}: {} neighbors exceed u16", list.len()))
            })?;
            buf.extend_from_slice(&len.to_le_bytes());
            for nb in list {
                buf.extend_from_slice(&nb.index.to_le_bytes());
                buf.extend_from_slice(&nb.score.to_le_bytes());
            }
        }
        Ok(())
    })
}

pub fn load_table(path: &Path) -> Result<NeighborTable> {
    let bytes = binfmt::read_file(path)?;
    decode_table(&bytes)
}

fn decode_table(bytes: &[u8]) -> Result<NeighborTable> {
    let mut r = ByteReader::new(bytes);
    r.header(TABLE_MAGIC)?;
    let n = r.u32()? as usize;
    let k = r.u32()? as usize;
    // Each query needs at least its length prefix.
    if r.remaining() < n.saturating_mul(2) {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("table header claims {n} queries"),
        )));
    }
    let mut entries = Vec::with_capacity(n);
    for q in 0..n {
        let len = r.u16()? as usize;
        if len > k {
            return Err(Error::Corrupt(format!("query {q} lists {len} > k = {k}")));
        }
        let mut list = Vec::with_capacity(len);
        for _ in 0..len {
            let index = r.u32()?;
            let score = r.f32()?;
            if index as usize >= n {
                return Err(Error::Corrupt(format!("query {q}: neighbor {index} >= {n}")));
            }
            list.push(Neighbor { index, score });
        }
        entries.push(list);
    }
    r.finish()?;
    NeighborTable::new(k, entries)
}
