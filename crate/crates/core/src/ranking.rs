//! Ranking tables, rank aggregation across models and retrieval metrics.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoders::rank_candidates;
use crate::{Error, Result};

/// One scored turn. `turn` is the 0-based position in the dialog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub dialog_id: u64,
    pub turn: usize,
    /// 1-based rank of every candidate.
    pub ranks: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    pub gt: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance: Option<Vec<f64>>,
}

impl RankingRow {
    pub fn from_scores(dialog_id: u64, turn: usize, scores: Vec<f64>, gt: usize, relevance: Option<Vec<f64>>) -> Result<Self> {
        let ranks = rank_candidates(&scores)?;
        let row = Self { dialog_id, turn, ranks, scores: Some(scores), gt, relevance };
        row.validate()?;
        Ok(row)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ranks.len();
        let here = || format!("dialog {} turn {}", self.dialog_id, self.turn);
        if n == 0 {
            return Err(Error::Data(format!("{}: no candidates", here())));
        }
        let mut seen = vec![false; n];
        for &r in &self.ranks {
            if r == 0 || r > n || std::mem::replace(&mut seen[r - 1], true) {
                return Err(Error::Data(format!("{}: ranks are not a permutation of 1..{n}", here())));
            }
        }
        if self.gt >= n {
            return Err(Error::Data(format!("{}: gt index {} out of range", here(), self.gt)));
        }
        if self.scores.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::Data(format!("{}: scores length differs from ranks", here())));
        }
        if let Some(rel) = &self.relevance {
            if rel.len() != n {
                return Err(Error::Data(format!("{}: relevance length differs from ranks", here())));
            }
            if rel.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::Data(format!("{}: relevance outside [0, 1]", here())));
            }
        }
        Ok(())
    }

    pub fn gt_rank(&self) -> usize {
        self.ranks[self.gt]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
}

impl RankingTable {
    pub fn new(rows: Vec<RankingRow>) -> Result<Self> {
        for r in &rows {
            r.validate()?;
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn has_relevance(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.relevance.is_some())
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: RankingRow =
                serde_json::from_str(line).map_err(|e| Error::Format(format!("ranking line {}: {e}", i + 1)))?;
            rows.push(row);
        }
        Self::new(rows)
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::parse_jsonl(&text)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("rows always serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
    }
}

fn check_aligned(tables: &[&RankingTable]) -> Result<()> {
    let first = tables.first().ok_or_else(|| Error::Invalid("aggregation needs at least one table".into()))?;
    for (k, t) in tables.iter().enumerate().skip(1) {
        if t.len() != first.len() {
            return Err(Error::Data(format!("table {k} has {} turns, table 0 has {}", t.len(), first.len())));
        }
        for (a, b) in first.rows.iter().zip(&t.rows) {
            if (a.dialog_id, a.turn) != (b.dialog_id, b.turn) {
                return Err(Error::Data(format!(
                    "table {k} is misaligned: dialog {} turn {} against dialog {} turn {}",
                    b.dialog_id, b.turn, a.dialog_id, a.turn
                )));
            }
            if a.ranks.len() != b.ranks.len() || a.gt != b.gt {
                return Err(Error::Data(format!(
                    "table {k} disagrees on candidates at dialog {} turn {}",
                    a.dialog_id, a.turn
                )));
            }
        }
    }
    Ok(())
}

/// Ranks candidates by `cmp` (less = better), ties to the lower index.
fn rerank(n: usize, mut cmp: impl FnMut(usize, usize) -> Ordering) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(a, b).then(a.cmp(&b)));
    let mut ranks = vec![0; n];
    for (pos, &c) in order.iter().enumerate() {
        ranks[c] = pos + 1;
    }
    ranks
}

fn aggregate(tables: &[&RankingTable], per_turn: impl Fn(&[&RankingRow]) -> Vec<usize>) -> Result<RankingTable> {
    check_aligned(tables)?;
    let rows = (0..tables[0].len())
        .map(|i| {
            let group: Vec<&RankingRow> = tables.iter().map(|t| &t.rows[i]).collect();
            let base = group[0];
            RankingRow {
                dialog_id: base.dialog_id,
                turn: base.turn,
                ranks: per_turn(&group),
                scores: None,
                gt: base.gt,
                relevance: base.relevance.clone(),
            }
        })
        .collect();
    Ok(RankingTable { rows })
}

/// Re-ranks by ascending mean rank across the tables.
pub fn aggregate_average(tables: &[&RankingTable]) -> Result<RankingTable> {
    aggregate(tables, |group| {
        // Same K for every candidate, so rank sums order exactly like means.
        let sums: Vec<usize> = (0..group[0].ranks.len()).map(|c| group.iter().map(|r| r.ranks[c]).sum()).collect();
        rerank(sums.len(), |a, b| sums[a].cmp(&sums[b]))
    })
}

/// Re-ranks by descending mean reciprocal rank across the tables.
pub fn aggregate_reciprocal(tables: &[&RankingTable]) -> Result<RankingTable> {
    aggregate(tables, |group| {
        let votes: Vec<Vec<usize>> =
            (0..group[0].ranks.len()).map(|c| group.iter().map(|r| r.ranks[c]).collect()).collect();
        let sums: Vec<Option<Fraction>> = votes.iter().map(|v| reciprocal_sum(v)).collect();
        rerank(votes.len(), |a, b| match (sums[a], sums[b]) {
            (Some(x), Some(y)) => y.cmp_exact(x).unwrap_or_else(|| float_reciprocal_cmp(&votes[b], &votes[a])),
            _ => float_reciprocal_cmp(&votes[b], &votes[a]),
        })
    })
}

/// Non-negative rational `num / den`.
#[derive(Clone, Copy, Debug)]
struct Fraction {
    num: u128,
    den: u128,
}

impl Fraction {
    fn cmp_exact(self, other: Fraction) -> Option<Ordering> {
        Some(self.num.checked_mul(other.den)?.cmp(&other.num.checked_mul(self.den)?))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// `Σ 1/r` as an exact fraction, `None` on overflow.
fn reciprocal_sum(ranks: &[usize]) -> Option<Fraction> {
    let mut acc = Fraction { num: 0, den: 1 };
    for &r in ranks {
        let r = r as u128;
        let den = acc.den.checked_mul(r)?;
        let num = acc.num.checked_mul(r)?.checked_add(acc.den)?;
        let g = gcd(num, den);
        acc = Fraction { num: num / g, den: den / g };
    }
    Some(acc)
}

fn float_reciprocal_cmp(a: &[usize], b: &[usize]) -> Ordering {
    // Sorting first makes the sum independent of model order.
    let sum = |v: &[usize]| {
        let mut s: Vec<usize> = v.to_vec();
        s.sort_unstable();
        s.iter().map(|&r| 1.0 / r as f64).sum::<f64>()
    };
    sum(a).total_cmp(&sum(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub turns: usize,
    pub mrr: f64,
    #[serde(rename = "r@1")]
    pub r_at_1: f64,
    #[serde(rename = "r@5")]
    pub r_at_5: f64,
    #[serde(rename = "r@10")]
    pub r_at_10: f64,
    pub mean_rank: f64,
    /// Present only when every turn carries dense relevance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ndcg: Option<f64>,
}

impl Metrics {
    /// The value early stopping watches: NDCG when available, else MRR.
    pub fn selection_score(&self) -> f64 {
        self.ndcg.unwrap_or(self.mrr)
    }
}

pub fn recall_at(table: &RankingTable, k: usize) -> Result<f64> {
    nonempty(table)?;
    let hits = table.rows.iter().filter(|r| r.gt_rank() <= k).count();
    Ok(hits as f64 / table.len() as f64)
}

fn nonempty(table: &RankingTable) -> Result<()> {
    if table.is_empty() {
        Err(Error::Invalid("metrics of an empty ranking table".into()))
    } else {
        Ok(())
    }
}

/// NDCG of one turn, truncated at the number of relevant candidates.
pub fn ndcg_turn(ranks: &[usize], relevance: &[f64]) -> f64 {
    let k_rel = relevance.iter().filter(|&&r| r > 0.0).count();
    if k_rel == 0 {
        return 0.0;
    }
    let mut by_rank = vec![0.0; ranks.len()];
    for (c, &r) in ranks.iter().enumerate() {
        by_rank[r - 1] = relevance[c];
    }
    let mut ideal = relevance.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let dcg = |rels: &[f64]| -> f64 {
        rels[..k_rel].iter().enumerate().map(|(i, rel)| rel / ((i + 2) as f64).log2()).sum()
    };
    dcg(&by_rank) / dcg(&ideal)
}

/// Mean NDCG over turns; fails if any turn lacks relevance.
pub fn ndcg(table: &RankingTable) -> Result<f64> {
    nonempty(table)?;
    let mut total = 0.0;
    for r in &table.rows {
        let rel = r.relevance.as_ref().ok_or_else(|| {
            Error::Invalid(format!("dialog {} turn {} has no relevance scores", r.dialog_id, r.turn))
        })?;
        total += ndcg_turn(&r.ranks, rel);
    }
    Ok(total / table.len() as f64)
}

pub fn metrics(table: &RankingTable) -> Result<Metrics> {
    nonempty(table)?;
    let n = table.len() as f64;
    let mrr = table.rows.iter().map(|r| 1.0 / r.gt_rank() as f64).sum::<f64>() / n;
    let mean_rank = table.rows.iter().map(|r| r.gt_rank() as f64).sum::<f64>() / n;
    Ok(Metrics {
        turns: table.len(),
        mrr,
        r_at_1: recall_at(table, 1)?,
        r_at_5: recall_at(table, 5)?,
        r_at_10: recall_at(table, 10)?,
        mean_rank,
        ndcg: if table.has_relevance() { Some(ndcg(table)?) } else { None },
    })
}
