//! Partition agreement scores and session-count accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Session id of every utterance, in utterance order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition(pub Vec<usize>);

impl Partition {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Size of each session, keyed by id.
    pub fn sizes(&self) -> BTreeMap<usize, usize> {
        let mut out = BTreeMap::new();
        for &s in &self.0 {
            *out.entry(s).or_insert(0) += 1;
        }
        out
    }
}

impl From<Vec<usize>> for Partition {
    fn from(v: Vec<usize>) -> Self {
        Partition(v)
    }
}

/// Contingency counts with dense row (truth) and column (predicted) ids.
struct Table {
    n: usize,
    cells: Vec<Vec<usize>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

fn dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids = BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = ids.len();
            *ids.entry(*l).or_insert(next)
        })
        .collect();
    (out, ids.len())
}

fn table(op: &'static str, truth: &Partition, predicted: &Partition) -> Result<Table> {
    if truth.len() != predicted.len() {
        return Err(Error::domain(
            op,
            format!("partitions cover {} and {} utterances", truth.len(), predicted.len()),
        ));
    }
    if truth.is_empty() {
        return Err(Error::domain(op, "empty partitions"));
    }
    let (t, r) = dense(&truth.0);
    let (p, c) = dense(&predicted.0);
    let mut cells = vec![vec![0usize; c]; r];
    let mut rows = vec![0usize; r];
    let mut cols = vec![0usize; c];
    for (&a, &b) in t.iter().zip(&p) {
        cells[a][b] += 1;
        rows[a] += 1;
        cols[b] += 1;
    }
    Ok(Table {
        n: t.len(),
        cells,
        rows,
        cols,
    })
}

fn entropy(counts: &[usize], n: usize) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information over the arithmetic mean of the two entropies.
pub fn nmi(truth: &Partition, predicted: &Partition) -> Result<f64> {
    let t = table("nmi", truth, predicted)?;
    let n = t.n as f64;
    let (ht, hp) = (entropy(&t.rows, t.n), entropy(&t.cols, t.n));
    if ht == 0.0 || hp == 0.0 {
        // at least one side is a single session
        return Ok(if ht == hp { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (i, row) in t.cells.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (t.rows[i] as f64 * t.cols[j] as f64)).ln();
            }
        }
    }
    Ok((mi / (0.5 * (ht + hp))).clamp(0.0, 1.0))
}

fn pairs(x: usize) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index over pair counts.
pub fn ari(truth: &Partition, predicted: &Partition) -> Result<f64> {
    let t = table("ari", truth, predicted)?;
    if t.n < 2 {
        return Err(Error::domain("ari", "needs at least 2 utterances"));
    }
    let index: f64 = t.cells.iter().flatten().map(|&c| pairs(c)).sum();
    let a: f64 = t.rows.iter().map(|&c| pairs(c)).sum();
    let b: f64 = t.cols.iter().map(|&c| pairs(c)).sum();
    let expected = a * b / pairs(t.n);
    let max = 0.5 * (a + b);
    if max == expected {
        let same = t.rows.len() == t.cols.len() && t.cells.iter().flatten().filter(|&&c| c > 0).count() == t.rows.len();
        return Ok(if same { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

/// Size-weighted best F1 of each true session against any predicted one.
pub fn shen_f(truth: &Partition, predicted: &Partition) -> Result<f64> {
    let t = table("shen_f", truth, predicted)?;
    let mut total = 0.0;
    for (i, row) in t.cells.iter().enumerate() {
        let ni = t.rows[i] as f64;
        let best = row
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(j, &c)| {
                let (p, r) = (c as f64 / t.cols[j] as f64, c as f64 / ni);
                2.0 * p * r / (p + r)
            })
            .fold(0.0, f64::max);
        total += ni / t.n as f64 * best;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KReport {
    pub acc: f64,
    pub mae: f64,
}

pub fn k_report(gold: &[usize], predicted: &[usize]) -> Result<KReport> {
    if gold.len() != predicted.len() || gold.is_empty() {
        return Err(Error::domain(
            "k_report",
            format!("need equal non-empty lists, got {} and {}", gold.len(), predicted.len()),
        ));
    }
    let n = gold.len() as f64;
    let hits = gold.iter().zip(predicted).filter(|(a, b)| a == b).count() as f64;
    let err: f64 = gold.iter().zip(predicted).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(KReport {
        acc: hits / n,
        mae: err / n,
    })
}
