//! Offline metrics: MSE, MAE, XAUC, within-group XAUC, PCOC and LT_N.
//!
//! XAUC counts, over all pairs with `y_i > y_j`, those with `p_i > p_j`.
//! Label ties leave the denominator; prediction ties score zero. Counting is
//! exact integer arithmetic in O(n log n) with a Fenwick tree.

use std::collections::BTreeSet;
use std::io::{self, Write};

use thiserror::Error;

use crate::datamodel::{format_real, Dataset};
use crate::pdq::PageGroupSpec;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {preds} predictions vs {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("need at least {needed} examples, got {got}")]
    TooFewExamples { needed: usize, got: usize },
    #[error("all labels are tied: no ordered pair")]
    AllLabelsTied,
    #[error("label mass is zero")]
    ZeroLabelMass,
    #[error("cohort is empty")]
    EmptyCohort,
    #[error("window must be at least 1 day")]
    InvalidWindow,
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

fn check_pair(preds: &[f64], labels: &[f64], needed: usize) -> Result<(), MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.len() < needed {
        return Err(MetricsError::TooFewExamples { needed, got: preds.len() });
    }
    if let Some(k) = preds.iter().chain(labels).position(|x| !x.is_finite()) {
        return Err(MetricsError::NonFinite(k % preds.len()));
    }
    Ok(())
}

pub fn mse(preds: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_pair(preds, labels, 1)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / preds.len() as f64)
}

pub fn mae(preds: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_pair(preds, labels, 1)?;
    Ok(preds.iter().zip(labels).map(|(p, y)| (p - y).abs()).sum::<f64>() / preds.len() as f64)
}

struct Fenwick(Vec<u64>);

impl Fenwick {
    fn new(n: usize) -> Self {
        Self(vec![0; n + 1])
    }

    fn add(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks strictly below `rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// `(concordant pairs, label-ordered pairs)`.
pub fn xauc_counts(preds: &[f64], labels: &[f64]) -> Result<(u64, u64), MetricsError> {
    check_pair(preds, labels, 2)?;
    let mut sorted_preds = preds.to_vec();
    sorted_preds.sort_by(f64::total_cmp);
    sorted_preds.dedup();
    let rank = |p: f64| sorted_preds.partition_point(|&q| q < p);

    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by(|&a, &b| labels[a].total_cmp(&labels[b]));
    let mut tree = Fenwick::new(sorted_preds.len());
    let (mut concordant, mut ordered, mut inserted) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && labels[order[end]] == labels[order[start]] {
            end += 1;
        }
        for &k in &order[start..end] {
            concordant += tree.below(rank(preds[k]));
            ordered += inserted;
        }
        for &k in &order[start..end] {
            tree.add(rank(preds[k]));
        }
        inserted += (end - start) as u64;
        start = end;
    }
    Ok((concordant, ordered))
}

pub fn xauc(preds: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    let (c, n) = xauc_counts(preds, labels)?;
    if n == 0 {
        return Err(MetricsError::AllLabelsTied);
    }
    Ok(c as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupXauc {
    pub group: usize,
    pub label: String,
    pub examples: usize,
    /// Label-ordered pairs inside the group.
    pub pairs: u64,
    pub xauc: Option<f64>,
    pub note: Option<String>,
}

/// XAUC restricted to pairs inside one group. Groups without an ordered pair
/// are reported with `xauc = None` and a note.
pub fn xauc_grouped(
    preds: &[f64],
    labels: &[f64],
    groups: &[usize],
    group_labels: &[String],
) -> Result<Vec<GroupXauc>, MetricsError> {
    check_pair(preds, labels, 0)?;
    if groups.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: groups.len() });
    }
    let mut out = Vec::with_capacity(group_labels.len());
    for (g, name) in group_labels.iter().enumerate() {
        let (p, y): (Vec<f64>, Vec<f64>) =
            groups.iter().zip(preds.iter().zip(labels)).filter(|(k, _)| **k == g).map(|(_, (p, y))| (*p, *y)).unzip();
        let mut row = GroupXauc { group: g, label: name.clone(), examples: p.len(), pairs: 0, xauc: None, note: None };
        if p.len() < 2 {
            row.note = Some(format!("skipped: {} example(s)", p.len()));
        } else {
            let (c, n) = xauc_counts(&p, &y)?;
            row.pairs = n;
            if n == 0 {
                row.note = Some("skipped: all labels tied".into());
            } else {
                row.xauc = Some(c as f64 / n as f64);
            }
        }
        out.push(row);
    }
    Ok(out)
}

/// Page group of every record, in [`Dataset::indexed_records`] order.
pub fn page_groups_of(dataset: &Dataset, spec: &PageGroupSpec) -> Vec<usize> {
    dataset.records().map(|r| spec.group_of(r.page_index)).collect()
}

pub fn group_names(spec: &PageGroupSpec) -> Vec<String> {
    (0..spec.num_groups()).map(|g| spec.label(g)).collect()
}

pub fn pcoc(preds: &[f64], labels: &[f64]) -> Result<f64, MetricsError> {
    check_pair(preds, labels, 1)?;
    let mass: f64 = labels.iter().sum();
    if mass == 0.0 {
        return Err(MetricsError::ZeroLabelMass);
    }
    Ok(preds.iter().sum::<f64>() / mass)
}

/// PCOC inside `buckets` equal-frequency buckets of ascending prediction.
/// Buckets without label mass yield `None`.
pub fn pcoc_buckets(preds: &[f64], labels: &[f64], buckets: usize) -> Result<Vec<Option<f64>>, MetricsError> {
    check_pair(preds, labels, buckets.max(1))?;
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]).then(a.cmp(&b)));
    let n = order.len();
    Ok((0..buckets)
        .map(|b| {
            let chunk = &order[b * n / buckets..(b + 1) * n / buckets];
            let (p, y) = chunk.iter().fold((0.0, 0.0), |(p, y), &k| (p + preds[k], y + labels[k]));
            (y > 0.0).then(|| p / y)
        })
        .collect())
}

/// Fraction of the cohort with a revisit on any day in `(anchor, anchor + n]`.
/// `revisit_days[u]` lists the days user `u` revisited.
pub fn lt_n_from_days(revisit_days: &[Vec<u32>], anchor: u32, n: u32) -> Result<f64, MetricsError> {
    if n == 0 {
        return Err(MetricsError::InvalidWindow);
    }
    if revisit_days.is_empty() {
        return Err(MetricsError::EmptyCohort);
    }
    let hit = revisit_days.iter().filter(|days| days.iter().any(|&d| d > anchor && d <= anchor + n)).count();
    Ok(hit as f64 / revisit_days.len() as f64)
}

/// [`lt_n_from_days`] with revisits read from the `revisit_flag` of logged sessions.
pub fn lt_n(cohort: &[u64], dataset: &Dataset, anchor: u32, n: u32) -> Result<f64, MetricsError> {
    let cohort_set: BTreeSet<u64> = cohort.iter().copied().collect();
    let mut days: Vec<Vec<u32>> = vec![Vec::new(); cohort_set.len()];
    let slot: Vec<u64> = cohort_set.iter().copied().collect();
    for s in &dataset.sessions {
        if s.records.first().is_some_and(|r| r.revisit_flag) {
            if let Ok(k) = slot.binary_search(&s.user_id) {
                days[k].push(s.day);
            }
        }
    }
    lt_n_from_days(&days, anchor, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMetrics {
    pub head: String,
    pub mse: f64,
    pub mae: f64,
    pub xauc: Option<f64>,
    pub pcoc: Option<f64>,
    pub grouped: Vec<GroupXauc>,
}

impl HeadMetrics {
    /// Metrics of one head; `xauc` and `pcoc` are `None` when undefined.
    pub fn compute(
        head: &str,
        preds: &[f64],
        labels: &[f64],
        groups: &[usize],
        group_labels: &[String],
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            head: head.to_string(),
            mse: mse(preds, labels)?,
            mae: mae(preds, labels)?,
            xauc: xauc(preds, labels).ok(),
            pcoc: pcoc(preds, labels).ok(),
            grouped: xauc_grouped(preds, labels, groups, group_labels)?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub dataset_id: String,
    pub model_id: String,
    pub seed: u64,
    pub heads: Vec<HeadMetrics>,
    /// `(N, LT_N)`.
    pub lt: Vec<(u32, f64)>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), format_real)
}

impl MetricsReport {
    /// Machine-readable rows `kind head group key value pairs`.
    pub fn write_table<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# dataset={} model={} seed={}", self.dataset_id, self.model_id, self.seed)?;
        writeln!(w, "kind\thead\tgroup\tmetric\tvalue\tpairs")?;
        for h in &self.heads {
            writeln!(w, "head\t{}\tall\tmse\t{}\t-", h.head, format_real(h.mse))?;
            writeln!(w, "head\t{}\tall\tmae\t{}\t-", h.head, format_real(h.mae))?;
            writeln!(w, "head\t{}\tall\txauc\t{}\t-", h.head, opt(h.xauc))?;
            writeln!(w, "head\t{}\tall\tpcoc\t{}\t-", h.head, opt(h.pcoc))?;
            for g in &h.grouped {
                writeln!(w, "group\t{}\t{}\txauc\t{}\t{}", h.head, g.label, opt(g.xauc), g.pairs)?;
            }
        }
        for (n, v) in &self.lt {
            writeln!(w, "cohort\t-\tall\tlt_{n}\t{}\t-", format_real(*v))?;
        }
        w.flush()
    }

    pub fn write_summary<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "Metrics for model {} on dataset {} (seed {})", self.model_id, self.dataset_id, self.seed)?;
        writeln!(w)?;
        writeln!(w, "{:<14} {:>12} {:>12} {:>8} {:>8}", "head", "MSE", "MAE", "XAUC", "PCOC")?;
        for h in &self.heads {
            let f = |x: Option<f64>| x.map_or_else(|| "NA".into(), |v| format!("{v:.4}"));
            writeln!(w, "{:<14} {:>12.4} {:>12.4} {:>8} {:>8}", h.head, h.mse, h.mae, f(h.xauc), f(h.pcoc))?;
        }
        for h in &self.heads {
            if h.grouped.is_empty() {
                continue;
            }
            writeln!(w)?;
            writeln!(w, "Within-group XAUC, {}", h.head)?;
            writeln!(w, "{:<8} {:>14} {:>8}", "group", "pairs", "XAUC")?;
            for g in &h.grouped {
                let value = g.xauc.map_or_else(|| g.note.clone().unwrap_or_default(), |v| format!("{v:.4}"));
                writeln!(w, "{:<8} {:>14} {:>8}", g.label, g.pairs, value)?;
            }
        }
        if !self.lt.is_empty() {
            writeln!(w)?;
            for (n, v) in &self.lt {
                writeln!(w, "LT_{n} = {v:.4}")?;
            }
        }
        w.flush()
    }
}
