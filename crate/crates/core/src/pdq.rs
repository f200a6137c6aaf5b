//! Position-debiased quantile labels.
//!
//! Impressions are partitioned into page groups; each group gets its own
//! isofrequency threshold table, and a slide time is labelled by its
//! within-group empirical CDF position `(B + S_k) / T`, where `S_k` counts the
//! thresholds censored at zero and `B` counts the positive thresholds the slide
//! time strictly exceeds.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use crate::datamodel::{format_real, DataError, Dataset, LabeledExample, LineReader};

/// Quantile buckets per group.
pub const DEFAULT_BUCKETS: usize = 50;

/// First page of each group: 0 / 1-2 / 3-5 / 6-9 / 10-15 / 16-29 / 30+.
pub const DEFAULT_GROUP_STARTS: [u32; 7] = [0, 1, 3, 6, 10, 16, 30];

#[derive(Debug, Error)]
pub enum PdqError {
    #[error("dataset has no impressions")]
    EmptyDataset,
    #[error("page group boundaries must start at 0 and strictly increase: {0:?}")]
    BadBoundaries(Vec<u32>),
    #[error("requested {requested} page groups but only {distinct} distinct page indices occur")]
    TooManyGroups { requested: usize, distinct: usize },
    #[error("quantile table needs at least T = {buckets} samples, got {samples}")]
    TooFewSamples { buckets: usize, samples: usize },
    #[error("bucket count must be >= 1")]
    ZeroBuckets,
    #[error("slide time must be finite and >= 0, got {0}")]
    InvalidSample(f64),
    #[error("page group {0} has no quantile table")]
    MissingTable(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupingMode {
    Fixed,
    Isofrequency,
}

/// Half-open page ranges `[starts[k], starts[k+1])`, the last one unbounded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageGroupSpec {
    starts: Vec<u32>,
}

impl PageGroupSpec {
    pub fn from_starts(starts: Vec<u32>) -> Result<Self, PdqError> {
        if starts.first() != Some(&0) || starts.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PdqError::BadBoundaries(starts));
        }
        Ok(Self { starts })
    }

    pub fn default_groups() -> Self {
        Self { starts: DEFAULT_GROUP_STARTS.to_vec() }
    }

    pub fn single() -> Self {
        Self { starts: vec![0] }
    }

    pub fn num_groups(&self) -> usize {
        self.starts.len()
    }

    pub fn starts(&self) -> &[u32] {
        &self.starts
    }

    pub fn group_of(&self, page: u32) -> usize {
        self.starts.partition_point(|&s| s <= page) - 1
    }

    /// Human-readable range, e.g. `1-2` or `30+`.
    pub fn label(&self, group: usize) -> String {
        let lo = self.starts[group];
        match self.starts.get(group + 1) {
            Some(&next) if next == lo + 1 => lo.to_string(),
            Some(&next) => format!("{lo}-{}", next - 1),
            None => format!("{lo}+"),
        }
    }
}

fn page_counts(dataset: &Dataset) -> Vec<usize> {
    let mut counts = Vec::new();
    for r in dataset.records() {
        let p = r.page_index as usize;
        if counts.len() <= p {
            counts.resize(p + 1, 0);
        }
        counts[p] += 1;
    }
    counts
}

/// Partitions page indices into `m` groups.
///
/// `Fixed` ignores `m` and returns the fixed seven ranges. `Isofrequency`
/// places each boundary at the page where the cumulative impression count
/// comes closest to `k * n / m`.
pub fn fit_page_groups(dataset: &Dataset, m: usize, mode: GroupingMode) -> Result<PageGroupSpec, PdqError> {
    let counts = page_counts(dataset);
    let n: usize = counts.iter().sum();
    if n == 0 {
        return Err(PdqError::EmptyDataset);
    }
    if mode == GroupingMode::Fixed {
        return Ok(PageGroupSpec::default_groups());
    }
    let pages: Vec<u32> = counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(p, _)| p as u32).collect();
    if m == 0 || m > pages.len() {
        return Err(PdqError::TooManyGroups { requested: m, distinct: pages.len() });
    }
    // cumulative count strictly before each occurring page
    let mut before = Vec::with_capacity(pages.len());
    let mut acc = 0usize;
    for &p in &pages {
        before.push(acc);
        acc += counts[p as usize];
    }
    let mut starts = vec![0u32];
    let mut last_idx = 0usize;
    for k in 1..m {
        let target = k as f64 * n as f64 / m as f64;
        // leave room for the remaining groups
        let hi = pages.len() - (m - k);
        let best = (last_idx + 1..=hi)
            .min_by(|&a, &b| {
                let da = (before[a] as f64 - target).abs();
                let db = (before[b] as f64 - target).abs();
                da.total_cmp(&db).then(a.cmp(&b))
            })
            .expect("non-empty candidate range");
        starts.push(pages[best]);
        last_idx = best;
    }
    PageGroupSpec::from_starts(starts)
}

/// Isofrequency thresholds of one page group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTable {
    pub group: usize,
    /// `D_{k,1..T}`, non-decreasing.
    pub thresholds: Vec<f64>,
    /// Number of leading zero thresholds.
    pub start_index: usize,
}

impl QuantileTable {
    pub fn buckets(&self) -> usize {
        self.thresholds.len()
    }
}

/// Fits `T` empirical quantiles, `D_j` = the `ceil(n*j/T)`-th order statistic.
pub fn fit_quantile_table(group: usize, slide_times: &[f64], buckets: usize) -> Result<QuantileTable, PdqError> {
    if buckets == 0 {
        return Err(PdqError::ZeroBuckets);
    }
    if slide_times.len() < buckets {
        return Err(PdqError::TooFewSamples { buckets, samples: slide_times.len() });
    }
    if let Some(&bad) = slide_times.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(PdqError::InvalidSample(bad));
    }
    let mut sorted = slide_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let thresholds: Vec<f64> = (1..=buckets).map(|j| sorted[(n * j).div_ceil(buckets) - 1]).collect();
    let start_index = thresholds.iter().take_while(|&&d| d == 0.0).count();
    Ok(QuantileTable { group, thresholds, start_index })
}

/// Number of strictly positive thresholds strictly below `s`.
pub fn bucketize(s: f64, table: &QuantileTable) -> usize {
    if !(s > 0.0) {
        return 0;
    }
    let positive = &table.thresholds[table.start_index..];
    positive.partition_point(|&d| d < s)
}

/// `(B + S_k) / T`.
pub fn quantile_label(s: f64, table: &QuantileTable) -> f64 {
    (bucketize(s, table) + table.start_index) as f64 / table.buckets() as f64
}

/// Fits one table per page group from the examples' slide times.
pub fn fit_tables(
    dataset: &Dataset,
    examples: &[LabeledExample],
    spec: &PageGroupSpec,
    buckets: usize,
) -> Result<Vec<QuantileTable>, PdqError> {
    let mut per_group: Vec<Vec<f64>> = vec![Vec::new(); spec.num_groups()];
    for ex in examples {
        let page = dataset.sessions[ex.session].records[ex.record].page_index;
        per_group[spec.group_of(page)].push(ex.slide_time);
    }
    per_group
        .iter()
        .enumerate()
        .map(|(k, samples)| fit_quantile_table(k, samples, buckets))
        .collect()
}

/// Fills `pdq_label` of every example from its page group's table.
pub fn build_pdq_labels(
    dataset: &Dataset,
    examples: &mut [LabeledExample],
    spec: &PageGroupSpec,
    tables: &[QuantileTable],
) -> Result<(), PdqError> {
    for ex in examples.iter_mut() {
        let page = dataset.sessions[ex.session].records[ex.record].page_index;
        let group = spec.group_of(page);
        let table = tables.iter().find(|t| t.group == group).ok_or(PdqError::MissingTable(group))?;
        ex.pdq_label = quantile_label(ex.slide_time, table);
    }
    Ok(())
}

const TABLES_HEADER: &str = "#ltvrank-pdq-tables v1";

/// One line per group: `group T S_k starts_at_page thresholds(comma-separated)`.
pub fn write_tables<W: Write>(tables: &[QuantileTable], spec: &PageGroupSpec, mut w: W) -> io::Result<()> {
    writeln!(w, "{TABLES_HEADER}")?;
    for t in tables {
        let mut th = String::new();
        for (i, d) in t.thresholds.iter().enumerate() {
            if i > 0 {
                th.push(',');
            }
            let _ = write!(th, "{}", format_real(*d));
        }
        writeln!(w, "{}\t{}\t{}\t{}\t{}", t.group, t.buckets(), t.start_index, spec.starts()[t.group], th)?;
    }
    w.flush()
}

pub fn read_tables<R: BufRead>(reader: R) -> Result<(PageGroupSpec, Vec<QuantileTable>), PdqError> {
    let mut lines = LineReader::new(reader);
    lines.expect_header(TABLES_HEADER)?;
    let mut starts = Vec::new();
    let mut tables = Vec::new();
    let err = |line, offset, field, message: String| PdqError::Data(DataError::Parse { line, offset, field, message });
    while let Some((line, offset, text)) = lines.next_line()? {
        let parts: Vec<&str> = text.split('\t').collect();
        let [group, t, s, start, th] = parts.as_slice() else {
            return Err(err(line, offset, "line", format!("expected 5 fields, got {}", parts.len())));
        };
        let thresholds = th
            .split(',')
            .map(str::parse::<f64>)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(line, offset, "thresholds", e.to_string()))?;
        let buckets: usize = t.parse().map_err(|e| err(line, offset, "T", format!("{e}")))?;
        if buckets != thresholds.len() {
            return Err(err(line, offset, "thresholds", format!("{} values for T = {buckets}", thresholds.len())));
        }
        starts.push(start.parse().map_err(|e| err(line, offset, "start_page", format!("{e}")))?);
        tables.push(QuantileTable {
            group: group.parse().map_err(|e| err(line, offset, "group", format!("{e}")))?,
            thresholds,
            start_index: s.parse().map_err(|e| err(line, offset, "S_k", format!("{e}")))?,
        });
    }
    Ok((PageGroupSpec::from_starts(starts)?, tables))
}
