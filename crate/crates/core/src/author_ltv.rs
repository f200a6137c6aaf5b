//! Day-level author value labels and the dual-stream schedule.
//!
//! `S_auth(t) = sum_{d=t-N+1..=t} alpha^(t-d) * W(u, a, d)` where `W` is the
//! user's total watch time on the author's videos on day `d`. A label for an
//! impression anchored on day `t - N` only matures once day `t` is logged, so
//! training day `t` pairs fresh day-`t` examples (every head but author) with
//! day-`t - N` examples carrying matured author labels (author head only).
//!
//! Summation order is fixed: days ascending, and within a day records in
//! dataset order. Labels are therefore reproducible bit for bit.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};

use log::warn;
use thiserror::Error;

use crate::datamodel::{format_real, DataError, Dataset, LabeledExample, LineReader};

#[derive(Debug, Error)]
pub enum LtvError {
    #[error("training day {0} is negative")]
    NegativeDay(i64),
    #[error("invalid author-LTV config: {0}")]
    InvalidConfig(String),
    #[error("examples are not aligned with the dataset")]
    Misaligned,
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtvConfig {
    /// Window length `N` in days.
    pub window: u32,
    /// Decay `alpha` in (0, 1].
    pub decay: f64,
}

impl Default for LtvConfig {
    fn default() -> Self {
        Self { window: 7, decay: 0.8 }
    }
}

impl LtvConfig {
    pub fn validate(&self) -> Result<(), LtvError> {
        if self.window == 0 {
            return Err(LtvError::InvalidConfig("window must be at least 1 day".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(LtvError::InvalidConfig(format!("decay {} outside (0, 1]", self.decay)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuthorDayAggregate {
    pub user_id: u64,
    pub author_id: u64,
    pub day: u32,
    pub total_watch: f64,
}

/// Watch time per `(user, author)`, as `(day, seconds)` sorted by day.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuthorAggregates {
    by_pair: HashMap<(u64, u64), Vec<(u32, f64)>>,
}

impl AuthorAggregates {
    pub fn days(&self, user: u64, author: u64) -> &[(u32, f64)] {
        self.by_pair.get(&(user, author)).map_or(&[], Vec::as_slice)
    }

    /// All rows sorted by `(user, author, day)`.
    pub fn rows(&self) -> Vec<AuthorDayAggregate> {
        let mut rows: Vec<AuthorDayAggregate> = self
            .by_pair
            .iter()
            .flat_map(|(&(user_id, author_id), days)| {
                days.iter().map(move |&(day, total_watch)| AuthorDayAggregate { user_id, author_id, day, total_watch })
            })
            .collect();
        rows.sort_by_key(|r| (r.user_id, r.author_id, r.day));
        rows
    }

    pub fn len(&self) -> usize {
        self.by_pair.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.by_pair.is_empty()
    }
}

/// Exact sums of watch time grouped by `(user, author, day)`.
///
/// Only impressions with positive watch time create a row.
pub fn aggregate_author_days(dataset: &Dataset) -> AuthorAggregates {
    let mut by_pair: HashMap<(u64, u64), Vec<(u32, f64)>> = HashMap::new();
    for s in &dataset.sessions {
        for r in &s.records {
            if r.watch_time <= 0.0 {
                continue;
            }
            let days = by_pair.entry((r.user_id, r.author_id)).or_default();
            match days.binary_search_by_key(&r.day, |&(d, _)| d) {
                Ok(k) => days[k].1 += r.watch_time,
                Err(k) => days.insert(k, (r.day, r.watch_time)),
            }
        }
    }
    AuthorAggregates { by_pair }
}

/// Decayed watch time of `user` on `author` over days `[t - N + 1, t]`.
pub fn author_ltv_label(aggregates: &AuthorAggregates, user: u64, author: u64, t: u32, config: &LtvConfig) -> f64 {
    let first = (t + 1).saturating_sub(config.window);
    let mut sum = 0.0;
    for &(d, w) in aggregates.days(user, author) {
        if d < first {
            continue;
        }
        if d > t {
            break;
        }
        sum += config.decay.powi((t - d) as i32) * w;
    }
    sum
}

/// One training day of the dual-stream schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DualStreamPlan {
    pub day: u32,
    pub config: LtvConfig,
    /// Indices of day-`t` examples.
    pub standard: Vec<usize>,
    /// `(example index, matured label)` for day-`t - N` examples.
    pub delayed: Vec<(usize, f64)>,
    pub warning: Option<String>,
}

impl DualStreamPlan {
    /// Anchor day of the delayed stream, if it exists.
    pub fn anchor_day(&self) -> Option<u32> {
        self.day.checked_sub(self.config.window)
    }

    /// Copies of the delayed examples with `author_ltv` filled in.
    pub fn delayed_examples(&self, examples: &[LabeledExample]) -> Vec<LabeledExample> {
        self.delayed
            .iter()
            .map(|&(k, label)| LabeledExample { author_ltv: Some(label), ..examples[k].clone() })
            .collect()
    }
}

/// Builds the plan for training day `t`.
///
/// `examples` must follow [`Dataset::indexed_records`] order.
pub fn plan_dual_stream(
    dataset: &Dataset,
    examples: &[LabeledExample],
    aggregates: &AuthorAggregates,
    t: i64,
    config: &LtvConfig,
) -> Result<DualStreamPlan, LtvError> {
    config.validate()?;
    if t < 0 {
        return Err(LtvError::NegativeDay(t));
    }
    let t = t as u32;
    let anchor = t.checked_sub(config.window);
    let mut standard = Vec::new();
    let mut delayed = Vec::new();
    for (k, ex) in examples.iter().enumerate() {
        let rec = dataset
            .sessions
            .get(ex.session)
            .and_then(|s| s.records.get(ex.record))
            .ok_or(LtvError::Misaligned)?;
        if rec.day == t {
            standard.push(k);
        } else if Some(rec.day) == anchor {
            delayed.push((k, author_ltv_label(aggregates, rec.user_id, rec.author_id, t, config)));
        }
    }
    let warning = anchor.is_none().then(|| {
        let msg = format!("day {t} precedes the {}-day window: delayed stream is empty", config.window);
        warn!("{msg}");
        msg
    });
    Ok(DualStreamPlan { day: t, config: *config, standard, delayed, warning })
}

/// Plans for every day in `0..=max_day`.
pub fn plan_all_days(
    dataset: &Dataset,
    examples: &[LabeledExample],
    aggregates: &AuthorAggregates,
    config: &LtvConfig,
) -> Result<Vec<DualStreamPlan>, LtvError> {
    let Some(max_day) = dataset.max_day() else {
        return Ok(Vec::new());
    };
    (0..=max_day).map(|t| plan_dual_stream(dataset, examples, aggregates, t as i64, config)).collect()
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditReport {
    pub plans: usize,
    pub labels_checked: usize,
    pub violations: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Recomputes every delayed label from the log truncated to days `<= t` and
/// checks it matches bit for bit, that delayed examples sit on the anchor day,
/// and that standard examples sit on day `t`.
pub fn audit_no_leakage(dataset: &Dataset, examples: &[LabeledExample], plans: &[DualStreamPlan]) -> AuditReport {
    let mut report = AuditReport { plans: plans.len(), ..AuditReport::default() };
    for plan in plans {
        let visible = dataset.filter_days(|d| d <= plan.day);
        let truncated = aggregate_author_days(&visible);
        let anchor = plan.anchor_day();
        for &k in &plan.standard {
            let ex = &examples[k];
            let rec = &dataset.sessions[ex.session].records[ex.record];
            if rec.day != plan.day {
                report.violations.push(format!("plan {}: standard example {k} is from day {}", plan.day, rec.day));
            }
            if ex.author_ltv.is_some() {
                report.violations.push(format!("plan {}: standard example {k} carries an author label", plan.day));
            }
        }
        for &(k, label) in &plan.delayed {
            report.labels_checked += 1;
            let ex = &examples[k];
            let rec = &dataset.sessions[ex.session].records[ex.record];
            if Some(rec.day) != anchor {
                report.violations.push(format!("plan {}: delayed example {k} is from day {}", plan.day, rec.day));
            }
            let expect = author_ltv_label(&truncated, rec.user_id, rec.author_id, plan.day, &plan.config);
            if expect.to_bits() != label.to_bits() {
                report
                    .violations
                    .push(format!("plan {}: example {k} label {label} differs from truncated-log value {expect}", plan.day));
            }
        }
    }
    report
}

/// Share of total watch time spent on authors the user already watched in the
/// preceding `window` days.
pub fn author_window_share(dataset: &Dataset, aggregates: &AuthorAggregates, window: u32) -> f64 {
    let mut total = 0.0;
    let mut covered = 0.0;
    for s in &dataset.sessions {
        for r in &s.records {
            total += r.watch_time;
            let lo = r.day.saturating_sub(window);
            let returning = aggregates.days(r.user_id, r.author_id).iter().any(|&(d, _)| d >= lo && d < r.day);
            if returning {
                covered += r.watch_time;
            }
        }
    }
    if total > 0.0 {
        covered / total
    } else {
        0.0
    }
}

const AGG_HEADER: &str = "#ltvrank-author-days v1";
const PLAN_HEADER: &str = "#ltvrank-plan v1";

pub fn write_aggregates<W: Write>(aggregates: &AuthorAggregates, mut w: W) -> io::Result<()> {
    writeln!(w, "{AGG_HEADER}")?;
    for r in aggregates.rows() {
        writeln!(w, "{}\t{}\t{}\t{}", r.user_id, r.author_id, r.day, format_real(r.total_watch))?;
    }
    w.flush()
}

pub fn read_aggregates<R: BufRead>(reader: R) -> Result<AuthorAggregates, DataError> {
    let mut lines = LineReader::new(reader);
    lines.expect_header(AGG_HEADER)?;
    let mut by_pair: HashMap<(u64, u64), Vec<(u32, f64)>> = HashMap::new();
    while let Some((line, offset, text)) = lines.next_line()? {
        let bad = |field: &'static str, message: String| DataError::Parse { line, offset, field, message };
        let parts: Vec<&str> = text.split('\t').collect();
        if parts.len() != 4 {
            return Err(bad("row", format!("expected 4 fields, found {}", parts.len())));
        }
        let user: u64 = parts[0].parse().map_err(|e| bad("user_id", format!("{e}")))?;
        let author: u64 = parts[1].parse().map_err(|e| bad("author_id", format!("{e}")))?;
        let day: u32 = parts[2].parse().map_err(|e| bad("day", format!("{e}")))?;
        let total: f64 = parts[3].parse().map_err(|e| bad("total_watch", format!("{e}")))?;
        let days = by_pair.entry((user, author)).or_default();
        if days.last().is_some_and(|&(d, _)| d >= day) {
            return Err(bad("day", "rows must be sorted by (user, author, day)".into()));
        }
        days.push((day, total));
    }
    Ok(AuthorAggregates { by_pair })
}

/// Audit format: one `S\tsession_id\tglobal_position` or
/// `D\tsession_id\tglobal_position\tlabel` line per example, after a plan header line.
pub fn write_plans<W: Write>(
    plans: &[DualStreamPlan],
    dataset: &Dataset,
    examples: &[LabeledExample],
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "{PLAN_HEADER}")?;
    for p in plans {
        writeln!(
            w,
            "P\t{}\t{}\t{}\t{}\t{}",
            p.day,
            p.config.window,
            format_real(p.config.decay),
            p.standard.len(),
            p.delayed.len()
        )?;
        let key = |k: usize| {
            let ex = &examples[k];
            let s = &dataset.sessions[ex.session];
            (s.session_id, s.records[ex.record].global_position)
        };
        for &k in &p.standard {
            let (sid, gp) = key(k);
            writeln!(w, "S\t{sid}\t{gp}")?;
        }
        for &(k, label) in &p.delayed {
            let (sid, gp) = key(k);
            writeln!(w, "D\t{sid}\t{gp}\t{}", format_real(label))?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::testutil::record;
    use crate::datamodel::{base_examples, Session};
    use proptest::prelude::*;

    /// `(user, author, day, watch)` rows, each its own one-record session.
    fn corpus(rows: &[(u64, u64, u32, f64)]) -> Dataset {
        let mut sessions: Vec<Session> = rows
            .iter()
            .enumerate()
            .map(|(k, &(u, a, d, w))| {
                let mut r = record(k as u64, 0, w);
                r.user_id = u;
                r.author_id = a;
                r.day = d;
                Session { session_id: k as u64, user_id: u, day: d, records: vec![r] }
            })
            .collect();
        sessions.sort_by_key(|s| (s.day, s.session_id));
        Dataset::new(sessions)
    }

    #[test]
    fn aggregate_examples() {
        let ds = corpus(&[(1, 9, 2, 3.0), (1, 9, 2, 7.0), (2, 9, 2, 4.0), (1, 8, 3, 0.0)]);
        let agg = aggregate_author_days(&ds);
        assert_eq!(agg.days(1, 9), &[(2, 10.0)]);
        assert_eq!(agg.days(2, 9), &[(2, 4.0)]);
        assert!(agg.days(1, 8).is_empty());
        assert_eq!(agg.len(), 2);
    }

    #[test]
    fn label_examples() {
        let ds = corpus(&[(1, 9, 4, 4.0), (1, 9, 5, 10.0), (1, 9, 3, 100.0)]);
        let agg = aggregate_author_days(&ds);
        let half = LtvConfig { window: 2, decay: 0.5 };
        assert_eq!(author_ltv_label(&agg, 1, 9, 5, &half), 12.0);
        for decay in [0.3, 0.8, 1.0] {
            assert_eq!(author_ltv_label(&agg, 1, 9, 5, &LtvConfig { window: 1, decay }), 10.0);
        }
        assert_eq!(author_ltv_label(&agg, 1, 9, 9, &LtvConfig { window: 7, decay: 1.0 }), 114.0);
        assert_eq!(author_ltv_label(&agg, 1, 9, 12, &LtvConfig { window: 7, decay: 1.0 }), 0.0);
        assert_eq!(author_ltv_label(&agg, 2, 9, 5, &half), 0.0);
    }

    #[test]
    fn plan_boundaries() {
        let rows: Vec<(u64, u64, u32, f64)> = (0..10).flat_map(|d| [(1, 9, d, 2.0), (2, 9, d, 1.0)]).collect();
        let ds = corpus(&rows);
        let ex = base_examples(&ds, 300.0).unwrap();
        let agg = aggregate_author_days(&ds);
        let cfg = LtvConfig { window: 7, decay: 1.0 };

        let early = plan_dual_stream(&ds, &ex, &agg, 6, &cfg).unwrap();
        assert!(early.delayed.is_empty());
        assert!(early.warning.is_some());
        assert_eq!(early.standard.len(), 2);

        let edge = plan_dual_stream(&ds, &ex, &agg, 7, &cfg).unwrap();
        assert_eq!(edge.anchor_day(), Some(0));
        assert!(edge.warning.is_none());
        // user 1 watches author 9 for 2 s on each of days 1..=7
        let labels: Vec<f64> = edge.delayed.iter().map(|d| d.1).collect();
        assert_eq!(labels, vec![14.0, 7.0]);

        assert!(matches!(plan_dual_stream(&ds, &ex, &agg, -1, &cfg), Err(LtvError::NegativeDay(-1))));
        let plans = plan_all_days(&ds, &ex, &agg, &cfg).unwrap();
        assert_eq!(plans.len(), 10);
        assert!(audit_no_leakage(&ds, &ex, &plans).passed());
    }

    #[test]
    fn audit_catches_future_label() {
        let rows: Vec<(u64, u64, u32, f64)> = (0..5).map(|d| (1, 9, d, 2.0)).collect();
        let ds = corpus(&rows);
        let ex = base_examples(&ds, 300.0).unwrap();
        let agg = aggregate_author_days(&ds);
        let cfg = LtvConfig { window: 2, decay: 1.0 };
        let mut plan = plan_dual_stream(&ds, &ex, &agg, 2, &cfg).unwrap();
        // a label that peeked at day 3
        plan.delayed[0].1 = author_ltv_label(&agg, 1, 9, 3, &LtvConfig { window: 3, decay: 1.0 });
        let report = audit_no_leakage(&ds, &ex, &[plan]);
        assert!(!report.passed());
        assert_eq!(report.labels_checked, 1);
    }

    #[test]
    fn window_share_counts_returning_authors() {
        let ds = corpus(&[(1, 9, 0, 4.0), (1, 9, 3, 6.0), (1, 8, 3, 10.0)]);
        let agg = aggregate_author_days(&ds);
        assert_eq!(author_window_share(&ds, &agg, 7), 0.3);
        assert_eq!(author_window_share(&ds, &agg, 2), 0.0);
    }

    #[test]
    fn aggregates_round_trip() {
        let ds = corpus(&[(1, 9, 0, 4.0), (1, 9, 3, 6.0), (1, 8, 3, 10.0), (7, 8, 1, 0.0625)]);
        let agg = aggregate_author_days(&ds);
        let mut buf = Vec::new();
        write_aggregates(&agg, &mut buf).unwrap();
        assert_eq!(read_aggregates(buf.as_slice()).unwrap(), agg);
    }

    proptest! {
        #[test]
        fn label_monotone_in_decay_and_window(
            watch in prop::collection::vec((0u32..12, 0u32..2000), 0..30),
            t in 0u32..14,
            n in 1u32..9,
            a1 in 0.05f64..1.0,
            a2 in 0.05f64..1.0,
        ) {
            let rows: Vec<(u64, u64, u32, f64)> = watch.iter().map(|&(d, w)| (1, 2, d, w as f64 / 16.0)).collect();
            let agg = aggregate_author_days(&corpus(&rows));
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let at = |window, decay| author_ltv_label(&agg, 1, 2, t, &LtvConfig { window, decay });
            prop_assert!(at(n, lo) <= at(n, hi));
            prop_assert!(at(n, lo) <= at(n + 1, lo));
            prop_assert!(at(n, lo) >= 0.0);
        }
    }
}
