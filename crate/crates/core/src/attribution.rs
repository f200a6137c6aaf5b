//! Multi-dimensional attribution of downstream watch time.
//!
//! For every ordered pair `(j, i)` with `i > j` inside one session, seven
//! binary relations are evaluated (position, collection, retrieval source,
//! video-to-video table, multimodal similarity, author, category). They are
//! combined into a strength `c_ji` either as a flag-OR or as a sigmoid of a
//! weighted flag sum, and the attributed slide time of `j` is
//! `min(sum_i c_ji * t_i, cap)`.

use std::collections::HashMap;
use std::io::{self, Write};

use thiserror::Error;

use crate::datamodel::{format_real, DataError, Dataset, ImpressionRecord, LabeledExample, Session};
use crate::synthgen::sigmoid;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("pair ({j}, {i}) is not ordered: attribution needs j < i")]
    UnorderedPair { j: usize, i: usize },
    #[error("index {index} out of range for session of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("dataset has no within-session pairs")]
    EmptyDataset,
    #[error("invalid attribution config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dimension {
    Position,
    Collection,
    Retrieval,
    V2v,
    Multimodal,
    Author,
    Category,
}

impl Dimension {
    pub const ALL: [Dimension; 7] = [
        Dimension::Position,
        Dimension::Collection,
        Dimension::Retrieval,
        Dimension::V2v,
        Dimension::Multimodal,
        Dimension::Author,
        Dimension::Category,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Position => "pos",
            Dimension::Collection => "col",
            Dimension::Retrieval => "rec",
            Dimension::V2v => "v2v",
            Dimension::Multimodal => "mm",
            Dimension::Author => "auth",
            Dimension::Category => "cat",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairFlags(pub [bool; 7]);

impl PairFlags {
    pub fn get(&self, d: Dimension) -> bool {
        self.0[d.index()]
    }

    pub fn set(&mut self, d: Dimension, v: bool) {
        self.0[d.index()] = v;
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&f| f)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&f| f).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributionMode {
    Binary,
    Learned,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionConfig {
    pub v2v_threshold: f64,
    pub mm_threshold: f64,
    /// Following positions covered by the position relation.
    pub adjacency_window: usize,
    pub mode: AttributionMode,
    /// Per-dimension weights for learned mode, in [`Dimension::ALL`] order.
    pub weights: [f64; 7],
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            v2v_threshold: 0.5,
            mm_threshold: 0.9,
            adjacency_window: 6,
            mode: AttributionMode::Binary,
            weights: [0.0; 7],
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<(), AttributionError> {
        for (name, t) in [("v2v_threshold", self.v2v_threshold), ("mm_threshold", self.mm_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(AttributionError::InvalidConfig(format!("{name} = {t} outside [0,1]")));
            }
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(AttributionError::InvalidConfig("weights must be finite".into()));
        }
        Ok(())
    }
}

/// One attributed pair and its combined strength.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionStrength {
    pub j: usize,
    pub i: usize,
    pub flags: PairFlags,
    pub strength: f64,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        0.0
    } else {
        ab / (aa.sqrt() * bb.sqrt())
    }
}

fn v2v_score(from: &ImpressionRecord, to: u64) -> Option<f64> {
    from.v2v_neighbors.iter().find(|(v, _)| *v == to).map(|(_, s)| *s)
}

/// Evaluates the seven relations for the pair `(j, i)`.
pub fn pair_flags(
    session: &Session,
    j: usize,
    i: usize,
    config: &AttributionConfig,
) -> Result<PairFlags, AttributionError> {
    if i <= j {
        return Err(AttributionError::UnorderedPair { j, i });
    }
    if i >= session.len() {
        return Err(AttributionError::IndexOutOfRange { index: i, len: session.len() });
    }
    let recs = &session.records;
    let (a, b) = (&recs[j], &recs[i]);
    let mut f = PairFlags::default();
    f.set(Dimension::Position, i - j <= config.adjacency_window);
    let window_end = (j + config.adjacency_window).min(recs.len() - 1);
    f.set(
        Dimension::Collection,
        b.collection_id.is_some() && (j..=window_end).any(|k| k != i && recs[k].collection_id == b.collection_id),
    );
    f.set(Dimension::Retrieval, a.retrieval_source_id == b.retrieval_source_id);
    let fwd = v2v_score(a, b.video_id).is_some_and(|s| s > config.v2v_threshold);
    let back = v2v_score(b, a.video_id).is_some_and(|s| s > config.v2v_threshold);
    f.set(Dimension::V2v, fwd || back);
    f.set(Dimension::Multimodal, cosine(&a.content_embedding, &b.content_embedding) > config.mm_threshold);
    f.set(Dimension::Author, a.author_id == b.author_id);
    f.set(Dimension::Category, a.category_id == b.category_id);
    Ok(f)
}

/// Flag-OR in binary mode, `sigmoid(w . flags)` in learned mode.
pub fn combine_strength(flags: &PairFlags, config: &AttributionConfig) -> f64 {
    match config.mode {
        AttributionMode::Binary => {
            if flags.any() {
                1.0
            } else {
                0.0
            }
        }
        AttributionMode::Learned => sigmoid(learned_logit(flags, &config.weights)),
    }
}

fn learned_logit(flags: &PairFlags, weights: &[f64; 7]) -> f64 {
    flags.0.iter().zip(weights).filter(|(f, _)| **f).map(|(_, w)| w).sum()
}

/// Attributed slide time of record `j`, capped like the baseline slide time.
pub fn attributed_slide_time(
    session: &Session,
    j: usize,
    config: &AttributionConfig,
    cap: f64,
) -> Result<f64, AttributionError> {
    if j >= session.len() {
        return Err(AttributionError::IndexOutOfRange { index: j, len: session.len() });
    }
    let mut sum = 0.0;
    for i in j + 1..session.len() {
        let c = combine_strength(&pair_flags(session, j, i, config)?, config);
        sum += c * session.records[i].watch_time;
    }
    Ok(sum.min(cap))
}

/// Per-session precomputation shared by all pairs.
struct SessionIndex<'a> {
    records: &'a [ImpressionRecord],
    neighbor_maps: Vec<HashMap<u64, f64>>,
}

impl<'a> SessionIndex<'a> {
    fn new(session: &'a Session) -> Self {
        let neighbor_maps = session
            .records
            .iter()
            .map(|r| {
                let mut m = HashMap::with_capacity(r.v2v_neighbors.len());
                for &(v, s) in &r.v2v_neighbors {
                    m.entry(v).or_insert(s);
                }
                m
            })
            .collect();
        Self { records: &session.records, neighbor_maps }
    }

    /// Flags of `(j, i)` for every `i > j`, written into `out`.
    fn flags_from(&self, j: usize, config: &AttributionConfig, out: &mut Vec<PairFlags>) {
        out.clear();
        let recs = self.records;
        let n = recs.len();
        let window_end = (j + config.adjacency_window).min(n - 1);
        let mut window_collections: HashMap<u64, usize> = HashMap::new();
        for r in &recs[j..=window_end] {
            if let Some(c) = r.collection_id {
                *window_collections.entry(c).or_default() += 1;
            }
        }
        let a = &recs[j];
        for i in j + 1..n {
            let b = &recs[i];
            let in_window = i <= window_end;
            let mut f = PairFlags::default();
            f.0[0] = i - j <= config.adjacency_window;
            f.0[1] = b.collection_id.is_some_and(|c| {
                let hits = window_collections.get(&c).copied().unwrap_or(0);
                hits > usize::from(in_window)
            });
            f.0[2] = a.retrieval_source_id == b.retrieval_source_id;
            f.0[3] = self.neighbor_maps[j].get(&b.video_id).is_some_and(|&s| s > config.v2v_threshold)
                || self.neighbor_maps[i].get(&a.video_id).is_some_and(|&s| s > config.v2v_threshold);
            f.0[4] = cosine(&a.content_embedding, &b.content_embedding) > config.mm_threshold;
            f.0[5] = a.author_id == b.author_id;
            f.0[6] = a.category_id == b.category_id;
            out.push(f);
        }
    }
}

/// All attributed pairs of a session (pairs with zero strength included).
pub fn session_strengths(session: &Session, config: &AttributionConfig) -> Vec<AttributionStrength> {
    let index = SessionIndex::new(session);
    let mut flags = Vec::new();
    let mut out = Vec::new();
    for j in 0..session.len() {
        index.flags_from(j, config, &mut flags);
        for (k, f) in flags.iter().enumerate() {
            out.push(AttributionStrength { j, i: j + 1 + k, flags: *f, strength: combine_strength(f, config) });
        }
    }
    out
}

/// Attributed slide time of every record in the session.
pub fn session_attributed_slide_times(session: &Session, config: &AttributionConfig, cap: f64) -> Vec<f64> {
    if session.is_empty() {
        return Vec::new();
    }
    let index = SessionIndex::new(session);
    let mut flags = Vec::new();
    (0..session.len())
        .map(|j| {
            index.flags_from(j, config, &mut flags);
            let mut sum = 0.0;
            for (k, f) in flags.iter().enumerate() {
                sum += combine_strength(f, config) * session.records[j + 1 + k].watch_time;
            }
            sum.min(cap)
        })
        .collect()
}

/// Fills `attributed_slide_time` for every example.
pub fn fill_attributed_labels(
    dataset: &Dataset,
    examples: &mut [LabeledExample],
    config: &AttributionConfig,
    cap: f64,
) -> Result<(), AttributionError> {
    config.validate()?;
    let per_session: Vec<Vec<f64>> =
        dataset.sessions.iter().map(|s| session_attributed_slide_times(s, config, cap)).collect();
    for ex in examples.iter_mut() {
        ex.attributed_slide_time = per_session[ex.session][ex.record];
    }
    Ok(())
}

/// Derivative of each uncapped attributed label with respect to the learned
/// weights, contracted with `dloss_dlabel` (one entry per example).
///
/// Labels whose cap binds contribute nothing.
pub fn learned_weight_gradient(
    dataset: &Dataset,
    examples: &[LabeledExample],
    dloss_dlabel: &[f64],
    config: &AttributionConfig,
    cap: f64,
) -> [f64; 7] {
    let mut grad = [0.0; 7];
    let mut flags = Vec::new();
    let mut cached: Option<(usize, SessionIndex)> = None;
    for (ex, &g) in examples.iter().zip(dloss_dlabel) {
        if g == 0.0 {
            continue;
        }
        let session = &dataset.sessions[ex.session];
        if cached.as_ref().is_none_or(|(s, _)| *s != ex.session) {
            cached = Some((ex.session, SessionIndex::new(session)));
        }
        let index = &cached.as_ref().unwrap().1;
        index.flags_from(ex.record, config, &mut flags);
        let mut sum = 0.0;
        let mut local = [0.0; 7];
        for (k, f) in flags.iter().enumerate() {
            let t = session.records[ex.record + 1 + k].watch_time;
            let c = sigmoid(learned_logit(f, &config.weights));
            sum += c * t;
            let dc = c * (1.0 - c) * t;
            for d in 0..7 {
                if f.0[d] {
                    local[d] += dc;
                }
            }
        }
        if sum < cap {
            for d in 0..7 {
                grad[d] += g * local[d];
            }
        }
    }
    grad
}

/// Share of downstream watch time (`s_ratio`) and of pairs (`v_ratio`) covered by one relation.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub dimension: String,
    pub relation: String,
    pub s_ratio: f64,
    pub v_ratio: f64,
}

/// Coverage of each relation over all within-session pairs.
///
/// Rows: `pos`, `sgn(pos+col)`, `rec`, `v2v`, `mm`, `auth`, `cat`, and the
/// combined flag-OR.
pub fn table1_diagnostics(dataset: &Dataset, config: &AttributionConfig) -> Result<Vec<DiagnosticRow>, AttributionError> {
    config.validate()?;
    // counters: 0..7 per dimension, 7 = pos|col, 8 = any
    let mut pairs = [0u64; 9];
    let mut watch = [0.0f64; 9];
    let (mut total_pairs, mut total_watch) = (0u64, 0.0f64);
    let mut flags = Vec::new();
    for s in &dataset.sessions {
        if s.len() < 2 {
            continue;
        }
        let index = SessionIndex::new(s);
        for j in 0..s.len() {
            index.flags_from(j, config, &mut flags);
            for (k, f) in flags.iter().enumerate() {
                let t = s.records[j + 1 + k].watch_time;
                total_pairs += 1;
                total_watch += t;
                let mut hit = |slot: usize| {
                    pairs[slot] += 1;
                    watch[slot] += t;
                };
                for d in 0..7 {
                    if f.0[d] {
                        hit(d);
                    }
                }
                if f.0[0] || f.0[1] {
                    hit(7);
                }
                if f.any() {
                    hit(8);
                }
            }
        }
    }
    if total_pairs == 0 {
        return Err(AttributionError::EmptyDataset);
    }
    let s_ratio = |slot: usize| if total_watch > 0.0 { watch[slot] / total_watch } else { 0.0 };
    let row = |dimension: &str, relation: &str, slot: usize| DiagnosticRow {
        dimension: dimension.to_string(),
        relation: relation.to_string(),
        s_ratio: s_ratio(slot),
        v_ratio: pairs[slot] as f64 / total_pairs as f64,
    };
    Ok(vec![
        row("contextual", "pos", 0),
        row("contextual", "sgn(pos+col)", 7),
        row("behavioral", "rec", 2),
        row("behavioral", "v2v", 3),
        row("content", "mm", 4),
        row("content", "auth", 5),
        row("content", "cat", 6),
        row("combined", "any", 8),
    ])
}

/// Tab-separated `dimension relation s_ratio_pct v_ratio_pct`.
pub fn write_diagnostics<W: Write>(rows: &[DiagnosticRow], mut w: W) -> io::Result<()> {
    writeln!(w, "dimension\trelation\ts_ratio_pct\tv_ratio_pct")?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            r.dimension,
            r.relation,
            format_real(100.0 * r.s_ratio),
            format_real(100.0 * r.v_ratio)
        )?;
    }
    w.flush()
}
