//! Log records, sessions, labels and the line-delimited dataset format.
//!
//! Every real-valued field stored in a [`Dataset`] is kept on a canonical
//! 9-significant-digit grid (see [`canonical_real`]) so that writing and
//! reading a dataset reproduces it bit for bit. Watch times and durations
//! additionally live on a 1/16 s grid, which keeps every suffix sum over a
//! session exact in `f64`.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

/// Videos returned per feed request.
pub const PAGE_SIZE: usize = 4;

/// Default cap on the downstream influence of one impression, in seconds.
pub const DEFAULT_SLIDE_CAP: f64 = 300.0;

/// Watch times and durations are multiples of this many seconds.
pub const TIME_RESOLUTION: f64 = 1.0 / 16.0;

pub const DEFAULT_EMBEDDING_DIM: usize = 16;

const DATASET_HEADER: &str = "#ltvrank-dataset v1";
const LABELS_HEADER: &str = "#ltvrank-labels v1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("record index {index} out of range for session of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("slide-time cap must be positive, got {0}")]
    InvalidCap(f64),
    #[error("line {line} (byte offset {offset}): field `{field}`: {message}")]
    Parse {
        line: usize,
        offset: u64,
        field: &'static str,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rounds to the 9-significant-digit grid used by every text artifact.
pub fn canonical_real(x: f64) -> f64 {
    if x == 0.0 {
        return 0.0;
    }
    format_real(x).parse().expect("formatted real parses")
}

/// Rounds a non-negative duration down to the [`TIME_RESOLUTION`] grid.
pub fn quantize_time(seconds: f64) -> f64 {
    (seconds.max(0.0) / TIME_RESOLUTION).floor() * TIME_RESOLUTION
}

pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x:.8e}")
    }
}

/// One video exposure inside a session.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionRecord {
    pub user_id: u64,
    pub video_id: u64,
    pub author_id: u64,
    pub category_id: u64,
    pub retrieval_source_id: u64,
    pub collection_id: Option<u64>,
    pub session_id: u64,
    pub day: u32,
    pub page_index: u32,
    pub position_in_page: u8,
    pub global_position: u32,
    /// Seconds watched; zero for a skip.
    pub watch_time: f64,
    /// Length of the video in seconds; feeds the completion label.
    pub video_duration: f64,
    /// Whether the user liked, commented on or shared the video.
    pub interaction: bool,
    pub content_embedding: Vec<f64>,
    pub v2v_neighbors: Vec<(u64, f64)>,
    /// The user had visited on an earlier day; constant per (user, day).
    pub revisit_flag: bool,
}

impl ImpressionRecord {
    pub fn completion(&self) -> f64 {
        if self.video_duration > 0.0 {
            canonical_real((self.watch_time / self.video_duration).min(1.0))
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: u64,
    pub user_id: u64,
    pub day: u32,
    pub records: Vec<ImpressionRecord>,
}

impl Session {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn watch_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.records.iter().map(|r| r.watch_time)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub sessions: Vec<Session>,
}

impl Dataset {
    pub fn new(sessions: Vec<Session>) -> Self {
        Self { sessions }
    }

    pub fn num_records(&self) -> usize {
        self.sessions.iter().map(Session::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ImpressionRecord> {
        self.sessions.iter().flat_map(|s| s.records.iter())
    }

    /// `(session index, record index, record)` in storage order.
    pub fn indexed_records(&self) -> impl Iterator<Item = (usize, usize, &ImpressionRecord)> {
        self.sessions
            .iter()
            .enumerate()
            .flat_map(|(s, sess)| sess.records.iter().enumerate().map(move |(r, rec)| (s, r, rec)))
    }

    pub fn max_day(&self) -> Option<u32> {
        self.sessions.iter().map(|s| s.day).max()
    }

    /// Sessions whose day satisfies `keep`, cloned into a new dataset.
    pub fn filter_days(&self, keep: impl Fn(u32) -> bool) -> Dataset {
        Dataset::new(self.sessions.iter().filter(|s| keep(s.day)).cloned().collect())
    }
}

/// A broken invariant found by [`validate_session`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub record: Option<usize>,
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.record {
            Some(r) => write!(f, "record {r}: {}: {}", self.field, self.message),
            None => write!(f, "session: {}: {}", self.field, self.message),
        }
    }
}

/// Lists every broken record/session invariant; an empty list means the session is valid.
pub fn validate_session(session: &Session) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |record, field, message: String| out.push(Violation { record, field, message });

    if session.records.is_empty() {
        push(None, "records", "session has no records".into());
        return out;
    }

    let mut page_counts: Vec<(u32, usize)> = Vec::new();
    for (i, r) in session.records.iter().enumerate() {
        if r.session_id != session.session_id {
            push(Some(i), "session_id", format!("{} differs from session {}", r.session_id, session.session_id));
        }
        if r.user_id != session.user_id {
            push(Some(i), "user_id", format!("{} differs from session user {}", r.user_id, session.user_id));
        }
        if r.day != session.day {
            push(Some(i), "day", format!("{} differs from session day {}", r.day, session.day));
        }
        if !r.watch_time.is_finite() || r.watch_time < 0.0 {
            push(Some(i), "watch_time", format!("must be finite and >= 0, got {}", r.watch_time));
        }
        if !r.video_duration.is_finite() || r.video_duration <= 0.0 {
            push(Some(i), "video_duration", format!("must be finite and > 0, got {}", r.video_duration));
        }
        if r.position_in_page as usize >= PAGE_SIZE {
            push(Some(i), "position_in_page", format!("must be in [0,3], got {}", r.position_in_page));
        }
        let norm = r.content_embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            push(Some(i), "content_embedding", format!("norm {norm} is not 1"));
        }
        if let Some((v, s)) = r.v2v_neighbors.iter().find(|(_, s)| !(0.0..=1.0).contains(s)) {
            push(Some(i), "v2v_neighbors", format!("score {s} for video {v} outside [0,1]"));
        }
        if i > 0 {
            let prev = &session.records[i - 1];
            if r.global_position <= prev.global_position {
                push(
                    Some(i),
                    "global_position",
                    format!("{} does not increase past {}", r.global_position, prev.global_position),
                );
            }
            if r.page_index < prev.page_index {
                push(Some(i), "page_index", format!("{} decreases from {}", r.page_index, prev.page_index));
            }
        }
        match page_counts.iter_mut().find(|(p, _)| *p == r.page_index) {
            Some((_, c)) => *c += 1,
            None => page_counts.push((r.page_index, 1)),
        }
    }
    for (page, count) in page_counts {
        if count > PAGE_SIZE {
            push(
                None,
                "page_index",
                format!("page {page} holds {count} records; each page returns at most {PAGE_SIZE} videos"),
            );
        }
    }
    out
}

/// Capped downstream watch time of record `j`: `min(sum of t_i for i > j, cap)`.
pub fn compute_slide_time(session: &Session, j: usize, cap: f64) -> Result<f64, DataError> {
    if !(cap > 0.0) {
        return Err(DataError::InvalidCap(cap));
    }
    if j >= session.len() {
        return Err(DataError::IndexOutOfRange { index: j, len: session.len() });
    }
    Ok(capped_suffix_sum(&session.records[j + 1..], cap))
}

/// Slide time of every record in the session.
pub fn session_slide_times(session: &Session, cap: f64) -> Result<Vec<f64>, DataError> {
    if !(cap > 0.0) {
        return Err(DataError::InvalidCap(cap));
    }
    Ok((0..session.len())
        .map(|j| capped_suffix_sum(&session.records[j + 1..], cap))
        .collect())
}

fn capped_suffix_sum(rest: &[ImpressionRecord], cap: f64) -> f64 {
    let mut sum = 0.0;
    for r in rest {
        sum += r.watch_time;
        // partial sums of non-negative terms only grow
        if sum >= cap {
            return cap;
        }
    }
    sum
}

/// Per-impression training targets, aligned with [`Dataset::indexed_records`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub session: usize,
    pub record: usize,
    pub slide_time: f64,
    pub pdq_label: f64,
    pub attributed_slide_time: f64,
    /// Only set on delayed-stream copies.
    pub author_ltv: Option<f64>,
    pub watch_time_label: f64,
    pub completion_label: f64,
    pub interaction_label: f64,
}

/// Slide time plus the current-value labels; PDQ and attributed labels start at zero.
pub fn base_examples(dataset: &Dataset, cap: f64) -> Result<Vec<LabeledExample>, DataError> {
    let mut out = Vec::with_capacity(dataset.num_records());
    for (s, session) in dataset.sessions.iter().enumerate() {
        let slides = session_slide_times(session, cap)?;
        for (r, (rec, slide)) in session.records.iter().zip(slides).enumerate() {
            out.push(LabeledExample {
                session: s,
                record: r,
                slide_time: slide,
                pdq_label: 0.0,
                attributed_slide_time: 0.0,
                author_ltv: None,
                watch_time_label: rec.watch_time,
                completion_label: rec.completion(),
                interaction_label: if rec.interaction { 1.0 } else { 0.0 },
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk format
//
// Line 1 is the header `#ltvrank-dataset v1`. Every following line is one
// record; tab-separated fields in this order:
//
//   session_id user_id day page_index position_in_page global_position
//   video_id author_id category_id retrieval_source_id collection_id
//   watch_time video_duration interaction revisit_flag
//   content_embedding v2v_neighbors
//
// collection_id is `-` when absent. Flags are 0/1. The embedding is a
// comma-separated list of reals; neighbors are `video:score` pairs separated
// by commas, or `-` for none. Reals use `{:.8e}` (9 significant digits) and
// `0` for zero. Consecutive lines with the same session_id form a session.
// ---------------------------------------------------------------------------

const RECORD_FIELDS: [&str; 17] = [
    "session_id",
    "user_id",
    "day",
    "page_index",
    "position_in_page",
    "global_position",
    "video_id",
    "author_id",
    "category_id",
    "retrieval_source_id",
    "collection_id",
    "watch_time",
    "video_duration",
    "interaction",
    "revisit_flag",
    "content_embedding",
    "v2v_neighbors",
];

pub fn write_dataset<W: Write>(dataset: &Dataset, mut w: W) -> io::Result<()> {
    writeln!(w, "{DATASET_HEADER}")?;
    let mut line = String::with_capacity(512);
    for r in dataset.records() {
        line.clear();
        encode_record(r, &mut line);
        w.write_all(line.as_bytes())?;
    }
    w.flush()
}

fn encode_record(r: &ImpressionRecord, line: &mut String) {
    use std::fmt::Write as _;
    let collection = r.collection_id.map_or_else(|| "-".to_string(), |c| c.to_string());
    let _ = write!(
        line,
        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t",
        r.session_id,
        r.user_id,
        r.day,
        r.page_index,
        r.position_in_page,
        r.global_position,
        r.video_id,
        r.author_id,
        r.category_id,
        r.retrieval_source_id,
        collection,
        format_real(r.watch_time),
        format_real(r.video_duration),
        r.interaction as u8,
        r.revisit_flag as u8,
    );
    for (k, x) in r.content_embedding.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        line.push_str(&format_real(*x));
    }
    line.push('\t');
    if r.v2v_neighbors.is_empty() {
        line.push('-');
    }
    for (k, (v, s)) in r.v2v_neighbors.iter().enumerate() {
        if k > 0 {
            line.push(',');
        }
        let _ = write!(line, "{v}:{}", format_real(*s));
    }
    line.push('\n');
}

pub fn read_dataset<R: BufRead>(reader: R) -> Result<Dataset, DataError> {
    let mut sessions: Vec<Session> = Vec::new();
    let mut lines = LineReader::new(reader);
    lines.expect_header(DATASET_HEADER)?;
    while let Some((line_no, offset, line)) = lines.next_line()? {
        let rec = decode_record(&line, line_no, offset)?;
        match sessions.last_mut() {
            Some(s) if s.session_id == rec.session_id => s.records.push(rec),
            _ => sessions.push(Session {
                session_id: rec.session_id,
                user_id: rec.user_id,
                day: rec.day,
                records: vec![rec],
            }),
        }
    }
    Ok(Dataset { sessions })
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<(), DataError> {
    let file = File::create(path)?;
    write_dataset(dataset, BufWriter::new(file))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Line iterator that tracks 1-based line numbers and byte offsets.
pub(crate) struct LineReader<R> {
    inner: R,
    line_no: usize,
    offset: u64,
    buf: String,
    past_header: bool,
}

impl<R: BufRead> LineReader<R> {
    pub(crate) fn new(inner: R) -> Self {
        Self { inner, line_no: 0, offset: 0, buf: String::new(), past_header: false }
    }

    pub(crate) fn expect_header(&mut self, header: &str) -> Result<(), DataError> {
        match self.next_line()? {
            Some((_, _, l)) if l == header => {
                self.past_header = true;
                Ok(())
            }
            Some((line, offset, l)) => Err(DataError::Parse {
                line,
                offset,
                field: "header",
                message: format!("expected `{header}`, found `{l}`"),
            }),
            None => Err(DataError::Parse {
                line: 1,
                offset: 0,
                field: "header",
                message: "file is empty".into(),
            }),
        }
    }

    /// Returns `(line number, byte offset of line start, line without '\n')`.
    /// Lines starting with `#` after the header are metadata and skipped.
    pub(crate) fn next_line(&mut self) -> Result<Option<(usize, u64, String)>, DataError> {
        loop {
            let next = self.raw_line()?;
            match next {
                Some((_, _, ref l)) if self.past_header && l.starts_with('#') => continue,
                other => return Ok(other),
            }
        }
    }

    fn raw_line(&mut self) -> Result<Option<(usize, u64, String)>, DataError> {
        self.buf.clear();
        let n = self.inner.read_line(&mut self.buf)?;
        if n == 0 {
            return Ok(None);
        }
        self.line_no += 1;
        let start = self.offset;
        self.offset += n as u64;
        if !self.buf.ends_with('\n') {
            return Err(DataError::Parse {
                line: self.line_no,
                offset: start,
                field: "line",
                message: format!("truncated record: missing newline after byte {}", self.offset),
            });
        }
        self.buf.pop();
        Ok(Some((self.line_no, start, std::mem::take(&mut self.buf))))
    }
}

struct FieldCursor<'a> {
    fields: std::str::Split<'a, char>,
    line: usize,
    offset: u64,
    consumed: u64,
}

impl<'a> FieldCursor<'a> {
    fn new(line_text: &'a str, line: usize, offset: u64) -> Self {
        Self { fields: line_text.split('\t'), line, offset, consumed: 0 }
    }

    fn err(&self, field: &'static str, message: impl Into<String>) -> DataError {
        DataError::Parse { line: self.line, offset: self.offset + self.consumed, field, message: message.into() }
    }

    fn next(&mut self, field: &'static str) -> Result<&'a str, DataError> {
        match self.fields.next() {
            Some(f) => {
                let at = self.consumed;
                self.consumed += f.len() as u64 + 1;
                if f.is_empty() {
                    self.consumed = at;
                    return Err(self.err(field, "empty field"));
                }
                Ok(f)
            }
            None => Err(self.err(field, "missing field (record truncated)")),
        }
    }

    fn parse<T: std::str::FromStr>(&mut self, field: &'static str) -> Result<T, DataError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.next(field)?;
        raw.parse().map_err(|e: T::Err| {
            self.consumed -= raw.len() as u64 + 1;
            self.err(field, format!("cannot parse `{raw}`: {e}"))
        })
    }

    fn flag(&mut self, field: &'static str) -> Result<bool, DataError> {
        match self.next(field)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(self.err(field, format!("expected 0 or 1, got `{other}`"))),
        }
    }

    fn finish(&mut self) -> Result<(), DataError> {
        if self.fields.next().is_some() {
            return Err(self.err("line", "unexpected trailing fields"));
        }
        Ok(())
    }
}

fn decode_record(text: &str, line: usize, offset: u64) -> Result<ImpressionRecord, DataError> {
    let mut c = FieldCursor::new(text, line, offset);
    let session_id = c.parse(RECORD_FIELDS[0])?;
    let user_id = c.parse(RECORD_FIELDS[1])?;
    let day = c.parse(RECORD_FIELDS[2])?;
    let page_index = c.parse(RECORD_FIELDS[3])?;
    let position_in_page = c.parse(RECORD_FIELDS[4])?;
    let global_position = c.parse(RECORD_FIELDS[5])?;
    let video_id = c.parse(RECORD_FIELDS[6])?;
    let author_id = c.parse(RECORD_FIELDS[7])?;
    let category_id = c.parse(RECORD_FIELDS[8])?;
    let retrieval_source_id = c.parse(RECORD_FIELDS[9])?;
    let collection_id = match c.next(RECORD_FIELDS[10])? {
        "-" => None,
        raw => Some(raw.parse().map_err(|e| c.err(RECORD_FIELDS[10], format!("cannot parse `{raw}`: {e}")))?),
    };
    let watch_time = c.parse(RECORD_FIELDS[11])?;
    let video_duration = c.parse(RECORD_FIELDS[12])?;
    let interaction = c.flag(RECORD_FIELDS[13])?;
    let revisit_flag = c.flag(RECORD_FIELDS[14])?;
    let emb_raw = c.next(RECORD_FIELDS[15])?;
    let content_embedding = emb_raw
        .split(',')
        .map(|x| x.parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| c.err(RECORD_FIELDS[15], e.to_string()))?;
    let nb_raw = c.next(RECORD_FIELDS[16])?;
    let v2v_neighbors = if nb_raw == "-" {
        Vec::new()
    } else {
        nb_raw
            .split(',')
            .map(|pair| {
                let (v, s) = pair.split_once(':').ok_or_else(|| format!("`{pair}` is not video:score"))?;
                Ok((
                    v.parse::<u64>().map_err(|e| e.to_string())?,
                    s.parse::<f64>().map_err(|e| e.to_string())?,
                ))
            })
            .collect::<Result<Vec<_>, String>>()
            .map_err(|e| c.err(RECORD_FIELDS[16], e))?
    };
    c.finish()?;
    Ok(ImpressionRecord {
        user_id,
        video_id,
        author_id,
        category_id,
        retrieval_source_id,
        collection_id,
        session_id,
        day,
        page_index,
        position_in_page,
        global_position,
        watch_time,
        video_duration,
        interaction,
        content_embedding,
        v2v_neighbors,
        revisit_flag,
    })
}

/// Writes labels in dataset order: one line per example,
/// `session record slide_time pdq attributed author_ltv(-) watch completion interaction`.
pub fn write_labels<W: Write>(labels: &[LabeledExample], mut w: W) -> io::Result<()> {
    writeln!(w, "{LABELS_HEADER}")?;
    for l in labels {
        let author = l.author_ltv.map_or_else(|| "-".to_string(), format_real);
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            l.session,
            l.record,
            format_real(l.slide_time),
            format_real(l.pdq_label),
            format_real(l.attributed_slide_time),
            author,
            format_real(l.watch_time_label),
            format_real(l.completion_label),
            format_real(l.interaction_label),
        )?;
    }
    w.flush()
}

pub fn read_labels<R: BufRead>(reader: R) -> Result<Vec<LabeledExample>, DataError> {
    let mut lines = LineReader::new(reader);
    lines.expect_header(LABELS_HEADER)?;
    let mut out = Vec::new();
    while let Some((line, offset, text)) = lines.next_line()? {
        let mut c = FieldCursor::new(&text, line, offset);
        let session = c.parse("session")?;
        let record = c.parse("record")?;
        let slide_time = c.parse("slide_time")?;
        let pdq_label = c.parse("pdq_label")?;
        let attributed_slide_time = c.parse("attributed_slide_time")?;
        let author_ltv = match c.next("author_ltv")? {
            "-" => None,
            raw => Some(raw.parse().map_err(|e| c.err("author_ltv", format!("cannot parse `{raw}`: {e}")))?),
        };
        let watch_time_label = c.parse("watch_time_label")?;
        let completion_label = c.parse("completion_label")?;
        let interaction_label = c.parse("interaction_label")?;
        c.finish()?;
        out.push(LabeledExample {
            session,
            record,
            slide_time,
            pdq_label,
            attributed_slide_time,
            author_ltv,
            watch_time_label,
            completion_label,
            interaction_label,
        });
    }
    Ok(out)
}
