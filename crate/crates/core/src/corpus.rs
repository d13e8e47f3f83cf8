//! Message model, JSONL ingestion, tokenization and weekly bucketing.
//!
//! Messages are stored one JSON object per line:
//!
//! ```text
//! {"id": "m1", "timestamp": "2009-09-01T12:00:00Z", "author": "jane", "text": "i have the flu"}
//! ```
//!
//! Weeks end on Saturday and a bucket covers the seven UTC days ending on
//! (and including) its `end_date`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Datelike, Duration, NaiveDate, NaiveDateTime, Utc, Weekday};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";
pub const MAX_TEXT_CHARS: usize = 1000;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: duplicate message id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("{0} is not a Saturday")]
    NotSaturday(NaiveDate),
    #[error("{} message(s) fall outside every week bucket: {}", .ids.len(), .ids.join(","))]
    OutsideBuckets { ids: Vec<String> },
    #[error("ILI file line {line}: {reason}")]
    Ili { line: usize, reason: String },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

/// Serde adapter for the `YYYY-MM-DDTHH:MM:SSZ` timestamp format.
pub mod timestamp {
    use super::TIMESTAMP_FORMAT;
    use chrono::{DateTime, NaiveDateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&ts.format(TIMESTAMP_FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&raw, TIMESTAMP_FORMAT)
            .map(|naive| naive.and_utc())
            .map_err(|e| serde::de::Error::custom(format!("bad timestamp {raw:?}: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub id: String,
    #[serde(with = "timestamp")]
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub author: String,
    pub text: String,
}

impl Message {
    pub fn new(
        id: impl Into<String>,
        timestamp: DateTime<Utc>,
        author: impl Into<String>,
        text: impl Into<String>,
    ) -> Self {
        Message {
            id: id.into(),
            timestamp,
            author: author.into(),
            text: text.into(),
        }
    }
}

/// Parses a timestamp in the wire format.
pub fn parse_timestamp(raw: &str) -> Option<DateTime<Utc>> {
    NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
        .ok()
        .map(|naive| naive.and_utc())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedMessage {
    pub message: Message,
    pub tokens: Vec<String>,
}

impl TokenizedMessage {
    pub fn new(message: Message) -> Self {
        let tokens = tokenize(&message.text);
        TokenizedMessage { message, tokens }
    }
}

/// Inclusive range of UTC calendar days.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn contains(&self, ts: &DateTime<Utc>) -> bool {
        let day = ts.date_naive();
        self.start <= day && day <= self.end
    }
}

/// Reads a JSONL file of messages, keeping records inside `range`, sorted by
/// timestamp (ties broken by id).
pub fn ingest(path: impl AsRef<Path>, range: DateRange) -> Result<Vec<Message>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let records: Vec<Message> = read_records(BufReader::new(file), path, |m: &Message| &m.id)?;
    let mut kept: Vec<Message> = records
        .into_iter()
        .filter(|m| range.contains(&m.timestamp))
        .collect();
    sort_messages(&mut kept);
    Ok(kept)
}

pub fn sort_messages(messages: &mut [Message]) {
    messages.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
}

/// Line-by-line JSONL reader shared by message and labeled-message files.
/// Blank lines are skipped; ids must be non-empty and unique; text is
/// limited to [`MAX_TEXT_CHARS`].
pub fn read_records<T, R, F>(reader: R, path: &Path, id_of: F) -> Result<Vec<T>>
where
    T: DeserializeOwned + HasText,
    R: BufRead,
    F: Fn(&T) -> &String,
{
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: T = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            reason: e.to_string(),
        })?;
        let id = id_of(&record);
        if id.is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: "empty id".into(),
            });
        }
        let chars = record.text().chars().count();
        if chars > MAX_TEXT_CHARS {
            return Err(CorpusError::Malformed {
                line: line_no,
                reason: format!("text has {chars} characters (limit {MAX_TEXT_CHARS})"),
            });
        }
        if !seen.insert(id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: id.clone(),
                line: line_no,
            });
        }
        out.push(record);
    }
    Ok(out)
}

pub trait HasText {
    fn text(&self) -> &str;
}

impl HasText for Message {
    fn text(&self) -> &str {
        &self.text
    }
}

/// Writes messages as JSONL, one record per line.
pub fn write_messages<W: Write>(mut w: W, messages: &[Message]) -> std::io::Result<()> {
    for m in messages {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\''
}

/// Lowercases `text` and splits it on every character that is not a letter,
/// digit or apostrophe. A URL (a maximal non-whitespace run beginning with
/// `http` at a token start) becomes the single token `http`. Apostrophes at
/// either end of a token are trimmed, so quoting does not glue onto words.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut tokens = Vec::new();
    let mut current = String::new();
    let mut chars = lower.char_indices().peekable();
    while let Some((pos, c)) = chars.next() {
        if current.is_empty() && lower[pos..].starts_with("http") {
            // Swallow the whole URL up to the next whitespace.
            while chars.peek().is_some_and(|&(_, n)| !n.is_whitespace()) {
                chars.next();
            }
            tokens.push("http".to_string());
            continue;
        }
        if is_token_char(c) {
            current.push(c);
        } else {
            flush_token(&mut current, &mut tokens);
        }
    }
    flush_token(&mut current, &mut tokens);
    tokens
}

fn flush_token(current: &mut String, tokens: &mut Vec<String>) {
    let trimmed = current.trim_matches('\'');
    if !trimmed.is_empty() {
        tokens.push(trimmed.to_string());
    }
    current.clear();
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeekBucket {
    pub week_index: u32,
    pub end_date: NaiveDate,
    pub messages: Vec<TokenizedMessage>,
}

impl WeekBucket {
    pub fn new(week_index: u32, end_date: NaiveDate) -> Self {
        WeekBucket {
            week_index,
            end_date,
            messages: Vec::new(),
        }
    }

    pub fn start_date(&self) -> NaiveDate {
        self.end_date - Duration::days(6)
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }
}

/// Week index (1-based) of `ts` relative to weeks ending `first_week_end`,
/// or `None` if it precedes week 1.
pub fn week_of(ts: &DateTime<Utc>, first_week_end: NaiveDate) -> Option<u32> {
    let first_start = first_week_end - Duration::days(6);
    let days = (ts.date_naive() - first_start).num_days();
    if days < 0 {
        None
    } else {
        Some((days / 7) as u32 + 1)
    }
}

pub fn week_end_date(first_week_end: NaiveDate, week_index: u32) -> NaiveDate {
    first_week_end + Duration::days(7 * (i64::from(week_index) - 1))
}

/// Buckets messages into consecutive Saturday-ending weeks, as many as the
/// latest message requires. Empty weeks in the middle are kept.
pub fn bucket_weekly(messages: &[Message], first_week_end: NaiveDate) -> Result<Vec<WeekBucket>> {
    check_saturday(first_week_end)?;
    let n_weeks = messages
        .iter()
        .filter_map(|m| week_of(&m.timestamp, first_week_end))
        .max()
        .unwrap_or(0);
    bucket_weeks(messages, first_week_end, n_weeks)
}

/// Buckets messages into exactly `n_weeks` weeks; any message outside them
/// is an error listing the offending ids.
pub fn bucket_weeks(
    messages: &[Message],
    first_week_end: NaiveDate,
    n_weeks: u32,
) -> Result<Vec<WeekBucket>> {
    check_saturday(first_week_end)?;
    let mut buckets: Vec<WeekBucket> = (1..=n_weeks)
        .map(|w| WeekBucket::new(w, week_end_date(first_week_end, w)))
        .collect();
    let mut outside = Vec::new();
    for m in messages {
        match week_of(&m.timestamp, first_week_end) {
            Some(w) if w >= 1 && w <= n_weeks => buckets[w as usize - 1]
                .messages
                .push(TokenizedMessage::new(m.clone())),
            _ => outside.push(m.id.clone()),
        }
    }
    if !outside.is_empty() {
        return Err(CorpusError::OutsideBuckets { ids: outside });
    }
    Ok(buckets)
}

pub fn empty_weeks(buckets: &[WeekBucket]) -> Vec<u32> {
    buckets
        .iter()
        .filter(|b| b.is_empty())
        .map(|b| b.week_index)
        .collect()
}

fn check_saturday(date: NaiveDate) -> Result<()> {
    if date.weekday() == Weekday::Sat {
        Ok(())
    } else {
        Err(CorpusError::NotSaturday(date))
    }
}

/// One row of the CDC-style reference file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IliWeek {
    pub week_ending: NaiveDate,
    pub ili_pct: f64,
}

impl IliWeek {
    pub fn proportion(&self) -> f64 {
        self.ili_pct / 100.0
    }
}

/// Reads `week_ending,ili_pct` rows. Weeks must be consecutive Saturdays and
/// percentages strictly inside (0, 100).
pub fn read_ili(path: impl AsRef<Path>) -> Result<Vec<IliWeek>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_ili(BufReader::new(file))
}

pub fn parse_ili<R: std::io::Read>(reader: R) -> Result<Vec<IliWeek>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CorpusError::Ili {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["week_ending", "ili_pct"] {
        return Err(CorpusError::Ili {
            line: 1,
            reason: format!(
                "expected header week_ending,ili_pct, found {}",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut weeks: Vec<IliWeek> = Vec::new();
    for (i, row) in rdr.deserialize::<IliWeek>().enumerate() {
        let line = i + 2;
        let week = row.map_err(|e| CorpusError::Ili {
            line,
            reason: e.to_string(),
        })?;
        if !(week.ili_pct > 0.0 && week.ili_pct < 100.0) {
            return Err(CorpusError::Ili {
                line,
                reason: format!("ili_pct {} outside (0, 100)", week.ili_pct),
            });
        }
        if week.week_ending.weekday() != Weekday::Sat {
            return Err(CorpusError::Ili {
                line,
                reason: format!("{} is not a Saturday", week.week_ending),
            });
        }
        if let Some(prev) = weeks.last() {
            if week.week_ending - prev.week_ending != Duration::days(7) {
                return Err(CorpusError::Ili {
                    line,
                    reason: format!(
                        "{} does not follow {} by one week",
                        week.week_ending, prev.week_ending
                    ),
                });
            }
        }
        weeks.push(week);
    }
    if weeks.is_empty() {
        return Err(CorpusError::Ili {
            line: 1,
            reason: "no rows".into(),
        });
    }
    Ok(weeks)
}

pub fn write_ili<W: Write>(w: W, weeks: &[IliWeek]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for week in weeks {
        wtr.serialize(week).map_err(std::io::Error::other)?;
    }
    wtr.flush()
}

/// Date range covered by a reference series: from the first day of its first
/// week to its last Saturday.
pub fn ili_date_range(weeks: &[IliWeek]) -> Option<DateRange> {
    let first = weeks.first()?;
    let last = weeks.last()?;
    Some(DateRange::new(
        first.week_ending - Duration::days(6),
        last.week_ending,
    ))
}
