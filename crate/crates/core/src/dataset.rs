//! Readers and writers for the released tables: beliefs, ratings,
//! recommendation logs, elicitation requests and consumption events.
//!
//! Writers emit one canonical form (fixed column order, empty field for an
//! absent optional, one decimal place for grid ratings, LF line endings), so
//! reading a canonical file and writing it back reproduces it byte for byte.
//! Readers are lenient about column order and a few column-name synonyms but
//! reject unknown columns and any row that breaks a record invariant,
//! reporting the file line.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use chrono::NaiveDate;

use crate::catalog::RatingEvent;
use crate::sampler::{BatchId, SlotSource};
use crate::types::{parse_date, MovieId, Rating, Timestamp, UserId};

pub const BELIEFS_FILE: &str = "beliefs.csv";
pub const RATINGS_FILE: &str = "ratings.csv";
pub const REC_LOG_FILE: &str = "rec_log.csv";
pub const ELICIT_LOG_FILE: &str = "elicit_log.csv";
pub const CONSUMPTION_FILE: &str = "consumption.csv";
pub const MOVIES_FILE: &str = "movies.csv";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{file}:{line}: {message}")]
    Row {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

/// Self-reported certainty on the 1..=5 scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Certainty(u8);

impl Certainty {
    pub fn new(level: u8) -> Option<Certainty> {
        (1..=5).contains(&level).then_some(Certainty(level))
    }

    pub fn level(self) -> u8 {
        self.0
    }

    /// Reverse-coded certainty: 1 (sure) ..= 5 (unsure).
    pub fn uncertainty(self) -> f64 {
        f64::from(6 - self.0)
    }
}

/// Outcome of one elicitation prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BeliefResponse {
    /// isSeen = -1.
    NoResponse,
    /// isSeen = 0: expected rating and certainty for an unseen movie.
    NotSeen { predicted: Rating, certainty: Certainty },
    /// isSeen = 1: a rating and an optional approximate watch date.
    Seen {
        rating: Rating,
        watch_date: Option<NaiveDate>,
    },
}

impl BeliefResponse {
    pub fn is_seen_code(&self) -> i8 {
        match self {
            BeliefResponse::NoResponse => -1,
            BeliefResponse::NotSeen { .. } => 0,
            BeliefResponse::Seen { .. } => 1,
        }
    }

    pub fn is_response(&self) -> bool {
        !matches!(self, BeliefResponse::NoResponse)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BeliefRecord {
    pub timestamp: Timestamp,
    pub user_id: UserId,
    pub movie_id: MovieId,
    pub response: BeliefResponse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RecommendationLogRecord {
    pub timestamp: Timestamp,
    pub user_id: UserId,
    pub position: u32,
    pub movie_id: MovieId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ElicitRequestRecord {
    pub timestamp: Timestamp,
    pub user_id: UserId,
    pub movie_id: MovieId,
    pub source: SlotSource,
    pub batch_id: BatchId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConsumptionRecord {
    pub timestamp: Timestamp,
    pub user_id: UserId,
    pub movie_id: MovieId,
}

/// One row-oriented table with a canonical serialization.
pub trait Record: Sized {
    const FILE_NAME: &'static str;
    /// Canonical column order.
    const COLUMNS: &'static [&'static str];
    /// Extra accepted header names (normalized: lowercase, no `_`/space) and their column index.
    const SYNONYMS: &'static [(&'static str, usize)] = &[];

    /// Parses fields given in canonical column order.
    fn parse(fields: &[&str]) -> Result<Self, String>;
    fn encode(&self, out: &mut String);
    fn user(&self) -> UserId;
    fn movie(&self) -> MovieId;

    /// Invariants spanning several rows; returns (line, message) pairs.
    fn cross_check(_rows: &[(u64, Self)]) -> Vec<(u64, String)> {
        Vec::new()
    }
}

fn parse_u32(field: &str, name: &str) -> Result<u32, String> {
    field
        .trim()
        .parse::<u32>()
        .ok()
        .filter(|v| *v > 0)
        .ok_or_else(|| format!("bad {name} {field:?}"))
}

fn parse_ts(field: &str) -> Result<Timestamp, String> {
    field
        .trim()
        .parse::<i64>()
        .map_err(|_| format!("bad timestamp {field:?}"))
}

fn parse_rating(field: &str) -> Result<Rating, String> {
    field.parse::<Rating>().map_err(|e| e.to_string())
}

impl Record for BeliefRecord {
    const FILE_NAME: &'static str = BELIEFS_FILE;
    const COLUMNS: &'static [&'static str] = &[
        "timestamp",
        "userId",
        "movieId",
        "isSeen",
        "userElicitRating",
        "watchDate",
        "userPredictRating",
        "userCertainty",
    ];
    const SYNONYMS: &'static [(&'static str, usize)] = &[
        ("tstamp", 0),
        ("seen", 3),
        ("elicitrating", 4),
        ("predictrating", 6),
        ("predictedrating", 6),
        ("certainty", 7),
    ];

    fn parse(f: &[&str]) -> Result<Self, String> {
        let timestamp = parse_ts(f[0])?;
        let user_id = UserId(parse_u32(f[1], "userId")?);
        let movie_id = MovieId(parse_u32(f[2], "movieId")?);
        let present = |s: &str| !s.trim().is_empty();
        let response = match f[3].trim() {
            "-1" => {
                if f[4..8].iter().any(|s| present(s)) {
                    return Err("isSeen=-1 row carries response fields".into());
                }
                BeliefResponse::NoResponse
            }
            "0" => {
                if present(f[4]) || present(f[5]) {
                    return Err("isSeen=0 row carries userElicitRating/watchDate".into());
                }
                if !present(f[6]) {
                    return Err("isSeen=0 row is missing userPredictRating".into());
                }
                if !present(f[7]) {
                    return Err("isSeen=0 row is missing userCertainty".into());
                }
                let certainty = f[7]
                    .trim()
                    .parse::<u8>()
                    .ok()
                    .and_then(Certainty::new)
                    .ok_or_else(|| format!("userCertainty {:?} outside 1..=5", f[7]))?;
                BeliefResponse::NotSeen {
                    predicted: parse_rating(f[6])?,
                    certainty,
                }
            }
            "1" => {
                if present(f[6]) || present(f[7]) {
                    return Err("isSeen=1 row carries userPredictRating/userCertainty".into());
                }
                if !present(f[4]) {
                    return Err("isSeen=1 row is missing userElicitRating".into());
                }
                let watch_date = if present(f[5]) {
                    Some(parse_date(f[5]).ok_or_else(|| format!("bad watchDate {:?}", f[5]))?)
                } else {
                    None
                };
                BeliefResponse::Seen {
                    rating: parse_rating(f[4])?,
                    watch_date,
                }
            }
            other => return Err(format!("isSeen {other:?} not in {{-1,0,1}}")),
        };
        Ok(BeliefRecord {
            timestamp,
            user_id,
            movie_id,
            response,
        })
    }

    fn encode(&self, out: &mut String) {
        let _ = write!(
            out,
            "{},{},{},{},",
            self.timestamp,
            self.user_id,
            self.movie_id,
            self.response.is_seen_code()
        );
        match self.response {
            BeliefResponse::NoResponse => out.push_str(",,,"),
            BeliefResponse::NotSeen {
                predicted,
                certainty,
            } => {
                let _ = write!(out, ",,{},{}", predicted, certainty.level());
            }
            BeliefResponse::Seen { rating, watch_date } => {
                let _ = write!(
                    out,
                    "{},{},,",
                    rating,
                    watch_date.map(|d| d.to_string()).unwrap_or_default()
                );
            }
        }
        out.push('\n');
    }

    fn user(&self) -> UserId {
        self.user_id
    }

    fn movie(&self) -> MovieId {
        self.movie_id
    }
}

impl Record for RatingEvent {
    const FILE_NAME: &'static str = RATINGS_FILE;
    const COLUMNS: &'static [&'static str] = &["userId", "movieId", "rating", "timestamp"];

    fn parse(f: &[&str]) -> Result<Self, String> {
        Ok(RatingEvent {
            user_id: UserId(parse_u32(f[0], "userId")?),
            movie_id: MovieId(parse_u32(f[1], "movieId")?),
            rating: parse_rating(f[2])?,
            timestamp: parse_ts(f[3])?,
        })
    }

    fn encode(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            self.user_id, self.movie_id, self.rating, self.timestamp
        );
    }

    fn user(&self) -> UserId {
        self.user_id
    }

    fn movie(&self) -> MovieId {
        self.movie_id
    }
}

impl Record for RecommendationLogRecord {
    const FILE_NAME: &'static str = REC_LOG_FILE;
    const COLUMNS: &'static [&'static str] = &["timestamp", "userId", "position", "movieId"];
    const SYNONYMS: &'static [(&'static str, usize)] = &[("rank", 2), ("slot", 2)];

    fn parse(f: &[&str]) -> Result<Self, String> {
        Ok(RecommendationLogRecord {
            timestamp: parse_ts(f[0])?,
            user_id: UserId(parse_u32(f[1], "userId")?),
            position: parse_u32(f[2], "position")?,
            movie_id: MovieId(parse_u32(f[3], "movieId")?),
        })
    }

    fn encode(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            self.timestamp, self.user_id, self.position, self.movie_id
        );
    }

    fn user(&self) -> UserId {
        self.user_id
    }

    fn movie(&self) -> MovieId {
        self.movie_id
    }

    fn cross_check(rows: &[(u64, Self)]) -> Vec<(u64, String)> {
        let mut seen = HashSet::new();
        rows.iter()
            .filter(|(_, r)| !seen.insert((r.user_id, r.timestamp, r.position)))
            .map(|(line, r)| {
                (
                    *line,
                    format!(
                        "duplicate position {} for user {} at {}",
                        r.position, r.user_id, r.timestamp
                    ),
                )
            })
            .collect()
    }
}

impl Record for ElicitRequestRecord {
    const FILE_NAME: &'static str = ELICIT_LOG_FILE;
    const COLUMNS: &'static [&'static str] = &["timestamp", "userId", "movieId", "source", "batchId"];

    fn parse(f: &[&str]) -> Result<Self, String> {
        Ok(ElicitRequestRecord {
            timestamp: parse_ts(f[0])?,
            user_id: UserId(parse_u32(f[1], "userId")?),
            movie_id: MovieId(parse_u32(f[2], "movieId")?),
            source: f[3].trim().parse()?,
            batch_id: BatchId(
                f[4].trim()
                    .parse()
                    .map_err(|_| format!("bad batchId {:?}", f[4]))?,
            ),
        })
    }

    fn encode(&self, out: &mut String) {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            self.timestamp, self.user_id, self.movie_id, self.source, self.batch_id.0
        );
    }

    fn user(&self) -> UserId {
        self.user_id
    }

    fn movie(&self) -> MovieId {
        self.movie_id
    }
}

impl Record for ConsumptionRecord {
    const FILE_NAME: &'static str = CONSUMPTION_FILE;
    const COLUMNS: &'static [&'static str] = &["timestamp", "userId", "movieId"];

    fn parse(f: &[&str]) -> Result<Self, String> {
        Ok(ConsumptionRecord {
            timestamp: parse_ts(f[0])?,
            user_id: UserId(parse_u32(f[1], "userId")?),
            movie_id: MovieId(parse_u32(f[2], "movieId")?),
        })
    }

    fn encode(&self, out: &mut String) {
        let _ = writeln!(out, "{},{},{}", self.timestamp, self.user_id, self.movie_id);
    }

    fn user(&self) -> UserId {
        self.user_id
    }

    fn movie(&self) -> MovieId {
        self.movie_id
    }
}

/// A located problem found while reading a table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub file: String,
    pub line: u64,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}: {}", self.file, self.line, self.message)
    }
}

/// Everything a total (never failing) scan of a table produced.
#[derive(Debug)]
pub struct Scan<T> {
    pub rows: Vec<(u64, T)>,
    pub violations: Vec<Violation>,
}

fn normalize(name: &str) -> String {
    name.trim()
        .trim_start_matches('\u{feff}')
        .chars()
        .filter(|c| *c != '_' && *c != ' ')
        .flat_map(char::to_lowercase)
        .collect()
}

/// Scans `bytes` as table `T`; never panics, every failure becomes a [`Violation`].
pub fn scan_bytes<T: Record>(bytes: &[u8], file: &str) -> Scan<T> {
    let violation = |line: u64, message: String| Violation {
        file: file.to_string(),
        line,
        message,
    };
    let mut scan = Scan {
        rows: Vec::new(),
        violations: Vec::new(),
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes);
    let mut records = rdr.byte_records();

    let header = match records.next() {
        None => {
            scan.violations.push(violation(1, "missing header".into()));
            return scan;
        }
        Some(Err(e)) => {
            scan.violations.push(violation(1, e.to_string()));
            return scan;
        }
        Some(Ok(h)) => h,
    };
    // column index in file -> canonical index
    let mut mapping = Vec::with_capacity(header.len());
    let mut filled = vec![false; T::COLUMNS.len()];
    for raw in header.iter() {
        let name = String::from_utf8_lossy(raw);
        let key = normalize(&name);
        let slot = T::COLUMNS
            .iter()
            .position(|c| normalize(c) == key)
            .or_else(|| T::SYNONYMS.iter().find(|(s, _)| *s == key).map(|(_, i)| *i));
        match slot {
            Some(i) if !filled[i] => {
                filled[i] = true;
                mapping.push(i);
            }
            Some(_) => {
                scan.violations.push(violation(1, format!("duplicate column {name:?}")));
                return scan;
            }
            None => {
                scan.violations.push(violation(1, format!("unknown column {name:?}")));
                return scan;
            }
        }
    }
    if let Some(missing) = filled.iter().position(|f| !f) {
        scan.violations
            .push(violation(1, format!("missing column {:?}", T::COLUMNS[missing])));
        return scan;
    }

    let mut line = 1;
    for record in records {
        match record {
            Err(e) => {
                line = e.position().map_or(line + 1, |p| p.line());
                scan.violations.push(violation(line, e.to_string()));
            }
            Ok(rec) => {
                line = rec.position().map_or(line + 1, |p| p.line());
                if rec.len() != mapping.len() {
                    scan.violations.push(violation(
                        line,
                        format!("expected {} fields, found {}", mapping.len(), rec.len()),
                    ));
                    continue;
                }
                let mut fields: Vec<&str> = vec![""; T::COLUMNS.len()];
                let mut utf8_ok = true;
                for (raw, &slot) in rec.iter().zip(&mapping) {
                    match std::str::from_utf8(raw) {
                        Ok(s) => fields[slot] = s,
                        Err(_) => utf8_ok = false,
                    }
                }
                if !utf8_ok {
                    scan.violations.push(violation(line, "invalid UTF-8".into()));
                    continue;
                }
                match T::parse(&fields) {
                    Ok(r) => scan.rows.push((line, r)),
                    Err(m) => scan.violations.push(violation(line, m)),
                }
            }
        }
    }
    for (line, message) in T::cross_check(&scan.rows) {
        scan.violations.push(violation(line, message));
    }
    scan.violations.sort_by_key(|v| v.line);
    scan
}

/// Strict reader: the first violation rejects the file.
pub fn read_bytes<T: Record>(bytes: &[u8], file: &str) -> Result<Vec<T>, DatasetError> {
    let scan = scan_bytes::<T>(bytes, file);
    if let Some(v) = scan.violations.into_iter().next() {
        return Err(DatasetError::Row {
            file: v.file,
            line: v.line,
            message: v.message,
        });
    }
    Ok(scan.rows.into_iter().map(|(_, r)| r).collect())
}

pub fn read_table<T: Record>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_bytes(&bytes, &path.display().to_string())
}

pub fn header_line<T: Record>() -> String {
    let mut s = T::COLUMNS.join(",");
    s.push('\n');
    s
}

pub fn encode_rows<'a, T: Record + 'a, I: IntoIterator<Item = &'a T>>(records: I) -> String {
    let mut out = String::new();
    for r in records {
        r.encode(&mut out);
    }
    out
}

pub fn encode_table<'a, T: Record + 'a, I: IntoIterator<Item = &'a T>>(records: I) -> String {
    let mut out = header_line::<T>();
    out.push_str(&encode_rows(records));
    out
}

pub fn write_table<'a, T: Record + 'a, I: IntoIterator<Item = &'a T>>(
    records: I,
    path: &Path,
) -> Result<(), DatasetError> {
    fs::write(path, encode_table(records)).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Appends rows to a table file, writing the header first when the file is new or empty.
pub fn append_rows<'a, T: Record + 'a, I: IntoIterator<Item = &'a T>>(
    records: I,
    path: &Path,
) -> io::Result<()> {
    let mut file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    if file.metadata()?.len() == 0 {
        buf.push_str(&header_line::<T>());
    }
    buf.push_str(&encode_rows(records));
    file.write_all(buf.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TableSummary {
    pub file: String,
    pub rows: usize,
    pub distinct_users: usize,
    pub distinct_movies: usize,
}

/// Result of [`validate_corpus`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub tables: Vec<TableSummary>,
    /// Belief rows with isSeen in {0, 1}.
    pub belief_responses: usize,
    pub responding_users: usize,
    pub responded_movies: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn table(&self, file: &str) -> Option<&TableSummary> {
        self.tables.iter().find(|t| t.file == file)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>10} {:>8} {:>8}", "table", "rows", "users", "movies")?;
        for t in &self.tables {
            writeln!(
                f,
                "{:<18} {:>10} {:>8} {:>8}",
                t.file, t.rows, t.distinct_users, t.distinct_movies
            )?;
        }
        writeln!(
            f,
            "belief responses: {} from {} users over {} movies",
            self.belief_responses, self.responding_users, self.responded_movies
        )?;
        writeln!(f, "violations: {}", self.violations.len())?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

fn summarize<T: Record>(scan: &Scan<T>) -> TableSummary {
    TableSummary {
        file: T::FILE_NAME.to_string(),
        rows: scan.rows.len(),
        distinct_users: scan.rows.iter().map(|(_, r)| r.user()).collect::<BTreeSet<_>>().len(),
        distinct_movies: scan.rows.iter().map(|(_, r)| r.movie()).collect::<BTreeSet<_>>().len(),
    }
}

fn scan_file<T: Record>(dir: &Path, report: &mut ValidationReport) -> Option<Scan<T>> {
    let path = dir.join(T::FILE_NAME);
    if !path.exists() {
        return None;
    }
    let scan = match fs::read(&path) {
        Ok(bytes) => scan_bytes::<T>(&bytes, T::FILE_NAME),
        Err(e) => Scan {
            rows: Vec::new(),
            violations: vec![Violation {
                file: T::FILE_NAME.to_string(),
                line: 0,
                message: e.to_string(),
            }],
        },
    };
    report.tables.push(summarize(&scan));
    report.violations.extend(scan.violations.iter().cloned());
    Some(scan)
}

/// Validates every known table present in `dir`. Never fails; problems are reported.
pub fn validate_corpus(dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let beliefs = scan_file::<BeliefRecord>(dir, &mut report);
    scan_file::<RatingEvent>(dir, &mut report);
    scan_file::<RecommendationLogRecord>(dir, &mut report);
    let requests = scan_file::<ElicitRequestRecord>(dir, &mut report);
    scan_file::<ConsumptionRecord>(dir, &mut report);

    if let Some(beliefs) = &beliefs {
        let responses: Vec<&(u64, BeliefRecord)> = beliefs
            .rows
            .iter()
            .filter(|(_, b)| b.response.is_response())
            .collect();
        report.belief_responses = responses.len();
        report.responding_users = responses.iter().map(|(_, b)| b.user_id).collect::<BTreeSet<_>>().len();
        report.responded_movies = responses.iter().map(|(_, b)| b.movie_id).collect::<BTreeSet<_>>().len();

        if let Some(requests) = &requests {
            let mut first_request: HashMap<(UserId, MovieId), Timestamp> = HashMap::new();
            for (_, r) in &requests.rows {
                first_request
                    .entry((r.user_id, r.movie_id))
                    .and_modify(|t| *t = (*t).min(r.timestamp))
                    .or_insert(r.timestamp);
            }
            for (line, b) in responses {
                let matched = first_request
                    .get(&(b.user_id, b.movie_id))
                    .is_some_and(|t| *t <= b.timestamp);
                if !matched {
                    report.violations.push(Violation {
                        file: BELIEFS_FILE.to_string(),
                        line: *line,
                        message: format!(
                            "belief for user {} movie {} has no preceding elicitation request",
                            b.user_id, b.movie_id
                        ),
                    });
                }
            }
        }
    }
    report
}
