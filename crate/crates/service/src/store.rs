//! Append-only persistence: the dataset tables plus a batch journal.
//!
//! Every append is one `write` of whole lines. A process killed mid-append can leave a
//! partial last line; [`Store::open`] cuts every file back to its last newline before
//! reading it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use elicit_core::catalog::{read_movies, Movie, RatingEvent};
use elicit_core::dataset::{
    self, header_line, BeliefRecord, BeliefResponse, DatasetError, ElicitRequestRecord, RecommendationLogRecord,
    Record,
};
use elicit_core::pool::{read_pool, write_pool, ElicitationPool};
use elicit_core::sampler::{BatchId, ElicitationBatch, Slot, SlotSource};
use elicit_core::types::{MovieId, Timestamp, UserId, YearMonth};

pub const JOURNAL_FILE: &str = "batches.jsonl";
pub const POOLS_DIR: &str = "pools";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Catalog(String),
    #[error("{file}:{line}: {message}")]
    Journal { file: String, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Truncates `path` after its last `\n`; returns the number of bytes removed.
pub fn repair_tail(path: &Path) -> io::Result<u64> {
    let mut file = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(0),
        Err(e) => return Err(e),
    };
    let len = file.metadata()?.len();
    if len == 0 {
        return Ok(0);
    }
    // Scan backwards in chunks for the last newline.
    let mut end = len;
    let mut buf = vec![0u8; 8192];
    let keep = loop {
        let start = end.saturating_sub(buf.len() as u64);
        let chunk = &mut buf[..(end - start) as usize];
        file.seek(SeekFrom::Start(start))?;
        file.read_exact(chunk)?;
        if let Some(pos) = chunk.iter().rposition(|b| *b == b'\n') {
            break start + pos as u64 + 1;
        }
        if start == 0 {
            break 0;
        }
        end = start;
    };
    if keep < len {
        file.set_len(keep)?;
        file.sync_all()?;
    }
    Ok(len - keep)
}

/// One journaled batch, as created or refreshed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JournalEntry {
    pub batch_id: u64,
    pub user_id: u32,
    pub created_at: Timestamp,
    pub slots: Vec<JournalSlot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shortfall_reason: Option<String>,
    /// The user's belief rows already on disk when the batch was created. Only later rows
    /// can answer its slots; timestamps alone are ambiguous within one second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beliefs_before: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct JournalSlot {
    pub movie_id: u32,
    pub source: String,
}

impl JournalEntry {
    pub fn from_batch(batch: &ElicitationBatch, beliefs_before: u64) -> JournalEntry {
        JournalEntry {
            batch_id: batch.batch_id.0,
            user_id: batch.user_id.0,
            created_at: batch.created_at,
            slots: batch
                .slots
                .iter()
                .map(|s| JournalSlot {
                    movie_id: s.movie_id.0,
                    source: s.source.name().to_string(),
                })
                .collect(),
            shortfall_reason: batch.shortfall_reason.clone(),
            beliefs_before: Some(beliefs_before),
        }
    }

    pub fn to_batch(&self) -> Result<ElicitationBatch, String> {
        let slots = self
            .slots
            .iter()
            .map(|s| {
                Ok(Slot {
                    movie_id: MovieId(s.movie_id),
                    source: s.source.parse::<SlotSource>()?,
                })
            })
            .collect::<Result<Vec<_>, String>>()?;
        Ok(ElicitationBatch {
            user_id: UserId(self.user_id),
            batch_id: BatchId(self.batch_id),
            created_at: self.created_at,
            slots,
            shortfall_reason: self.shortfall_reason.clone(),
        })
    }
}

struct Appender {
    path: PathBuf,
    file: Mutex<File>,
}

impl Appender {
    fn open(path: PathBuf, header: Option<String>) -> Result<Appender, StoreError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        if let Some(h) = header {
            if file.metadata().map_err(io_err(&path))?.len() == 0 {
                file.write_all(h.as_bytes()).map_err(io_err(&path))?;
            }
        }
        Ok(Appender {
            path,
            file: Mutex::new(file),
        })
    }

    fn append(&self, bytes: &[u8]) -> Result<(), StoreError> {
        if bytes.is_empty() {
            return Ok(());
        }
        let mut file = self.file.lock().expect("appender lock");
        file.write_all(bytes).map_err(io_err(&self.path))
    }
}

/// Everything read back at startup.
#[derive(Debug, Default)]
pub struct Recovered {
    pub movies: Vec<Movie>,
    pub ratings: Vec<RatingEvent>,
    pub beliefs: Vec<BeliefRecord>,
    pub requests: Vec<ElicitRequestRecord>,
    pub rec_log: Vec<RecommendationLogRecord>,
    pub journal: Vec<JournalEntry>,
    /// (file, bytes cut from a torn tail).
    pub truncated: Vec<(String, u64)>,
    /// Rating rows written to complete seen responses whose rating was lost.
    pub repaired_ratings: usize,
}

pub struct Store {
    dir: PathBuf,
    ratings: Appender,
    beliefs: Appender,
    requests: Appender,
    rec_log: Appender,
    journal: Appender,
}

fn read_optional<T: Record>(dir: &Path) -> Result<Vec<T>, StoreError> {
    let path = dir.join(T::FILE_NAME);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(&path)(e)),
    };
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    Ok(dataset::read_bytes(&bytes, T::FILE_NAME)?)
}

impl Store {
    /// Repairs torn tails, reads every table and the journal, and opens the appenders.
    /// `movies.csv` must exist in `dir`.
    pub fn open(dir: &Path) -> Result<(Store, Recovered), StoreError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut recovered = Recovered::default();
        for file in [
            dataset::RATINGS_FILE,
            dataset::BELIEFS_FILE,
            dataset::ELICIT_LOG_FILE,
            dataset::REC_LOG_FILE,
            JOURNAL_FILE,
        ] {
            let path = dir.join(file);
            let cut = repair_tail(&path).map_err(io_err(&path))?;
            if cut > 0 {
                recovered.truncated.push((file.to_string(), cut));
            }
        }

        let movies_path = dir.join(dataset::MOVIES_FILE);
        let movies_file = File::open(&movies_path).map_err(io_err(&movies_path))?;
        recovered.movies = read_movies(movies_file, dataset::MOVIES_FILE).map_err(|e| StoreError::Catalog(e.to_string()))?;
        recovered.ratings = read_optional(dir)?;
        recovered.beliefs = read_optional(dir)?;
        recovered.requests = read_optional(dir)?;
        recovered.rec_log = read_optional(dir)?;
        recovered.journal = read_journal(&dir.join(JOURNAL_FILE))?;

        let store = Store {
            dir: dir.to_path_buf(),
            ratings: Appender::open(dir.join(dataset::RATINGS_FILE), Some(header_line::<RatingEvent>()))?,
            beliefs: Appender::open(dir.join(dataset::BELIEFS_FILE), Some(header_line::<BeliefRecord>()))?,
            requests: Appender::open(
                dir.join(dataset::ELICIT_LOG_FILE),
                Some(header_line::<ElicitRequestRecord>()),
            )?,
            rec_log: Appender::open(
                dir.join(dataset::REC_LOG_FILE),
                Some(header_line::<RecommendationLogRecord>()),
            )?,
            journal: Appender::open(dir.join(JOURNAL_FILE), None)?,
        };

        // A seen response is written before its rating; finish any that lost the rating.
        let mut latest_rating: HashMap<(UserId, MovieId), Timestamp> = HashMap::new();
        for r in &recovered.ratings {
            let t = latest_rating.entry((r.user_id, r.movie_id)).or_insert(r.timestamp);
            *t = (*t).max(r.timestamp);
        }
        let missing: Vec<RatingEvent> = recovered
            .beliefs
            .iter()
            .filter_map(|b| match b.response {
                BeliefResponse::Seen { rating, .. } => {
                    let has = latest_rating
                        .get(&(b.user_id, b.movie_id))
                        .is_some_and(|t| *t >= b.timestamp);
                    (!has).then_some(RatingEvent {
                        user_id: b.user_id,
                        movie_id: b.movie_id,
                        rating,
                        timestamp: b.timestamp,
                    })
                }
                _ => None,
            })
            .collect();
        if !missing.is_empty() {
            store.append_ratings(&missing)?;
            recovered.repaired_ratings = missing.len();
            recovered.ratings.extend(missing);
        }
        Ok((store, recovered))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append_ratings(&self, rows: &[RatingEvent]) -> Result<(), StoreError> {
        self.ratings.append(dataset::encode_rows(rows).as_bytes())
    }

    pub fn append_beliefs(&self, rows: &[BeliefRecord]) -> Result<(), StoreError> {
        self.beliefs.append(dataset::encode_rows(rows).as_bytes())
    }

    pub fn append_requests(&self, rows: &[ElicitRequestRecord]) -> Result<(), StoreError> {
        self.requests.append(dataset::encode_rows(rows).as_bytes())
    }

    pub fn append_rec_log(&self, rows: &[RecommendationLogRecord]) -> Result<(), StoreError> {
        self.rec_log.append(dataset::encode_rows(rows).as_bytes())
    }

    pub fn append_journal(&self, entry: &JournalEntry) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(entry).expect("journal entries serialize");
        line.push('\n');
        self.journal.append(line.as_bytes())
    }

    fn pool_path(&self, month: YearMonth) -> PathBuf {
        self.dir.join(POOLS_DIR).join(format!("{month}.csv"))
    }

    pub fn load_pool(&self, month: YearMonth) -> Result<Option<ElicitationPool>, StoreError> {
        let path = self.pool_path(month);
        match File::open(&path) {
            Ok(f) => read_pool(io::BufReader::new(f))
                .map(Some)
                .map_err(|e| StoreError::Catalog(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    /// Writes the pool to a temporary file and renames it into place.
    pub fn save_pool(&self, pool: &ElicitationPool) -> Result<(), StoreError> {
        let path = self.pool_path(pool.month);
        let dir = path.parent().expect("pool path has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = path.with_extension("csv.tmp");
        let mut buf = Vec::new();
        write_pool(pool, &mut buf).map_err(io_err(&tmp))?;
        fs::write(&tmp, &buf).map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))
    }
}

fn read_journal(path: &Path) -> Result<Vec<JournalEntry>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Journal {
                file: JOURNAL_FILE.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
