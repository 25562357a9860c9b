//! Service logic independent of HTTP: sessions, pool lifecycle, and write ordering.
//!
//! Write order per operation:
//! - new or refreshed batch: request rows, then the journal entry, then the reply;
//! - belief: the belief row, then (seen branch) the rating row, then the reply.
//!
//! On restart, answered slots are derived from the belief log, so a reply lost to a
//! crash can never let a slot be answered twice.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use elicit_core::catalog::{is_recent_release, Catalog, Movie, RatingEvent};
use elicit_core::dataset::{BeliefRecord, BeliefResponse, Certainty, ElicitRequestRecord, RecommendationLogRecord};
use elicit_core::pool::{build_pool, ElicitationPool, PoolCache, PoolConfig};
use elicit_core::sampler::{
    rank_top_picks, refresh_batch, sample_batch, BatchId, ElicitationBatch, ElicitationHistory, ItemMeanPredictor,
    RatingPredictor, SamplingContext, TOP_PICKS_WINDOW,
};
use elicit_core::types::{date_of, parse_date, MovieId, Rating, Timestamp, UserId};

use crate::store::{JournalEntry, Store, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Invalid(String),
    #[error("elicitation pool unavailable: {0}")]
    Unavailable(String),
    #[error("forbidden")]
    Forbidden,
    #[error("missing or invalid user token")]
    Unauthorized,
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub trait Clock: Send + Sync {
    /// Unix seconds.
    fn now(&self) -> Timestamp;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        chrono::Utc::now().timestamp()
    }
}

/// Settable clock for tests and replays.
#[derive(Debug, Default)]
pub struct ManualClock(AtomicI64);

impl ManualClock {
    pub fn new(now: Timestamp) -> ManualClock {
        ManualClock(AtomicI64::new(now))
    }

    pub fn set(&self, now: Timestamp) {
        self.0.store(now, Ordering::SeqCst);
    }

    pub fn advance(&self, seconds: i64) {
        self.0.fetch_add(seconds, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    pub pool_y: f64,
    pub admin_token: Option<String>,
    /// When set, user endpoints require `Bearer` [`user_token`].
    pub user_token_secret: Option<String>,
    pub top_picks_shown: usize,
    pub seed: u64,
}

impl ServiceConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> ServiceConfig {
        ServiceConfig {
            data_dir: data_dir.into(),
            pool_y: 11.0,
            admin_token: None,
            user_token_secret: None,
            top_picks_shown: 10,
            seed: 0,
        }
    }

    /// Reads `DATA_DIR`, `POOL_Y`, `ADMIN_TOKEN` and `USER_TOKEN_SECRET`.
    pub fn from_env() -> Result<ServiceConfig, String> {
        let data_dir = std::env::var("DATA_DIR").unwrap_or_else(|_| "data".to_string());
        let mut config = ServiceConfig::new(data_dir);
        if let Ok(y) = std::env::var("POOL_Y") {
            config.pool_y = y.parse().map_err(|_| format!("bad POOL_Y {y:?}"))?;
        }
        config.admin_token = std::env::var("ADMIN_TOKEN").ok().filter(|t| !t.is_empty());
        config.user_token_secret = std::env::var("USER_TOKEN_SECRET").ok().filter(|t| !t.is_empty());
        Ok(config)
    }
}

/// Demo bearer token for `user`: hex SHA-256 of `secret:user`.
pub fn user_token(secret: &str, user: UserId) -> String {
    hex::encode(Sha256::digest(format!("{secret}:{user}").as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct SlotView {
    pub movie_id: u32,
    pub title: String,
    pub answered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BatchView {
    pub user_id: u32,
    pub batch_id: Option<u64>,
    pub created_at: Timestamp,
    pub slots: Vec<SlotView>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shortfall_reason: Option<String>,
}

/// Body of `POST /users/{id}/beliefs`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct BeliefSubmission {
    pub movie_id: u32,
    pub batch_id: u64,
    pub is_seen: i8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_predict_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_certainty: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_elicit_rating: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub watch_date: Option<String>,
}

impl BeliefSubmission {
    /// Checks the branch invariants of a belief row.
    pub fn response(&self) -> Result<BeliefResponse, ServiceError> {
        let invalid = |m: &str| ServiceError::Invalid(m.to_string());
        let rating = |v: f64| Rating::from_f64(v).map_err(|e| ServiceError::Invalid(e.to_string()));
        match self.is_seen {
            0 => {
                if self.user_elicit_rating.is_some() || self.watch_date.is_some() {
                    return Err(invalid("isSeen=0 takes no userElicitRating or watchDate"));
                }
                let predicted = rating(self.user_predict_rating.ok_or_else(|| invalid("missing userPredictRating"))?)?;
                let level = self.user_certainty.ok_or_else(|| invalid("missing userCertainty"))?;
                let certainty = u8::try_from(level)
                    .ok()
                    .and_then(Certainty::new)
                    .ok_or_else(|| ServiceError::Invalid(format!("userCertainty {level} outside 1..=5")))?;
                Ok(BeliefResponse::NotSeen { predicted, certainty })
            }
            1 => {
                if self.user_predict_rating.is_some() || self.user_certainty.is_some() {
                    return Err(invalid("isSeen=1 takes no userPredictRating or userCertainty"));
                }
                let rating = rating(self.user_elicit_rating.ok_or_else(|| invalid("missing userElicitRating"))?)?;
                let watch_date = match &self.watch_date {
                    None => None,
                    Some(s) if s.is_empty() => None,
                    Some(s) => Some(parse_date(s).ok_or_else(|| ServiceError::Invalid(format!("bad watchDate {s:?}")))?),
                };
                Ok(BeliefResponse::Seen { rating, watch_date })
            }
            other => Err(ServiceError::Invalid(format!("isSeen must be 0 or 1, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct TopPick {
    pub position: u32,
    pub movie_id: u32,
    pub title: String,
    pub predicted_rating: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct PoolSummary {
    pub month: String,
    pub size: usize,
    pub rebuilt: bool,
}

#[derive(Debug, Default)]
struct Session {
    batch: Option<ElicitationBatch>,
    answered: BTreeSet<MovieId>,
    rated: BTreeSet<MovieId>,
    history: ElicitationHistory,
    /// Request rows logged for this user; also seeds the sampling stream.
    requests: u64,
    /// Belief rows logged for this user, in file order.
    beliefs: u64,
    /// Restore only: `beliefs` when the journaled batch was created.
    beliefs_at_batch: u64,
    /// Second of the last logged top-picks impression.
    last_rec_log: Option<Timestamp>,
    last_ts: Timestamp,
}

struct PoolState {
    cache: PoolCache,
    predictor: Arc<ItemMeanPredictor>,
}

struct CatalogState {
    movies: Vec<Movie>,
    titles: BTreeMap<MovieId, String>,
    events: Vec<RatingEvent>,
}

pub struct Service {
    config: ServiceConfig,
    store: Store,
    clock: Arc<dyn Clock>,
    catalog: Mutex<CatalogState>,
    pool: Mutex<PoolState>,
    sessions: Mutex<HashMap<UserId, Arc<Mutex<Session>>>>,
    next_batch: AtomicU64,
}

impl Service {
    /// Opens the data directory, repairing torn writes and rebuilding sessions from the logs.
    pub fn open(config: ServiceConfig, clock: Arc<dyn Clock>) -> Result<Service, ServiceError> {
        let (store, recovered) = Store::open(&config.data_dir)?;
        let mut sessions: HashMap<UserId, Session> = HashMap::new();
        for r in &recovered.ratings {
            let s = sessions.entry(r.user_id).or_default();
            s.rated.insert(r.movie_id);
        }
        for r in &recovered.rec_log {
            let s = sessions.entry(r.user_id).or_default();
            s.last_rec_log = s.last_rec_log.max(Some(r.timestamp));
            s.last_ts = s.last_ts.max(r.timestamp);
        }
        let mut max_batch = 0;
        for entry in &recovered.journal {
            let batch = entry
                .to_batch()
                .map_err(|e| ServiceError::Invalid(format!("journal batch {}: {e}", entry.batch_id)))?;
            max_batch = max_batch.max(entry.batch_id);
            let s = sessions.entry(batch.user_id).or_default();
            s.last_ts = s.last_ts.max(batch.created_at);
            s.beliefs_at_batch = entry.beliefs_before.unwrap_or(u64::MAX);
            s.batch = Some(batch);
        }

        // Answers to the open batch are the user's belief rows logged after it; entries
        // without a row count fall back to timestamps.
        for b in &recovered.beliefs {
            let s = sessions.entry(b.user_id).or_default();
            let after = match s.beliefs_at_batch {
                u64::MAX => s.batch.as_ref().is_some_and(|batch| b.timestamp >= batch.created_at),
                n => s.beliefs >= n,
            };
            s.beliefs += 1;
            if let Some(batch) = &s.batch {
                if after && b.response.is_response() && batch.contains(b.movie_id) {
                    s.answered.insert(b.movie_id);
                }
            }
        }

        // Replay presentations and responses in time order; a request sorts before a
        // belief stamped in the same second.
        enum Event<'a> {
            Request(&'a ElicitRequestRecord),
            Belief(&'a BeliefRecord),
        }
        let mut events: Vec<(Timestamp, u8, Event<'_>)> = recovered
            .requests
            .iter()
            .map(|r| (r.timestamp, 0, Event::Request(r)))
            .chain(recovered.beliefs.iter().map(|b| (b.timestamp, 1, Event::Belief(b))))
            .collect();
        events.sort_by_key(|(ts, kind, _)| (*ts, *kind));
        for (_, _, event) in events {
            match event {
                Event::Request(r) => {
                    let s = sessions.entry(r.user_id).or_default();
                    s.history
                        .record_presentation(r.user_id, r.movie_id, r.timestamp, r.batch_id)
                        .map_err(|e| ServiceError::Invalid(e.to_string()))?;
                    s.requests += 1;
                    s.last_ts = s.last_ts.max(r.timestamp);
                }
                Event::Belief(b) => {
                    let s = sessions.entry(b.user_id).or_default();
                    s.last_ts = s.last_ts.max(b.timestamp);
                    if !b.response.is_response() {
                        continue;
                    }
                    // Rows without a logged presentation (imported data) stay unattached.
                    let _ = s.history.record_response(b.user_id, b.movie_id, b.response.is_seen_code());
                }
            }
        }

        let titles = recovered.movies.iter().map(|m| (m.id, m.title.clone())).collect();
        Ok(Service {
            config,
            store,
            clock,
            catalog: Mutex::new(CatalogState {
                movies: recovered.movies,
                titles,
                events: recovered.ratings,
            }),
            pool: Mutex::new(PoolState {
                cache: PoolCache::new(),
                predictor: Arc::new(ItemMeanPredictor::default()),
            }),
            sessions: Mutex::new(
                sessions
                    .into_iter()
                    .map(|(k, v)| (k, Arc::new(Mutex::new(v))))
                    .collect(),
            ),
            next_batch: AtomicU64::new(max_batch + 1),
        })
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn check_user_token(&self, user: UserId, bearer: Option<&str>) -> Result<(), ServiceError> {
        match &self.config.user_token_secret {
            None => Ok(()),
            Some(secret) if bearer == Some(user_token(secret, user).as_str()) => Ok(()),
            Some(_) => Err(ServiceError::Unauthorized),
        }
    }

    fn session(&self, user: UserId) -> Arc<Mutex<Session>> {
        self.sessions
            .lock()
            .expect("session map lock")
            .entry(user)
            .or_default()
            .clone()
    }

    /// The current month's pool, built (or loaded from disk) on first use in a month.
    fn pool_for(&self, date: NaiveDate) -> Result<(Arc<ElicitationPool>, Arc<ItemMeanPredictor>, bool), ServiceError> {
        let mut state = self.pool.lock().expect("pool lock");
        let mut predictor = None;
        let (pool, rebuilt) = state.cache.get_or_build(date, |month| {
            let catalog = {
                let c = self.catalog.lock().expect("catalog lock");
                Catalog::new(c.movies.clone(), c.events.clone())
                    .map_err(|e| ServiceError::Unavailable(e.to_string()))?
            };
            let snapshot = catalog.snapshot(month.first_day());
            predictor = Some(ItemMeanPredictor::from_snapshot(&snapshot));
            if let Some(pool) = self.store.load_pool(month)? {
                return Ok(pool);
            }
            let shares = catalog
                .genre_shares()
                .map_err(|e| ServiceError::Unavailable(e.to_string()))?;
            let config = PoolConfig {
                y: self.config.pool_y,
                rng_seed: self.config.seed ^ (u64::from(month.year as u32) << 8 | u64::from(month.month)),
                ..PoolConfig::default()
            };
            let pool = build_pool(&snapshot, &shares, &config).map_err(|e| ServiceError::Unavailable(e.to_string()))?;
            self.store.save_pool(&pool)?;
            Ok::<_, ServiceError>(pool)
        })?;
        if let Some(p) = predictor {
            state.predictor = Arc::new(p);
        }
        Ok((pool, state.predictor.clone(), rebuilt))
    }

    fn now_for(&self, session: &Session) -> Timestamp {
        self.clock.now().max(session.last_ts)
    }

    fn view(&self, user: UserId, session: &Session) -> BatchView {
        let catalog = self.catalog.lock().expect("catalog lock");
        match &session.batch {
            None => BatchView {
                user_id: user.0,
                batch_id: None,
                created_at: session.last_ts,
                slots: Vec::new(),
                shortfall_reason: Some("exhausted".to_string()),
            },
            Some(batch) => BatchView {
                user_id: user.0,
                batch_id: Some(batch.batch_id.0),
                created_at: batch.created_at,
                slots: batch
                    .slots
                    .iter()
                    .map(|s| SlotView {
                        movie_id: s.movie_id.0,
                        title: catalog.titles.get(&s.movie_id).cloned().unwrap_or_default(),
                        answered: session.answered.contains(&s.movie_id),
                    })
                    .collect(),
                shortfall_reason: batch.shortfall_reason.clone(),
            },
        }
    }

    fn top_picks_for(&self, user: UserId, session: &Session, date: NaiveDate, predictor: &ItemMeanPredictor) -> Vec<MovieId> {
        let catalog = self.catalog.lock().expect("catalog lock");
        let candidates = catalog
            .movies
            .iter()
            .filter(|m| m.release_date.is_none_or(|d| d <= date) && !session.rated.contains(&m.id))
            .map(|m| m.id);
        rank_top_picks(user, candidates, predictor, TOP_PICKS_WINDOW)
    }

    fn recent(&self, date: NaiveDate) -> BTreeSet<MovieId> {
        let catalog = self.catalog.lock().expect("catalog lock");
        let months = PoolConfig::default().recent_threshold_months;
        catalog
            .movies
            .iter()
            .filter(|m| is_recent_release(m.release_date, date, months))
            .map(|m| m.id)
            .collect()
    }

    /// Returns the open batch, creating one if absent; `refresh` replaces answered slots.
    pub fn get_batch(&self, user: UserId, refresh: bool) -> Result<BatchView, ServiceError> {
        let session = self.session(user);
        let mut session = session.lock().expect("session lock");
        if !refresh && session.batch.is_some() {
            return Ok(self.view(user, &session));
        }
        let now = self.now_for(&session);
        let date = date_of(now);
        let answered: BTreeSet<MovieId> = match &session.batch {
            Some(b) => session.answered.iter().copied().filter(|m| b.contains(*m)).collect(),
            None => BTreeSet::new(),
        };
        if session.batch.is_some() && answered.is_empty() {
            return Ok(self.view(user, &session));
        }

        let (pool, predictor, _) = self.pool_for(date)?;
        let top_picks = self.top_picks_for(user, &session, date, &predictor);
        let recent = self.recent(date);
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ (u64::from(user.0) << 32) ^ session.requests);
        let batch_id = BatchId(self.next_batch.fetch_add(1, Ordering::SeqCst));
        let ctx = SamplingContext {
            pool: &pool,
            rated: &session.rated,
            history: &session.history,
            predictor: predictor.as_ref(),
            top_picks: &top_picks,
            recent: &recent,
            now,
        };
        let (batch, fresh) = match &session.batch {
            Some(current) => {
                let next = refresh_batch(&ctx, current, &answered, batch_id, &mut rng);
                let fresh = next.new_slots_since(current);
                (next, fresh)
            }
            None => {
                let next = sample_batch(&ctx, user, batch_id, &mut rng);
                let fresh = next.slots.clone();
                (next, fresh)
            }
        };
        if batch.slots.is_empty() && session.batch.is_none() {
            return Ok(BatchView {
                user_id: user.0,
                batch_id: None,
                created_at: now,
                slots: Vec::new(),
                shortfall_reason: batch.shortfall_reason,
            });
        }

        self.store.append_requests(&batch.request_records(fresh.iter()))?;
        self.store
            .append_journal(&JournalEntry::from_batch(&batch, session.beliefs))?;
        session
            .history
            .record_batch(&batch, &fresh)
            .map_err(|e| ServiceError::Invalid(e.to_string()))?;
        session.requests += fresh.len() as u64;
        session.last_ts = now;
        // Refresh replaces every answered slot; a re-drawn movie starts unanswered.
        session.answered.clear();
        session.batch = Some(batch);
        Ok(self.view(user, &session))
    }

    /// Records one answer to a slot of the user's current batch.
    pub fn submit_belief(&self, user: UserId, submission: &BeliefSubmission) -> Result<BeliefRecord, ServiceError> {
        let session = self.session(user);
        let mut session = session.lock().expect("session lock");
        let movie = MovieId(submission.movie_id);
        let batch = session
            .batch
            .as_ref()
            .filter(|b| b.batch_id.0 == submission.batch_id)
            .ok_or_else(|| ServiceError::NotFound(format!("batch {} is not open for user {user}", submission.batch_id)))?;
        if !batch.contains(movie) {
            return Err(ServiceError::NotFound(format!(
                "movie {movie} is not in batch {}",
                submission.batch_id
            )));
        }
        if session.answered.contains(&movie) {
            return Err(ServiceError::Conflict(format!("movie {movie} already answered")));
        }
        let response = submission.response()?;
        let now = self.now_for(&session);
        let record = BeliefRecord {
            timestamp: now,
            user_id: user,
            movie_id: movie,
            response,
        };
        self.store.append_beliefs(&[record])?;
        session.beliefs += 1;
        if let BeliefResponse::Seen { rating, .. } = response {
            let event = RatingEvent {
                user_id: user,
                movie_id: movie,
                rating,
                timestamp: now,
            };
            self.store.append_ratings(&[event])?;
            self.catalog.lock().expect("catalog lock").events.push(event);
            session.rated.insert(movie);
        }
        session.answered.insert(movie);
        let _ = session.history.record_response(user, movie, response.is_seen_code());
        session.last_ts = now;
        Ok(record)
    }

    /// Serves and logs the user's first `top_picks_shown` recommendations.
    pub fn top_picks(&self, user: UserId) -> Result<Vec<TopPick>, ServiceError> {
        let session = self.session(user);
        let mut session = session.lock().expect("session lock");
        let now = self.now_for(&session);
        let date = date_of(now);
        let (_, predictor, _) = self.pool_for(date)?;
        let list = self.top_picks_for(user, &session, date, &predictor);
        let shown: Vec<MovieId> = list.into_iter().take(self.config.top_picks_shown).collect();
        let rows: Vec<RecommendationLogRecord> = shown
            .iter()
            .enumerate()
            .map(|(i, m)| RecommendationLogRecord {
                timestamp: now,
                user_id: user,
                position: i as u32 + 1,
                movie_id: *m,
            })
            .collect();
        // The list changes weekly, so a repeat within the same second is the same impression.
        if session.last_rec_log != Some(now) {
            self.store.append_rec_log(&rows)?;
            session.last_rec_log = Some(now);
        }
        session.last_ts = now;
        let catalog = self.catalog.lock().expect("catalog lock");
        Ok(shown
            .iter()
            .enumerate()
            .map(|(i, m)| TopPick {
                position: i as u32 + 1,
                movie_id: m.0,
                title: catalog.titles.get(m).cloned().unwrap_or_default(),
                predicted_rating: predictor.predict(user, *m).map_or(0.0, Rating::value),
            })
            .collect())
    }

    /// Admin trigger: builds the current month's pool unless it is already cached.
    pub fn rebuild_pool(&self, bearer: Option<&str>) -> Result<PoolSummary, ServiceError> {
        match (&self.config.admin_token, bearer) {
            (Some(token), Some(given)) if token == given => {}
            _ => return Err(ServiceError::Forbidden),
        }
        let (pool, _, rebuilt) = self.pool_for(date_of(self.clock.now()))?;
        Ok(PoolSummary {
            month: pool.month.to_string(),
            size: pool.len(),
            rebuilt,
        })
    }

    /// The pool currently cached, if any.
    pub fn current_pool(&self) -> Option<Arc<ElicitationPool>> {
        self.pool.lock().expect("pool lock").cache.current()
    }
}
