//! Per-user elicitation batches drawn from the month's pool.
//!
//! A batch has eight slots: four `rec` movies drawn from the first 100 of the
//! user's top picks that have a predicted rating, one `new` recent release and
//! three `broad` movies drawn from everything the user may be asked about.
//! Candidates are always pool movies the user has not rated and that were not
//! presented to them twice in the trailing 90 days. When the `rec` or `new`
//! reservoir runs dry the slot is filled from the broad reservoir instead.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::catalog::{Catalog, CatalogSnapshot};
use crate::dataset::ElicitRequestRecord;
use crate::pool::ElicitationPool;
use crate::types::{MovieId, Rating, Timestamp, UserId, SECONDS_PER_DAY};

pub const BATCH_SIZE: usize = 8;
pub const BROAD_SLOTS: usize = 3;
pub const REC_SLOTS: usize = 4;
pub const NEW_SLOTS: usize = 1;
/// Rec slots draw from this many leading top picks.
pub const TOP_PICKS_WINDOW: usize = 100;
pub const EXCLUSION_WINDOW_SECS: i64 = 90 * SECONDS_PER_DAY;
pub const EXCLUSION_LIMIT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotSource {
    Broad,
    Rec,
    New,
}

impl SlotSource {
    pub fn name(self) -> &'static str {
        match self {
            SlotSource::Broad => "broad",
            SlotSource::Rec => "rec",
            SlotSource::New => "new",
        }
    }
}

impl fmt::Display for SlotSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SlotSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "broad" => Ok(SlotSource::Broad),
            "rec" => Ok(SlotSource::Rec),
            "new" => Ok(SlotSource::New),
            other => Err(format!("unknown slot source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BatchId(pub u64);

impl fmt::Display for BatchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Slot {
    pub movie_id: MovieId,
    pub source: SlotSource,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElicitationBatch {
    pub user_id: UserId,
    pub batch_id: BatchId,
    pub created_at: Timestamp,
    pub slots: Vec<Slot>,
    pub shortfall_reason: Option<String>,
}

impl ElicitationBatch {
    pub fn movie_ids(&self) -> impl Iterator<Item = MovieId> + '_ {
        self.slots.iter().map(|s| s.movie_id)
    }

    pub fn contains(&self, movie: MovieId) -> bool {
        self.slots.iter().any(|s| s.movie_id == movie)
    }

    /// (broad, rec, new) slot counts.
    pub fn composition(&self) -> (usize, usize, usize) {
        let count = |src| self.slots.iter().filter(|s| s.source == src).count();
        (count(SlotSource::Broad), count(SlotSource::Rec), count(SlotSource::New))
    }

    /// Request-log rows for `slots`, stamped with this batch's id and creation time.
    pub fn request_records<'a, I>(&self, slots: I) -> Vec<ElicitRequestRecord>
    where
        I: IntoIterator<Item = &'a Slot>,
    {
        slots
            .into_iter()
            .map(|s| ElicitRequestRecord {
                timestamp: self.created_at,
                user_id: self.user_id,
                movie_id: s.movie_id,
                source: s.source,
                batch_id: self.batch_id,
            })
            .collect()
    }

    /// Slots of `self` that were not in `previous` (what a refresh newly presents).
    pub fn new_slots_since(&self, previous: &ElicitationBatch) -> Vec<Slot> {
        self.slots
            .iter()
            .filter(|s| !previous.contains(s.movie_id))
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Presentation {
    pub timestamp: Timestamp,
    pub batch_id: BatchId,
    /// isSeen code of the response to this presentation, if any.
    pub response: Option<i8>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HistoryError {
    #[error("presentation at {at} precedes the last one for user {user} movie {movie}")]
    OutOfOrder { user: UserId, movie: MovieId, at: Timestamp },
    #[error("response for user {user} movie {movie} without a presentation")]
    NoPresentation { user: UserId, movie: MovieId },
}

/// Every presentation of a movie to a user, in time order, with its response.
#[derive(Debug, Clone, Default)]
pub struct ElicitationHistory {
    by_user: HashMap<UserId, HashMap<MovieId, Vec<Presentation>>>,
}

impl ElicitationHistory {
    pub fn new() -> ElicitationHistory {
        ElicitationHistory::default()
    }

    pub fn record_presentation(
        &mut self,
        user: UserId,
        movie: MovieId,
        timestamp: Timestamp,
        batch_id: BatchId,
    ) -> Result<(), HistoryError> {
        let list = self.by_user.entry(user).or_default().entry(movie).or_default();
        if list.last().is_some_and(|p| p.timestamp > timestamp) {
            return Err(HistoryError::OutOfOrder {
                user,
                movie,
                at: timestamp,
            });
        }
        list.push(Presentation {
            timestamp,
            batch_id,
            response: None,
        });
        Ok(())
    }

    pub fn record_batch(&mut self, batch: &ElicitationBatch, slots: &[Slot]) -> Result<(), HistoryError> {
        for s in slots {
            self.record_presentation(batch.user_id, s.movie_id, batch.created_at, batch.batch_id)?;
        }
        Ok(())
    }

    /// Attaches a response to the latest presentation of the pair.
    pub fn record_response(&mut self, user: UserId, movie: MovieId, is_seen: i8) -> Result<(), HistoryError> {
        let last = self
            .by_user
            .get_mut(&user)
            .and_then(|m| m.get_mut(&movie))
            .and_then(|l| l.last_mut())
            .ok_or(HistoryError::NoPresentation { user, movie })?;
        last.response = Some(is_seen);
        Ok(())
    }

    pub fn presentations(&self, user: UserId, movie: MovieId) -> &[Presentation] {
        self.by_user
            .get(&user)
            .and_then(|m| m.get(&movie))
            .map_or(&[], Vec::as_slice)
    }

    pub fn user_movies(&self, user: UserId) -> impl Iterator<Item = (MovieId, &[Presentation])> + '_ {
        self.by_user
            .get(&user)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (*k, v.as_slice())))
    }
}

/// Pool movies the user has not rated.
pub fn eligible_set(rated: &BTreeSet<MovieId>, pool: &ElicitationPool) -> BTreeSet<MovieId> {
    pool.movie_ids().filter(|m| !rated.contains(m)).collect()
}

/// Movies presented to `user` at least twice within the 90 days ending at `now`.
pub fn excluded_set(user: UserId, history: &ElicitationHistory, now: Timestamp) -> BTreeSet<MovieId> {
    history
        .user_movies(user)
        .filter(|(_, presentations)| {
            presentations
                .iter()
                .filter(|p| p.timestamp <= now && now - p.timestamp <= EXCLUSION_WINDOW_SECS)
                .count()
                >= EXCLUSION_LIMIT
        })
        .map(|(m, _)| m)
        .collect()
}

/// Source of predicted ratings; any (user, movie) -> grid rating map qualifies.
pub trait RatingPredictor: Send + Sync {
    fn predict(&self, user: UserId, movie: MovieId) -> Option<Rating>;
    fn provider(&self) -> &str;
}

/// Explicit table of predictions.
#[derive(Debug, Clone, Default)]
pub struct PredictedRatings {
    provider: String,
    values: HashMap<(UserId, MovieId), Rating>,
}

impl PredictedRatings {
    pub fn new(provider: impl Into<String>) -> PredictedRatings {
        PredictedRatings {
            provider: provider.into(),
            values: HashMap::new(),
        }
    }

    pub fn insert(&mut self, user: UserId, movie: MovieId, rating: Rating) {
        self.values.insert((user, movie), rating);
    }
}

impl RatingPredictor for PredictedRatings {
    fn predict(&self, user: UserId, movie: MovieId) -> Option<Rating> {
        self.values.get(&(user, movie)).copied()
    }

    fn provider(&self) -> &str {
        &self.provider
    }
}

/// Baseline: every user gets the movie's community average.
#[derive(Debug, Clone, Default)]
pub struct ItemMeanPredictor {
    means: HashMap<MovieId, Rating>,
}

impl ItemMeanPredictor {
    pub fn from_snapshot(snapshot: &CatalogSnapshot) -> ItemMeanPredictor {
        ItemMeanPredictor {
            means: snapshot
                .entries()
                .filter_map(|e| e.stats.avg_rating.map(|a| (e.stats.movie_id, Rating::nearest(a))))
                .collect(),
        }
    }
}

impl RatingPredictor for ItemMeanPredictor {
    fn predict(&self, _user: UserId, movie: MovieId) -> Option<Rating> {
        self.means.get(&movie).copied()
    }

    fn provider(&self) -> &str {
        "item-mean"
    }
}

/// Baseline: each user's own mean rating for every movie.
#[derive(Debug, Clone, Default)]
pub struct UserMeanPredictor {
    means: HashMap<UserId, Rating>,
}

impl UserMeanPredictor {
    pub fn from_catalog(catalog: &Catalog) -> UserMeanPredictor {
        let mut acc: HashMap<UserId, (f64, u32)> = HashMap::new();
        for r in catalog.current_ratings() {
            let a = acc.entry(r.user_id).or_default();
            a.0 += r.rating.value();
            a.1 += 1;
        }
        UserMeanPredictor {
            means: acc
                .into_iter()
                .map(|(u, (s, n))| (u, Rating::nearest(s / f64::from(n))))
                .collect(),
        }
    }
}

impl RatingPredictor for UserMeanPredictor {
    fn predict(&self, user: UserId, _movie: MovieId) -> Option<Rating> {
        self.means.get(&user).copied()
    }

    fn provider(&self) -> &str {
        "user-mean"
    }
}

/// Orders `candidates` by predicted rating (desc), then id; movies without a prediction are dropped.
pub fn rank_top_picks<I>(user: UserId, candidates: I, predictor: &dyn RatingPredictor, limit: usize) -> Vec<MovieId>
where
    I: IntoIterator<Item = MovieId>,
{
    let mut scored: Vec<(Rating, MovieId)> = candidates
        .into_iter()
        .filter_map(|m| predictor.predict(user, m).map(|r| (r, m)))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.truncate(limit);
    scored.into_iter().map(|(_, m)| m).collect()
}

/// Everything the sampler reads for one user at one instant.
pub struct SamplingContext<'a> {
    pub pool: &'a ElicitationPool,
    pub rated: &'a BTreeSet<MovieId>,
    pub history: &'a ElicitationHistory,
    pub predictor: &'a dyn RatingPredictor,
    /// The user's recommendation-ordered list; only the first 100 entries are used.
    pub top_picks: &'a [MovieId],
    /// Movies that count as recent releases now.
    pub recent: &'a BTreeSet<MovieId>,
    pub now: Timestamp,
}

impl SamplingContext<'_> {
    /// Eligible and not excluded, sorted by id.
    fn base(&self, user: UserId, avoid: &BTreeSet<MovieId>) -> Vec<MovieId> {
        let excluded = excluded_set(user, self.history, self.now);
        eligible_set(self.rated, self.pool)
            .into_iter()
            .filter(|m| !excluded.contains(m) && !avoid.contains(m))
            .collect()
    }
}

struct Reservoirs {
    rec: Vec<MovieId>,
    new: Vec<MovieId>,
    broad: Vec<MovieId>,
}

impl Reservoirs {
    fn build(ctx: &SamplingContext<'_>, user: UserId, base: &[MovieId]) -> Reservoirs {
        let in_base: BTreeSet<MovieId> = base.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let rec = ctx
            .top_picks
            .iter()
            .take(TOP_PICKS_WINDOW)
            .copied()
            .filter(|m| in_base.contains(m) && ctx.predictor.predict(user, *m).is_some() && seen.insert(*m))
            .collect();
        let new = base.iter().copied().filter(|m| ctx.recent.contains(m)).collect();
        Reservoirs {
            rec,
            new,
            broad: base.to_vec(),
        }
    }

    /// Draws one movie for `target`, falling back to the broad reservoir.
    fn draw<R: Rng + ?Sized>(&mut self, target: SlotSource, rng: &mut R) -> Option<Slot> {
        let mut pick = |list: &mut Vec<MovieId>| -> Option<MovieId> {
            (!list.is_empty()).then(|| list.swap_remove(rng.random_range(0..list.len())))
        };
        let chosen = match target {
            SlotSource::Rec => pick(&mut self.rec).map(|m| (m, SlotSource::Rec)),
            SlotSource::New => pick(&mut self.new).map(|m| (m, SlotSource::New)),
            SlotSource::Broad => None,
        }
        .or_else(|| pick(&mut self.broad).map(|m| (m, SlotSource::Broad)))?;
        let (movie, source) = chosen;
        for list in [&mut self.rec, &mut self.new, &mut self.broad] {
            list.retain(|m| *m != movie);
        }
        Some(Slot {
            movie_id: movie,
            source,
        })
    }
}

fn priority(source: SlotSource) -> u8 {
    match source {
        SlotSource::Rec => 0,
        SlotSource::New => 1,
        SlotSource::Broad => 2,
    }
}

/// Draws a fresh batch. The slot order is shuffled after selection.
pub fn sample_batch<R: Rng + ?Sized>(
    ctx: &SamplingContext<'_>,
    user: UserId,
    batch_id: BatchId,
    rng: &mut R,
) -> ElicitationBatch {
    let base = ctx.base(user, &BTreeSet::new());
    let mut batch = ElicitationBatch {
        user_id: user,
        batch_id,
        created_at: ctx.now,
        slots: Vec::with_capacity(BATCH_SIZE),
        shortfall_reason: None,
    };
    if base.is_empty() {
        batch.shortfall_reason = Some("exhausted".to_string());
        return batch;
    }
    let mut reservoirs = Reservoirs::build(ctx, user, &base);
    let targets = std::iter::repeat_n(SlotSource::Rec, REC_SLOTS)
        .chain(std::iter::repeat_n(SlotSource::New, NEW_SLOTS))
        .chain(std::iter::repeat_n(SlotSource::Broad, BROAD_SLOTS));
    for target in targets {
        if let Some(slot) = reservoirs.draw(target, rng) {
            batch.slots.push(slot);
        }
    }
    batch.slots.shuffle(rng);
    if batch.slots.len() < BATCH_SIZE {
        batch.shortfall_reason = Some(format!(
            "only {} eligible movies for {} slots",
            batch.slots.len(),
            BATCH_SIZE
        ));
    }
    batch
}

/// Replaces the slots whose movies already received a response, keeping the rest in place.
///
/// Replacements aim for the replaced slot's source and never repeat a movie of the current
/// batch. With nothing answered the current batch is returned unchanged (same id).
pub fn refresh_batch<R: Rng + ?Sized>(
    ctx: &SamplingContext<'_>,
    current: &ElicitationBatch,
    answered: &BTreeSet<MovieId>,
    new_batch_id: BatchId,
    rng: &mut R,
) -> ElicitationBatch {
    let mut replace: Vec<(usize, SlotSource)> = current
        .slots
        .iter()
        .enumerate()
        .filter(|(_, s)| answered.contains(&s.movie_id))
        .map(|(i, s)| (i, s.source))
        .collect();
    if replace.is_empty() {
        return current.clone();
    }
    replace.sort_by_key(|(i, s)| (priority(*s), *i));

    let avoid: BTreeSet<MovieId> = current.movie_ids().collect();
    let base = ctx.base(current.user_id, &avoid);
    let mut reservoirs = Reservoirs::build(ctx, current.user_id, &base);
    let mut slots: Vec<Option<Slot>> = current.slots.iter().copied().map(Some).collect();
    let mut short = 0;
    for (position, target) in replace {
        slots[position] = reservoirs.draw(target, rng);
        if slots[position].is_none() {
            short += 1;
        }
    }
    ElicitationBatch {
        user_id: current.user_id,
        batch_id: new_batch_id,
        created_at: ctx.now,
        slots: slots.into_iter().flatten().collect(),
        shortfall_reason: (short > 0).then(|| {
            if base.is_empty() {
                "exhausted".to_string()
            } else {
                format!("{short} slots could not be replaced")
            }
        }),
    }
}
