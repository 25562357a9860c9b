//! Monthly elicitation pool: the movies every user may be asked about this month.
//!
//! For every genre `g` with catalog share `s_g`, five per-genre selections are
//! made, each of size `ceil(s_g * base * y)` (or everything eligible when the
//! genre has fewer candidates):
//!
//! | criterion        | base | eligible movies in the genre      | ranked by                 |
//! |------------------|------|-----------------------------------|---------------------------|
//! | `popularity`     | 50   | at least one rating               | rating count              |
//! | `rating`         | 25   | at least one rating               | rating score              |
//! | `recent_popular` | 10   | released in the trailing window   | rating count              |
//! | `trendy`         | 10   | positive trendy score             | trendy score              |
//! | `serendipity`    | 5    | all                               | uniform sample, no repeat |
//!
//! Ranked selections break ties by rating count (desc) then movie id (asc).
//! The union of all selections is the pool; a movie picked several times is
//! kept once with every criterion that picked it. The pool is not topped up
//! after merging duplicates.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::catalog::{is_recent_release, CatalogSnapshot, Genre, GenreShares, SnapshotEntry};
use crate::types::{MovieId, YearMonth};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Criterion {
    Popularity,
    Rating,
    RecentPopular,
    Trendy,
    Serendipity,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::Popularity,
        Criterion::Rating,
        Criterion::RecentPopular,
        Criterion::Trendy,
        Criterion::Serendipity,
    ];

    /// Pool share of this criterion per unit of `y`.
    pub fn per_y(self) -> u32 {
        match self {
            Criterion::Popularity => 50,
            Criterion::Rating => 25,
            Criterion::RecentPopular => 10,
            Criterion::Trendy => 10,
            Criterion::Serendipity => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Popularity => "popularity",
            Criterion::Rating => "rating",
            Criterion::RecentPopular => "recent_popular",
            Criterion::Trendy => "trendy",
            Criterion::Serendipity => "serendipity",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| format!("unknown criterion {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CriteriaSet(u8);

impl CriteriaSet {
    pub fn insert(&mut self, c: Criterion) {
        self.0 |= c.bit();
    }

    pub fn contains(self, c: Criterion) -> bool {
        self.0 & c.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Criterion> {
        Criterion::ALL.into_iter().filter(move |c| self.contains(*c))
    }
}

impl fmt::Display for CriteriaSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.iter().map(Criterion::name).collect();
        f.write_str(&names.join("|"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolConfig {
    /// Size multiplier: the pool holds roughly `100 * y` movies.
    pub y: f64,
    pub recent_threshold_months: u32,
    pub num_rating_threshold: u64,
    pub rng_seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            y: 11.0,
            recent_threshold_months: 6,
            num_rating_threshold: 100,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PoolError {
    #[error("snapshot is empty")]
    EmptySnapshot,
    #[error("pool size multiplier y must be positive and finite, got {0}")]
    InvalidY(f64),
    #[error("pool file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The month's pool: movie ids with the criteria that selected them.
#[derive(Debug, Clone, PartialEq)]
pub struct ElicitationPool {
    pub month: YearMonth,
    entries: BTreeMap<MovieId, CriteriaSet>,
}

impl ElicitationPool {
    pub fn new(month: YearMonth, entries: BTreeMap<MovieId, CriteriaSet>) -> ElicitationPool {
        ElicitationPool { month, entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: MovieId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn criteria(&self, id: MovieId) -> Option<CriteriaSet> {
        self.entries.get(&id).copied()
    }

    pub fn movie_ids(&self) -> impl Iterator<Item = MovieId> + '_ {
        self.entries.keys().copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (MovieId, CriteriaSet)> + '_ {
        self.entries.iter().map(|(m, c)| (*m, *c))
    }

    pub fn count_with(&self, c: Criterion) -> usize {
        self.entries.values().filter(|s| s.contains(c)).count()
    }
}

/// One genre x criterion selection, before duplicates are merged.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreSelection {
    pub genre: Genre,
    pub criterion: Criterion,
    pub quota: usize,
    pub eligible: usize,
    pub movies: Vec<MovieId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolBuild {
    pub pool: ElicitationPool,
    pub selections: Vec<GenreSelection>,
}

/// `ceil(share * per_y * y)`, treating products within 1e-9 of an integer as that integer
/// so that e.g. 0.3 * 50 * 11 gives 165 rather than 166.
pub fn genre_quota(share: f64, per_y: u32, y: f64) -> usize {
    let raw = share * f64::from(per_y) * y;
    let nearest = raw.round();
    if (raw - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest.max(0.0) as usize
    } else {
        raw.ceil().max(0.0) as usize
    }
}

pub fn build_pool(
    snapshot: &CatalogSnapshot,
    shares: &GenreShares,
    config: &PoolConfig,
) -> Result<ElicitationPool, PoolError> {
    build_pool_detailed(snapshot, shares, config).map(|b| b.pool)
}

pub fn build_pool_detailed(
    snapshot: &CatalogSnapshot,
    shares: &GenreShares,
    config: &PoolConfig,
) -> Result<PoolBuild, PoolError> {
    if snapshot.is_empty() {
        return Err(PoolError::EmptySnapshot);
    }
    if !(config.y.is_finite() && config.y > 0.0) {
        return Err(PoolError::InvalidY(config.y));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut selections = Vec::new();

    for (genre, share) in shares.iter() {
        let members: Vec<&SnapshotEntry> = snapshot
            .entries()
            .filter(|e| e.stats.genres.contains(genre))
            .collect();
        for criterion in Criterion::ALL {
            let quota = genre_quota(share, criterion.per_y(), config.y);
            let (eligible, movies) = select(criterion, &members, quota, snapshot.as_of, config, &mut rng);
            selections.push(GenreSelection {
                genre,
                criterion,
                quota,
                eligible,
                movies,
            });
        }
    }

    let mut entries: BTreeMap<MovieId, CriteriaSet> = BTreeMap::new();
    for s in &selections {
        for m in &s.movies {
            entries.entry(*m).or_default().insert(s.criterion);
        }
    }
    Ok(PoolBuild {
        pool: ElicitationPool {
            month: YearMonth::of(snapshot.as_of),
            entries,
        },
        selections,
    })
}

fn top_by<F>(mut candidates: Vec<&SnapshotEntry>, quota: usize, score: F) -> Vec<MovieId>
where
    F: Fn(&SnapshotEntry) -> f64,
{
    candidates.sort_by(|a, b| {
        score(b)
            .total_cmp(&score(a))
            .then(b.stats.num_ratings_now.cmp(&a.stats.num_ratings_now))
            .then(a.stats.movie_id.cmp(&b.stats.movie_id))
    });
    candidates.truncate(quota);
    candidates.into_iter().map(|e| e.stats.movie_id).collect()
}

fn select(
    criterion: Criterion,
    members: &[&SnapshotEntry],
    quota: usize,
    as_of: NaiveDate,
    config: &PoolConfig,
    rng: &mut ChaCha8Rng,
) -> (usize, Vec<MovieId>) {
    let rated = || members.iter().copied().filter(|e| e.stats.num_ratings_now > 0);
    let candidates: Vec<&SnapshotEntry> = match criterion {
        Criterion::Popularity | Criterion::Rating => rated().collect(),
        Criterion::RecentPopular => members
            .iter()
            .copied()
            .filter(|e| is_recent_release(e.stats.release_date, as_of, config.recent_threshold_months))
            .collect(),
        Criterion::Trendy => members
            .iter()
            .copied()
            .filter(|e| trendy(e, config) > 0.0)
            .collect(),
        Criterion::Serendipity => members.to_vec(),
    };
    let eligible = candidates.len();
    let picked = match criterion {
        Criterion::Popularity | Criterion::RecentPopular => {
            top_by(candidates, quota, |e| e.stats.num_ratings_now as f64)
        }
        Criterion::Rating => top_by(candidates, quota, SnapshotEntry::rating_score),
        Criterion::Trendy => top_by(candidates, quota, |e| trendy(e, config)),
        Criterion::Serendipity => {
            let mut ids: Vec<MovieId> = candidates.iter().map(|e| e.stats.movie_id).collect();
            ids.sort();
            let amount = quota.min(ids.len());
            let mut picked: Vec<MovieId> = index::sample(rng, ids.len(), amount)
                .into_iter()
                .map(|i| ids[i])
                .collect();
            picked.sort();
            picked
        }
    };
    (eligible, picked)
}

fn trendy(e: &SnapshotEntry, config: &PoolConfig) -> f64 {
    crate::catalog::trendy_score(
        e.stats.num_ratings_now,
        e.stats.num_ratings_one_month_ago,
        config.num_rating_threshold,
    )
}

/// Pool key for a clock date: pools are rebuilt whenever the calendar month changes.
pub fn refresh_schedule(clock_date: NaiveDate) -> YearMonth {
    YearMonth::of(clock_date)
}

/// Holds the current month's pool and rebuilds it only when the month key changes.
#[derive(Debug, Default)]
pub struct PoolCache {
    current: Option<Arc<ElicitationPool>>,
}

impl PoolCache {
    pub fn new() -> PoolCache {
        PoolCache::default()
    }

    pub fn with_pool(pool: ElicitationPool) -> PoolCache {
        PoolCache {
            current: Some(Arc::new(pool)),
        }
    }

    pub fn current(&self) -> Option<Arc<ElicitationPool>> {
        self.current.clone()
    }

    /// Returns the pool for `clock_date`'s month and whether it was (re)built by this call.
    pub fn get_or_build<E, F>(&mut self, clock_date: NaiveDate, build: F) -> Result<(Arc<ElicitationPool>, bool), E>
    where
        F: FnOnce(YearMonth) -> Result<ElicitationPool, E>,
    {
        let key = refresh_schedule(clock_date);
        if let Some(pool) = &self.current {
            if pool.month == key {
                return Ok((pool.clone(), false));
            }
        }
        let pool = Arc::new(build(key)?);
        self.current = Some(pool.clone());
        Ok((pool, true))
    }
}

pub fn write_pool<W: Write>(pool: &ElicitationPool, mut out: W) -> io::Result<()> {
    writeln!(out, "month,movieId,criteria")?;
    for (id, criteria) in pool.entries() {
        writeln!(out, "{},{},{}", pool.month, id, criteria)?;
    }
    Ok(())
}

pub fn read_pool<R: BufRead>(input: R) -> Result<ElicitationPool, PoolError> {
    let err = |line: usize, message: String| PoolError::Parse { line, message };
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == "month,movieId,criteria" => {}
        _ => return Err(err(1, "expected header month,movieId,criteria".into())),
    }
    let mut month = None;
    let mut entries = BTreeMap::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(err(line_no, format!("expected 3 fields, found {}", parts.len())));
        }
        let m: YearMonth = parts[0].parse().map_err(|e| err(line_no, e))?;
        if *month.get_or_insert(m) != m {
            return Err(err(line_no, "pool file mixes months".into()));
        }
        let id: u32 = parts[1]
            .trim()
            .parse()
            .map_err(|_| err(line_no, format!("bad movieId {:?}", parts[1])))?;
        let mut set = CriteriaSet::default();
        for name in parts[2].split('|') {
            set.insert(name.parse().map_err(|e| err(line_no, e))?);
        }
        if entries.insert(MovieId(id), set).is_some() {
            return Err(err(line_no, format!("duplicate movie {id}")));
        }
    }
    let month = month.ok_or_else(|| err(2, "pool file has no entries".into()))?;
    Ok(ElicitationPool { month, entries })
}
