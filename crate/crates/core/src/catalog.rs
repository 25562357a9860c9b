//! Movies, rating events and per-date catalog snapshots.
//!
//! A [`Catalog`] is built once from the movies and ratings files and is
//! immutable afterwards. A [`CatalogSnapshot`] freezes the per-movie
//! statistics the pool builder needs (rating counts now and one calendar
//! month earlier, average rating, rating-score percentiles) at a given date.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;

use crate::dataset::{self, DatasetError};
use crate::types::{end_of_day, months_before, MovieId, Rating, Timestamp, UserId};

/// The platform's fixed genre list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Genre {
    Action,
    Adventure,
    Animation,
    Comedy,
    Crime,
    Documentary,
    Drama,
    Fantasy,
    History,
    Horror,
    Music,
    Mystery,
    Romance,
    ScienceFiction,
    TvMovie,
    Thriller,
    War,
    Western,
}

impl Genre {
    pub const ALL: [Genre; 18] = [
        Genre::Action,
        Genre::Adventure,
        Genre::Animation,
        Genre::Comedy,
        Genre::Crime,
        Genre::Documentary,
        Genre::Drama,
        Genre::Fantasy,
        Genre::History,
        Genre::Horror,
        Genre::Music,
        Genre::Mystery,
        Genre::Romance,
        Genre::ScienceFiction,
        Genre::TvMovie,
        Genre::Thriller,
        Genre::War,
        Genre::Western,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Genre::Action => "Action",
            Genre::Adventure => "Adventure",
            Genre::Animation => "Animation",
            Genre::Comedy => "Comedy",
            Genre::Crime => "Crime",
            Genre::Documentary => "Documentary",
            Genre::Drama => "Drama",
            Genre::Fantasy => "Fantasy",
            Genre::History => "History",
            Genre::Horror => "Horror",
            Genre::Music => "Music",
            Genre::Mystery => "Mystery",
            Genre::Romance => "Romance",
            Genre::ScienceFiction => "Science Fiction",
            Genre::TvMovie => "TV Movie",
            Genre::Thriller => "Thriller",
            Genre::War => "War",
            Genre::Western => "Western",
        }
    }

    fn bit(self) -> u32 {
        1 << (self as u32)
    }
}

impl fmt::Display for Genre {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Genre {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        Genre::ALL
            .into_iter()
            .find(|g| g.label() == s)
            .ok_or_else(|| format!("unknown genre {s:?}"))
    }
}

/// Set of genres packed into a bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GenreSet(u32);

impl GenreSet {
    pub fn empty() -> GenreSet {
        GenreSet(0)
    }

    pub fn insert(&mut self, genre: Genre) {
        self.0 |= genre.bit();
    }

    pub fn contains(self, genre: Genre) -> bool {
        self.0 & genre.bit() != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn iter(self) -> impl Iterator<Item = Genre> {
        Genre::ALL.into_iter().filter(move |g| self.contains(*g))
    }

    /// Parses a pipe-separated genre list; every label must be known.
    pub fn parse_pipe_list(s: &str) -> Result<GenreSet, String> {
        let mut set = GenreSet::empty();
        for label in s.split('|').filter(|l| !l.trim().is_empty()) {
            set.insert(label.parse()?);
        }
        if set.is_empty() {
            return Err("movie lists no genres".to_string());
        }
        Ok(set)
    }

    pub fn to_pipe_list(self) -> String {
        self.iter().map(Genre::label).collect::<Vec<_>>().join("|")
    }
}

impl FromIterator<Genre> for GenreSet {
    fn from_iter<T: IntoIterator<Item = Genre>>(iter: T) -> Self {
        let mut set = GenreSet::empty();
        for g in iter {
            set.insert(g);
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Movie {
    pub id: MovieId,
    pub title: String,
    pub genres: GenreSet,
    pub release_date: Option<NaiveDate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RatingEvent {
    pub user_id: UserId,
    pub movie_id: MovieId,
    pub rating: Rating,
    pub timestamp: Timestamp,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("{file}:{line}: {message}")]
    Row {
        file: String,
        line: u64,
        message: String,
    },
    #[error("duplicate movie id {0}")]
    DuplicateMovie(MovieId),
    #[error("movie {0} lists no genres")]
    NoGenres(MovieId),
    #[error("rating event references unknown movie {0}")]
    UnknownMovie(MovieId),
    #[error("catalog is empty")]
    Empty,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Immutable catalog: movie metadata plus the full rating-event history.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    movies: BTreeMap<MovieId, Movie>,
    /// Sorted by (timestamp, user, movie).
    events: Vec<RatingEvent>,
}

impl Catalog {
    pub fn new(movies: Vec<Movie>, mut events: Vec<RatingEvent>) -> Result<Catalog, CatalogError> {
        let mut by_id = BTreeMap::new();
        for movie in movies {
            if movie.genres.is_empty() {
                return Err(CatalogError::NoGenres(movie.id));
            }
            let id = movie.id;
            if by_id.insert(id, movie).is_some() {
                return Err(CatalogError::DuplicateMovie(id));
            }
        }
        if let Some(e) = events.iter().find(|e| !by_id.contains_key(&e.movie_id)) {
            return Err(CatalogError::UnknownMovie(e.movie_id));
        }
        events.sort_by_key(|e| (e.timestamp, e.user_id, e.movie_id));
        Ok(Catalog {
            movies: by_id,
            events,
        })
    }

    pub fn ingest(movies_file: &Path, ratings_file: &Path) -> Result<Catalog, CatalogError> {
        let movies = read_movies(File::open(movies_file)?, &movies_file.display().to_string())?;
        let events = dataset::read_table::<RatingEvent>(ratings_file)?;
        Catalog::new(movies, events)
    }

    pub fn movies(&self) -> impl Iterator<Item = &Movie> {
        self.movies.values()
    }

    pub fn movie(&self, id: MovieId) -> Option<&Movie> {
        self.movies.get(&id)
    }

    pub fn num_movies(&self) -> usize {
        self.movies.len()
    }

    /// Every rating event, including ones later overwritten.
    pub fn events(&self) -> &[RatingEvent] {
        &self.events
    }

    /// One rating per (user, movie): the latest event wins.
    pub fn current_ratings(&self) -> Vec<RatingEvent> {
        let mut latest: BTreeMap<(UserId, MovieId), RatingEvent> = BTreeMap::new();
        for e in &self.events {
            latest.insert((e.user_id, e.movie_id), *e);
        }
        latest.into_values().collect()
    }

    /// Movies each user has rated at or before `as_of`.
    pub fn rated_by_user(&self, as_of: Timestamp) -> HashMap<UserId, BTreeSet<MovieId>> {
        let mut out: HashMap<UserId, BTreeSet<MovieId>> = HashMap::new();
        for e in self.events.iter().take_while(|e| e.timestamp <= as_of) {
            out.entry(e.user_id).or_default().insert(e.movie_id);
        }
        out
    }

    /// Movies released within the trailing window ending at `as_of`.
    pub fn recent_releases(&self, as_of: NaiveDate, recent_threshold_months: u32) -> BTreeSet<MovieId> {
        self.movies
            .values()
            .filter(|m| is_recent_release(m.release_date, as_of, recent_threshold_months))
            .map(|m| m.id)
            .collect()
    }

    pub fn snapshot(&self, as_of: NaiveDate) -> CatalogSnapshot {
        let lag_date = months_before(as_of, 1);
        let cutoff_now = end_of_day(as_of);
        let cutoff_lag = end_of_day(lag_date);

        // (first event time, latest rating) per (user, movie).
        let mut pairs: HashMap<(UserId, MovieId), (Timestamp, Rating)> = HashMap::new();
        for e in self.events.iter().take_while(|e| e.timestamp <= cutoff_now) {
            pairs
                .entry((e.user_id, e.movie_id))
                .and_modify(|p| p.1 = e.rating)
                .or_insert((e.timestamp, e.rating));
        }

        #[derive(Default)]
        struct Acc {
            now: u64,
            lag: u64,
            sum: f64,
            sum_sq: f64,
        }
        let mut acc: HashMap<MovieId, Acc> = HashMap::new();
        for ((_, movie), (first, rating)) in pairs {
            let a = acc.entry(movie).or_default();
            a.now += 1;
            if first <= cutoff_lag {
                a.lag += 1;
            }
            a.sum += rating.value();
            a.sum_sq += rating.value() * rating.value();
        }

        let stats = self
            .movies
            .values()
            .filter(|m| m.release_date.is_none_or(|d| d <= as_of))
            .map(|m| {
                let a = acc.remove(&m.id).unwrap_or_default();
                let (avg, var) = if a.now == 0 {
                    (None, None)
                } else {
                    let n = a.now as f64;
                    let mean = a.sum / n;
                    (Some(mean), Some((a.sum_sq / n - mean * mean).max(0.0)))
                };
                MovieStats {
                    movie_id: m.id,
                    genres: m.genres,
                    release_date: m.release_date,
                    num_ratings_now: a.now,
                    num_ratings_one_month_ago: a.lag,
                    avg_rating: avg,
                    rating_variance: var,
                }
            })
            .collect();
        CatalogSnapshot::from_stats(as_of, stats)
    }

    pub fn genre_shares(&self) -> Result<GenreShares, CatalogError> {
        GenreShares::from_genre_sets(self.movies.values().map(|m| m.genres))
    }
}

/// Reads a movies file (`movieId,title,genres,releaseDate`).
pub fn read_movies<R: Read>(reader: R, file: &str) -> Result<Vec<Movie>, CatalogError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let row_err = |line: u64, message: String| CatalogError::Row {
        file: file.to_string(),
        line,
        message,
    };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?.clone();
    let expected = ["movieId", "title", "genres", "releaseDate"];
    let mut index = [usize::MAX; 4];
    for (i, h) in headers.iter().enumerate() {
        match expected.iter().position(|e| *e == h.trim()) {
            Some(slot) => index[slot] = i,
            None => return Err(row_err(1, format!("unknown column {h:?}"))),
        }
    }
    if let Some(slot) = index.iter().position(|i| *i == usize::MAX) {
        return Err(row_err(1, format!("missing column {:?}", expected[slot])));
    }

    let mut movies = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(row_err(line, format!("expected 4 fields, found {}", record.len())));
        }
        let id: u32 = record[index[0]]
            .trim()
            .parse()
            .ok()
            .filter(|id| *id > 0)
            .ok_or_else(|| row_err(line, format!("bad movieId {:?}", &record[index[0]])))?;
        let genres = GenreSet::parse_pipe_list(&record[index[2]]).map_err(|m| row_err(line, m))?;
        let raw_date = record[index[3]].trim();
        let release_date = if raw_date.is_empty() {
            None
        } else {
            Some(
                crate::types::parse_date(raw_date)
                    .ok_or_else(|| row_err(line, format!("bad releaseDate {raw_date:?}")))?,
            )
        };
        movies.push(Movie {
            id: MovieId(id),
            title: record[index[1]].to_string(),
            genres,
            release_date,
        });
    }
    Ok(movies)
}

pub fn write_movies<W: Write>(movies: &[Movie], writer: W) -> io::Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    w.write_record(["movieId", "title", "genres", "releaseDate"])?;
    for m in movies {
        w.write_record([
            m.id.to_string(),
            m.title.clone(),
            m.genres.to_pipe_list(),
            m.release_date.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()
}

/// Per-movie statistics at a snapshot date.
#[derive(Debug, Clone, PartialEq)]
pub struct MovieStats {
    pub movie_id: MovieId,
    pub genres: GenreSet,
    pub release_date: Option<NaiveDate>,
    pub num_ratings_now: u64,
    pub num_ratings_one_month_ago: u64,
    pub avg_rating: Option<f64>,
    pub rating_variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotEntry {
    pub stats: MovieStats,
    /// rank/N of the rating count among rated movies (ties share the average rank); 0 if unrated.
    pub count_percentile: f64,
    /// rank/N of the average rating among rated movies; 0 if unrated.
    pub avg_percentile: f64,
}

impl SnapshotEntry {
    pub fn rating_score(&self) -> f64 {
        self.count_percentile * self.avg_percentile
    }
}

/// Frozen per-movie statistics at `as_of`, with the one-month lag at `lag_date`.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogSnapshot {
    pub as_of: NaiveDate,
    pub lag_date: NaiveDate,
    entries: BTreeMap<MovieId, SnapshotEntry>,
}

impl CatalogSnapshot {
    /// Builds a snapshot from precomputed statistics, deriving the percentile ranks.
    pub fn from_stats(as_of: NaiveDate, stats: Vec<MovieStats>) -> CatalogSnapshot {
        let rated: Vec<&MovieStats> = stats.iter().filter(|s| s.num_ratings_now > 0).collect();
        let count_pct = average_rank_percentiles(
            &rated.iter().map(|s| s.num_ratings_now as f64).collect::<Vec<_>>(),
        );
        let avg_pct = average_rank_percentiles(
            &rated
                .iter()
                .map(|s| s.avg_rating.unwrap_or(0.0))
                .collect::<Vec<_>>(),
        );
        let mut pct: HashMap<MovieId, (f64, f64)> = HashMap::new();
        for (i, s) in rated.iter().enumerate() {
            pct.insert(s.movie_id, (count_pct[i], avg_pct[i]));
        }
        let entries = stats
            .into_iter()
            .map(|s| {
                let (c, a) = pct.get(&s.movie_id).copied().unwrap_or((0.0, 0.0));
                (
                    s.movie_id,
                    SnapshotEntry {
                        stats: s,
                        count_percentile: c,
                        avg_percentile: a,
                    },
                )
            })
            .collect();
        CatalogSnapshot {
            as_of,
            lag_date: months_before(as_of, 1),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: MovieId) -> Option<&SnapshotEntry> {
        self.entries.get(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SnapshotEntry> {
        self.entries.values()
    }

    pub fn rating_score(&self, id: MovieId) -> Option<f64> {
        self.get(id).map(SnapshotEntry::rating_score)
    }

    pub fn trendy_score(&self, id: MovieId, num_rating_threshold: u64) -> Option<f64> {
        self.get(id).map(|e| {
            trendy_score(
                e.stats.num_ratings_now,
                e.stats.num_ratings_one_month_ago,
                num_rating_threshold,
            )
        })
    }
}

/// Percentile rank/N of each value (ascending, ties get the average rank).
pub fn average_rank_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 averaged.
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            out[k] = avg_rank / n as f64;
        }
        i = j + 1;
    }
    out
}

/// Growth-weighted trendiness: zero below the rating threshold or without positive growth.
pub fn trendy_score(num_ratings_now: u64, num_ratings_one_month_ago: u64, num_rating_threshold: u64) -> f64 {
    if num_ratings_now < num_rating_threshold || num_ratings_now <= num_ratings_one_month_ago {
        return 0.0;
    }
    let delta = (num_ratings_now - num_ratings_one_month_ago) as f64;
    delta * delta.ln() / num_ratings_now as f64
}

/// True iff `as_of - months` <= release <= `as_of`. Unknown release dates are never recent.
pub fn is_recent_release(release_date: Option<NaiveDate>, as_of: NaiveDate, recent_threshold_months: u32) -> bool {
    match release_date {
        Some(d) => months_before(as_of, recent_threshold_months) <= d && d <= as_of,
        None => false,
    }
}

/// Fraction of movies listing each genre. Only genres that occur are present.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreShares {
    shares: BTreeMap<Genre, f64>,
}

impl GenreShares {
    pub fn from_genre_sets<I: IntoIterator<Item = GenreSet>>(sets: I) -> Result<GenreShares, CatalogError> {
        let mut counts: BTreeMap<Genre, u64> = BTreeMap::new();
        let mut total = 0u64;
        for set in sets {
            total += 1;
            for g in set.iter() {
                *counts.entry(g).or_default() += 1;
            }
        }
        if total == 0 {
            return Err(CatalogError::Empty);
        }
        Ok(GenreShares {
            shares: counts
                .into_iter()
                .map(|(g, c)| (g, c as f64 / total as f64))
                .collect(),
        })
    }

    pub fn from_map(shares: BTreeMap<Genre, f64>) -> GenreShares {
        GenreShares { shares }
    }

    pub fn get(&self, genre: Genre) -> f64 {
        self.shares.get(&genre).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Genre, f64)> + '_ {
        self.shares.iter().map(|(g, s)| (*g, *s))
    }

    pub fn total(&self) -> f64 {
        self.shares.values().sum()
    }
}
