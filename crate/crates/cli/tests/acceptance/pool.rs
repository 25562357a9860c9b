use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::time::Instant;

use chrono::{Datelike, Duration, Months, NaiveDate};

use elicit_core::catalog::{
    average_rank_percentiles, trendy_score, Catalog, CatalogSnapshot, Genre, GenreSet, Movie, MovieStats, RatingEvent,
};
use elicit_core::pool::{build_pool, build_pool_detailed, Criterion, ElicitationPool, PoolCache, PoolConfig};
use elicit_core::types::{MovieId, UserId};

use crate::ensure;
use crate::fixtures::{synthetic_catalog, CatalogParams};
use crate::Outcome;

/// Per-movie facts recomputed straight from the raw events.
struct OracleMovie {
    id: MovieId,
    genres: GenreSet,
    count_now: u64,
    count_lag: u64,
    avg: Option<f64>,
    recent: bool,
}

/// Selections per (genre, criterion): (quota, eligible, ranked ids or the eligible set for serendipity).
type OracleSelections = BTreeMap<(Genre, Criterion), (usize, usize, Vec<MovieId>)>;

fn oracle_selections(movies: &[Movie], events: &[RatingEvent], as_of: NaiveDate, y_int: u64) -> OracleSelections {
    let cutoff_now = as_of.and_hms_opt(23, 59, 59).unwrap().and_utc().timestamp();
    let lag_day = as_of.checked_sub_months(Months::new(1)).unwrap();
    let cutoff_lag = lag_day.and_hms_opt(23, 59, 59).unwrap().and_utc().timestamp();
    let window_start = as_of.checked_sub_months(Months::new(6)).unwrap();

    // Per (user, movie): first event time and the latest rating, events in file order.
    let mut first: HashMap<(UserId, MovieId), i64> = HashMap::new();
    let mut latest: HashMap<(UserId, MovieId), (i64, f64)> = HashMap::new();
    for e in events.iter().filter(|e| e.timestamp <= cutoff_now) {
        let key = (e.user_id, e.movie_id);
        let f = first.entry(key).or_insert(e.timestamp);
        *f = (*f).min(e.timestamp);
        let l = latest.entry(key).or_insert((e.timestamp, e.rating.value()));
        if e.timestamp >= l.0 {
            *l = (e.timestamp, e.rating.value());
        }
    }
    let mut sums: HashMap<MovieId, (u64, u64, f64)> = HashMap::new();
    for (key, (_, r)) in &latest {
        let s = sums.entry(key.1).or_default();
        s.0 += 1;
        if first[key] <= cutoff_lag {
            s.1 += 1;
        }
        s.2 += r;
    }

    let released: Vec<OracleMovie> = movies
        .iter()
        .filter(|m| m.release_date.is_none_or(|d| d <= as_of))
        .map(|m| {
            let (n, lag, sum) = sums.get(&m.id).copied().unwrap_or_default();
            OracleMovie {
                id: m.id,
                genres: m.genres,
                count_now: n,
                count_lag: lag,
                avg: (n > 0).then(|| sum / n as f64),
                recent: m.release_date.is_some_and(|d| window_start <= d && d <= as_of),
            }
        })
        .collect();

    // Percentiles by brute force: (#below + (#equal + 1) / 2) / N over rated movies.
    let rated: Vec<&OracleMovie> = released.iter().filter(|m| m.count_now > 0).collect();
    let n = rated.len() as f64;
    let pct = |value: f64, of: &dyn Fn(&OracleMovie) -> f64| {
        let below = rated.iter().filter(|m| of(m) < value).count() as f64;
        let equal = rated.iter().filter(|m| of(m) == value).count() as f64;
        (below + (equal + 1.0) / 2.0) / n
    };
    let mut rating_score: HashMap<MovieId, f64> = HashMap::new();
    for m in &rated {
        let c = pct(m.count_now as f64, &|o| o.count_now as f64);
        let a = pct(m.avg.unwrap(), &|o| o.avg.unwrap());
        rating_score.insert(m.id, c * a);
    }
    let trendy = |m: &OracleMovie| {
        if m.count_now < 100 || m.count_now <= m.count_lag {
            0.0
        } else {
            let d = (m.count_now - m.count_lag) as f64;
            d * d.ln() / m.count_now as f64
        }
    };

    let total = movies.len() as u64;
    let mut out = BTreeMap::new();
    for genre in Genre::ALL {
        let in_genre = movies.iter().filter(|m| m.genres.contains(genre)).count() as u64;
        if in_genre == 0 {
            continue;
        }
        let members: Vec<&OracleMovie> = released.iter().filter(|m| m.genres.contains(genre)).collect();
        for (criterion, per_y) in [
            (Criterion::Popularity, 50),
            (Criterion::Rating, 25),
            (Criterion::RecentPopular, 10),
            (Criterion::Trendy, 10),
            (Criterion::Serendipity, 5),
        ] {
            // ceil(count/total * per_y * y) in integers.
            let quota = (in_genre * per_y * y_int).div_ceil(total) as usize;
            let mut pool: Vec<(f64, u64, MovieId)> = match criterion {
                Criterion::Popularity => members
                    .iter()
                    .filter(|m| m.count_now > 0)
                    .map(|m| (m.count_now as f64, m.count_now, m.id))
                    .collect(),
                Criterion::Rating => members
                    .iter()
                    .filter(|m| m.count_now > 0)
                    .map(|m| (rating_score[&m.id], m.count_now, m.id))
                    .collect(),
                Criterion::RecentPopular => members
                    .iter()
                    .filter(|m| m.recent)
                    .map(|m| (m.count_now as f64, m.count_now, m.id))
                    .collect(),
                Criterion::Trendy => members
                    .iter()
                    .filter(|m| trendy(m) > 0.0)
                    .map(|m| (trendy(m), m.count_now, m.id))
                    .collect(),
                Criterion::Serendipity => members.iter().map(|m| (0.0, 0, m.id)).collect(),
            };
            let eligible = pool.len();
            if criterion != Criterion::Serendipity {
                pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
                pool.truncate(quota);
            }
            out.insert((genre, criterion), (quota, eligible, pool.into_iter().map(|p| p.2).collect()));
        }
    }
    out
}

pub fn quotas() -> Outcome {
    let as_of = NaiveDate::from_ymd_opt(2023, 6, 15).unwrap();
    let (movies, events) = synthetic_catalog(&CatalogParams {
        movies: 5_000,
        users: 4_000,
        ratings_per_user: 60,
        as_of,
        single_genre: false,
        seed: 11,
    });

    let start = Instant::now();
    let catalog = Catalog::new(movies.clone(), events.clone()).map_err(|e| e.to_string())?;
    let snapshot = catalog.snapshot(as_of);
    let shares = catalog.genre_shares().map_err(|e| e.to_string())?;
    let config = PoolConfig {
        y: 11.0,
        rng_seed: 5,
        ..PoolConfig::default()
    };
    let build = build_pool_detailed(&snapshot, &shares, &config).map_err(|e| e.to_string())?;
    let build_secs = start.elapsed().as_secs_f64();
    ensure!(build_secs < 5.0, "catalog, snapshot and pool build took {build_secs:.2}s");

    let oracle = oracle_selections(&movies, &events, as_of, 11);
    ensure!(
        oracle.len() == build.selections.len(),
        "{} oracle selections vs {} built",
        oracle.len(),
        build.selections.len()
    );
    let mut trendy_nonempty = 0;
    let mut capped = 0;
    for s in &build.selections {
        let (quota, eligible, expected) = oracle
            .get(&(s.genre, s.criterion))
            .ok_or_else(|| format!("unexpected selection {} {}", s.genre, s.criterion))?;
        let tag = format!("{} / {}", s.genre, s.criterion);
        ensure!(s.quota == *quota, "{tag}: quota {} vs oracle {quota}", s.quota);
        ensure!(s.eligible == *eligible, "{tag}: eligible {} vs oracle {eligible}", s.eligible);
        ensure!(
            s.movies.len() == (*quota).min(*eligible),
            "{tag}: selected {} != min({quota}, {eligible})",
            s.movies.len()
        );
        let got: BTreeSet<MovieId> = s.movies.iter().copied().collect();
        ensure!(got.len() == s.movies.len(), "{tag}: duplicate ids in selection");
        if s.criterion == Criterion::Serendipity {
            let allowed: BTreeSet<MovieId> = expected.iter().copied().collect();
            ensure!(got.is_subset(&allowed), "{tag}: sampled a movie outside the genre");
        } else {
            let want: BTreeSet<MovieId> = expected.iter().copied().collect();
            ensure!(got == want, "{tag}: selected ids differ from oracle");
        }
        if s.criterion == Criterion::Trendy && !s.movies.is_empty() {
            trendy_nonempty += 1;
        }
        if s.movies.len() < s.quota {
            capped += 1;
        }
    }
    ensure!(trendy_nonempty > 0, "fixture has no trendy movies; the check would be vacuous");

    // Dedup: one entry per movie, carrying exactly the union of its selection tags.
    let mut union: BTreeMap<MovieId, BTreeSet<Criterion>> = BTreeMap::new();
    for s in &build.selections {
        for m in &s.movies {
            union.entry(*m).or_default().insert(s.criterion);
        }
    }
    ensure!(union.len() == build.pool.len(), "pool has {} entries, union {}", build.pool.len(), union.len());
    for (m, tags) in &union {
        let got: BTreeSet<Criterion> = build.pool.criteria(*m).unwrap().iter().collect();
        ensure!(&got == tags, "movie {m}: tags differ after merge");
    }
    Ok(format!(
        "{} selections exact, {} capped by eligibility, pool {} movies, build {build_secs:.2}s",
        build.selections.len(),
        capped,
        build.pool.len()
    ))
}

pub fn size_and_schedule() -> Outcome {
    let start_day = NaiveDate::from_ymd_opt(2023, 1, 1).unwrap();
    let end_day = NaiveDate::from_ymd_opt(2023, 6, 30).unwrap();
    let (movies, events) = synthetic_catalog(&CatalogParams {
        movies: 5_000,
        users: 3_000,
        ratings_per_user: 50,
        as_of: end_day,
        single_genre: true,
        seed: 23,
    });
    let catalog = Catalog::new(movies, events).map_err(|e| e.to_string())?;
    let shares = catalog.genre_shares().map_err(|e| e.to_string())?;
    ensure!((shares.total() - 1.0).abs() < 1e-12, "single-genre shares sum to {}", shares.total());

    let mut largest = BTreeMap::new();
    for y in [1.0, 2.5, 7.3, 11.0] {
        let bound = 100.0 * y + 90.0;
        let mut cache = PoolCache::new();
        let mut builds = Vec::new();
        let mut previous: Option<NaiveDate> = None;
        let mut day = start_day;
        // Clock ticks every 6 hours; the pool is keyed by the date part.
        while day <= end_day {
            for _ in 0..4 {
                let (pool, rebuilt) = cache.get_or_build(day, |month| {
                    build_pool(
                        &catalog.snapshot(month.first_day()),
                        &shares,
                        &PoolConfig {
                            y,
                            rng_seed: 3,
                            ..PoolConfig::default()
                        },
                    )
                })
                .map_err(|e| e.to_string())?;
                let boundary = previous.is_none_or(|p| (p.year(), p.month()) != (day.year(), day.month()));
                ensure!(rebuilt == boundary, "y={y}: rebuilt={rebuilt} on {day}, boundary={boundary}");
                ensure!(
                    (pool.month.year, pool.month.month) == (day.year(), day.month()),
                    "y={y}: pool month {} on {day}",
                    pool.month
                );
                ensure!(pool.len() as f64 <= bound, "y={y}: pool of {} exceeds {bound}", pool.len());
                if rebuilt {
                    builds.push(pool.clone());
                }
                previous = Some(day);
            }
            day += Duration::days(1);
        }
        ensure!(builds.len() == 6, "y={y}: {} builds over six months", builds.len());
        largest.insert(format!("{y}"), builds.iter().map(|p: &std::sync::Arc<ElicitationPool>| p.len()).max());
    }
    let sizes: Vec<String> = largest
        .iter()
        .map(|(y, n)| format!("y={y}:{}", n.unwrap_or(0)))
        .collect();
    Ok(format!("6 rebuilds per run, largest pools {}", sizes.join(" ")))
}

pub fn score_fixtures() -> Outcome {
    // (now, one month ago, threshold, expected), worked out by hand.
    let trendy_cases: [(u64, u64, u64, f64); 12] = [
        (150, 100, 100, 1.3040076684760487), // 50 ln 50 / 150
        (100, 50, 100, 1.956011502714073),   // 50 ln 50 / 100, at the threshold
        (99, 10, 100, 0.0),                  // below threshold
        (150, 150, 100, 0.0),                // no change
        (150, 160, 100, 0.0),                // negative change
        (101, 100, 100, 0.0),                // change of one: ln 1 = 0
        (102, 100, 100, 0.013591121187449907), // 2 ln 2 / 102
        (200, 0, 100, 5.298317366548036),    // ln 200
        (100, 0, 100, 4.605170185988092),    // ln 100
        (1000, 900, 100, 0.46051701859880917), // 100 ln 100 / 1000
        (5000, 1, 100, 8.515289772779289),   // 4999 ln 4999 / 5000
        (120, 20, 50, 3.837641821656743),    // 100 ln 100 / 120
    ];
    let mut checked = 0;
    for (now, ago, threshold, want) in trendy_cases {
        let got = trendy_score(now, ago, threshold);
        ensure!((got - want).abs() <= 1e-9, "trendy({now}, {ago}, {threshold}) = {got}, want {want}");
        checked += 1;
    }

    let stats = |id: u32, n: u64, avg: Option<f64>| MovieStats {
        movie_id: MovieId(id),
        genres: GenreSet::from_iter([Genre::Drama]),
        release_date: None,
        num_ratings_now: n,
        num_ratings_one_month_ago: 0,
        avg_rating: avg,
        rating_variance: None,
    };
    let day = NaiveDate::from_ymd_opt(2023, 5, 1).unwrap();
    // Counts 10, 20, 20, 40 -> percentiles 1/4, 2.5/4, 2.5/4, 1; averages 3, 4, 5, 2 -> 2/4, 3/4, 1, 1/4.
    let first = CatalogSnapshot::from_stats(
        day,
        vec![
            stats(1, 10, Some(3.0)),
            stats(2, 20, Some(4.0)),
            stats(3, 20, Some(5.0)),
            stats(4, 40, Some(2.0)),
            stats(5, 0, None),
        ],
    );
    // Equal counts -> 2/3 each; averages 4, 4, 3.5 -> 2.5/3, 2.5/3, 1/3.
    let second = CatalogSnapshot::from_stats(
        day,
        vec![stats(1, 5, Some(4.0)), stats(2, 5, Some(4.0)), stats(3, 5, Some(3.5))],
    );
    let rating_cases: [(&CatalogSnapshot, u32, f64); 8] = [
        (&first, 1, 0.125),
        (&first, 2, 0.46875),
        (&first, 3, 0.625),
        (&first, 4, 0.25),
        (&first, 5, 0.0),
        (&second, 1, 0.5555555555555556),
        (&second, 2, 0.5555555555555556),
        (&second, 3, 0.2222222222222222),
    ];
    for (snapshot, id, want) in rating_cases {
        let got = snapshot.rating_score(MovieId(id)).unwrap();
        ensure!((got - want).abs() <= 1e-9, "rating_score(movie {id}) = {got}, want {want}");
        checked += 1;
    }
    ensure!(
        average_rank_percentiles(&[7.0, 7.0, 7.0, 7.0]) == vec![0.625; 4],
        "all-tied percentiles"
    );
    Ok(format!("{checked} fixtures within 1e-9"))
}
