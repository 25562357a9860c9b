use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use elicit_core::pool::{CriteriaSet, Criterion, ElicitationPool};
use elicit_core::sampler::{
    sample_batch, BatchId, ElicitationHistory, RatingPredictor, SamplingContext, SlotSource, EXCLUSION_WINDOW_SECS,
};
use elicit_core::types::{MovieId, Rating, Timestamp, UserId, YearMonth};

use crate::ensure;
use crate::stats::default_run;
use crate::Outcome;

const DAY: i64 = 86_400;

struct Everything;

impl RatingPredictor for Everything {
    fn predict(&self, _user: UserId, movie: MovieId) -> Option<Rating> {
        Rating::from_half_points((1 + movie.0 % 10) as u8)
    }

    fn provider(&self) -> &str {
        "fixture"
    }
}

/// Presentation count within the trailing window, recomputed from the raw list.
fn presented_in_window(times: &[Timestamp], now: Timestamp) -> usize {
    times.iter().filter(|t| **t <= now && now - **t <= 90 * DAY).count()
}

pub fn batch_law() -> Outcome {
    assert_eq!(EXCLUSION_WINDOW_SECS, 90 * DAY);
    let movies: Vec<MovieId> = (1..=2_000).map(MovieId).collect();
    let mut entries = BTreeMap::new();
    for m in &movies {
        let mut c = CriteriaSet::default();
        c.insert(Criterion::Popularity);
        entries.insert(*m, c);
    }
    let pool = ElicitationPool::new(YearMonth::new(2023, 5).unwrap(), entries);
    let predictor = Everything;
    let now: Timestamp = 1_684_000_000;

    let mut excluded_hits = 0usize;
    for i in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(i);
        let user = UserId(1 + (i % 500) as u32);
        let pick = |rng: &mut ChaCha8Rng| movies[rng.random_range(0..movies.len())];

        let rated: BTreeSet<MovieId> = (0..200).map(|_| pick(&mut rng)).collect();
        let mut history = ElicitationHistory::new();
        let mut times: HashMap<MovieId, Vec<Timestamp>> = HashMap::new();
        for _ in 0..300 {
            let m = pick(&mut rng);
            // Twice inside, once inside, or twice with one presentation outside the window.
            let kind = rng.random_range(0..3);
            let mut ts = match kind {
                0 => vec![now - rng.random_range(0..80) * DAY, now - rng.random_range(0..=90) * DAY],
                1 => vec![now - rng.random_range(0..=90) * DAY],
                _ => vec![now - rng.random_range(91..200) * DAY, now - rng.random_range(0..90) * DAY],
            };
            ts.retain(|t| times.get(&m).is_none_or(|v| !v.contains(t)));
            let list = times.entry(m).or_default();
            list.extend(ts);
            list.sort();
        }
        for (m, list) in &times {
            for (k, t) in list.iter().enumerate() {
                history
                    .record_presentation(user, *m, *t, BatchId(k as u64))
                    .map_err(|e| e.to_string())?;
            }
        }
        let excluded: BTreeSet<MovieId> = times
            .iter()
            .filter(|(_, t)| presented_in_window(t, now) >= 2)
            .map(|(m, _)| *m)
            .collect();

        // A recommendation list longer than the 100 entries the sampler may use.
        let mut top_picks: Vec<MovieId> = movies.clone();
        for j in (1..top_picks.len()).rev() {
            top_picks.swap(j, rng.random_range(0..=j));
        }
        top_picks.truncate(160);
        let allowed_rec: BTreeSet<MovieId> = top_picks[..100].iter().copied().collect();
        let recent: BTreeSet<MovieId> = (0..120).map(|_| pick(&mut rng)).collect();

        let ctx = SamplingContext {
            pool: &pool,
            rated: &rated,
            history: &history,
            predictor: &predictor,
            top_picks: &top_picks,
            recent: &recent,
            now,
        };
        let batch = sample_batch(&ctx, user, BatchId(i), &mut rng);
        ensure!(
            batch.composition() == (3, 4, 1),
            "seed {i}: composition {:?} ({:?})",
            batch.composition(),
            batch.shortfall_reason
        );
        let ids: BTreeSet<MovieId> = batch.movie_ids().collect();
        ensure!(ids.len() == 8, "seed {i}: repeated movie in batch");
        for s in &batch.slots {
            ensure!(pool.contains(s.movie_id), "seed {i}: movie {} outside pool", s.movie_id);
            ensure!(!rated.contains(&s.movie_id), "seed {i}: rated movie {} presented", s.movie_id);
            ensure!(!excluded.contains(&s.movie_id), "seed {i}: excluded movie {} presented", s.movie_id);
            match s.source {
                SlotSource::Rec => ensure!(
                    allowed_rec.contains(&s.movie_id),
                    "seed {i}: rec slot {} outside top 100",
                    s.movie_id
                ),
                SlotSource::New => ensure!(recent.contains(&s.movie_id), "seed {i}: new slot {} not recent", s.movie_id),
                SlotSource::Broad => {}
            }
        }
        excluded_hits += excluded.len();
    }
    Ok(format!(
        "10000 batches (3 broad, 4 rec, 1 new), {:.0} excluded movies per user on average, no violations",
        excluded_hits as f64 / 10_000.0
    ))
}

pub fn exclusion_replay() -> Outcome {
    let run = default_run()?;
    let logs = &run.logs;
    let mut by_pair: HashMap<(UserId, MovieId), Vec<Timestamp>> = HashMap::new();
    for r in &logs.requests {
        by_pair.entry((r.user_id, r.movie_id)).or_default().push(r.timestamp);
    }
    let span = logs.requests.iter().map(|r| r.timestamp).max().unwrap_or(0)
        - logs.requests.iter().map(|r| r.timestamp).min().unwrap_or(0);
    ensure!(span >= 100 * DAY, "simulation spans only {} days", span / DAY);

    let mut repeated = 0usize;
    let mut at_limit = 0usize;
    for ((user, movie), times) in &mut by_pair {
        times.sort();
        if times.len() > 1 {
            repeated += 1;
        }
        for (j, t) in times.iter().enumerate() {
            let before = presented_in_window(&times[..j], *t);
            ensure!(
                before < 2,
                "user {user} saw movie {movie} at {t} after {before} presentations in the trailing 90 days"
            );
            if before == 1 {
                at_limit += 1;
            }
        }
    }
    Ok(format!(
        "{} presentations over {} days, {} pairs repeated, {} second presentations, none beyond the limit",
        logs.requests.len(),
        span / DAY,
        repeated,
        at_limit
    ))
}
