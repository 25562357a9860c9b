//! Kill-and-restart fuzz against the real `elicit serve` binary.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::Duration;

use chrono::{NaiveDate, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use elicit_core::catalog::{write_movies, Genre, GenreSet, Movie, RatingEvent};
use elicit_core::dataset::{self, validate_corpus, BeliefRecord, BeliefResponse, ElicitRequestRecord, RecommendationLogRecord};
use elicit_core::types::{MovieId, Rating, Timestamp, UserId};

use crate::ensure;
use crate::Outcome;

const REQUESTS: usize = 1_000;
const KILLS: usize = 20;
const USERS: u32 = 30;
const LOG_FILES: [&str; 5] = [
    dataset::BELIEFS_FILE,
    dataset::RATINGS_FILE,
    dataset::ELICIT_LOG_FILE,
    dataset::REC_LOG_FILE,
    "batches.jsonl",
];

struct Server {
    child: Child,
    base: String,
}

impl Server {
    fn start(dir: &Path) -> Result<Server, String> {
        let mut child = Command::new(env!("CARGO_BIN_EXE_elicit"))
            .args(["serve", "--port", "0", "--data"])
            .arg(dir)
            .env("ADMIN_TOKEN", "admin")
            .env("POOL_Y", "2")
            .env_remove("USER_TOKEN_SECRET")
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawn: {e}"))?;
        let mut line = String::new();
        BufReader::new(child.stdout.take().unwrap())
            .read_line(&mut line)
            .map_err(|e| e.to_string())?;
        let Some(addr) = line.trim().strip_prefix("listening on ") else {
            let mut err = String::new();
            if let Some(mut stderr) = child.stderr.take() {
                let _ = std::io::Read::read_to_string(&mut stderr, &mut err);
            }
            let _ = child.kill();
            return Err(format!("server did not start: {line:?} {err}"));
        };
        Ok(Server {
            base: format!("http://{addr}"),
            child,
        })
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.kill();
    }
}

fn seed_catalog(dir: &Path, now: Timestamp) -> Result<(), String> {
    let genres = [Genre::Action, Genre::Comedy, Genre::Drama, Genre::Horror, Genre::Romance, Genre::War];
    let movies: Vec<Movie> = (1..=400u32)
        .map(|i| Movie {
            id: MovieId(i),
            title: format!("Film {i}"),
            genres: GenreSet::from_iter([genres[i as usize % genres.len()]]),
            release_date: NaiveDate::from_ymd_opt(1990 + (i % 34) as i32, 1 + i % 12, 1 + i % 28),
        })
        .collect();
    let file = File::create(dir.join(dataset::MOVIES_FILE)).map_err(|e| e.to_string())?;
    write_movies(&movies, file).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut ratings = Vec::new();
    let mut seen = HashSet::new();
    for u in 0..150u32 {
        for _ in 0..40 {
            let movie = 1 + (rng.random_range(0..400u32) * rng.random_range(1..=3u32)) % 400;
            if seen.insert((u, movie)) {
                ratings.push(RatingEvent {
                    user_id: UserId(100_000 + u),
                    movie_id: MovieId(movie),
                    rating: Rating::from_half_points(rng.random_range(1..=10)).unwrap(),
                    timestamp: now - rng.random_range(2 * 86_400..300 * 86_400),
                });
            }
        }
    }
    ratings.sort_by_key(|r| r.timestamp);
    dataset::write_table(&ratings, &dir.join(dataset::RATINGS_FILE)).map_err(|e| e.to_string())
}

#[derive(Debug, Clone)]
enum Action {
    Batch { user: u32, refresh: bool },
    Belief { user: u32, body: Value, expect_conflict: bool },
    Invalid { user: u32, body: Value },
    TopPicks { user: u32 },
}

#[derive(Default)]
struct UserModel {
    batch: Option<(u64, Vec<u64>)>,
    answered: BTreeSet<u64>,
    /// A request for this user was in flight at a kill; its effect is unknown until the next batch read.
    uncertain: bool,
}

fn belief_body(rng: &mut ChaCha8Rng, movie: u64, batch: u64) -> Value {
    if rng.random_bool(0.5) {
        json!({"movieId": movie, "batchId": batch, "isSeen": 0,
               "userPredictRating": rng.random_range(1..=10) as f64 / 2.0,
               "userCertainty": rng.random_range(1..=5)})
    } else {
        json!({"movieId": movie, "batchId": batch, "isSeen": 1,
               "userElicitRating": rng.random_range(1..=10) as f64 / 2.0, "watchDate": "2024-02-29"})
    }
}

fn next_action(rng: &mut ChaCha8Rng, users: &HashMap<u32, UserModel>) -> Action {
    let user = rng.random_range(1..=USERS);
    let model = &users[&user];
    let roll: f64 = rng.random();
    match &model.batch {
        Some((batch, slots)) if roll < 0.55 => {
            let open: Vec<u64> = slots.iter().copied().filter(|m| !model.answered.contains(m)).collect();
            if !open.is_empty() && rng.random_bool(0.9) {
                let movie = open[rng.random_range(0..open.len())];
                Action::Belief {
                    user,
                    body: belief_body(rng, movie, *batch),
                    expect_conflict: false,
                }
            } else if let Some(&movie) = model.answered.iter().next() {
                Action::Belief {
                    user,
                    body: belief_body(rng, movie, *batch),
                    expect_conflict: true,
                }
            } else {
                Action::Batch { user, refresh: true }
            }
        }
        Some((batch, slots)) if roll < 0.62 => Action::Invalid {
            user,
            body: json!({"movieId": slots[0], "batchId": batch, "isSeen": 0,
                         "userPredictRating": 3.5, "userCertainty": 7}),
        },
        _ if roll < 0.85 => Action::Batch {
            user,
            refresh: rng.random_bool(0.4),
        },
        _ if roll < 0.95 => Action::TopPicks { user },
        _ => Action::Batch { user, refresh: false },
    }
}

fn send(agent: &ureq::Agent, base: &str, action: &Action) -> Result<(u16, Value), String> {
    let result = match action {
        Action::Batch { user, refresh } => {
            let q = if *refresh { "?refresh=1" } else { "" };
            agent.get(&format!("{base}/users/{user}/elicitation-batch{q}")).call()
        }
        Action::Belief { user, body, .. } | Action::Invalid { user, body } => agent
            .post(&format!("{base}/users/{user}/beliefs"))
            .header("content-type", "application/json")
            .send(body.to_string()),
        Action::TopPicks { user } => agent.get(&format!("{base}/users/{user}/top-picks")).call(),
    };
    let mut resp = result.map_err(|e| e.to_string())?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
    let value = serde_json::from_str(&text).unwrap_or(Value::Null);
    Ok((status, value))
}

fn user_of(action: &Action) -> u32 {
    match action {
        Action::Batch { user, .. }
        | Action::Belief { user, .. }
        | Action::Invalid { user, .. }
        | Action::TopPicks { user } => *user,
    }
}

/// Applies a reply to the client model; returns an error for any status the contract forbids.
fn observe(
    action: &Action,
    status: u16,
    body: &Value,
    model: &mut UserModel,
    acked: &mut Vec<(u32, u64, Timestamp)>,
) -> Result<(), String> {
    let fuzzy = model.uncertain;
    match action {
        Action::Batch { .. } => {
            ensure!(status == 200, "batch read returned {status}: {body}");
            let id = body["batchId"].as_u64();
            let slots: Vec<u64> = body["slots"]
                .as_array()
                .map(|a| a.iter().filter_map(|s| s["movieId"].as_u64()).collect())
                .unwrap_or_default();
            model.answered = body["slots"]
                .as_array()
                .map(|a| {
                    a.iter()
                        .filter(|s| s["answered"] == true)
                        .filter_map(|s| s["movieId"].as_u64())
                        .collect()
                })
                .unwrap_or_default();
            model.batch = id.map(|id| (id, slots));
            model.uncertain = false;
        }
        Action::Belief {
            user,
            body: sent,
            expect_conflict,
        } => {
            let movie = sent["movieId"].as_u64().unwrap();
            let allowed: &[u16] = match (expect_conflict, fuzzy) {
                (true, false) => &[409],
                // An interrupted refresh may have replaced the batch.
                (true, true) => &[404, 409],
                (false, false) => &[201],
                (false, true) => &[201, 404, 409],
            };
            ensure!(allowed.contains(&status), "belief for movie {movie} returned {status}: {body}");
            if status == 201 {
                acked.push((*user, movie, body["timestamp"].as_i64().unwrap_or(-1)));
            }
            if status != 404 {
                model.answered.insert(movie);
            }
        }
        Action::Invalid { body: sent, .. } => {
            let answered = sent["movieId"].as_u64().is_some_and(|m| model.answered.contains(&m));
            let allowed: &[u16] = match (fuzzy, answered) {
                (true, _) => &[404, 409, 422],
                (false, true) => &[409],
                (false, false) => &[422],
            };
            ensure!(allowed.contains(&status), "invalid belief returned {status}: {body}");
        }
        Action::TopPicks { .. } => ensure!(status == 200, "top picks returned {status}: {body}"),
    }
    Ok(())
}

fn append_torn_tail(rng: &mut ChaCha8Rng, dir: &Path) -> Result<&'static str, String> {
    let file = LOG_FILES[rng.random_range(0..LOG_FILES.len())];
    let fragment = match file {
        "batches.jsonl" => "{\"batchId\":77,\"userId\":3,\"crea",
        dataset::BELIEFS_FILE => "1712345678,3,17,0,,,3.",
        dataset::RATINGS_FILE => "3,17,4.",
        dataset::ELICIT_LOG_FILE => "1712345678,3,17,bro",
        _ => "1712345678,3,",
    };
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(dir.join(file))
        .map_err(|e| e.to_string())?;
    f.write_all(fragment.as_bytes()).map_err(|e| e.to_string())?;
    Ok(file)
}

struct Audit {
    beliefs: usize,
    requests: usize,
}

fn audit(dir: &Path, acked: &[(u32, u64, Timestamp)]) -> Result<Audit, String> {
    for file in LOG_FILES {
        let bytes = fs::read(dir.join(file)).map_err(|e| format!("{file}: {e}"))?;
        ensure!(bytes.is_empty() || bytes.ends_with(b"\n"), "{file}: torn final row");
    }
    for line in fs::read_to_string(dir.join("batches.jsonl")).map_err(|e| e.to_string())?.lines() {
        serde_json::from_str::<Value>(line).map_err(|e| format!("batches.jsonl: {e} in {line:?}"))?;
    }
    let report = validate_corpus(dir);
    ensure!(report.violations.is_empty(), "validation found {:?}", report.violations);

    let beliefs: Vec<BeliefRecord> = dataset::read_table(&dir.join(dataset::BELIEFS_FILE)).map_err(|e| e.to_string())?;
    let requests: Vec<ElicitRequestRecord> =
        dataset::read_table(&dir.join(dataset::ELICIT_LOG_FILE)).map_err(|e| e.to_string())?;
    let ratings: Vec<RatingEvent> = dataset::read_table(&dir.join(dataset::RATINGS_FILE)).map_err(|e| e.to_string())?;
    let _: Vec<RecommendationLogRecord> =
        dataset::read_table(&dir.join(dataset::REC_LOG_FILE)).map_err(|e| e.to_string())?;

    // Each response consumes one earlier, still unanswered presentation of the same pair.
    enum Ev {
        Presented,
        Answered,
    }
    let mut events: Vec<(UserId, MovieId, Timestamp, u8, Ev)> = requests
        .iter()
        .map(|r| (r.user_id, r.movie_id, r.timestamp, 0, Ev::Presented))
        .chain(
            beliefs
                .iter()
                .filter(|b| b.response.is_response())
                .map(|b| (b.user_id, b.movie_id, b.timestamp, 1, Ev::Answered)),
        )
        .collect();
    events.sort_by_key(|e| (e.0, e.1, e.2, e.3));
    let mut open: HashMap<(UserId, MovieId), i64> = HashMap::new();
    for (user, movie, ts, _, ev) in &events {
        let n = open.entry((*user, *movie)).or_default();
        match ev {
            Ev::Presented => *n += 1,
            Ev::Answered => {
                ensure!(*n >= 1, "user {user} answered movie {movie} twice for one presentation (at {ts})");
                *n -= 1;
            }
        }
    }

    // Served movies were never already rated, nor over the presentation limit.
    let mut rated_at: HashMap<(UserId, MovieId), Timestamp> = HashMap::new();
    for r in &ratings {
        rated_at.entry((r.user_id, r.movie_id)).and_modify(|t| *t = (*t).min(r.timestamp)).or_insert(r.timestamp);
    }
    let mut shown: HashMap<(UserId, MovieId), Vec<Timestamp>> = HashMap::new();
    for r in &requests {
        if let Some(t) = rated_at.get(&(r.user_id, r.movie_id)) {
            ensure!(*t >= r.timestamp, "user {} was served movie {} after rating it", r.user_id, r.movie_id);
        }
        let list = shown.entry((r.user_id, r.movie_id)).or_default();
        let recent = list.iter().filter(|t| r.timestamp - **t <= 90 * 86_400).count();
        ensure!(recent < 2, "user {} was served movie {} a third time", r.user_id, r.movie_id);
        list.push(r.timestamp);
    }

    // Seen answers carry their rating row; acknowledged answers survived every crash.
    let rating_keys: HashSet<(UserId, MovieId, Timestamp)> =
        ratings.iter().map(|r| (r.user_id, r.movie_id, r.timestamp)).collect();
    for b in &beliefs {
        if let BeliefResponse::Seen { .. } = b.response {
            ensure!(
                rating_keys.contains(&(b.user_id, b.movie_id, b.timestamp)),
                "seen answer by user {} for movie {} has no rating row",
                b.user_id,
                b.movie_id
            );
        }
    }
    let stored: HashSet<(u32, u64, Timestamp)> = beliefs
        .iter()
        .map(|b| (b.user_id.0, u64::from(b.movie_id.0), b.timestamp))
        .collect();
    for a in acked {
        ensure!(stored.contains(a), "acknowledged answer {a:?} is missing after restart");
    }
    Ok(Audit {
        beliefs: beliefs.len(),
        requests: requests.len(),
    })
}

pub fn kill_restart() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir: PathBuf = tmp.path().to_path_buf();
    seed_catalog(&dir, Utc::now().timestamp())?;

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let mut kill_points = BTreeSet::new();
    while kill_points.len() < KILLS {
        kill_points.insert(rng.random_range(10..REQUESTS));
    }
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(20)))
        .build()
        .into();

    let mut server = Server::start(&dir)?;
    let mut users: HashMap<u32, UserModel> = (1..=USERS).map(|u| (u, UserModel::default())).collect();
    let mut acked = Vec::new();
    let mut torn = Vec::new();
    let mut interrupted = 0;
    for i in 0..REQUESTS {
        let action = next_action(&mut rng, &users);
        let user = user_of(&action);
        if kill_points.contains(&i) {
            let (agent2, base, sent) = (agent.clone(), server.base.clone(), action.clone());
            let request = thread::spawn(move || send(&agent2, &base, &sent));
            thread::sleep(Duration::from_micros(rng.random_range(0..400)));
            server.kill();
            if std::env::var_os("DURABILITY_TRACE").is_some() {
                eprintln!("{i} KILL during {action:?}");
            }
            match request.join().map_err(|_| "request thread panicked".to_string())? {
                Ok((status, body)) => observe(&action, status, &body, users.get_mut(&user).unwrap(), &mut acked)?,
                Err(_) => interrupted += 1,
            }
            // The reply may be lost either way; the next batch read settles this user's state.
            users.get_mut(&user).unwrap().uncertain = true;
            if torn.len() * 2 < kill_points.iter().filter(|k| **k <= i).count() {
                torn.push(append_torn_tail(&mut rng, &dir)?);
            }
            server = Server::start(&dir)?;
            continue;
        }
        let (status, body) = send(&agent, &server.base, &action).map_err(|e| format!("request {i}: {e}"))?;
        if std::env::var_os("DURABILITY_TRACE").is_some() {
            eprintln!("{i} {action:?} -> {status} {body}");
        }
        observe(&action, status, &body, users.get_mut(&user).unwrap(), &mut acked)
            .map_err(|e| format!("request {i}: {e}"))?;
    }
    server.kill();
    drop(server);
    // One more restart repairs whatever the final kill left behind, then stop for the audit.
    torn.push(append_torn_tail(&mut rng, &dir)?);
    let mut last = Server::start(&dir)?;
    last.kill();

    let result = audit(&dir, &acked)?;
    Ok(format!(
        "{REQUESTS} requests, {KILLS} kills ({interrupted} mid-request), {} torn tails injected, \
         {} belief rows / {} request rows / {} acknowledged answers intact",
        torn.len(),
        result.beliefs,
        result.requests,
        acked.len()
    ))
}
