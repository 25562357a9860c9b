//! Descriptive statistics and regressions over a belief corpus.
//!
//! Everything here is a pure function of the logs. Popularity is `ln(1 + ratings)`
//! and uncertainty is the reverse-coded certainty `6 - userCertainty`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::catalog::{CatalogSnapshot, RatingEvent};
use crate::dataset::{
    self, BeliefRecord, BeliefResponse, DatasetError, ElicitRequestRecord, RecommendationLogRecord, Record,
};
use crate::types::{MovieId, Timestamp, UserId};

#[derive(Debug, thiserror::Error)]
pub enum AnalyticsError {
    #[error("rank-deficient design: collinear columns {}", .columns.join(", "))]
    RankDeficient { columns: Vec<String> },
    #[error("{n} observations for {params} parameters")]
    TooFewObservations { n: usize, params: usize },
    #[error("non-finite value in design row {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Ordinary least squares fit with an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub names: Vec<String>,
    pub intercept: f64,
    pub intercept_se: f64,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub p_values: Vec<f64>,
    pub r_squared: f64,
    pub n: usize,
}

impl RegressionResult {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.coefficients[i])
    }

    pub fn std_error(&self, name: &str) -> Option<f64> {
        self.names.iter().position(|n| n == name).map(|i| self.std_errors[i])
    }
}

const PIVOT_TOL: f64 = 1e-10;

/// Fits `target ~ 1 + features` by the normal equations with a Cholesky factorization.
///
/// Columns are scaled to unit norm before factorization so the rank test is scale-free.
pub fn ols(names: &[&str], rows: &[(Vec<f64>, f64)]) -> Result<RegressionResult, AnalyticsError> {
    let k = names.len();
    let p = k + 1;
    let n = rows.len();
    for (i, (x, y)) in rows.iter().enumerate() {
        if x.len() != k || !y.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(AnalyticsError::NonFinite(i));
        }
    }
    let column_names: Vec<String> = std::iter::once("intercept".to_string())
        .chain(names.iter().map(|s| s.to_string()))
        .collect();

    let row = |x: &[f64], j: usize| if j == 0 { 1.0 } else { x[j - 1] };
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![0.0; p];
    for (x, y) in rows {
        for a in 0..p {
            let xa = row(x, a);
            xty[a] += xa * y;
            for b in 0..=a {
                xtx[a][b] += xa * row(x, b);
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtx[b][a] = xtx[a][b];
        }
    }

    let scale: Vec<f64> = (0..p).map(|j| xtx[j][j].sqrt()).collect();
    let mut scaled = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            scaled[a][b] = if scale[a] > 0.0 && scale[b] > 0.0 {
                xtx[a][b] / (scale[a] * scale[b])
            } else {
                0.0
            };
        }
    }

    if n < p {
        return Err(AnalyticsError::TooFewObservations { n, params: p });
    }
    let l = cholesky(&scaled).map_err(|j| AnalyticsError::RankDeficient {
        columns: collinear_columns(&scaled, j, &column_names),
    })?;

    // Solve (D A D) beta = X'y with A = L L'.
    let rhs: Vec<f64> = (0..p).map(|j| xty[j] / scale[j]).collect();
    let z = cholesky_solve(&l, &rhs);
    let beta: Vec<f64> = (0..p).map(|j| z[j] / scale[j]).collect();

    let mean_y = rows.iter().map(|r| r.1).sum::<f64>() / n as f64;
    let mut ssr = 0.0;
    let mut sst = 0.0;
    for (x, y) in rows {
        let fitted: f64 = (0..p).map(|j| beta[j] * row(x, j)).sum();
        ssr += (y - fitted).powi(2);
        sst += (y - mean_y).powi(2);
    }
    let r_squared = if sst > 0.0 { (1.0 - ssr / sst).clamp(0.0, 1.0) } else { 0.0 };

    let dof = n - p;
    let sigma2 = if dof > 0 { ssr / dof as f64 } else { f64::NAN };
    let inv_diag = cholesky_inverse_diagonal(&l);
    let se: Vec<f64> = (0..p)
        .map(|j| (sigma2 * inv_diag[j]).sqrt() / scale[j])
        .collect();
    let t_dist = (dof > 0).then(|| StudentsT::new(0.0, 1.0, dof as f64).expect("positive dof"));
    let p_values: Vec<f64> = (0..p)
        .map(|j| match &t_dist {
            None => f64::NAN,
            Some(_) if se[j] == 0.0 => {
                if beta[j] == 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Some(t) => 2.0 * (1.0 - t.cdf((beta[j] / se[j]).abs())),
        })
        .collect();

    Ok(RegressionResult {
        names: names.iter().map(|s| s.to_string()).collect(),
        intercept: beta[0],
        intercept_se: se[0],
        coefficients: beta[1..].to_vec(),
        std_errors: se[1..].to_vec(),
        p_values: p_values[1..].to_vec(),
        r_squared,
        n,
    })
}

/// Lower-triangular factor, or the index of the first column with a vanishing pivot.
fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, usize> {
    let p = a.len();
    let mut l = vec![vec![0.0; p]; p];
    for j in 0..p {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if a[j][j] == 0.0 || d <= PIVOT_TOL {
            return Err(j);
        }
        l[j][j] = d.sqrt();
        for i in j + 1..p {
            let s = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = s / l[j][j];
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let p = l.len();
    let mut y = vec![0.0; p];
    for i in 0..p {
        y[i] = (b[i] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
    }
    let mut x = vec![0.0; p];
    for i in (0..p).rev() {
        x[i] = (y[i] - (i + 1..p).map(|k| l[k][i] * x[k]).sum::<f64>()) / l[i][i];
    }
    x
}

fn cholesky_inverse_diagonal(l: &[Vec<f64>]) -> Vec<f64> {
    let p = l.len();
    (0..p)
        .map(|j| {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            cholesky_solve(l, &e)[j]
        })
        .collect()
}

/// Names column `j` together with the earlier columns it is a combination of.
fn collinear_columns(a: &[Vec<f64>], j: usize, names: &[String]) -> Vec<String> {
    if a[j][j] == 0.0 || j == 0 {
        return vec![names[j].clone()];
    }
    let head: Vec<Vec<f64>> = (0..j).map(|r| a[r][..j].to_vec()).collect();
    let mut out = Vec::new();
    if let Ok(l) = cholesky(&head) {
        let rhs: Vec<f64> = (0..j).map(|r| a[r][j]).collect();
        let c = cholesky_solve(&l, &rhs);
        out.extend((0..j).filter(|&r| c[r].abs() > 1e-6).map(|r| names[r].clone()));
    }
    out.push(names[j].clone());
    out
}

/// Per-movie popularity inputs: rating count and community rating variance.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PopularityTable {
    entries: HashMap<MovieId, (u64, f64)>,
}

impl PopularityTable {
    pub fn from_snapshot(snapshot: &CatalogSnapshot) -> PopularityTable {
        PopularityTable {
            entries: snapshot
                .entries()
                .map(|e| {
                    (
                        e.stats.movie_id,
                        (e.stats.num_ratings_now, e.stats.rating_variance.unwrap_or(0.0)),
                    )
                })
                .collect(),
        }
    }

    /// Counts current ratings (latest per user and movie).
    pub fn from_ratings(events: &[RatingEvent]) -> PopularityTable {
        let mut latest: HashMap<(UserId, MovieId), (Timestamp, f64)> = HashMap::new();
        for e in events {
            let slot = latest.entry((e.user_id, e.movie_id)).or_insert((e.timestamp, e.rating.value()));
            if e.timestamp >= slot.0 {
                *slot = (e.timestamp, e.rating.value());
            }
        }
        let mut acc: HashMap<MovieId, (u64, f64, f64)> = HashMap::new();
        for ((_, movie), (_, r)) in latest {
            let a = acc.entry(movie).or_default();
            a.0 += 1;
            a.1 += r;
            a.2 += r * r;
        }
        PopularityTable {
            entries: acc
                .into_iter()
                .map(|(m, (n, s, s2))| {
                    let mean = s / n as f64;
                    (m, (n, (s2 / n as f64 - mean * mean).max(0.0)))
                })
                .collect(),
        }
    }

    pub fn count(&self, movie: MovieId) -> u64 {
        self.entries.get(&movie).map_or(0, |e| e.0)
    }

    /// ln(1 + count).
    pub fn popularity(&self, movie: MovieId) -> f64 {
        (self.count(movie) as f64).ln_1p()
    }

    /// Population variance of current ratings; 0 for unrated movies.
    pub fn rating_variance(&self, movie: MovieId) -> f64 {
        self.entries.get(&movie).map_or(0.0, |e| e.1)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ResponseStats {
    pub total_requests: usize,
    pub total_responses: usize,
    pub requested_users: usize,
    pub requested_movies: usize,
    pub responding_users: usize,
    pub responded_movies: usize,
    pub never_responders: usize,
    /// Over users with at least one response.
    pub ratio_mean: f64,
    pub ratio_median: f64,
    pub beliefs_per_responder: f64,
}

/// Request and response volumes. Without a request log, every belief row counts as a request.
pub fn response_stats(requests: &[ElicitRequestRecord], beliefs: &[BeliefRecord]) -> ResponseStats {
    let mut requested: BTreeMap<UserId, usize> = BTreeMap::new();
    let mut requested_movies = BTreeSet::new();
    if requests.is_empty() {
        for b in beliefs {
            *requested.entry(b.user_id).or_default() += 1;
            requested_movies.insert(b.movie_id);
        }
    } else {
        for r in requests {
            *requested.entry(r.user_id).or_default() += 1;
            requested_movies.insert(r.movie_id);
        }
    }
    let mut responded: BTreeMap<UserId, usize> = BTreeMap::new();
    let mut responded_movies = BTreeSet::new();
    for b in beliefs.iter().filter(|b| b.response.is_response()) {
        *responded.entry(b.user_id).or_default() += 1;
        responded_movies.insert(b.movie_id);
    }

    let mut ratios: Vec<f64> = responded
        .iter()
        .map(|(u, &k)| {
            let asked = requested.get(u).copied().unwrap_or(0).max(k);
            k as f64 / asked as f64
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let total_responses: usize = responded.values().sum();
    ResponseStats {
        total_requests: requested.values().sum(),
        total_responses,
        requested_users: requested.len(),
        requested_movies: requested_movies.len(),
        responding_users: responded.len(),
        responded_movies: responded_movies.len(),
        never_responders: requested.keys().filter(|u| !responded.contains_key(u)).count(),
        ratio_mean: mean(&ratios),
        ratio_median: median_sorted(&ratios),
        beliefs_per_responder: if responded.is_empty() {
            0.0
        } else {
            total_responses as f64 / responded.len() as f64
        },
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

pub const POPULARITY: &str = "log_ratings";
pub const RATING_VARIANCE: &str = "rating_variance";
pub const PREDICTED_RATING: &str = "userPredictRating";
pub const UNCERTAINTY: &str = "uncertainty";

/// Per-movie response rate on popularity and community rating variance.
pub fn movie_selection_regression(
    requests: &[ElicitRequestRecord],
    beliefs: &[BeliefRecord],
    popularity: &PopularityTable,
) -> Result<RegressionResult, AnalyticsError> {
    let mut per_movie: BTreeMap<MovieId, (usize, usize)> = BTreeMap::new();
    if requests.is_empty() {
        for b in beliefs {
            per_movie.entry(b.movie_id).or_default().0 += 1;
        }
    } else {
        for r in requests {
            per_movie.entry(r.movie_id).or_default().0 += 1;
        }
    }
    for b in beliefs.iter().filter(|b| b.response.is_response()) {
        per_movie.entry(b.movie_id).or_default().1 += 1;
    }
    let rows: Vec<(Vec<f64>, f64)> = per_movie
        .iter()
        .filter(|(_, (asked, _))| *asked > 0)
        .map(|(m, (asked, answered))| {
            (
                vec![popularity.popularity(*m), popularity.rating_variance(*m)],
                (*answered).min(*asked) as f64 / *asked as f64,
            )
        })
        .collect();
    ols(&[POPULARITY, RATING_VARIANCE], &rows)
}

/// Reverse-coded certainty of not-seen responses on popularity.
pub fn uncertainty_popularity_regression(
    beliefs: &[BeliefRecord],
    popularity: &PopularityTable,
) -> Result<RegressionResult, AnalyticsError> {
    let rows: Vec<(Vec<f64>, f64)> = beliefs
        .iter()
        .filter_map(|b| match b.response {
            BeliefResponse::NotSeen { certainty, .. } => {
                Some((vec![popularity.popularity(b.movie_id)], certainty.uncertainty()))
            }
            _ => None,
        })
        .collect();
    ols(&[POPULARITY], &rows)
}

/// Linear probability model: was a not-seen movie rated after the belief was recorded?
///
/// The watch window runs from the belief's timestamp (exclusive) to the next belief row
/// for the same user and movie (inclusive), or open-ended if there is none.
pub fn watch_lpm(beliefs: &[BeliefRecord], ratings: &[RatingEvent]) -> Result<RegressionResult, AnalyticsError> {
    let mut rated_at: HashMap<(UserId, MovieId), Vec<Timestamp>> = HashMap::new();
    for r in ratings {
        rated_at.entry((r.user_id, r.movie_id)).or_default().push(r.timestamp);
    }
    for v in rated_at.values_mut() {
        v.sort_unstable();
    }
    let mut belief_times: HashMap<(UserId, MovieId), Vec<Timestamp>> = HashMap::new();
    for b in beliefs {
        belief_times.entry((b.user_id, b.movie_id)).or_default().push(b.timestamp);
    }
    for v in belief_times.values_mut() {
        v.sort_unstable();
    }

    let rows: Vec<(Vec<f64>, f64)> = beliefs
        .iter()
        .filter_map(|b| match b.response {
            BeliefResponse::NotSeen { predicted, certainty } => {
                let key = (b.user_id, b.movie_id);
                let next = belief_times[&key].iter().copied().find(|t| *t > b.timestamp);
                let watched = rated_at.get(&key).is_some_and(|ts| {
                    ts.iter()
                        .any(|t| *t > b.timestamp && next.is_none_or(|n| *t <= n))
                });
                Some((
                    vec![predicted.value(), certainty.uncertainty()],
                    if watched { 1.0 } else { 0.0 },
                ))
            }
            _ => None,
        })
        .collect();
    ols(&[PREDICTED_RATING, UNCERTAINTY], &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OverlapMetrics {
    /// Mean over users of |requested ∩ ever recommended| / |requested|.
    pub request_overlap: f64,
    /// Same over the responded subset, for users with at least one response.
    pub response_overlap: f64,
    pub users: usize,
    pub responding_users: usize,
}

pub fn overlap_metrics(
    requests: &[ElicitRequestRecord],
    beliefs: &[BeliefRecord],
    rec_log: &[RecommendationLogRecord],
) -> OverlapMetrics {
    let mut recommended: HashMap<UserId, BTreeSet<MovieId>> = HashMap::new();
    for r in rec_log {
        recommended.entry(r.user_id).or_default().insert(r.movie_id);
    }
    let mut requested: BTreeMap<UserId, BTreeSet<MovieId>> = BTreeMap::new();
    if requests.is_empty() {
        for b in beliefs {
            requested.entry(b.user_id).or_default().insert(b.movie_id);
        }
    } else {
        for r in requests {
            requested.entry(r.user_id).or_default().insert(r.movie_id);
        }
    }
    let mut responded: BTreeMap<UserId, BTreeSet<MovieId>> = BTreeMap::new();
    for b in beliefs.iter().filter(|b| b.response.is_response()) {
        responded.entry(b.user_id).or_default().insert(b.movie_id);
    }
    let empty = BTreeSet::new();
    let fraction = |user: &UserId, movies: &BTreeSet<MovieId>| {
        let recs = recommended.get(user).unwrap_or(&empty);
        movies.iter().filter(|m| recs.contains(m)).count() as f64 / movies.len() as f64
    };
    let req: Vec<f64> = requested.iter().map(|(u, m)| fraction(u, m)).collect();
    let resp: Vec<f64> = responded.iter().map(|(u, m)| fraction(u, m)).collect();
    OverlapMetrics {
        request_overlap: mean(&req),
        response_overlap: mean(&resp),
        users: req.len(),
        responding_users: resp.len(),
    }
}

/// Tables of one corpus directory; missing optional files load as empty.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub beliefs: Vec<BeliefRecord>,
    pub requests: Vec<ElicitRequestRecord>,
    pub ratings: Vec<RatingEvent>,
    pub rec_log: Vec<RecommendationLogRecord>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Corpus, AnalyticsError> {
        fn optional<T: Record>(dir: &Path) -> Result<Vec<T>, DatasetError> {
            let path = dir.join(T::FILE_NAME);
            if path.exists() {
                dataset::read_table(&path)
            } else {
                Ok(Vec::new())
            }
        }
        Ok(Corpus {
            beliefs: dataset::read_table(&dir.join(dataset::BELIEFS_FILE))?,
            requests: optional(dir)?,
            ratings: optional(dir)?,
            rec_log: optional(dir)?,
        })
    }
}

/// All statistics for one corpus. Regressions that cannot be fit carry their error text.
#[derive(Debug, Clone)]
pub struct Report {
    pub responses: ResponseStats,
    pub movie_selection: Result<RegressionResult, String>,
    pub uncertainty_popularity: Result<RegressionResult, String>,
    pub watch: Result<RegressionResult, String>,
    pub overlap: OverlapMetrics,
}

impl Report {
    pub fn compute(corpus: &Corpus) -> Report {
        let popularity = PopularityTable::from_ratings(&corpus.ratings);
        Report {
            responses: response_stats(&corpus.requests, &corpus.beliefs),
            movie_selection: movie_selection_regression(&corpus.requests, &corpus.beliefs, &popularity)
                .map_err(|e| e.to_string()),
            uncertainty_popularity: uncertainty_popularity_regression(&corpus.beliefs, &popularity)
                .map_err(|e| e.to_string()),
            watch: watch_lpm(&corpus.beliefs, &corpus.ratings).map_err(|e| e.to_string()),
            overlap: overlap_metrics(&corpus.requests, &corpus.beliefs, &corpus.rec_log),
        }
    }

    /// `key=value` lines, sorted by key.
    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        let r = &self.responses;
        for (k, v) in [
            ("total_requests", r.total_requests),
            ("total_responses", r.total_responses),
            ("requested_users", r.requested_users),
            ("requested_movies", r.requested_movies),
            ("responding_users", r.responding_users),
            ("responded_movies", r.responded_movies),
            ("never_responders", r.never_responders),
        ] {
            kv.insert(format!("responses.{k}"), v.to_string());
        }
        kv.insert("responses.ratio_mean".into(), r.ratio_mean.to_string());
        kv.insert("responses.ratio_median".into(), r.ratio_median.to_string());
        kv.insert("responses.beliefs_per_responder".into(), r.beliefs_per_responder.to_string());
        for (prefix, reg) in [
            ("movie_selection", &self.movie_selection),
            ("uncertainty_popularity", &self.uncertainty_popularity),
            ("watch", &self.watch),
        ] {
            match reg {
                Ok(reg) => {
                    kv.insert(format!("{prefix}.n"), reg.n.to_string());
                    kv.insert(format!("{prefix}.r_squared"), reg.r_squared.to_string());
                    kv.insert(format!("{prefix}.intercept"), reg.intercept.to_string());
                    for (i, name) in reg.names.iter().enumerate() {
                        kv.insert(format!("{prefix}.{name}.coef"), reg.coefficients[i].to_string());
                        kv.insert(format!("{prefix}.{name}.se"), reg.std_errors[i].to_string());
                        kv.insert(format!("{prefix}.{name}.p"), reg.p_values[i].to_string());
                    }
                }
                Err(e) => {
                    kv.insert(format!("{prefix}.error"), e.clone());
                }
            }
        }
        let o = &self.overlap;
        kv.insert("overlap.request".into(), o.request_overlap.to_string());
        kv.insert("overlap.response".into(), o.response_overlap.to_string());
        kv.insert("overlap.users".into(), o.users.to_string());
        kv.insert("overlap.responding_users".into(), o.responding_users.to_string());
        kv.into_iter().fold(String::new(), |mut s, (k, v)| {
            let _ = writeln!(s, "{k}={v}");
            s
        })
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), self.to_string())?;
        fs::write(dir.join("report.kv"), self.to_kv())
    }
}

fn write_regression(f: &mut fmt::Formatter<'_>, title: &str, reg: &Result<RegressionResult, String>) -> fmt::Result {
    writeln!(f, "\n{title}")?;
    match reg {
        Err(e) => writeln!(f, "  not estimated: {e}"),
        Ok(reg) => {
            writeln!(f, "  {:<20} {:>12} {:>12} {:>10}", "term", "coef", "se", "p")?;
            writeln!(f, "  {:<20} {:>12.6} {:>12.6} {:>10}", "intercept", reg.intercept, reg.intercept_se, "")?;
            for i in 0..reg.names.len() {
                writeln!(
                    f,
                    "  {:<20} {:>12.6} {:>12.6} {:>10.4}",
                    reg.names[i], reg.coefficients[i], reg.std_errors[i], reg.p_values[i]
                )?;
            }
            writeln!(f, "  n = {}, R^2 = {:.4}", reg.n, reg.r_squared)
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = &self.responses;
        writeln!(f, "Responses")?;
        writeln!(f, "  {:<32} {:>12}", "elicitation requests", r.total_requests)?;
        writeln!(f, "  {:<32} {:>12}", "belief responses", r.total_responses)?;
        writeln!(f, "  {:<32} {:>12}", "requested users", r.requested_users)?;
        writeln!(f, "  {:<32} {:>12}", "responding users", r.responding_users)?;
        writeln!(f, "  {:<32} {:>12}", "never-responding users", r.never_responders)?;
        writeln!(f, "  {:<32} {:>12}", "responded movies", r.responded_movies)?;
        writeln!(f, "  {:<32} {:>12.4}", "response ratio mean", r.ratio_mean)?;
        writeln!(f, "  {:<32} {:>12.4}", "response ratio median", r.ratio_median)?;
        writeln!(f, "  {:<32} {:>12.2}", "beliefs per responding user", r.beliefs_per_responder)?;
        write_regression(f, "Response rate on popularity", &self.movie_selection)?;
        write_regression(f, "Uncertainty on popularity", &self.uncertainty_popularity)?;
        write_regression(f, "Watched after elicitation (LPM)", &self.watch)?;
        writeln!(f, "\nOverlap with recommendations")?;
        writeln!(f, "  {:<32} {:>12.4}", "requested movies", self.overlap.request_overlap)?;
        writeln!(f, "  {:<32} {:>12.4}", "responded movies", self.overlap.response_overlap)
    }
}
