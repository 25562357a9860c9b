//! Synthetic population and the day-by-day elicitation loop.
//!
//! True values come from a rank-d latent model on the rating scale. Priors are the
//! true values plus bias noise, with prior spread growing as a movie gets less
//! popular. Each simulated visit serves a top-picks slate (which updates beliefs
//! through noisy signals), presents a sampler batch, records truthful responses with
//! the user's propensity, and draws consumption from a linear probability rule.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::io;
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Exp1, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use statrs::function::beta::ln_beta;
use statrs::function::factorial::ln_binomial;

use crate::catalog::{self, Catalog, Genre, GenreSet, Movie, RatingEvent};
use crate::choice::{posterior, GoodBelief, SignalModel, UtilityFunction};
use crate::dataset::{
    self, BeliefRecord, BeliefResponse, Certainty, ConsumptionRecord, ElicitRequestRecord, RecommendationLogRecord,
};
use crate::pool::{build_pool, ElicitationPool, PoolConfig};
use crate::sampler::{
    refresh_batch, sample_batch, BatchId, ElicitationBatch, ElicitationHistory, RatingPredictor, SamplingContext,
    Slot, SlotSource, BATCH_SIZE, TOP_PICKS_WINDOW,
};
use crate::types::{start_of_day, MovieId, Rating, Timestamp, UserId, YearMonth, SECONDS_PER_DAY};

/// First id given to background raters, who only contribute rating history.
pub const BACKGROUND_USER_BASE: u32 = 1_000_000;
const HISTORY_WINDOW_DAYS: u64 = 365;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub num_users: usize,
    pub num_movies: usize,
    pub horizon_days: u32,
    pub start_date: NaiveDate,
    pub y: f64,
    pub rng_seed: u64,
    /// Response propensity ~ Beta(a, b).
    pub response_a: f64,
    pub response_b: f64,
    /// When set, (a, b) are replaced by [`calibrate_propensity`] for the targets below.
    pub calibrate_response: bool,
    pub response_target_mean: f64,
    pub response_target_median: f64,
    /// Watch probability = beta0 + beta1 * predicted rating + beta2 * uncertainty.
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub signal_sd: f64,
    pub latent_dim: usize,
    pub value_noise: f64,
    pub prior_bias_sd: f64,
    pub prior_sd_min: f64,
    pub prior_sd_max: f64,
    pub prior_sd_jitter: f64,
    pub utility: UtilityFunction,
    pub visit_prob: f64,
    pub top_picks_shown: usize,
    pub top_picks_refresh_days: u32,
    pub recommender_noise: f64,
    /// Multiplier on the response propensity for `rec` slots.
    pub rec_response_boost: f64,
    /// Chance of asking for a refreshed batch after answering.
    pub refresh_prob: f64,
    /// Share of the catalog each user has seen without rating.
    pub seen_unrated_share: f64,
    /// Mean number of pre-start ratings per simulated user.
    pub history_ratings: f64,
    pub background_users: usize,
    pub background_ratings: f64,
    pub catalog_years: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            num_users: 2_500,
            num_movies: 3_000,
            horizon_days: 120,
            start_date: NaiveDate::from_ymd_opt(2023, 3, 1).expect("valid date"),
            y: 4.0,
            rng_seed: 1,
            response_a: 0.386,
            response_b: 4.565,
            calibrate_response: true,
            response_target_mean: 0.078,
            response_target_median: 0.031,
            beta0: 0.66,
            beta1: 0.028,
            beta2: -0.134,
            signal_sd: 1.0,
            latent_dim: 3,
            value_noise: 0.4,
            prior_bias_sd: 0.5,
            prior_sd_min: 0.3,
            prior_sd_max: 1.5,
            prior_sd_jitter: 0.1,
            utility: UtilityFunction::Linear,
            visit_prob: 0.5,
            top_picks_shown: 10,
            top_picks_refresh_days: 7,
            recommender_noise: 0.3,
            rec_response_boost: 1.0,
            refresh_prob: 0.0,
            seen_unrated_share: 0.01,
            history_ratings: 20.0,
            background_users: 2_000,
            background_ratings: 40.0,
            catalog_years: 20,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: &str| Err(SimError::Invalid(m.to_string()));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if self.num_users == 0 || self.num_movies == 0 || self.horizon_days == 0 || self.latent_dim == 0 {
            return fail("num_users, num_movies, horizon_days and latent_dim must be positive");
        }
        if !(self.y.is_finite() && self.y > 0.0) {
            return fail("y must be positive");
        }
        // a = 0 is the point mass at zero: nobody responds.
        if !(self.response_a >= 0.0 && self.response_b > 0.0) {
            return fail("response_a must be non-negative and response_b positive");
        }
        if self.calibrate_response
            && !(0.0 < self.response_target_median
                && self.response_target_median < self.response_target_mean
                && self.response_target_mean < 1.0)
        {
            return fail("response targets need 0 < median < mean < 1");
        }
        if ![self.beta0, self.beta1, self.beta2].iter().all(|b| b.is_finite()) {
            return fail("consumption coefficients must be finite");
        }
        if !(self.signal_sd.is_finite() && self.signal_sd > 0.0) {
            return fail("signal_sd must be positive");
        }
        if !(self.prior_sd_min > 0.0 && self.prior_sd_max >= self.prior_sd_min && self.prior_sd_max.is_finite()) {
            return fail("need 0 < prior_sd_min <= prior_sd_max");
        }
        for (name, v) in [
            ("value_noise", self.value_noise),
            ("prior_bias_sd", self.prior_bias_sd),
            ("prior_sd_jitter", self.prior_sd_jitter),
            ("recommender_noise", self.recommender_noise),
            ("rec_response_boost", self.rec_response_boost),
            ("history_ratings", self.history_ratings),
            ("background_ratings", self.background_ratings),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(SimError::Invalid(format!("{name} must be non-negative")));
            }
        }
        for (name, p) in [
            ("visit_prob", self.visit_prob),
            ("refresh_prob", self.refresh_prob),
            ("seen_unrated_share", self.seen_unrated_share),
        ] {
            if !prob(p) {
                return Err(SimError::Invalid(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.top_picks_refresh_days == 0 {
            return fail("top_picks_refresh_days must be positive");
        }
        self.utility.validate().map_err(|e| SimError::Invalid(e.to_string()))
    }

    /// Parses `key = value` lines; `#` starts a comment. Unset keys keep their defaults.
    pub fn parse(text: &str) -> Result<SimConfig, SimError> {
        let mut c = SimConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| SimError::Config { line: i + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            c.set(key, value).map_err(err)?;
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        match key {
            "num_users" => self.num_users = num(key, value)?,
            "num_movies" => self.num_movies = num(key, value)?,
            "horizon_days" => self.horizon_days = num(key, value)?,
            "start_date" => {
                self.start_date = crate::types::parse_date(value).ok_or_else(|| format!("bad date {value:?}"))?
            }
            "y" => self.y = num(key, value)?,
            "rng_seed" => self.rng_seed = num(key, value)?,
            "response_a" => self.response_a = num(key, value)?,
            "response_b" => self.response_b = num(key, value)?,
            "calibrate_response" => self.calibrate_response = num(key, value)?,
            "response_target_mean" => self.response_target_mean = num(key, value)?,
            "response_target_median" => self.response_target_median = num(key, value)?,
            "beta0" => self.beta0 = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "signal_sd" => self.signal_sd = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "value_noise" => self.value_noise = num(key, value)?,
            "prior_bias_sd" => self.prior_bias_sd = num(key, value)?,
            "prior_sd_min" => self.prior_sd_min = num(key, value)?,
            "prior_sd_max" => self.prior_sd_max = num(key, value)?,
            "prior_sd_jitter" => self.prior_sd_jitter = num(key, value)?,
            "utility" => self.utility = value.parse()?,
            "visit_prob" => self.visit_prob = num(key, value)?,
            "top_picks_shown" => self.top_picks_shown = num(key, value)?,
            "top_picks_refresh_days" => self.top_picks_refresh_days = num(key, value)?,
            "recommender_noise" => self.recommender_noise = num(key, value)?,
            "rec_response_boost" => self.rec_response_boost = num(key, value)?,
            "refresh_prob" => self.refresh_prob = num(key, value)?,
            "seen_unrated_share" => self.seen_unrated_share = num(key, value)?,
            "history_ratings" => self.history_ratings = num(key, value)?,
            "background_users" => self.background_users = num(key, value)?,
            "background_ratings" => self.background_ratings = num(key, value)?,
            "catalog_years" => self.catalog_years = num(key, value)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Expected elicitation requests per user over the horizon.
    pub fn expected_requests_per_user(&self) -> f64 {
        BATCH_SIZE as f64 * self.visit_prob * f64::from(self.horizon_days)
    }

    /// Beta parameters of the response propensity actually used.
    pub fn propensity_parameters(&self) -> Result<(f64, f64), SimError> {
        if !self.calibrate_response {
            return Ok((self.response_a, self.response_b));
        }
        let n = self.expected_requests_per_user().round().max(1.0) as u64;
        calibrate_propensity(self.response_target_mean, self.response_target_median, n)
    }

    pub fn utility_name(&self) -> String {
        match self.utility {
            UtilityFunction::Linear => "linear".to_string(),
            UtilityFunction::Power { alpha } => format!("power:{alpha}"),
            UtilityFunction::Exponential { risk_aversion } => format!("exp:{risk_aversion}"),
        }
    }

    /// Hex SHA-256 of the canonical `key=value` rendering.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_string().as_bytes()))
    }
}

impl fmt::Display for SimConfig {
    /// Canonical rendering; parses back to an equal config.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "num_users={}", self.num_users)?;
        writeln!(f, "num_movies={}", self.num_movies)?;
        writeln!(f, "horizon_days={}", self.horizon_days)?;
        writeln!(f, "start_date={}", self.start_date.format("%Y-%m-%d"))?;
        writeln!(f, "y={}", self.y)?;
        writeln!(f, "rng_seed={}", self.rng_seed)?;
        writeln!(f, "response_a={}", self.response_a)?;
        writeln!(f, "response_b={}", self.response_b)?;
        writeln!(f, "calibrate_response={}", self.calibrate_response)?;
        writeln!(f, "response_target_mean={}", self.response_target_mean)?;
        writeln!(f, "response_target_median={}", self.response_target_median)?;
        writeln!(f, "beta0={}", self.beta0)?;
        writeln!(f, "beta1={}", self.beta1)?;
        writeln!(f, "beta2={}", self.beta2)?;
        writeln!(f, "signal_sd={}", self.signal_sd)?;
        writeln!(f, "latent_dim={}", self.latent_dim)?;
        writeln!(f, "value_noise={}", self.value_noise)?;
        writeln!(f, "prior_bias_sd={}", self.prior_bias_sd)?;
        writeln!(f, "prior_sd_min={}", self.prior_sd_min)?;
        writeln!(f, "prior_sd_max={}", self.prior_sd_max)?;
        writeln!(f, "prior_sd_jitter={}", self.prior_sd_jitter)?;
        writeln!(f, "utility={}", self.utility_name())?;
        writeln!(f, "visit_prob={}", self.visit_prob)?;
        writeln!(f, "top_picks_shown={}", self.top_picks_shown)?;
        writeln!(f, "top_picks_refresh_days={}", self.top_picks_refresh_days)?;
        writeln!(f, "recommender_noise={}", self.recommender_noise)?;
        writeln!(f, "rec_response_boost={}", self.rec_response_boost)?;
        writeln!(f, "refresh_prob={}", self.refresh_prob)?;
        writeln!(f, "seen_unrated_share={}", self.seen_unrated_share)?;
        writeln!(f, "history_ratings={}", self.history_ratings)?;
        writeln!(f, "background_users={}", self.background_users)?;
        writeln!(f, "background_ratings={}", self.background_ratings)?;
        writeln!(f, "catalog_years={}", self.catalog_years)
    }
}

/// Independent stream per (purpose, index) so users can be simulated in any order.
fn stream_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) | index);
    rng
}

const STREAM_MOVIES: u64 = 1;
const STREAM_USERS: u64 = 2;
const STREAM_BACKGROUND: u64 = 3;
const STREAM_VISITS: u64 = 4;

/// Mean and median of the per-user response ratio among users with at least one
/// response, when each of `n` requests is answered with a Beta(a, b) propensity.
///
/// Responses are beta-binomial; the median spreads each count's mass uniformly over
/// `[k - 1/2, k + 1/2]` so it moves continuously with the parameters.
pub fn conditional_response_moments(a: f64, b: f64, n: u64) -> (f64, f64) {
    let ln_b = ln_beta(a, b);
    let nf = n as f64;
    // P(K = 0) = B(a, b + n) / B(a, b).
    let p0 = (ln_beta(a, b + nf) - ln_b).exp();
    let responders = 1.0 - p0;
    let mean = a / (a + b) / responders;
    let mut cdf = 0.0;
    let mut median = 1.0;
    for k in 1..=n {
        let kf = k as f64;
        let p = (ln_binomial(n, k) + ln_beta(kf + a, nf - kf + b) - ln_b).exp() / responders;
        if cdf + p >= 0.5 {
            median = (kf - 0.5 + (0.5 - cdf) / p) / nf;
            break;
        }
        cdf += p;
    }
    (mean, median)
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    let (flo, fhi) = (f(lo), f(hi));
    if flo.signum() == fhi.signum() {
        return None;
    }
    for _ in 0..100 {
        let mid = (lo * hi).sqrt();
        if f(mid).signum() == flo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    Some((lo * hi).sqrt())
}

/// Beta(a, b) whose conditional response-ratio mean and median hit the targets for `n` requests.
///
/// With few requests per user the median target can lie below anything a Beta reaches at
/// the target mean; that is reported as an error rather than approximated.
pub fn calibrate_propensity(target_mean: f64, target_median: f64, n: u64) -> Result<(f64, f64), SimError> {
    let fail = || {
        SimError::Invalid(format!(
            "cannot calibrate propensity to mean {target_mean}, median {target_median} with about {n} \
             requests per user; lengthen horizon_days or set calibrate_response=false"
        ))
    };
    let b_for = |a: f64| bisect(1e-3, 1e6, |b| conditional_response_moments(a, b, n).0 - target_mean);
    let a = bisect(1e-3, 1e3, |a| match b_for(a) {
        Some(b) => conditional_response_moments(a, b, n).1 - target_median,
        None => f64::NAN,
    })
    .ok_or_else(fail)?;
    let b = b_for(a).ok_or_else(fail)?;
    Ok((a, b))
}

/// One simulated user; vectors are indexed by movie position in [`Population::movies`].
#[derive(Debug, Clone)]
pub struct SimUser {
    pub user_id: UserId,
    pub truth: Vec<f32>,
    pub mean: Vec<f32>,
    pub sd: Vec<f32>,
    pub propensity: f64,
    pub utility: UtilityFunction,
}

impl SimUser {
    pub fn belief(&self, index: usize) -> GoodBelief {
        GoodBelief::normal(f64::from(self.mean[index]), f64::from(self.sd[index]))
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub movies: Vec<Movie>,
    /// Sampling weight for ratings; higher is more popular.
    pub popularity_weight: Vec<f64>,
    /// 0 = most popular.
    pub popularity_rank: Vec<usize>,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub users: Vec<SimUser>,
    /// Ascending precision cut points separating the five certainty levels.
    pub certainty_cuts: [f64; 4],
}

impl Population {
    pub fn index_of(&self, movie: MovieId) -> Option<usize> {
        let i = movie.0.checked_sub(1)? as usize;
        (i < self.movies.len()).then_some(i)
    }

    /// Certainty level for a belief spread: quintile of 1/sd over the initial population.
    pub fn certainty(&self, sd: f64) -> Certainty {
        let precision = 1.0 / sd.max(1e-9);
        let level = 1 + self.certainty_cuts.iter().filter(|c| precision > **c).count();
        Certainty::new(level as u8).expect("level in 1..=5")
    }
}

const GENRE_WEIGHTS: [(Genre, f64); 18] = [
    (Genre::Drama, 0.22),
    (Genre::Comedy, 0.18),
    (Genre::Action, 0.09),
    (Genre::Thriller, 0.08),
    (Genre::Romance, 0.07),
    (Genre::Horror, 0.06),
    (Genre::Documentary, 0.05),
    (Genre::Crime, 0.04),
    (Genre::Adventure, 0.04),
    (Genre::ScienceFiction, 0.03),
    (Genre::Animation, 0.03),
    (Genre::Fantasy, 0.04),
    (Genre::Mystery, 0.02),
    (Genre::War, 0.01),
    (Genre::History, 0.01),
    (Genre::Music, 0.01),
    (Genre::Western, 0.01),
    (Genre::TvMovie, 0.01),
];

fn generate_movies(config: &SimConfig) -> (Vec<Movie>, Vec<f64>, Vec<usize>) {
    let mut rng = stream_rng(config.rng_seed, STREAM_MOVIES, 0);
    let genre_index =
        WeightedIndex::new(GENRE_WEIGHTS.iter().map(|g| g.1)).expect("positive genre weights");
    let start = config.start_date;
    let catalog_days = i64::from(config.catalog_years.max(1)) * 365;
    let movies: Vec<Movie> = (0..config.num_movies)
        .map(|i| {
            let mut genres = GenreSet::empty();
            genres.insert(GENRE_WEIGHTS[genre_index.sample(&mut rng)].0);
            if rng.random_bool(0.4) {
                genres.insert(GENRE_WEIGHTS[genre_index.sample(&mut rng)].0);
            }
            if rng.random_bool(0.15) {
                genres.insert(GENRE_WEIGHTS[genre_index.sample(&mut rng)].0);
            }
            let u: f64 = rng.random();
            let offset_days: i64 = if u < 0.04 {
                -rng.random_range(0..i64::from(config.horizon_days))
            } else if u < 0.10 {
                rng.random_range(1..=183)
            } else {
                rng.random_range(1..=catalog_days)
            };
            let release = if offset_days >= 0 {
                start.checked_sub_days(Days::new(offset_days as u64))
            } else {
                start.checked_add_days(Days::new((-offset_days) as u64))
            };
            Movie {
                id: MovieId(i as u32 + 1),
                title: format!("Synthetic Movie {}", i + 1),
                genres,
                release_date: release,
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..config.num_movies).collect();
    // Fisher-Yates with the movie stream; position in `order` is the popularity rank.
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut rank = vec![0; config.num_movies];
    for (r, &m) in order.iter().enumerate() {
        rank[m] = r;
    }
    let weight = rank.iter().map(|&r| 1.0 / (r as f64 + 1.0).powf(0.9)).collect();
    (movies, weight, rank)
}

fn item_factors(config: &SimConfig) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(config.rng_seed, STREAM_MOVIES, 1);
    (0..config.num_movies)
        .map(|_| {
            (0..config.latent_dim)
                .map(|k| {
                    let z: f64 = rng.sample(StandardNormal);
                    if k == 0 {
                        3.2 + 0.6 * z
                    } else {
                        0.5 * z
                    }
                })
                .collect()
        })
        .collect()
}

/// Draws the whole population; identical for identical configs.
pub fn spawn_population(config: &SimConfig) -> Result<Population, SimError> {
    config.validate()?;
    let (movies, popularity_weight, popularity_rank) = generate_movies(config);
    let items = item_factors(config);
    let n = config.num_movies;
    let (a, b) = config.propensity_parameters()?;
    let propensity = if a == 0.0 {
        None
    } else {
        Some(Beta::new(a, b).map_err(|e| SimError::Invalid(format!("response propensity: {e}")))?)
    };
    let sd_span = config.prior_sd_max - config.prior_sd_min;
    let rank_scale = if n > 1 { (n - 1) as f64 } else { 1.0 };

    let drawn: Vec<(Vec<f64>, SimUser)> = (0..config.num_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(config.rng_seed, STREAM_USERS, i as u64);
            let factor: Vec<f64> = (0..config.latent_dim)
                .map(|k| {
                    let z: f64 = rng.sample(StandardNormal);
                    if k == 0 {
                        1.0 + 0.15 * z
                    } else {
                        z
                    }
                })
                .collect();
            let mut truth = Vec::with_capacity(n);
            let mut mean = Vec::with_capacity(n);
            let mut sd = Vec::with_capacity(n);
            for (m, item) in items.iter().enumerate() {
                let dot: f64 = factor.iter().zip(item).map(|(a, b)| a * b).sum();
                let noise: f64 = rng.sample(StandardNormal);
                let x = (dot + config.value_noise * noise).clamp(0.5, 5.0);
                let bias: f64 = rng.sample(StandardNormal);
                let jitter: f64 = rng.sample(StandardNormal);
                let base_sd = config.prior_sd_min + sd_span * popularity_rank[m] as f64 / rank_scale;
                truth.push(x as f32);
                mean.push((x + config.prior_bias_sd * bias) as f32);
                sd.push((base_sd * (config.prior_sd_jitter * jitter).exp()) as f32);
            }
            let user = SimUser {
                user_id: UserId(i as u32 + 1),
                truth,
                mean,
                sd,
                propensity: propensity.as_ref().map_or(0.0, |p| p.sample(&mut rng)),
                utility: config.utility,
            };
            (factor, user)
        })
        .collect();
    let (user_factors, users): (Vec<_>, Vec<_>) = drawn.into_iter().unzip();

    let mut precisions: Vec<f64> = users
        .iter()
        .flat_map(|u| u.sd.iter().step_by(7).map(|s| 1.0 / f64::from(*s)))
        .collect();
    precisions.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        if precisions.is_empty() {
            0.0
        } else {
            precisions[((precisions.len() - 1) as f64 * q).round() as usize]
        }
    };
    let certainty_cuts = [quantile(0.2), quantile(0.4), quantile(0.6), quantile(0.8)];

    Ok(Population {
        movies,
        popularity_weight,
        popularity_rank,
        user_factors,
        item_factors: items,
        users,
        certainty_cuts,
    })
}

/// All tables produced by one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimLogs {
    pub movies: Vec<Movie>,
    pub ratings: Vec<RatingEvent>,
    pub beliefs: Vec<BeliefRecord>,
    pub requests: Vec<ElicitRequestRecord>,
    pub rec_log: Vec<RecommendationLogRecord>,
    pub consumption: Vec<ConsumptionRecord>,
    /// Pools in effect, in month order.
    pub pools: Vec<ElicitationPool>,
}

pub const MANIFEST_FILE: &str = "manifest.txt";

impl SimLogs {
    /// Writes every table in canonical form plus a manifest holding the config and its digest.
    pub fn write(&self, dir: &Path, config: &SimConfig) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        let mut movies = Vec::new();
        catalog::write_movies(&self.movies, &mut movies)?;
        fs::write(dir.join(dataset::MOVIES_FILE), movies)?;
        fs::write(dir.join(dataset::RATINGS_FILE), dataset::encode_table(&self.ratings))?;
        fs::write(dir.join(dataset::BELIEFS_FILE), dataset::encode_table(&self.beliefs))?;
        fs::write(dir.join(dataset::ELICIT_LOG_FILE), dataset::encode_table(&self.requests))?;
        fs::write(dir.join(dataset::REC_LOG_FILE), dataset::encode_table(&self.rec_log))?;
        fs::write(dir.join(dataset::CONSUMPTION_FILE), dataset::encode_table(&self.consumption))?;
        let mut manifest = String::new();
        let _ = writeln!(manifest, "config_sha256={}", config.digest());
        for (name, rows) in [
            (dataset::MOVIES_FILE, self.movies.len()),
            (dataset::RATINGS_FILE, self.ratings.len()),
            (dataset::BELIEFS_FILE, self.beliefs.len()),
            (dataset::ELICIT_LOG_FILE, self.requests.len()),
            (dataset::REC_LOG_FILE, self.rec_log.len()),
            (dataset::CONSUMPTION_FILE, self.consumption.len()),
        ] {
            let _ = writeln!(manifest, "rows.{name}={rows}");
        }
        manifest.push_str(&config.to_string());
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        Ok(())
    }
}

/// Predicted ratings from the user's own current belief means.
struct BeliefPredictor<'a> {
    user: UserId,
    mean: &'a [f32],
}

impl RatingPredictor for BeliefPredictor<'_> {
    fn predict(&self, user: UserId, movie: MovieId) -> Option<Rating> {
        if user != self.user {
            return None;
        }
        let i = movie.0.checked_sub(1)? as usize;
        self.mean.get(i).map(|m| Rating::nearest(f64::from(*m)))
    }

    fn provider(&self) -> &str {
        "belief-means"
    }
}

struct UserState {
    user: SimUser,
    rng: ChaCha8Rng,
    rated: BTreeSet<MovieId>,
    /// Seen but never rated, with an optional remembered watch date.
    seen: HashMap<MovieId, Option<NaiveDate>>,
    history: ElicitationHistory,
    top_picks: Vec<MovieId>,
    top_picks_day: Option<i64>,
    batches: u64,
    logs: SimLogs,
}

struct World<'a> {
    config: &'a SimConfig,
    population: &'a Population,
    signal: SignalModel,
}

/// Pre-start ratings and seen-but-unrated movies for one simulated user.
fn user_history(world: &World<'_>, state: &mut UserState, index: usize) -> Vec<RatingEvent> {
    let config = world.config;
    let pop = world.population;
    let mut rng = stream_rng(config.rng_seed, STREAM_BACKGROUND, (1 << 32) | index as u64);
    let start = start_of_day(config.start_date);
    let popular = WeightedIndex::new(&pop.popularity_weight).expect("positive weights");
    let count = (config.history_ratings * rng.sample::<f64, _>(Exp1)).round() as usize;
    let mut events = Vec::new();
    for _ in 0..count {
        let m = popular.sample(&mut rng);
        let movie = &pop.movies[m];
        let Some((lo, hi)) = rating_window(movie, start - HISTORY_WINDOW_DAYS as i64 * SECONDS_PER_DAY, start - 1)
        else {
            continue;
        };
        if !state.rated.insert(movie.id) {
            continue;
        }
        events.push(RatingEvent {
            user_id: state.user.user_id,
            movie_id: movie.id,
            rating: Rating::nearest(f64::from(state.user.truth[m])),
            timestamp: rng.random_range(lo..=hi),
        });
    }
    let seen_count = (config.seen_unrated_share * pop.movies.len() as f64).round() as usize;
    for _ in 0..seen_count {
        let m = popular.sample(&mut rng);
        let movie = &pop.movies[m];
        if movie.release_date.is_some_and(|d| d >= config.start_date) || state.rated.contains(&movie.id) {
            continue;
        }
        let watched = rng.random_bool(0.7).then(|| {
            let back = rng.random_range(1..=700u64);
            config.start_date.checked_sub_days(Days::new(back))
        });
        let watched = watched.flatten().filter(|d| movie.release_date.is_none_or(|r| *d >= r));
        state.seen.insert(movie.id, watched);
    }
    events
}

/// Rating timestamps allowed for `movie` within [lo, hi].
fn rating_window(movie: &Movie, lo: Timestamp, hi: Timestamp) -> Option<(Timestamp, Timestamp)> {
    let lo = movie.release_date.map_or(lo, |d| lo.max(start_of_day(d)));
    (lo <= hi).then_some((lo, hi))
}

fn background_ratings(world: &World<'_>, end: Timestamp) -> Vec<RatingEvent> {
    let config = world.config;
    let pop = world.population;
    let start = start_of_day(config.start_date);
    let popular = WeightedIndex::new(&pop.popularity_weight).expect("positive weights");
    (0..config.background_users)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = stream_rng(config.rng_seed, STREAM_BACKGROUND, b as u64);
            let user = UserId(BACKGROUND_USER_BASE + b as u32);
            let count = (config.background_ratings * rng.sample::<f64, _>(Exp1)).ceil() as usize;
            let mut seen = HashSet::new();
            let mut events = Vec::with_capacity(count);
            for _ in 0..count {
                let m = popular.sample(&mut rng);
                let movie = &pop.movies[m];
                let Some((lo, hi)) = rating_window(movie, start - HISTORY_WINDOW_DAYS as i64 * SECONDS_PER_DAY, end)
                else {
                    continue;
                };
                if !seen.insert(m) {
                    continue;
                }
                let noise: f64 = rng.sample(StandardNormal);
                events.push(RatingEvent {
                    user_id: user,
                    movie_id: movie.id,
                    rating: Rating::nearest(pop.item_factors[m][0] + 0.8 * noise),
                    timestamp: rng.random_range(lo..=hi),
                });
            }
            events
        })
        .collect()
}

fn refresh_top_picks(world: &World<'_>, state: &mut UserState, date: NaiveDate, ts: Timestamp) {
    let pop = world.population;
    let mut scored: Vec<(f64, usize)> = pop
        .movies
        .iter()
        .enumerate()
        .filter(|(_, m)| m.release_date.is_none_or(|d| d <= date) && !state.rated.contains(&m.id))
        .map(|(i, _)| {
            let z: f64 = state.rng.sample(StandardNormal);
            (f64::from(state.user.mean[i]) + world.config.recommender_noise * z, i)
        })
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if scored.len() > TOP_PICKS_WINDOW {
        scored.select_nth_unstable_by(TOP_PICKS_WINDOW - 1, order);
        scored.truncate(TOP_PICKS_WINDOW);
    }
    scored.sort_by(order);
    state.top_picks = scored.iter().map(|(_, i)| pop.movies[*i].id).collect();

    for (position, &(_, i)) in scored.iter().take(world.config.top_picks_shown).enumerate() {
        state.logs.rec_log.push(RecommendationLogRecord {
            timestamp: ts,
            user_id: state.user.user_id,
            position: position as u32 + 1,
            movie_id: pop.movies[i].id,
        });
        let z: f64 = state.rng.sample(StandardNormal);
        let s = f64::from(state.user.truth[i]) + world.signal.noise_sd * z;
        let post = posterior(&state.user.belief(i), s, &world.signal);
        state.user.mean[i] = post.mean() as f32;
        state.user.sd[i] = post.sd() as f32;
    }
}

/// Logs the presentation of `slots`, the responses, and any resulting watches.
/// Returns the movies that received a response.
fn present(world: &World<'_>, state: &mut UserState, batch: &ElicitationBatch, slots: &[Slot]) -> BTreeSet<MovieId> {
    let config = world.config;
    let pop = world.population;
    let user = state.user.user_id;
    let ts = batch.created_at;
    state.logs.requests.extend(batch.request_records(slots.iter()));
    state
        .history
        .record_batch(batch, slots)
        .expect("presentations are generated in time order");

    let mut answered = BTreeSet::new();
    for (j, slot) in slots.iter().enumerate() {
        let m = pop.index_of(slot.movie_id).expect("pool movies come from the catalog");
        let at = ts + 5 * (j as i64 + 1);
        let p = match slot.source {
            SlotSource::Rec => (state.user.propensity * config.rec_response_boost).min(1.0),
            _ => state.user.propensity,
        };
        let responds = state.rng.random_bool(p);
        let truth = f64::from(state.user.truth[m]);
        let predicted = Rating::nearest(f64::from(state.user.mean[m]));
        let certainty = pop.certainty(f64::from(state.user.sd[m]));

        let response = match state.seen.get(&slot.movie_id) {
            Some(watch_date) if responds => BeliefResponse::Seen {
                rating: Rating::nearest(truth),
                watch_date: *watch_date,
            },
            None if responds => BeliefResponse::NotSeen { predicted, certainty },
            _ => BeliefResponse::NoResponse,
        };
        state.logs.beliefs.push(BeliefRecord {
            timestamp: at,
            user_id: user,
            movie_id: slot.movie_id,
            response,
        });
        state
            .history
            .record_response(user, slot.movie_id, response.is_seen_code())
            .expect("presented just now");
        if responds {
            answered.insert(slot.movie_id);
        }

        if let BeliefResponse::Seen { rating, .. } = response {
            state.seen.remove(&slot.movie_id);
            state.rated.insert(slot.movie_id);
            state.logs.ratings.push(RatingEvent {
                user_id: user,
                movie_id: slot.movie_id,
                rating,
                timestamp: at,
            });
        } else if !state.seen.contains_key(&slot.movie_id) {
            let q = config.beta0 + config.beta1 * predicted.value() + config.beta2 * certainty.uncertainty();
            if state.rng.random_bool(q.clamp(0.0, 1.0)) {
                let watched_at = ts + state.rng.random_range(3_600..3 * 3_600);
                state.rated.insert(slot.movie_id);
                state.logs.consumption.push(ConsumptionRecord {
                    timestamp: watched_at,
                    user_id: user,
                    movie_id: slot.movie_id,
                });
                state.logs.ratings.push(RatingEvent {
                    user_id: user,
                    movie_id: slot.movie_id,
                    rating: Rating::nearest(truth),
                    timestamp: watched_at,
                });
            }
        }
    }
    answered
}

struct MonthContext<'a> {
    pool: &'a ElicitationPool,
    days: &'a [(NaiveDate, BTreeSet<MovieId>)],
}

fn simulate_month(world: &World<'_>, state: &mut UserState, month: &MonthContext<'_>) {
    let config = world.config;
    for (date, recent) in month.days {
        if !state.rng.random_bool(config.visit_prob) {
            continue;
        }
        let day = start_of_day(*date);
        let ts = day + state.rng.random_range(8 * 3_600..20 * 3_600);
        let day_index = day / SECONDS_PER_DAY;
        if state
            .top_picks_day
            .is_none_or(|d| day_index - d >= i64::from(config.top_picks_refresh_days))
        {
            refresh_top_picks(world, state, *date, ts);
            state.top_picks_day = Some(day_index);
        }

        state.batches += 1;
        let batch_id = BatchId((u64::from(state.user.user_id.0) << 24) | state.batches);
        let batch = {
            let predictor = BeliefPredictor {
                user: state.user.user_id,
                mean: &state.user.mean,
            };
            let ctx = SamplingContext {
                pool: month.pool,
                rated: &state.rated,
                history: &state.history,
                predictor: &predictor,
                top_picks: &state.top_picks,
                recent,
                now: ts + 1,
            };
            sample_batch(&ctx, state.user.user_id, batch_id, &mut state.rng)
        };
        if batch.slots.is_empty() {
            continue;
        }
        let slots = batch.slots.clone();
        let answered = present(world, state, &batch, &slots);

        if config.refresh_prob > 0.0 && !answered.is_empty() && state.rng.random_bool(config.refresh_prob) {
            state.batches += 1;
            let new_id = BatchId((u64::from(state.user.user_id.0) << 24) | state.batches);
            let refreshed = {
                let predictor = BeliefPredictor {
                    user: state.user.user_id,
                    mean: &state.user.mean,
                };
                let ctx = SamplingContext {
                    pool: month.pool,
                    rated: &state.rated,
                    history: &state.history,
                    predictor: &predictor,
                    top_picks: &state.top_picks,
                    recent,
                    now: ts + 120,
                };
                refresh_batch(&ctx, &batch, &answered, new_id, &mut state.rng)
            };
            let fresh = refreshed.new_slots_since(&batch);
            if !fresh.is_empty() {
                present(world, state, &refreshed, &fresh);
            }
        }
    }
}

/// Runs the full loop and returns the logs, sorted for output.
pub fn run(config: &SimConfig) -> Result<SimLogs, SimError> {
    let population = spawn_population(config)?;
    run_population(config, population)
}

pub fn run_population(config: &SimConfig, population: Population) -> Result<SimLogs, SimError> {
    let world = World {
        config,
        population: &population,
        signal: SignalModel::new(config.signal_sd).map_err(|e| SimError::Invalid(e.to_string()))?,
    };
    let end_date = config
        .start_date
        .checked_add_days(Days::new(u64::from(config.horizon_days)))
        .ok_or_else(|| SimError::Invalid("horizon out of range".into()))?;
    let end = start_of_day(end_date) - 1;

    let mut states: Vec<UserState> = population
        .users
        .iter()
        .enumerate()
        .map(|(i, u)| UserState {
            user: u.clone(),
            rng: stream_rng(config.rng_seed, STREAM_VISITS, i as u64),
            rated: BTreeSet::new(),
            seen: HashMap::new(),
            history: ElicitationHistory::new(),
            top_picks: Vec::new(),
            top_picks_day: None,
            batches: 0,
            logs: SimLogs::default(),
        })
        .collect();
    let mut events = background_ratings(&world, end);
    for (i, state) in states.iter_mut().enumerate() {
        let history = user_history(&world, state, i);
        state.logs.ratings.extend(history.iter().copied());
        events.extend(history);
    }

    let mut pools = Vec::new();
    let mut date = config.start_date;
    while date < end_date {
        let month = YearMonth::of(date);
        let next_month = month.next().first_day();
        let segment_end = next_month.min(end_date);

        let catalog = Catalog::new(population.movies.clone(), events.clone())
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        let as_of = month.first_day();
        let snapshot = catalog.snapshot(as_of);
        let shares = catalog.genre_shares().map_err(|e| SimError::Invalid(e.to_string()))?;
        let pool_config = PoolConfig {
            y: config.y,
            rng_seed: config.rng_seed ^ (u64::from(month.year as u32) << 8 | u64::from(month.month)),
            ..PoolConfig::default()
        };
        let pool = match build_pool(&snapshot, &shares, &pool_config) {
            Ok(p) => p,
            Err(_) => ElicitationPool::new(month, Default::default()),
        };

        let days: Vec<(NaiveDate, BTreeSet<MovieId>)> = date
            .iter_days()
            .take_while(|d| *d < segment_end)
            .map(|d| (d, catalog.recent_releases(d, pool_config.recent_threshold_months)))
            .collect();
        let context = MonthContext { pool: &pool, days: &days };
        let before: Vec<usize> = states.iter().map(|s| s.logs.ratings.len()).collect();
        states
            .par_iter_mut()
            .for_each(|state| simulate_month(&world, state, &context));
        for (state, from) in states.iter().zip(before) {
            events.extend_from_slice(&state.logs.ratings[from..]);
        }
        pools.push(pool);
        date = segment_end;
    }

    let mut logs = SimLogs {
        movies: population.movies.clone(),
        pools,
        ..SimLogs::default()
    };
    logs.ratings = events
        .into_iter()
        .filter(|e| e.user_id.0 >= BACKGROUND_USER_BASE)
        .collect();
    for state in states {
        let l = state.logs;
        logs.ratings.extend(l.ratings);
        logs.beliefs.extend(l.beliefs);
        logs.requests.extend(l.requests);
        logs.rec_log.extend(l.rec_log);
        logs.consumption.extend(l.consumption);
    }
    logs.ratings.sort_by_key(|e| (e.timestamp, e.user_id, e.movie_id));
    logs.beliefs.sort_by_key(|b| (b.timestamp, b.user_id));
    logs.requests.sort_by_key(|r| (r.timestamp, r.user_id));
    logs.rec_log.sort_by_key(|r| (r.timestamp, r.user_id, r.position));
    logs.consumption.sort_by_key(|c| (c.timestamp, c.user_id, c.movie_id));
    Ok(logs)
}
