//! Expected-utility choice with and without recommendations.
//!
//! Each user holds a belief over the monetary equivalent of every good and
//! picks the good with the highest expected utility. A recommendation of good
//! `n` delivers a Gaussian signal `x_n + noise` that updates the belief about
//! `n` by Bayes' rule; the user then re-optimizes over all goods. The
//! welfare-optimal slate maximizes the expected post-recommendation maximum.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use itertools::Itertools;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::types::MovieId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ChoiceError {
    #[error("non-finite or invalid belief parameters")]
    InvalidBelief,
    #[error("invalid utility parameters")]
    InvalidUtility,
    #[error("no goods to choose from")]
    NoGoods,
    #[error("good {0} lacks a belief or a true value")]
    MissingGood(MovieId),
    #[error("slate of {k} from {candidates} candidates")]
    SlateTooLarge { k: usize, candidates: usize },
    #[error("duplicate good {0} in slate or candidates")]
    Duplicate(MovieId),
    #[error("signal noise must be positive")]
    InvalidSignal,
}

/// Strictly increasing, continuous utility of money.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UtilityFunction {
    Linear,
    /// `sign(x) * |x|^alpha`, alpha in (0, 1].
    Power { alpha: f64 },
    /// `-exp(-a x)`, a > 0.
    Exponential { risk_aversion: f64 },
}

impl UtilityFunction {
    pub fn validate(&self) -> Result<(), ChoiceError> {
        let ok = match *self {
            UtilityFunction::Linear => true,
            UtilityFunction::Power { alpha } => alpha.is_finite() && alpha > 0.0 && alpha <= 1.0,
            UtilityFunction::Exponential { risk_aversion } => risk_aversion.is_finite() && risk_aversion > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ChoiceError::InvalidUtility)
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            UtilityFunction::Linear => x,
            UtilityFunction::Power { alpha } => x.signum() * x.abs().powf(alpha),
            UtilityFunction::Exponential { risk_aversion } => -(-risk_aversion * x).exp(),
        }
    }
}

impl std::str::FromStr for UtilityFunction {
    type Err = String;

    /// `linear`, `power:ALPHA` or `exp:A`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        let param = || arg.parse::<f64>().map_err(|_| format!("bad utility parameter in {s:?}"));
        let u = match kind.trim() {
            "linear" => UtilityFunction::Linear,
            "power" => UtilityFunction::Power { alpha: param()? },
            "exp" | "exponential" => UtilityFunction::Exponential {
                risk_aversion: param()?,
            },
            _ => return Err(format!("unknown utility {s:?}")),
        };
        u.validate().map_err(|e| e.to_string())?;
        Ok(u)
    }
}

/// Belief about one good's monetary equivalent.
#[derive(Debug, Clone, PartialEq)]
pub enum GoodBelief {
    /// Gaussian; `sd == 0` is a point mass.
    Normal { mean: f64, sd: f64 },
    /// Finite support `(value, weight)`; weights need not be normalized.
    Discrete(Vec<(f64, f64)>),
}

impl GoodBelief {
    pub fn normal(mean: f64, sd: f64) -> GoodBelief {
        GoodBelief::Normal { mean, sd }
    }

    pub fn point(value: f64) -> GoodBelief {
        GoodBelief::Normal { mean: value, sd: 0.0 }
    }

    pub fn validate(&self) -> Result<(), ChoiceError> {
        let ok = match self {
            GoodBelief::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && *sd >= 0.0,
            GoodBelief::Discrete(points) => {
                !points.is_empty()
                    && points.iter().all(|(v, w)| v.is_finite() && w.is_finite() && *w >= 0.0)
                    && points.iter().map(|p| p.1).sum::<f64>() > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(ChoiceError::InvalidBelief)
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            GoodBelief::Normal { mean, .. } => *mean,
            GoodBelief::Discrete(points) => {
                let total: f64 = points.iter().map(|p| p.1).sum();
                points.iter().map(|(v, w)| v * w).sum::<f64>() / total
            }
        }
    }

    pub fn sd(&self) -> f64 {
        match self {
            GoodBelief::Normal { sd, .. } => *sd,
            GoodBelief::Discrete(points) => {
                let total: f64 = points.iter().map(|p| p.1).sum();
                let m = self.mean();
                (points.iter().map(|(v, w)| w * (v - m).powi(2)).sum::<f64>() / total).sqrt()
            }
        }
    }

    /// Draws a value given a standard-normal variate (inverse-CDF for discrete beliefs).
    fn draw_from_standard_normal(&self, z: f64) -> f64 {
        match self {
            GoodBelief::Normal { mean, sd } => mean + sd * z,
            GoodBelief::Discrete(points) => {
                let total: f64 = points.iter().map(|p| p.1).sum();
                let u = standard_normal_cdf(z) * total;
                let mut acc = 0.0;
                for (v, w) in points {
                    acc += w;
                    if u <= acc {
                        return *v;
                    }
                }
                points.last().map_or(0.0, |p| p.0)
            }
        }
    }
}

fn standard_normal_cdf(z: f64) -> f64 {
    static N: OnceLock<Normal> = OnceLock::new();
    N.get_or_init(Normal::standard).cdf(z)
}

pub type Beliefs = BTreeMap<MovieId, GoodBelief>;
pub type Truths = BTreeMap<MovieId, f64>;

/// Unbiased Gaussian signal about a recommended good's true value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalModel {
    pub noise_sd: f64,
}

impl SignalModel {
    pub fn new(noise_sd: f64) -> Result<SignalModel, ChoiceError> {
        if noise_sd.is_finite() && noise_sd > 0.0 {
            Ok(SignalModel { noise_sd })
        } else {
            Err(ChoiceError::InvalidSignal)
        }
    }
}

/// Ordered recommended goods, optionally with already-realized signals.
#[derive(Debug, Clone, PartialEq)]
pub struct RecommendationSlate {
    pub items: Vec<MovieId>,
    pub signals: Option<Vec<f64>>,
}

impl RecommendationSlate {
    pub fn new(items: Vec<MovieId>) -> Result<RecommendationSlate, ChoiceError> {
        let mut seen = std::collections::BTreeSet::new();
        if let Some(d) = items.iter().find(|m| !seen.insert(**m)) {
            return Err(ChoiceError::Duplicate(*d));
        }
        Ok(RecommendationSlate { items, signals: None })
    }

    pub fn with_signals(items: Vec<MovieId>, signals: Vec<f64>) -> Result<RecommendationSlate, ChoiceError> {
        let mut slate = RecommendationSlate::new(items)?;
        if signals.len() != slate.items.len() || signals.iter().any(|s| !s.is_finite()) {
            return Err(ChoiceError::InvalidSignal);
        }
        slate.signals = Some(signals);
        Ok(slate)
    }
}

const HERMITE_NODES: usize = 64;

/// Gauss-Hermite nodes and weights for the weight function `exp(-x^2)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    const PIM4: f64 = 0.751_125_544_464_942_5; // pi^(-1/4)
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.855_75 * (2.0 * nf + 1.0).powf(-0.166_67),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..200 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn hermite64() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_hermite(HERMITE_NODES))
}

/// `E[u(X)]` under `belief`.
pub fn expected_utility(belief: &GoodBelief, u: &UtilityFunction) -> Result<f64, ChoiceError> {
    belief.validate()?;
    u.validate()?;
    Ok(expected_utility_unchecked(belief, u))
}

fn expected_utility_unchecked(belief: &GoodBelief, u: &UtilityFunction) -> f64 {
    match belief {
        GoodBelief::Normal { mean, .. } if matches!(u, UtilityFunction::Linear) => *mean,
        GoodBelief::Normal { mean, sd } if *sd == 0.0 => u.eval(*mean),
        GoodBelief::Normal { mean, sd } => {
            let (x, w) = hermite64();
            let scale = std::f64::consts::SQRT_2 * sd;
            let sum: f64 = x.iter().zip(w).map(|(xi, wi)| wi * u.eval(mean + scale * xi)).sum();
            sum / std::f64::consts::PI.sqrt()
        }
        GoodBelief::Discrete(points) => {
            let total: f64 = points.iter().map(|p| p.1).sum();
            points.iter().map(|(v, w)| w * u.eval(*v)).sum::<f64>() / total
        }
    }
}

fn validate_beliefs(beliefs: &Beliefs) -> Result<(), ChoiceError> {
    if beliefs.is_empty() {
        return Err(ChoiceError::NoGoods);
    }
    beliefs.values().try_for_each(GoodBelief::validate)
}

/// Argmax of expected utility; ties go to the lowest id.
pub fn choose_nrec(beliefs: &Beliefs, u: &UtilityFunction) -> Result<MovieId, ChoiceError> {
    validate_beliefs(beliefs)?;
    u.validate()?;
    let mut best: Option<(MovieId, f64)> = None;
    for (id, b) in beliefs {
        let eu = expected_utility_unchecked(b, u);
        if best.is_none_or(|(_, v)| eu > v) {
            best = Some((*id, eu));
        }
    }
    best.map(|(id, _)| id).ok_or(ChoiceError::NoGoods)
}

/// Posterior after observing `signal` about a good believed to be `prior`.
pub fn posterior(prior: &GoodBelief, signal: f64, model: &SignalModel) -> GoodBelief {
    let noise_var = model.noise_sd * model.noise_sd;
    match prior {
        GoodBelief::Normal { sd, .. } if *sd == 0.0 => prior.clone(),
        GoodBelief::Normal { mean, sd } => {
            let prior_prec = 1.0 / (sd * sd);
            let signal_prec = 1.0 / noise_var;
            let post_var = 1.0 / (prior_prec + signal_prec);
            GoodBelief::Normal {
                mean: (mean * prior_prec + signal * signal_prec) * post_var,
                sd: post_var.sqrt(),
            }
        }
        GoodBelief::Discrete(points) => {
            let log_w: Vec<f64> = points
                .iter()
                .map(|(v, w)| w.ln() - (signal - v).powi(2) / (2.0 * noise_var))
                .collect();
            let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            GoodBelief::Discrete(
                points
                    .iter()
                    .zip(&log_w)
                    .map(|((v, _), lw)| (*v, (lw - max).exp()))
                    .collect(),
            )
        }
    }
}

/// Updates the beliefs about every slate good from one signal each; other beliefs are untouched.
///
/// Signals come from the slate when present, otherwise `truth + noise` drawn from `rng`.
pub fn update_beliefs<R: Rng + ?Sized>(
    beliefs: &Beliefs,
    slate: &RecommendationSlate,
    truths: &Truths,
    signal: &SignalModel,
    rng: &mut R,
) -> Result<Beliefs, ChoiceError> {
    validate_beliefs(beliefs)?;
    let mut out = beliefs.clone();
    for (j, id) in slate.items.iter().enumerate() {
        let prior = beliefs.get(id).ok_or(ChoiceError::MissingGood(*id))?;
        let s = match &slate.signals {
            Some(signals) => signals[j],
            None => {
                let truth = truths.get(id).ok_or(ChoiceError::MissingGood(*id))?;
                let z: f64 = rng.sample(StandardNormal);
                truth + signal.noise_sd * z
            }
        };
        out.insert(*id, posterior(prior, s, signal));
    }
    Ok(out)
}

/// Choice after the slate's signals update the beliefs; the argmax still ranges over all goods.
pub fn choose_rec<R: Rng + ?Sized>(
    beliefs: &Beliefs,
    slate: &RecommendationSlate,
    truths: &Truths,
    signal: &SignalModel,
    u: &UtilityFunction,
    rng: &mut R,
) -> Result<MovieId, ChoiceError> {
    let updated = update_beliefs(beliefs, slate, truths, signal, rng)?;
    choose_nrec(&updated, u)
}

/// Where the true values behind simulated signals come from.
#[derive(Debug, Clone, Copy)]
pub enum Outcomes<'a> {
    /// Signals are centred on these known values.
    Known(&'a Truths),
    /// True values are drawn from the user's own beliefs before each signal.
    PriorPredictive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarlo {
    pub draws: usize,
    pub seed: u64,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo { draws: 2_000, seed: 0 }
    }
}

/// Standard-normal variates shared by every slate evaluated in one search.
///
/// Generated from `ChaCha8Rng::seed_from_u64(seed)`: first `draws * k` signal
/// variates row-major (draw, slot), then `draws * k` truth variates in the same order.
#[derive(Debug, Clone)]
pub struct NoiseBank {
    pub draws: usize,
    pub k: usize,
    pub signal: Vec<f64>,
    pub truth: Vec<f64>,
}

impl NoiseBank {
    pub fn generate(mc: &MonteCarlo, k: usize) -> NoiseBank {
        let mut rng = ChaCha8Rng::seed_from_u64(mc.seed);
        let n = mc.draws * k;
        let signal = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let truth = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        NoiseBank {
            draws: mc.draws,
            k,
            signal,
            truth,
        }
    }

    pub fn signal_z(&self, draw: usize, slot: usize) -> f64 {
        self.signal[draw * self.k + slot]
    }

    pub fn truth_z(&self, draw: usize, slot: usize) -> f64 {
        self.truth[draw * self.k + slot]
    }
}

/// Monte Carlo estimate of a slate's value to the user.
#[derive(Debug, Clone, PartialEq)]
pub struct SlateValue {
    pub slate: Vec<MovieId>,
    /// Mean over draws of the maximized post-recommendation expected utility.
    pub u_star_rec: f64,
    pub std_err: f64,
    /// Maximized expected utility without recommendation.
    pub u_star_nrec: f64,
    /// Fraction of draws in which the choice differs from the no-recommendation choice.
    pub switch_rate: f64,
    /// Mean per-draw gain over `u_star_nrec`; `std_err` is its standard error.
    pub gain: f64,
}

impl SlateValue {
    /// Value of recommending the slate. Accumulated per draw, so a slate that cannot
    /// change the choice is worth exactly zero.
    pub fn value(&self) -> f64 {
        self.gain
    }
}

struct Prepared<'a> {
    beliefs: &'a Beliefs,
    u: UtilityFunction,
    /// (expected utility, id), best first; ties by id.
    ranked: Vec<(f64, MovieId)>,
}

impl<'a> Prepared<'a> {
    fn new(beliefs: &'a Beliefs, u: &UtilityFunction) -> Result<Prepared<'a>, ChoiceError> {
        validate_beliefs(beliefs)?;
        u.validate()?;
        let mut ranked: Vec<(f64, MovieId)> = beliefs
            .iter()
            .map(|(id, b)| (expected_utility_unchecked(b, u), *id))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        Ok(Prepared { beliefs, u: *u, ranked })
    }

    fn evaluate(
        &self,
        slate: &[MovieId],
        outcomes: Outcomes<'_>,
        signal: &SignalModel,
        bank: &NoiseBank,
    ) -> Result<SlateValue, ChoiceError> {
        let mut priors = Vec::with_capacity(slate.len());
        let mut truths = Vec::with_capacity(slate.len());
        for id in slate {
            priors.push(self.beliefs.get(id).ok_or(ChoiceError::MissingGood(*id))?);
            if let Outcomes::Known(t) = outcomes {
                truths.push(*t.get(id).ok_or(ChoiceError::MissingGood(*id))?);
            }
        }
        let (nrec_value, nrec_choice) = self.ranked[0];
        let outside = self
            .ranked
            .iter()
            .find(|(_, id)| !slate.contains(id))
            .copied();

        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut switches = 0usize;
        for d in 0..bank.draws {
            let mut best = outside;
            for (j, (prior, id)) in priors.iter().zip(slate).enumerate() {
                let truth = match outcomes {
                    Outcomes::Known(_) => truths[j],
                    Outcomes::PriorPredictive => prior.draw_from_standard_normal(bank.truth_z(d, j)),
                };
                let s = truth + signal.noise_sd * bank.signal_z(d, j);
                let eu = expected_utility_unchecked(&posterior(prior, s, signal), &self.u);
                let better = match best {
                    None => true,
                    Some((v, bid)) => eu > v || (eu == v && *id < bid),
                };
                if better {
                    best = Some((eu, *id));
                }
            }
            let (v, choice) = best.ok_or(ChoiceError::NoGoods)?;
            if choice != nrec_choice {
                switches += 1;
            }
            let gain = v - nrec_value;
            sum += gain;
            sum_sq += gain * gain;
        }
        let n = bank.draws.max(1) as f64;
        let mean = sum / n;
        let var = if bank.draws > 1 {
            ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok(SlateValue {
            slate: slate.to_vec(),
            u_star_rec: nrec_value + mean,
            std_err: (var / n).sqrt(),
            u_star_nrec: nrec_value,
            switch_rate: switches as f64 / n,
            gain: mean,
        })
    }
}

/// Estimates the expected maximized utility after recommending `slate`.
pub fn recommendation_value(
    beliefs: &Beliefs,
    slate: &RecommendationSlate,
    outcomes: Outcomes<'_>,
    signal: &SignalModel,
    u: &UtilityFunction,
    mc: &MonteCarlo,
) -> Result<SlateValue, ChoiceError> {
    let prepared = Prepared::new(beliefs, u)?;
    let bank = NoiseBank::generate(mc, slate.items.len());
    prepared.evaluate(&slate.items, outcomes, signal, &bank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlateSearch {
    pub best: SlateValue,
    /// Every evaluated subset in lexicographic order.
    pub evaluated: Vec<SlateValue>,
}

/// Exhaustive search over all `k`-subsets of `candidates` for the slate maximizing the
/// expected post-recommendation maximized utility. All subsets share one noise bank;
/// ties go to the lexicographically smallest id set.
pub fn optimal_slate(
    beliefs: &Beliefs,
    outcomes: Outcomes<'_>,
    signal: &SignalModel,
    u: &UtilityFunction,
    k: usize,
    candidates: &[MovieId],
    mc: &MonteCarlo,
) -> Result<SlateSearch, ChoiceError> {
    let mut sorted = candidates.to_vec();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(ChoiceError::Duplicate(w[0]));
    }
    if k == 0 || k > sorted.len() {
        return Err(ChoiceError::SlateTooLarge {
            k,
            candidates: sorted.len(),
        });
    }
    let prepared = Prepared::new(beliefs, u)?;
    let bank = NoiseBank::generate(mc, k);
    let mut evaluated = Vec::new();
    let mut best: Option<SlateValue> = None;
    for subset in sorted.iter().copied().combinations(k) {
        let value = prepared.evaluate(&subset, outcomes, signal, &bank)?;
        if best.as_ref().is_none_or(|b| value.u_star_rec > b.u_star_rec) {
            best = Some(value.clone());
        }
        evaluated.push(value);
    }
    Ok(SlateSearch {
        best: best.expect("at least one subset"),
        evaluated,
    })
}
