//! Identifiers, the half-point rating grid and calendar helpers shared by
//! every stage of the pipeline.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Months, NaiveDate, NaiveTime, TimeZone, Utc};

/// Seconds since the Unix epoch, UTC.
pub type Timestamp = i64;

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MovieId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct UserId(pub u32);

impl fmt::Display for MovieId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A rating on the 0.5..=5.0 grid in half-point steps, stored as half-points (1..=10).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Rating(u8);

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RatingError {
    #[error("off-grid rating {0}")]
    OffGrid(String),
}

impl Rating {
    pub const MIN: Rating = Rating(1);
    pub const MAX: Rating = Rating(10);

    pub fn from_half_points(half_points: u8) -> Option<Rating> {
        (1..=10).contains(&half_points).then_some(Rating(half_points))
    }

    /// Accepts only exact grid values.
    pub fn from_f64(value: f64) -> Result<Rating, RatingError> {
        let doubled = value * 2.0;
        if !value.is_finite() || (doubled - doubled.round()).abs() > 1e-9 {
            return Err(RatingError::OffGrid(value.to_string()));
        }
        Rating::from_half_points(doubled.round() as u8)
            .ok_or_else(|| RatingError::OffGrid(value.to_string()))
    }

    /// Rounds any real onto the grid (half-points round up), clamping to [0.5, 5.0].
    pub fn nearest(value: f64) -> Rating {
        let doubled = if value.is_finite() { (value * 2.0).round() } else { 1.0 };
        Rating(doubled.clamp(1.0, 10.0) as u8)
    }

    pub fn half_points(self) -> u8 {
        self.0
    }

    pub fn value(self) -> f64 {
        f64::from(self.0) / 2.0
    }

    /// Every grid value from 0.5 to 5.0.
    pub fn grid() -> impl Iterator<Item = Rating> {
        (1..=10).map(Rating)
    }
}

impl fmt::Display for Rating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.0 / 2, if self.0 % 2 == 1 { 5 } else { 0 })
    }
}

impl FromStr for Rating {
    type Err = RatingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let value: f64 = s
            .trim()
            .parse()
            .map_err(|_| RatingError::OffGrid(s.to_string()))?;
        Rating::from_f64(value)
    }
}

/// Calendar month used to key elicitation pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    pub year: i32,
    pub month: u32,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Option<YearMonth> {
        (1..=12).contains(&month).then_some(YearMonth { year, month })
    }

    pub fn of(date: NaiveDate) -> YearMonth {
        YearMonth {
            year: date.year(),
            month: date.month(),
        }
    }

    pub fn next(self) -> YearMonth {
        if self.month == 12 {
            YearMonth {
                year: self.year + 1,
                month: 1,
            }
        } else {
            YearMonth {
                year: self.year,
                month: self.month + 1,
            }
        }
    }

    pub fn first_day(self) -> NaiveDate {
        NaiveDate::from_ymd_opt(self.year, self.month, 1).expect("valid year-month")
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, m) = s
            .trim()
            .split_once('-')
            .ok_or_else(|| format!("bad month {s:?}"))?;
        let year = y.parse().map_err(|_| format!("bad month {s:?}"))?;
        let month = m.parse().map_err(|_| format!("bad month {s:?}"))?;
        YearMonth::new(year, month).ok_or_else(|| format!("bad month {s:?}"))
    }
}

/// `date` minus `months` calendar months, clamping the day to the target month's end.
pub fn months_before(date: NaiveDate, months: u32) -> NaiveDate {
    date.checked_sub_months(Months::new(months))
        .expect("date arithmetic within chrono range")
}

/// Last second belonging to `date` (UTC).
pub fn end_of_day(date: NaiveDate) -> Timestamp {
    start_of_day(date) + SECONDS_PER_DAY - 1
}

pub fn start_of_day(date: NaiveDate) -> Timestamp {
    Utc.from_utc_datetime(&date.and_time(NaiveTime::MIN))
        .timestamp()
}

pub fn date_of(ts: Timestamp) -> NaiveDate {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|dt| dt.date_naive())
        .unwrap_or(NaiveDate::MIN)
}

pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").ok()
}
