//! Belief elicitation for a movie recommender: catalog snapshots, elicitation
//! pools, batch sampling, a Bayesian choice model, a synthetic-population
//! simulator, dataset I/O and the analyses run over the collected data.

pub mod analytics;
pub mod catalog;
pub mod choice;
pub mod dataset;
pub mod pool;
pub mod sampler;
pub mod simulator;
pub mod types;

pub use catalog::{Catalog, CatalogError, CatalogSnapshot, Genre, GenreSet, Movie, RatingEvent};
pub use types::{MovieId, Rating, Timestamp, UserId, YearMonth};
