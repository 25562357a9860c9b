//! HTTP front end for belief elicitation: batches, belief submission, top picks and
//! pool administration, persisted as append-only CSV logs.

pub mod http;
pub mod state;
pub mod store;

pub use http::{router, serve};
pub use state::{
    user_token, BatchView, BeliefSubmission, Clock, ManualClock, Service, ServiceConfig, ServiceError, SystemClock,
};
pub use store::{Store, StoreError};
