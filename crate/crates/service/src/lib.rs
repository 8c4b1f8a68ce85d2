//! HTTP front end for the feedback loop: predictions with explanations,
//! user corrections, and serialized fine-tune jobs over those corrections.

pub mod error;
pub mod openapi;
pub mod routes;
pub mod state;
pub mod store;

pub use error::{ApiError, Error, Result};
pub use routes::router;
pub use state::{AppState, Catalog};
