//! Dueling bandits with Borda regret over generalized linear preference models.
//!
//! The crate provides the preference model and regret accounting ([`model`]),
//! instance constructors ([`instances`]), G-optimal design ([`design`]),
//! maximum-likelihood estimation ([`estimation`]), four agents
//! ([`algorithms`]) and a seeded experiment runner with a CLI ([`harness`]).

pub mod algorithms;
pub mod design;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod instances;
pub mod linalg;
pub mod model;

pub use error::{Error, Result};
