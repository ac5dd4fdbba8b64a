//! Content-embedding, recurrent and popularity recommenders for catalogs
//! with high article turnover, plus a seeded synthetic market and a
//! cumulative-rank backtest.

pub mod baseline;
mod binio;
pub mod catalog;
pub mod dynamic_model;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod numerics;
pub mod static_model;
pub mod synthgen;

pub use error::{Error, Result};
pub use exec::Execution;
