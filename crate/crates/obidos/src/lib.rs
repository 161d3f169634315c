//! On-demand hybrid ETL engine for hierarchical scientific datasets.
//!
//! Users define replicasets (pointers into remote data sources) and queries;
//! the engine selectively integrates metadata as promotable virtual proxies
//! into a persistent integrated repository, answers repeat queries locally,
//! and shares datasets across instances by exchanging replicasets instead of
//! data.

pub mod bench;
pub mod config;
pub mod error;
pub mod etl;
pub mod holder;
pub mod journal;
pub mod model;
pub mod repository;
pub mod service;
pub mod sharing;
pub mod source;

pub use error::{Error, Result};
