//! Command-line studies for the perturbation expansions in `bayes-lsa`.

pub mod app;
pub mod config;
pub mod report;
pub mod study;

pub use app::run;
