//! Privacy-risk constrained selective sampling of users.
//!
//! A provider wants data from a budget of `B` users to optimise a service, but
//! has promised every user that their data is used with probability at most
//! `r`. This crate provides:
//!
//! - [`population`]: the user pool, metrics, CSV ingestion and a clustered
//!   synthetic generator;
//! - [`utility`]: the coverage utility with incremental marginal gains and
//!   executable smoothness/diversification checks;
//! - [`selectors`]: random, greedy, trivial lottery, sampled greedy,
//!   obfuscated greedy and an exhaustive oracle;
//! - [`privacy`]: an exposure ledger and Monte-Carlo frequency audits;
//! - [`experiments`]: budget/risk sweeps, obfuscation traces and SVG plots.

pub mod experiments;
pub mod population;
pub mod privacy;
pub mod seed;
pub mod selectors;
pub mod utility;

pub use population::{Metric, Population, SyntheticConfig, User};
pub use privacy::{audit_frequency, AuditReport, Phase, PrivacyLedger};
pub use selectors::{Procedure, SelectionProblem, SelectionResult};
pub use utility::CoverageUtility;
