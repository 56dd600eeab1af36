//! Network-coded retransmission scheduling over a lossy broadcast downlink.
//!
//! The crate models the access point's storage matrix, aggregates it into a
//! handful of abstract states, learns a scheduling policy on the aggregated
//! model, and checks the learned structure against exact small-system solutions.

pub mod aggregation;
pub mod baselines;
pub mod channel;
pub mod codec;
pub mod error;
pub mod harness;
pub mod learning;
pub mod oracle;
pub mod policy;
pub mod state;

pub use aggregation::{AbstractAction, AggregatedState, AggregationScheme, SchemeKind, StateSpace};
pub use error::{Error, Result};
pub use state::{DetailedState, Reception, StorageMode, StorageRule, TieBreak, UserSet};
pub use baselines::{Baseline, BaselineId};
pub use channel::{ChannelConfig, Controller, LossModel, PolicyController};
pub use policy::{Criterion, Policy, ValueFunction};
pub use oracle::ExactOracle;
