//! Tabular offline multi-agent reinforcement learning by alternating
//! best-response stationary distribution correction.

// state-indexed loops over parallel tables; `!(x > y)` rejects NaN on purpose
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod mmdp;
pub mod nash;
pub mod random;
pub mod serde_ext;
pub mod solver;

pub use dataset::{DataPolicyTables, EmpiricalDistribution, OfflineDataset, Transition};
pub use error::{Error, Result};
pub use mmdp::{FactorizedPolicy, JointActionSpace, JointPolicy, MmdpMeta, OccupancyTable, TabularMmdp, ValueTable};
pub use nash::{BestResponseGap, NashReport};
pub use solver::{train, TrainConfig, TrainOutput, TrainReport};
