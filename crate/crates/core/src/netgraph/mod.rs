//! Residual network description, the dense gated model and its
//! hard-pruned mixed-connectivity rewrite.

mod model;
mod pruned;
mod spec;

pub use model::{accuracy, build_network, forward, BoundParams, ConvParams, ConvVars, Forward, GateMode, Network};
pub use pruned::{cost_report, hard_prune, CostReport, PrunedBlock, PrunedConv, PrunedGraph};
pub use spec::{BlockLayout, ConvLayout, ConvRole, Layout, NetworkSpec, StageSpec};
