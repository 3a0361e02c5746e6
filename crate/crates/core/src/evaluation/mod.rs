//! Simulation of policies, objective values and distance to equilibrium.

mod exploit;
mod rollout;

pub use exploit::{
    best_response_major, best_response_minor, exact_minor_value, interpolate, major_tree_value_bfs,
    major_tree_value_dfs, minor_values, ExploitabilityReport, FlowNode, FlowTree, MajorChoice, MajorGap,
    MinorGap, MinorStateGrid, MinorValues,
};
pub use rollout::{
    initial_representatives, value_estimate, MinorRecord, Rollout, RolloutMode, Step, Trajectory,
    ValueEstimate,
};
