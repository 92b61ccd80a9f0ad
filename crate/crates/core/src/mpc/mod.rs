//! Receding-horizon problems for the learning controller.

pub mod cost;
mod problem;
pub mod terminal;

pub use cost::{lipschitz_of, CostSpec, EconomicCost, QuadraticCost};
pub use problem::{
    evaluate_pessimistic, h_star, solve_exploration, solve_omniscient, solve_optimistic, solve_pessimistic,
    trajectory_cost, MpcContext, MpcSettings, MpcSolution, MpcStatus, Multipliers, ProblemKind, Sets,
};
pub use terminal::{build_terminal_set, equilibrium, TerminalOptions, TerminalSet};
