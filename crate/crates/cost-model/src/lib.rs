//! Cost accounting for architectures and the budget calculus built on it.
//!
//! Everything here is a pure function of immutable values: FLOP/parameter
//! reports for a spec ([`cost_of`], [`count_flops`], [`count_params`]), the
//! same under a per-layer keep-fraction map ([`cost_of_masked`]), and the
//! derivation of retraining budgets from FLOP ratios ([`scratch_budget`],
//! [`finetune_budget`]).
//!
//! The FLOP convention (1 MAC = 1 FLOP, conv/dense only) is documented in
//! [`report`]; flip to the 2x convention by doubling totals at the call site
//! if a comparison requires it.

pub mod budget;
pub mod error;
pub mod report;

pub use budget::{
    finetune_budget, round_half_up, scratch_budget, BudgetLabel, BudgetPolicy, ScratchArm,
    TrainBudget,
};
pub use error::{CostError, Result};
pub use report::{
    cost_of, cost_of_masked, count_flops, count_flops_masked, count_params, CostReport, LayerCost,
};
